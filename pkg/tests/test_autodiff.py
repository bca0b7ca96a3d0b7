import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ulsa.errors import NonFiniteValue, ShapeMismatch, UlsaError
from ulsa.numerics import (
    adaptive_avg_pool,
    add,
    backward,
    concat,
    constant,
    conv2d,
    cosine_similarity,
    detach,
    instance_norm,
    load_checkpoint,
    log,
    log_softmax,
    matmul,
    max_pool2d,
    max_relative_error,
    mean_,
    mul,
    no_grad,
    parameter,
    relu,
    reshape,
    save_checkpoint,
    scale,
    softmax,
    sub,
    sum_,
    upsample_nearest,
    zero_grad,
)

TOL = 1e-4


def leaf(rng, *shape, lo=-1.0, hi=1.0):
    return parameter(rng.uniform(lo, hi, size=shape))


class TestForwardContracts:
    def test_identity_conv(self, rng):
        x = parameter(rng.uniform(size=(2, 3, 5, 5)))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = conv2d(x, constant(w), stride=1, pad=0)
        assert np.array_equal(out.value, x.value)

    def test_relu_grad_routing(self, rng):
        x = parameter(np.array([[-2.0, 3.0], [0.5, -0.1]]))
        backward(sum_(relu(x)))
        assert np.array_equal(x.grad, np.array([[0.0, 1.0], [1.0, 0.0]]))

    def test_adaptive_pool_constant(self):
        x = parameter(np.full((2, 4, 3, 3), 0.7))
        assert np.abs(adaptive_avg_pool(x).value - 0.7).max() < 1e-15

    def test_adaptive_pool_mean(self):
        x = parameter(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        assert adaptive_avg_pool(x).value[0, 0] == 2.5

    def test_adaptive_pool_backward_uniform(self):
        x = parameter(np.arange(9, dtype=float).reshape(1, 1, 3, 3))
        backward(sum_(adaptive_avg_pool(x)))
        assert np.allclose(x.grad, 1.0 / 9.0, atol=1e-15)

    def test_adaptive_pool_rejects_wrong_rank(self, rng):
        with pytest.raises(ShapeMismatch):
            adaptive_avg_pool(parameter(rng.uniform(size=(3, 4))))

    def test_cosine_closed_forms(self):
        a = constant(np.array([[1.0, 1.0]]))
        b = constant(np.array([[1.0, 0.0]]))
        assert abs(cosine_similarity(a, b).value[0] - 1.0 / np.sqrt(2.0)) < 1e-12
        assert cosine_similarity(a, a).value[0] == pytest.approx(1.0, abs=1e-12)
        c = constant(np.array([[0.0, 2.0]]))
        assert abs(cosine_similarity(b, c).value[0]) < 1e-15

    def test_softmax_rows_sum_to_one(self, rng):
        y = softmax(constant(rng.normal(size=(4, 6))), axis=1)
        assert np.allclose(y.value.sum(axis=1), 1.0, atol=1e-12)

    def test_nonfinite_forward_raises(self):
        with pytest.raises(NonFiniteValue):
            log(constant(np.array([0.0])))

    def test_shape_mismatch_mentions_both_shapes(self):
        with pytest.raises(ShapeMismatch) as err:
            matmul(constant(np.zeros((2, 3))), constant(np.zeros((4, 2))))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


class TestDetach:
    def test_stop_gradient_semantics(self, rng):
        x = leaf(rng, 3, 4)
        y = leaf(rng, 3, 4)
        backward(sum_(mul(detach(x), y)))
        assert x.grad is None
        assert np.array_equal(y.grad, x.value)

    def test_detach_idempotent(self, rng):
        x = leaf(rng, 2, 2)
        d1, d2 = detach(x), detach(detach(x))
        assert np.array_equal(d1.value, d2.value)
        assert not d1.requires_grad and not d2.requires_grad

    def test_no_grad_context_builds_no_tape(self, rng):
        x = leaf(rng, 2, 2)
        with no_grad():
            y = mul(x, x)
        assert not y.requires_grad and y.parents == ()


class TestBackwardMachinery:
    def test_shared_node_grad_accumulates_once_per_consumer(self, rng):
        x = leaf(rng, 3)
        c1, c2 = constant(np.array([2.0, 2.0, 2.0])), constant(np.array([5.0, 5.0, 5.0]))
        loss = sum_(add(mul(x, c1), mul(x, c2)))
        backward(loss)
        assert np.allclose(x.grad, 7.0, atol=1e-15)

    def test_backward_requires_scalar(self, rng):
        with pytest.raises(UlsaError):
            backward(leaf(rng, 2))

    def test_zero_grad(self, rng):
        x = leaf(rng, 2)
        backward(sum_(x))
        assert x.grad is not None
        zero_grad([x])
        assert x.grad is None

    def test_determinism(self, rng):
        def run():
            r = np.random.default_rng(42)
            x = parameter(r.normal(size=(2, 3, 8, 8)))
            w = parameter(r.normal(size=(4, 3, 3, 3)) * 0.1)
            g = parameter(np.ones(4))
            b = parameter(np.zeros(4))
            out = sum_(relu(instance_norm(conv2d(x, w, stride=2, pad=1), g, b)))
            backward(out)
            return out.value.copy(), x.grad.copy(), w.grad.copy()

        a, b = run(), run()
        for u, v in zip(a, b):
            assert np.array_equal(u, v)


def _fd_case(name, builder, n_leaves):
    """Helper: builder(rng) -> (make_loss, leaves)."""
    rng = np.random.default_rng(hash(name) % 2**32)
    make_loss, leaves = builder(rng)
    err = max_relative_error(make_loss, leaves)
    assert err < TOL, f"{name}: max relative error {err:.2e}"
    assert len(leaves) == n_leaves


class TestFiniteDifferenceOracle:
    """Every differentiable op against central differences on random inputs."""

    def test_add_broadcast(self):
        def build(rng):
            a = leaf(rng, 2, 3)
            b = leaf(rng, 3)
            return (lambda: sum_(mul(add(a, b), add(a, b)))), [a, b]

        _fd_case("add", build, 2)

    def test_sub_and_scale(self):
        def build(rng):
            a, b = leaf(rng, 3, 3), leaf(rng, 3, 3)
            return (lambda: sum_(mul(scale(sub(a, b), 1.7), a))), [a, b]

        _fd_case("sub", build, 2)

    def test_mul(self):
        def build(rng):
            a, b = leaf(rng, 3, 3), leaf(rng, 3, 3)
            return (lambda: sum_(mul(a, b))), [a, b]

        _fd_case("mul", build, 2)

    def test_matmul(self):
        def build(rng):
            a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
            return (lambda: sum_(mul(matmul(a, b), matmul(a, b)))), [a, b]

        _fd_case("matmul", build, 2)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_conv2d(self, stride, pad):
        def build(rng):
            x = leaf(rng, 2, 2, 5, 5)
            w = leaf(rng, 3, 2, 3, 3)
            b = leaf(rng, 3)
            return (lambda: sum_(mul(conv2d(x, w, b, stride=stride, pad=pad),
                                     conv2d(x, w, b, stride=stride, pad=pad)))), [x, w, b]

        _fd_case(f"conv{stride}{pad}", build, 3)

    def test_relu(self):
        def build(rng):
            # keep values away from the kink
            x = parameter(rng.uniform(0.2, 1.0, size=(3, 3)) * rng.choice([-1.0, 1.0], size=(3, 3)))
            return (lambda: sum_(mul(relu(x), relu(x)))), [x]

        _fd_case("relu", build, 1)

    @pytest.mark.parametrize("kernel,stride", [(2, 2), (3, 3), (2, 1)])
    def test_max_pool(self, kernel, stride):
        def build(rng):
            x = leaf(rng, 2, 2, 6, 6)
            return (lambda: sum_(mul(max_pool2d(x, kernel, stride), max_pool2d(x, kernel, stride)))), [x]

        _fd_case(f"pool{kernel}{stride}", build, 1)

    def test_instance_norm(self):
        def build(rng):
            x = leaf(rng, 2, 3, 4, 4)
            g = leaf(rng, 3, lo=0.5, hi=1.5)
            b = leaf(rng, 3)
            return (lambda: sum_(mul(instance_norm(x, g, b), instance_norm(x, g, b)))), [x, g, b]

        _fd_case("inorm", build, 3)

    def test_softmax(self):
        def build(rng):
            x = leaf(rng, 3, 4)
            w = constant(rng.normal(size=(3, 4)))
            return (lambda: sum_(mul(softmax(x, axis=1), w))), [x]

        _fd_case("softmax", build, 1)

    def test_log(self):
        def build(rng):
            x = leaf(rng, 3, 3, lo=0.5, hi=2.0)
            return (lambda: sum_(log(x))), [x]

        _fd_case("log", build, 1)

    def test_log_softmax(self):
        def build(rng):
            x = leaf(rng, 3, 5)
            w = constant(rng.normal(size=(3, 5)))
            return (lambda: sum_(mul(log_softmax(x, axis=1), w))), [x]

        _fd_case("log_softmax", build, 1)

    def test_reductions_and_reshape(self):
        def build(rng):
            x = leaf(rng, 2, 3, 4)
            return (
                lambda: sum_(mul(mean_(x, axis=2), mean_(x, axis=2)))
            ), [x]

        _fd_case("mean", build, 1)

        def build2(rng):
            x = leaf(rng, 2, 6)
            return (lambda: sum_(mul(reshape(x, (3, 4)), reshape(x, (3, 4))))), [x]

        _fd_case("reshape", build2, 1)

    def test_concat(self):
        def build(rng):
            a = leaf(rng, 2, 2, 2, 2)
            b = leaf(rng, 2, 3, 2, 2)
            return (lambda: sum_(mul(concat([a, b], axis=1), concat([a, b], axis=1)))), [a, b]

        _fd_case("concat", build, 2)

    def test_upsample(self):
        def build(rng):
            x = leaf(rng, 1, 2, 3, 3)
            w = constant(rng.normal(size=(1, 2, 6, 6)))
            return (lambda: sum_(mul(upsample_nearest(x, 2), w))), [x]

        _fd_case("upsample", build, 1)

    def test_adaptive_pool(self):
        def build(rng):
            x = leaf(rng, 2, 3, 4, 4)
            return (lambda: sum_(mul(adaptive_avg_pool(x), adaptive_avg_pool(x)))), [x]

        _fd_case("adaptive", build, 1)

    def test_cosine_similarity(self):
        def build(rng):
            a = leaf(rng, 3, 4)
            b = leaf(rng, 3, 4)
            return (lambda: sum_(cosine_similarity(a, b))), [a, b]

        _fd_case("cosine", build, 2)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=10, deadline=None)
    def test_composed_network_property(self, seed):
        rng = np.random.default_rng(seed)
        x = parameter(rng.normal(size=(1, 2, 4, 4)))
        w = parameter(rng.normal(size=(2, 2, 3, 3)) * 0.5)
        g = parameter(rng.uniform(0.5, 1.5, size=2))
        b = parameter(rng.normal(size=2) * 0.1)

        def make_loss():
            h = relu(instance_norm(conv2d(x, w, stride=1, pad=1), g, b))
            return mean_(mul(h, h))

        assert max_relative_error(make_loss, [x, w, g, b]) < TOL


class TestCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        tensors = {
            "enc.w": rng.normal(size=(4, 3, 3, 3)),
            "enc.g": rng.normal(size=(4,)),
            "head.bias": rng.normal(size=(2,)),
        }
        save_checkpoint(tensors, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert list(back) == list(tensors)
        for k in tensors:
            assert np.array_equal(back[k], tensors[k])

    def test_rewrite_is_byte_identical(self, rng, tmp_path):
        tensors = {"a": rng.normal(size=(5, 5)), "b": rng.normal(size=(3,))}
        save_checkpoint(tensors, tmp_path / "1.ckpt")
        save_checkpoint(tensors, tmp_path / "2.ckpt")
        assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
        with pytest.raises(UlsaError):
            load_checkpoint(tmp_path / "x.ckpt")
