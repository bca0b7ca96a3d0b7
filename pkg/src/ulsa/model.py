"""A compact convolutional encoder with per-block pooled feature taps, plus a
classification head and a skip-connected segmentation decoder.

Each encoder block halves the spatial resolution with a stride-2 conv and
doubles the channel count, then applies a residual pair of 3x3 convs. All
normalization is per-sample (instance style), so nothing couples samples
within a batch. The pooled output of every block forms the feature pyramid
consumed by the consistency loss; the pre-pool maps feed the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, UlsaError
from .numerics import (
    Node,
    adaptive_avg_pool,
    add,
    concat,
    constant,
    conv2d,
    instance_norm,
    matmul,
    no_grad,
    parameter,
    relu,
    upsample_nearest,
)

TASKS = ("segmentation", "classification")


@dataclass(frozen=True)
class EncoderConfig:
    num_blocks: int = 4
    base_channels: int = 16
    in_channels: int = 3

    def __post_init__(self):
        if self.num_blocks < 2:
            raise UlsaError(f"need at least 2 blocks, got {self.num_blocks}")

    def channels(self, block: int) -> int:
        """Output channels of 1-indexed block `block`: base * 2**(block-1)."""
        return self.base_channels * (2 ** (block - 1))

    @property
    def block_channels(self) -> list[int]:
        return [self.channels(i) for i in range(1, self.num_blocks + 1)]


@dataclass
class FeaturePyramid:
    pooled: list[Node]  # block i: (B, C_i)
    maps: list[Node]  # block i: (B, C_i, H_i, W_i)

    def __len__(self) -> int:
        return len(self.pooled)


def _he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (c_in * k * k))
    return rng.normal(0.0, std, size=(c_out, c_in, k, k))


class Model:
    """Encoder plus one task head, with named float64 parameters."""

    def __init__(self, cfg: EncoderConfig, task: str, num_classes: int, seed: int = 0):
        if task not in TASKS:
            raise UlsaError(f"task must be one of {TASKS}, got {task!r}")
        if num_classes < 2:
            raise UlsaError(f"need num_classes >= 2, got {num_classes}")
        self.cfg = cfg
        self.task = task
        self.num_classes = num_classes
        self.params: dict[str, Node] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameter construction ------------------------------------------------

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = parameter(arr)

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        c_prev = cfg.in_channels
        for i in range(1, cfg.num_blocks + 1):
            c = cfg.channels(i)
            for tag, c_in in (("down", c_prev), ("a", c), ("b", c)):
                self._add(f"enc{i}.{tag}.w", _he_conv(rng, c, c_in, 3))
                self._add(f"enc{i}.{tag}.g", np.ones(c))
                self._add(f"enc{i}.{tag}.beta", np.zeros(c))
            c_prev = c

        if self.task == "classification":
            c_last = cfg.channels(cfg.num_blocks)
            self._add("head.w", rng.normal(0.0, np.sqrt(1.0 / c_last), size=(c_last, self.num_classes)))
            self._add("head.bias", np.zeros(self.num_classes))
        else:
            # decoder merge stages walk back down the pyramid
            for i in range(cfg.num_blocks - 1, 0, -1):
                c_in = cfg.channels(i + 1) + cfg.channels(i)
                c_out = cfg.channels(i)
                self._add(f"dec{i}.w", _he_conv(rng, c_out, c_in, 3))
                self._add(f"dec{i}.g", np.ones(c_out))
                self._add(f"dec{i}.beta", np.zeros(c_out))
            c1 = cfg.channels(1)
            self._add("dec0.w", _he_conv(rng, c1, c1, 3))
            self._add("dec0.g", np.ones(c1))
            self._add("dec0.beta", np.zeros(c1))
            self._add("head.w", _he_conv(rng, self.num_classes, c1, 1))
            self._add("head.bias", np.zeros(self.num_classes))

    @staticmethod
    def expected_param_count(cfg: EncoderConfig, task: str, num_classes: int) -> int:
        """Closed-form parameter count; regression-tested against the dict."""
        total = 0
        c_prev = cfg.in_channels
        for i in range(1, cfg.num_blocks + 1):
            c = cfg.channels(i)
            total += 9 * c * (c_prev + 2 * c) + 6 * c
            c_prev = c
        if task == "classification":
            c_last = cfg.channels(cfg.num_blocks)
            total += c_last * num_classes + num_classes
        else:
            for i in range(cfg.num_blocks - 1, 0, -1):
                total += 9 * (cfg.channels(i + 1) + cfg.channels(i)) * cfg.channels(i) + 2 * cfg.channels(i)
            c1 = cfg.channels(1)
            total += 9 * c1 * c1 + 2 * c1
            total += c1 * num_classes + num_classes
        return total

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise UlsaError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for k, p in self.params.items():
            arr = np.ascontiguousarray(state[k], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ShapeMismatch(f"load_state_dict({k})", arr.shape, p.value.shape)
            p.value = arr

    # -- forward ---------------------------------------------------------------

    def _block(self, x: Node, i: int, stride: int = 2) -> Node:
        p = self.params
        h = relu(instance_norm(conv2d(x, p[f"enc{i}.down.w"], stride=stride, pad=1), p[f"enc{i}.down.g"], p[f"enc{i}.down.beta"]))
        r = relu(instance_norm(conv2d(h, p[f"enc{i}.a.w"], stride=1, pad=1), p[f"enc{i}.a.g"], p[f"enc{i}.a.beta"]))
        r = instance_norm(conv2d(r, p[f"enc{i}.b.w"], stride=1, pad=1), p[f"enc{i}.b.g"], p[f"enc{i}.b.beta"])
        return relu(add(h, r))

    def _check_input(self, x: Node) -> None:
        if x.value.ndim != 4 or x.value.shape[1] != self.cfg.in_channels:
            raise ShapeMismatch("encode", x.value.shape, ("B", self.cfg.in_channels, "H", "W"))
        div = 2**self.cfg.num_blocks
        _, _, h, w = x.value.shape
        if h % div or w % div:
            raise ShapeMismatch(f"encode(spatial dims must divide {div})", x.value.shape)

    def encode(self, x, detached: bool = False) -> FeaturePyramid:
        """Run all blocks; returns pooled vectors and pre-pool maps per block.

        With detached=True the whole pyramid is computed off-tape: values are
        identical but no gradient flows to the parameters from any consumer.
        """
        x = x if isinstance(x, Node) else constant(x)
        self._check_input(x)
        if detached:
            with no_grad():
                return self._encode(x)
        return self._encode(x)

    def _encode(self, x: Node) -> FeaturePyramid:
        maps: list[Node] = []
        pooled: list[Node] = []
        h = x
        for i in range(1, self.cfg.num_blocks + 1):
            h = self._block(h, i)
            maps.append(h)
            pooled.append(adaptive_avg_pool(h))
        return FeaturePyramid(pooled=pooled, maps=maps)

    def predict_class(self, x) -> Node:
        """Class logits (B, num_classes) from the pooled last block."""
        if self.task != "classification":
            raise UlsaError("model was built with a segmentation head")
        pyr = self.encode(x)
        return add(matmul(pyr.pooled[-1], self.params["head.w"]), self.params["head.bias"])

    def predict_mask(self, x) -> Node:
        """Per-pixel class logits (B, num_classes, H, W) at input resolution."""
        if self.task != "segmentation":
            raise UlsaError("model was built with a classification head")
        pyr = self.encode(x)
        return self.decode(pyr)

    def decode(self, pyr: FeaturePyramid) -> Node:
        p = self.params
        h = pyr.maps[-1]
        for i in range(self.cfg.num_blocks - 1, 0, -1):
            h = upsample_nearest(h, 2)
            h = concat([h, pyr.maps[i - 1]], axis=1)
            h = relu(instance_norm(conv2d(h, p[f"dec{i}.w"], stride=1, pad=1), p[f"dec{i}.g"], p[f"dec{i}.beta"]))
        h = upsample_nearest(h, 2)
        h = relu(instance_norm(conv2d(h, p["dec0.w"], stride=1, pad=1), p["dec0.g"], p["dec0.beta"]))
        return conv2d(h, p["head.w"], bias=p["head.bias"], stride=1, pad=0)
