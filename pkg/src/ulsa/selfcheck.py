"""Fast built-in verification: a handful of independent-oracle checks that a
deployed install can run without the test suite (`ulsa selftest`).

Each check returns (name, passed, detail). The full property suite lives in
the repository tests; these are the load-bearing subset, kept cheap.
"""

from __future__ import annotations

import numpy as np

from .imagecore import Image, gaussian_blur, lab_to_rgb, rgb_to_lab
from .metrics import auroc, dice
from .model import EncoderConfig, Model
from .numerics import backward, constant, detach, max_relative_error, mul, parameter, sum_
from .objective import fcl_loss, supervised_loss
from .stainnorm import StainMatrix, macenko_fit, od_to_rgb, profile_of, reinhard_transfer

Check = tuple[str, bool, str]


def check_color_round_trip(rng: np.random.Generator) -> Check:
    img = Image(rng.uniform(0.05, 0.95, size=(13, 17, 3)))
    err = float(np.abs(lab_to_rgb(rgb_to_lab(img)).pixels - img.pixels).max())
    return ("color round trip", err < 1e-4, f"max abs err {err:.2e}")


def check_blur_linearity(rng: np.random.Generator) -> Check:
    a, b = 0.4, 0.5
    x = Image(rng.uniform(0.0, 1.0, size=(16, 16, 3)))
    y = Image(rng.uniform(0.0, 1.0, size=(16, 16, 3)))
    combo = Image(a * x.pixels + b * y.pixels)
    lhs = gaussian_blur(combo, 3, 0.3).pixels
    rhs = a * gaussian_blur(x, 3, 0.3).pixels + b * gaussian_blur(y, 3, 0.3).pixels
    err = float(np.abs(lhs - rhs).max())
    return ("blur linearity", err < 1e-6, f"max abs err {err:.2e}")


def check_reinhard_contract(rng: np.random.Generator) -> Check:
    img = Image(rng.uniform(0.35, 0.65, size=(24, 24, 3)))
    ref = profile_of(Image(rng.uniform(0.4, 0.6, size=(24, 24, 3))))
    out = profile_of(reinhard_transfer(img, ref))
    err = float(max(np.abs(out.mean - ref.mean).max(), np.abs(out.std - ref.std).max()))
    return ("recolor statistics contract", err < 1e-6, f"max profile err {err:.2e}")


def check_macenko_recovery(rng: np.random.Generator) -> Check:
    h1 = np.array([0.65, 0.70, 0.29])
    h2 = np.array([0.07, 0.99, 0.11])
    basis = np.stack([h1 / np.linalg.norm(h1), h2 / np.linalg.norm(h2)], axis=1)
    # mixture with mass near the pure-stain axes so the percentile angles can
    # reach the true directions
    n = 48 * 48
    w = rng.beta(0.2, 0.2, size=n)
    m = rng.uniform(1.0, 3.0, size=n)
    conc = np.stack([w * m, (1.0 - w) * m])
    img = Image.from_array(od_to_rgb(basis @ conc).T.reshape(48, 48, 3))
    fitted = macenko_fit(img)
    worst = _worst_angle_deg(fitted, basis)
    return ("stain vector recovery", worst < 1.0, f"worst angle {worst:.3f} deg")


def _worst_angle_deg(fitted: StainMatrix, truth: np.ndarray) -> float:
    worst = 0.0
    for k in range(2):
        cosines = [abs(float(fitted.vectors[:, k] @ truth[:, j])) for j in range(2)]
        worst = max(worst, np.degrees(np.arccos(np.clip(max(cosines), -1.0, 1.0))))
    return float(worst)


def check_gradients(rng: np.random.Generator) -> Check:
    model = Model(EncoderConfig(num_blocks=2, base_channels=4), "segmentation", 2, seed=3)
    x = rng.uniform(0.0, 1.0, size=(1, 3, 8, 8))
    mask = rng.integers(0, 2, size=(1, 8, 8))
    leaves = list(model.params.values())

    def loss():
        return supervised_loss(model.predict_mask(x), mask, "segmentation")

    err = max_relative_error(loss, leaves[:2])  # two tensors keep it quick
    return ("model gradient vs finite differences", err < 1e-4, f"max rel err {err:.2e}")


def check_stop_gradient(rng: np.random.Generator) -> Check:
    x = parameter(rng.normal(size=(3, 4)))
    y = parameter(rng.normal(size=(3, 4)))
    loss = sum_(mul(detach(x), y))
    backward(loss)
    ok = x.grad is None and np.array_equal(y.grad, x.value)
    return ("stop-gradient semantics", ok, "grad(x) None, grad(y) == x")


def check_fcl_detached_branch(rng: np.random.Generator) -> Check:
    model = Model(EncoderConfig(num_blocks=2, base_channels=4), "classification", 2, seed=7)
    x = rng.uniform(0.0, 1.0, size=(2, 3, 8, 8))
    x2 = x + rng.normal(0, 0.01, size=x.shape)

    def grads_with(real_pyr):
        for p in model.params.values():
            p.grad = None
        loss, _ = fcl_loss(real_pyr, model.encode(x2))
        backward(loss)
        return {k: (p.grad.copy() if p.grad is not None else None) for k, p in model.params.items()}

    g_detached = grads_with(model.encode(x, detached=True))
    # fold the detached branch into plain constants: gradients must not move
    frozen = model.encode(x, detached=True)
    for node in frozen.pooled:
        node.parents = ()
    g_constant = grads_with(frozen)
    same = all(
        (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))
        for a, b in ((g_detached[k], g_constant[k]) for k in model.params)
    )
    got_grads = any(g is not None for g in g_detached.values())
    return (
        "consistency loss stop-gradient",
        same and got_grads,
        "detached pyramid contributes exactly zero parameter gradient",
    )


def check_metric_oracles(rng: np.random.Generator) -> Check:
    for _ in range(50):
        pred = rng.integers(0, 3, size=(6, 6))
        true = rng.integers(0, 3, size=(6, 6))
        per_class, macro = dice(pred, true, 3)
        ref = []
        for c in range(3):
            p = set(map(tuple, np.argwhere(pred == c)))
            t = set(map(tuple, np.argwhere(true == c)))
            if p or t:
                ref.append(2 * len(p & t) / (len(p) + len(t)))
        if abs(macro - float(np.mean(ref))) > 1e-12:
            return ("metric oracles", False, "dice mismatch vs set oracle")
        scores = rng.normal(size=12)
        labels = np.array([0] * 6 + [1] * 6)
        pairs = [
            1.0 if sp > sn else 0.5 if sp == sn else 0.0
            for sp in scores[labels == 1]
            for sn in scores[labels == 0]
        ]
        if abs(auroc(scores, labels) - float(np.mean(pairs))) > 1e-12:
            return ("metric oracles", False, "auroc mismatch vs pairwise oracle")
    return ("metric oracles", True, "dice + auroc match brute force")


ALL_CHECKS = (
    check_color_round_trip,
    check_blur_linearity,
    check_reinhard_contract,
    check_macenko_recovery,
    check_gradients,
    check_stop_gradient,
    check_fcl_detached_branch,
    check_metric_oracles,
)


def run_all(seed: int = 0) -> list[Check]:
    results = []
    for fn in ALL_CHECKS:
        rng = np.random.default_rng(seed)
        try:
            results.append(fn(rng))
        except Exception as exc:  # a crashed check is a failed check
            results.append((fn.__name__, False, f"raised {type(exc).__name__}: {exc}"))
    return results
