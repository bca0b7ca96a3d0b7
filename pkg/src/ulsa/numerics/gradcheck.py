"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Node, backward


def max_relative_error(
    make_loss: Callable[[], Node],
    leaves: Sequence[Node],
    h: float = 1e-5,
    floor: float = 1e-3,
) -> float:
    """Compare tape gradients of a scalar loss against central differences.

    `make_loss` must rebuild the loss from the current leaf values and be
    deterministic. Returns the worst relative error over every element of
    every leaf: |a - n| / max(|a| + |n|, floor). The floor turns the check
    into an absolute one for near-zero gradients, where central differences
    are roundoff-limited and a plain ratio would amplify that noise.
    """
    for p in leaves:
        p.grad = None
    backward(make_loss())
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.value) for p in leaves
    ]

    worst = 0.0
    for p, ga in zip(leaves, analytic):
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = make_loss().value.item()
            flat[i] = keep - h
            down = make_loss().value.item()
            flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]) + abs(numeric), floor)
            worst = max(worst, err)
    return worst
