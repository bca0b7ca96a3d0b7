"""The training losses.

`supervised_loss` is mean cross-entropy over pixels (segmentation) or samples
(classification). `fcl_loss` pushes the pooled per-block features of an image
and of its recolored/blurred twin toward each other: the negative mean of the
per-block, batch-averaged cosine similarities, with the clean branch held
off-tape so only the perturbed branch drives the parameters. The combined
objective is supervised + weight * unsupervised; weight 0 reduces exactly to
plain supervised training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch, UlsaError
from .model import FeaturePyramid
from .numerics import (
    Node,
    add,
    constant,
    cosine_similarity,
    log_softmax,
    mean_,
    mul,
    scale,
    sum_,
)

FCL_BLOCK_MODES = ("all", "last_only")


@dataclass
class LossReport:
    """One training step's loss decomposition.

    `per_block_cosine` lists the blocks the consistency loss actually covered
    (all of them, or just the last under the last-block ablation), so
    unsupervised == -mean(per_block_cosine) holds in every mode.
    """

    total: float
    supervised: float
    unsupervised: float
    per_block_cosine: list[float] = field(default_factory=list)

    def check(self, weight: float) -> None:
        if abs(self.total - (self.supervised + weight * self.unsupervised)) > 1e-12:
            raise UlsaError("loss report inconsistent: total != supervised + weight*unsupervised")
        mean_cos = float(np.mean(self.per_block_cosine)) if self.per_block_cosine else 0.0
        if abs(self.unsupervised - (-mean_cos)) > 1e-12:
            raise UlsaError("loss report inconsistent: unsupervised != -mean(per_block_cosine)")
        if any(c < -1.0 - 1e-9 or c > 1.0 + 1e-9 for c in self.per_block_cosine):
            raise UlsaError("cosine values left [-1, 1]")


def supervised_loss(logits: Node, targets: np.ndarray, task: str) -> Node:
    """Mean cross-entropy.

    segmentation: logits (B, K, H, W), integer mask (B, H, W) in [0, K).
    classification: logits (B, K), integer labels (B,) in [0, K).
    """
    targets = np.asarray(targets)
    if task == "segmentation":
        if logits.value.ndim != 4 or targets.shape != (
            logits.value.shape[0],
            logits.value.shape[2],
            logits.value.shape[3],
        ):
            raise ShapeMismatch("supervised_loss(segmentation)", logits.value.shape, targets.shape)
        k = logits.value.shape[1]
        if targets.min() < 0 or targets.max() >= k:
            raise UlsaError(f"mask values must lie in [0, {k}), got [{targets.min()}, {targets.max()}]")
        onehot = np.zeros(logits.value.shape)
        b_idx, h_idx, w_idx = np.indices(targets.shape)
        onehot[b_idx, targets, h_idx, w_idx] = 1.0
        logp = log_softmax(logits, axis=1)
        picked = sum_(mul(logp, constant(onehot)), axis=1)  # (B, H, W)
        return scale(mean_(picked), -1.0)
    if task == "classification":
        if logits.value.ndim != 2 or targets.shape != (logits.value.shape[0],):
            raise ShapeMismatch("supervised_loss(classification)", logits.value.shape, targets.shape)
        k = logits.value.shape[1]
        if targets.min() < 0 or targets.max() >= k:
            raise UlsaError(f"labels must lie in [0, {k}), got [{targets.min()}, {targets.max()}]")
        onehot = np.zeros(logits.value.shape)
        onehot[np.arange(targets.shape[0]), targets] = 1.0
        logp = log_softmax(logits, axis=1)
        picked = sum_(mul(logp, constant(onehot)), axis=1)  # (B,)
        return scale(mean_(picked), -1.0)
    raise UlsaError(f"unknown task {task!r}")


def fcl_loss(
    real: FeaturePyramid,
    augmented: FeaturePyramid,
    blocks: str = "all",
) -> tuple[Node, list[float]]:
    """Feature-consistency loss between a clean and a perturbed pyramid.

    Returns (-mean over covered blocks of the batch-mean cosine similarity,
    the per-block cosine values). `real` must come from a detached encode; the
    loss only ever moves the parameters through `augmented`.
    """
    if blocks not in FCL_BLOCK_MODES:
        raise UlsaError(f"blocks must be one of {FCL_BLOCK_MODES}, got {blocks!r}")
    if len(real) != len(augmented):
        raise ShapeMismatch("fcl_loss(pyramid depth)", (len(real),), (len(augmented),))
    idx = range(len(real)) if blocks == "all" else [len(real) - 1]
    per_block: list[Node] = []
    for i in idx:
        cos = cosine_similarity(real.pooled[i], augmented.pooled[i])
        per_block.append(mean_(cos))
    total = per_block[0]
    for cos in per_block[1:]:
        total = add(total, cos)
    loss = scale(total, -1.0 / len(per_block))
    return loss, [float(c.value) for c in per_block]


def total_loss(sup: Node, unsup: Node, weight: float) -> Node:
    """sup + weight * unsup; weight 0 reduces bit-exactly to `sup`."""
    if weight < 0:
        raise UlsaError(f"loss weight must be >= 0, got {weight}")
    if weight == 0.0:
        return sup
    return add(sup, scale(unsup, weight))


def make_report(sup: Node, unsup_value: float, per_block: list[float], weight: float) -> LossReport:
    sup_v = float(sup.value)
    report = LossReport(
        total=sup_v + weight * unsup_value,
        supervised=sup_v,
        unsupervised=unsup_value,
        per_block_cosine=list(per_block),
    )
    report.check(weight)
    return report
