"""Evaluation: per-class Dice, rank-based AUROC, and the stain-stratified
report with per-run mean/std aggregation.

Dice excludes classes absent from both masks (avoids 0/0); the macro score is
the mean over the included classes. AUROC uses the rank-sum formulation with
average ranks, i.e. P(score_pos > score_neg) + 0.5 * P(equal). Every report
cell is backed by a per-sample dump so numbers can be recomputed externally.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeMismatch, SingleClass, UlsaError
from .manifest import Manifest, Record
from .model import Model
from .numerics import no_grad, softmax
from .trainer import ImagePool, _stack_images
from .translate import StainSet


def dice(pred_mask: np.ndarray, true_mask: np.ndarray, num_classes: int) -> tuple[dict[int, float], float]:
    """Per-class and macro Dice between integer masks.

    Classes absent from both masks are excluded; macro is the mean over the
    included classes. Returns ({class: dice}, macro).
    """
    pred_mask = np.asarray(pred_mask)
    true_mask = np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise ShapeMismatch("dice", pred_mask.shape, true_mask.shape)
    per_class: dict[int, float] = {}
    for c in range(num_classes):
        p = pred_mask == c
        t = true_mask == c
        denom = int(p.sum()) + int(t.sum())
        if denom == 0:
            continue
        per_class[c] = 2.0 * int((p & t).sum()) / denom
    macro = float(np.mean(list(per_class.values()))) if per_class else 1.0
    return per_class, macro


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-statistic AUROC with tie correction."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeMismatch("auroc", scores.shape, labels.shape)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"need both classes, got {n_pos} positive / {n_neg} negative")
    ranks = _average_ranks(scores)
    rank_sum_pos = float(ranks[labels == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank range."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


@dataclass
class SampleResult:
    record: Record
    run: int
    value: float  # sample dice (segmentation) or positive-class score (classification)
    label: Optional[int] = None
    per_class: dict[int, float] = field(default_factory=dict)


@dataclass
class EvalReport:
    task: str
    metric_name: str  # "dice" | "auroc"
    stains: list[str]
    target_stains: list[str]
    per_run: list[dict[str, float]]  # run -> stain -> metric
    n_per_stain: dict[str, int]
    samples: list[SampleResult]
    per_class: dict[str, dict[int, float]] = field(default_factory=dict)

    def stain_mean(self, stain: str) -> float:
        return float(np.mean([r[stain] for r in self.per_run]))

    def stain_std(self, stain: str) -> float:
        return float(np.std([r[stain] for r in self.per_run]))

    def overall_per_run(self) -> list[float]:
        """Unweighted mean over target stains, one value per run."""
        return [float(np.mean([r[s] for s in self.target_stains])) for r in self.per_run]

    @property
    def overall_mean(self) -> float:
        return float(np.mean(self.overall_per_run()))

    @property
    def overall_std(self) -> float:
        return float(np.std(self.overall_per_run()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stain", "role", "n", "mean", "std"] + [f"run{i}" for i in range(len(self.per_run))])
        for stain in self.stains:
            role = "target" if stain in self.target_stains else "source"
            w.writerow(
                [stain, role, self.n_per_stain.get(stain, 0),
                 f"{self.stain_mean(stain):.6f}", f"{self.stain_std(stain):.6f}"]
                + [f"{r[stain]:.6f}" for r in self.per_run]
            )
        w.writerow(
            ["Overall", "target", "", f"{self.overall_mean:.6f}", f"{self.overall_std:.6f}"]
            + [f"{v:.6f}" for v in self.overall_per_run()]
        )
        return buf.getvalue()

    def render_text(self) -> str:
        name = self.metric_name.upper()
        cols = self.stains + ["Overall"]
        header = f"{'stain':>10} | " + " | ".join(f"{c:>10}" for c in cols)
        means = [self.stain_mean(s) for s in self.stains] + [self.overall_mean]
        stds = [self.stain_std(s) for s in self.stains] + [self.overall_std]
        row_m = f"{name:>10} | " + " | ".join(f"{m * 100:>10.1f}" for m in means)
        row_s = f"{'(std)':>10} | " + " | ".join(f"{s * 100:>10.2f}" for s in stds)
        return "\n".join([header, "-" * len(header), row_m, row_s])

    def samples_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "image_path", "stain", "value", "label"])
        for s in sorted(self.samples, key=lambda s: (s.run, s.record.image_path)):
            w.writerow([s.run, s.record.image_path, s.record.stain,
                        f"{s.value:.12f}", "" if s.label is None else s.label])
        return buf.getvalue()

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.csv").write_text(self.to_csv(), encoding="utf-8")
        (out_dir / "report.txt").write_text(self.render_text() + "\n", encoding="utf-8")
        (out_dir / "per_sample.csv").write_text(self.samples_csv(), encoding="utf-8")


def evaluate(
    models: Sequence[Model],
    manifest: Manifest,
    task: str,
    stain_set: StainSet,
    num_classes: int,
    batch: int = 16,
) -> EvalReport:
    """Run inference on the labeled test split, grouped by stain.

    `models` holds one trained model per run (seed); per-stain means and stds
    aggregate across them. Overall is the unweighted mean over target stains.
    """
    stains = [s for s in stain_set.all_names if manifest.filter(split="test", stain=s)]
    if not stains:
        raise UlsaError("manifest has no test records for the configured stains")
    per_run: list[dict[str, float]] = []
    samples: list[SampleResult] = []
    n_per_stain: dict[str, int] = {}
    class_acc: dict[str, dict[int, list[float]]] = {s: {} for s in stains}

    for run_idx, model in enumerate(models):
        row: dict[str, float] = {}
        for stain in stains:
            records = [r for r in manifest.filter(split="test", stain=stain) if r.labeled]
            missing = [r.image_path for r in manifest.filter(split="test", stain=stain) if not r.labeled]
            if missing:
                raise UlsaError(f"stain {stain}: {len(missing)} test records lack ground truth")
            if not records:
                raise UlsaError(f"stain {stain}: no labeled test records")
            n_per_stain[stain] = len(records)
            pool = ImagePool(records, manifest, cache=False)
            if task == "segmentation":
                row[stain] = _eval_segmentation(
                    model, pool, records, num_classes, batch, run_idx, samples, class_acc[stain]
                )
            else:
                row[stain] = _eval_classification(model, pool, records, batch, run_idx, samples)
        per_run.append(row)

    per_class = {
        stain: {c: float(np.mean(vals)) for c, vals in acc.items()}
        for stain, acc in class_acc.items()
    }
    return EvalReport(
        task=task,
        metric_name="dice" if task == "segmentation" else "auroc",
        stains=stains,
        target_stains=[s for s in stain_set.target_names if s in stains],
        per_run=per_run,
        n_per_stain=n_per_stain,
        samples=samples,
        per_class=per_class,
    )


def _eval_segmentation(model, pool, records, num_classes, batch, run_idx, samples, class_acc) -> float:
    values = []
    for start in range(0, len(records), batch):
        idxs = list(range(start, min(start + batch, len(records))))
        x = _stack_images([pool.image(i) for i in idxs])
        with no_grad():
            logits = model.predict_mask(x)
        preds = logits.value.argmax(axis=1)
        for k, i in enumerate(idxs):
            truth = pool.target(i, "segmentation")
            per_class, macro = dice(preds[k], truth, num_classes)
            values.append(macro)
            samples.append(SampleResult(records[i], run_idx, macro, per_class=per_class))
            for c, v in per_class.items():
                class_acc.setdefault(c, []).append(v)
    return float(np.mean(values))


def _eval_classification(model, pool, records, batch, run_idx, samples) -> float:
    scores, labels = [], []
    for start in range(0, len(records), batch):
        idxs = list(range(start, min(start + batch, len(records))))
        x = _stack_images([pool.image(i) for i in idxs])
        with no_grad():
            probs = softmax(model.predict_class(x), axis=1).value
        for k, i in enumerate(idxs):
            label = pool.target(i, "classification")
            scores.append(float(probs[k, 1]))
            labels.append(label)
            samples.append(SampleResult(records[i], run_idx, float(probs[k, 1]), label=label))
    return auroc(scores, labels)
