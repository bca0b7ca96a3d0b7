"""Training: mixture sampling over real and synthetic labeled pools, the
recolor-and-blur perturbation for the unlabeled branch, decoupled-weight-decay
adaptive moments, and the epoch loop with plateau decay and early stopping.

One epoch is one nominal pass over the *real* labeled pool
(ceil(n_real / batch_labeled) steps); synthetic translations enlarge the
mixture the sampler draws from but do not change the step count, so every
method variant takes the same number of optimizer steps per epoch. Unlabeled
pools cycle independently of epochs.
"""

from __future__ import annotations

import json
import logging
import math
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import EmptyPool, NonFiniteValue, UlsaError
from .imagecore import Image, gaussian_blur, read_mask_png, read_png
from .manifest import Manifest, Record
from .model import EncoderConfig, Model
from .numerics import Node, backward, no_grad, save_checkpoint, zero_grad
from .objective import LossReport, fcl_loss, make_report, supervised_loss, total_loss
from .stainnorm import (
    StainMatrix,
    StainProfile,
    macenko_fit,
    macenko_transfer,
    profile_of,
    reinhard_transfer,
)
from .translate import StainSet

log = logging.getLogger(__name__)

STAIN_NORM_AUGS = ("none", "reinhard", "macenko")


@dataclass
class TrainConfig:
    task: str = "segmentation"
    loss_weight: float = 1.0
    batch_total: int = 128
    batch_labeled: int = 32
    batch_unlabeled: int = 96
    lr: float = 1e-4
    weight_decay: float = 1e-5
    lr_floor: float = 1e-10
    patience: Optional[int] = None  # defaults to 10 (segmentation) / 5 (classification)
    max_epochs: int = 50
    seed: int = 0
    blur_kernel_choices: tuple[int, ...] = (3, 5)
    blur_sigma_range: tuple[float, float] = (0.01, 0.4)
    fcl_blocks: str = "all"  # "all" | "last_only"
    translation_enabled: bool = True
    fcl_enabled: bool = True
    stain_norm_aug: str = "none"  # "none" | "reinhard" | "macenko"
    label_fraction: float = 1.0
    val_improvement_eps: float = 1e-5

    def __post_init__(self):
        if self.batch_labeled + self.batch_unlabeled != self.batch_total:
            raise UlsaError(
                f"batch_labeled ({self.batch_labeled}) + batch_unlabeled "
                f"({self.batch_unlabeled}) must equal batch_total ({self.batch_total})"
            )
        if not (0.0 < self.label_fraction <= 1.0):
            raise UlsaError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if self.loss_weight < 0:
            raise UlsaError(f"loss_weight must be >= 0, got {self.loss_weight}")
        if self.stain_norm_aug not in STAIN_NORM_AUGS:
            raise UlsaError(f"stain_norm_aug must be one of {STAIN_NORM_AUGS}")

    @property
    def resolved_patience(self) -> int:
        if self.patience is not None:
            return self.patience
        return 10 if self.task == "segmentation" else 5

    @staticmethod
    def desk_scale(**overrides) -> "TrainConfig":
        """Small-footprint defaults: 64x64 tiles, batch 32 split 8/24 (1:3)."""
        base = dict(batch_total=32, batch_labeled=8, batch_unlabeled=24)
        base.update(overrides)
        return TrainConfig(**base)


class ImagePool:
    """Records of one stain plus lazily cached u8 pixel/mask/label payloads."""

    def __init__(self, records: list[Record], base: Manifest, cache: bool = True):
        self.records = records
        self._manifest = base
        self._cache_enabled = cache
        self._images: dict[int, np.ndarray] = {}
        self._masks: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.records)

    def image(self, idx: int) -> Image:
        if idx in self._images:
            return Image(self._images[idx].astype(np.float64) / 255.0)
        img = read_png(self._manifest.image_file(self.records[idx]))
        if self._cache_enabled:
            self._images[idx] = np.floor(img.pixels * 255.0 + 0.5).astype(np.uint8)
            return Image(self._images[idx].astype(np.float64) / 255.0)
        return img

    def target(self, idx: int, task: str):
        rec = self.records[idx]
        if task == "segmentation":
            if rec.mask_path is None:
                raise UlsaError(f"record {rec.image_path} has no mask")
            if idx not in self._masks:
                mask = read_mask_png(self._manifest.mask_file(rec))
                if self._cache_enabled:
                    self._masks[idx] = mask
                return mask
            return self._masks[idx]
        if rec.label is None:
            raise UlsaError(f"record {rec.image_path} has no label")
        return int(rec.label)


@dataclass
class DatasetBundle:
    """Everything train() needs, already split into per-stain pools."""

    task: str
    num_classes: int
    stain_set: StainSet
    labeled: dict[str, ImagePool]  # stain -> labeled train pool (real + synthetic)
    unlabeled: dict[str, ImagePool]  # stain -> unlabeled train pool
    val: ImagePool
    n_real_labeled: int

    @staticmethod
    def from_manifests(
        benchmark: Manifest,
        stain_set: StainSet,
        task: str,
        num_classes: int,
        synthetic: Optional[Manifest] = None,
        cache: bool = True,
    ) -> "DatasetBundle":
        labeled: dict[str, ImagePool] = {}
        unlabeled: dict[str, ImagePool] = {}
        n_real = 0
        for stain in stain_set.all_names:
            lab = [r for r in benchmark.filter(split="train", stain=stain) if r.labeled]
            n_real += len(lab)
            recs_u = [r for r in benchmark.filter(split="train", stain=stain) if not r.labeled]
            if lab:
                labeled[stain] = ImagePool(lab, benchmark, cache)
            if recs_u:
                unlabeled[stain] = ImagePool(recs_u, benchmark, cache)
        if synthetic is not None:
            for stain in stain_set.target_names:
                recs = [r for r in synthetic.filter(stain=stain) if r.labeled]
                if recs:
                    labeled[stain] = ImagePool(recs, synthetic, cache)
        val_records = [r for r in benchmark.filter(split="val") if r.labeled]
        if not val_records:
            raise UlsaError("benchmark manifest has no labeled validation records")
        return DatasetBundle(
            task=task,
            num_classes=num_classes,
            stain_set=stain_set,
            labeled=labeled,
            unlabeled=unlabeled,
            val=ImagePool(val_records, benchmark, cache),
            n_real_labeled=n_real,
        )


class MixtureSampler:
    """Uniform over stains first, then uniform within the chosen stain's pool."""

    def __init__(self, pools: dict[str, ImagePool]):
        if not pools:
            raise UlsaError("mixture sampler needs at least one stain pool")
        for stain, pool in pools.items():
            if len(pool) == 0:
                raise EmptyPool(stain)
        self.stains = list(pools)
        self.pools = pools

    def draw(self, rng: np.random.Generator) -> tuple[str, int]:
        stain = self.stains[int(rng.integers(len(self.stains)))]
        return stain, int(rng.integers(len(self.pools[stain])))


def sample_labeled_batch(
    sampler: MixtureSampler, n: int, rng: np.random.Generator, task: str
) -> tuple[list[Image], list, list[str]]:
    """n i.i.d. draws from the stain mixture: (images, targets, stain names)."""
    images, targets, stains = [], [], []
    for _ in range(n):
        stain, idx = sampler.draw(rng)
        pool = sampler.pools[stain]
        images.append(pool.image(idx))
        targets.append(pool.target(idx, task))
        stains.append(stain)
    return images, targets, stains


class ReferenceSampler:
    """Uniform draws from the pooled unlabeled target-stain images."""

    def __init__(self, unlabeled: dict[str, ImagePool], target_names: list[str]):
        self.entries: list[tuple[ImagePool, int]] = []
        for stain in target_names:
            pool = unlabeled.get(stain)
            if pool is not None:
                self.entries.extend((pool, i) for i in range(len(pool)))
        if not self.entries:
            raise EmptyPool("|".join(target_names))
        self._profiles: dict[tuple[int, int], StainProfile] = {}
        self._matrices: dict[tuple[int, int], StainMatrix] = {}

    def draw_image(self, rng: np.random.Generator) -> Image:
        pool, idx = self.entries[int(rng.integers(len(self.entries)))]
        return pool.image(idx)

    def draw_profile(self, rng: np.random.Generator) -> StainProfile:
        k = int(rng.integers(len(self.entries)))
        pool, idx = self.entries[k]
        key = (id(pool), idx)
        if key not in self._profiles:
            self._profiles[key] = profile_of(pool.image(idx))
        return self._profiles[key]

    def draw_matrix(self, rng: np.random.Generator) -> StainMatrix:
        k = int(rng.integers(len(self.entries)))
        pool, idx = self.entries[k]
        key = (id(pool), idx)
        if key not in self._matrices:
            self._matrices[key] = macenko_fit(pool.image(idx))
        return self._matrices[key]


def make_unlabeled_pair(
    x1: Image,
    references: ReferenceSampler,
    rng: np.random.Generator,
    kernels: tuple[int, ...] = (3, 5),
    sigma_range: tuple[float, float] = (0.01, 0.4),
) -> tuple[Image, Image]:
    """Perturbed twin of an unlabeled image: recolor to a random target
    reference, then lightly blur. Returns (raw, perturbed)."""
    profile = references.draw_profile(rng)
    recolored = reinhard_transfer(x1, profile)
    kernel = int(kernels[int(rng.integers(len(kernels)))])
    sigma = float(rng.uniform(*sigma_range))
    return x1, gaussian_blur(recolored, kernel, sigma)


class AdamW:
    """Adaptive moments with decoupled weight decay and bias correction."""

    def __init__(
        self,
        params: dict[str, Node],
        lr: float = 1e-4,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteValue(f"non-finite gradient for parameter {name!r} at step {self.t}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.value = p.value - self.lr * (mhat / (np.sqrt(vhat) + self.eps)) - self.lr * self.weight_decay * p.value


def optimizer_step(opt: AdamW) -> None:
    opt.step()


@dataclass
class HistoryRow:
    kind: str  # "step" | "val"
    epoch: int
    step: int  # global step index; repeats the last step for val rows
    lr: float
    total: float = math.nan
    supervised: float = math.nan
    unsupervised: float = math.nan
    cosines: tuple[float, ...] = ()
    val_loss: float = math.nan

    def csv(self) -> str:
        cos = ";".join(f"{c:.17g}" for c in self.cosines)
        vals = [
            self.kind,
            str(self.epoch),
            str(self.step),
            f"{self.lr:.17g}",
            f"{self.total:.17g}",
            f"{self.supervised:.17g}",
            f"{self.unsupervised:.17g}",
            cos,
            f"{self.val_loss:.17g}",
        ]
        return ",".join(vals)


HISTORY_HEADER = "kind,epoch,step,lr,total,supervised,unsupervised,per_block_cosine,val_loss"


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    final_state: dict[str, np.ndarray]
    history: list[HistoryRow]
    best_epoch: int
    best_val: float
    epochs_run: int
    model: Model = field(repr=False, default=None)


def _stack_images(images: list[Image]) -> np.ndarray:
    return np.stack([img.pixels.transpose(2, 0, 1) for img in images])


def _stack_targets(targets: list, task: str) -> np.ndarray:
    if task == "segmentation":
        return np.stack(targets)
    return np.asarray(targets, dtype=np.int64)


def _git_hash() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _validation_loss(model: Model, pool: ImagePool, cfg: TrainConfig) -> float:
    total, n = 0.0, 0
    bs = max(1, cfg.batch_labeled)
    with no_grad():
        for start in range(0, len(pool), bs):
            idxs = range(start, min(start + bs, len(pool)))
            images = [pool.image(i) for i in idxs]
            targets = [pool.target(i, cfg.task) for i in idxs]
            x = _stack_images(images)
            logits = model.predict_mask(x) if cfg.task == "segmentation" else model.predict_class(x)
            loss = supervised_loss(logits, _stack_targets(targets, cfg.task), cfg.task)
            total += float(loss.value) * len(images)
            n += len(images)
    return total / n


def train(
    cfg: TrainConfig,
    data: DatasetBundle,
    model_cfg: EncoderConfig,
    out_dir: Optional[Path] = None,
) -> TrainResult:
    """Run the full loop and (optionally) write history.csv, best.ckpt,
    final.ckpt and run.json into `out_dir`."""
    if data.task != cfg.task:
        raise UlsaError(f"bundle task {data.task!r} != config task {cfg.task!r}")

    stain_names = (
        data.stain_set.all_names if cfg.translation_enabled else data.stain_set.source_names
    )
    labeled_pools = {s: data.labeled[s] for s in stain_names if s in data.labeled}
    missing = [s for s in stain_names if s not in labeled_pools]
    if cfg.translation_enabled and missing:
        raise UlsaError(
            f"translation_enabled but no labeled pool for stains {missing}; "
            "run the translate step first or disable translation"
        )
    sampler = MixtureSampler(labeled_pools)

    needs_refs = cfg.fcl_enabled or cfg.stain_norm_aug != "none"
    references = (
        ReferenceSampler(data.unlabeled, data.stain_set.target_names) if needs_refs else None
    )
    unlabeled_sampler = None
    if cfg.fcl_enabled:
        pools = {s: p for s, p in data.unlabeled.items() if s in data.stain_set.all_names}
        if not pools:
            raise EmptyPool("unlabeled")
        unlabeled_sampler = MixtureSampler(pools)

    ss = np.random.SeedSequence(cfg.seed)
    s_init, s_labeled, s_unlabeled, s_aug = ss.spawn(4)
    rng_labeled = np.random.default_rng(s_labeled)
    rng_unlabeled = np.random.default_rng(s_unlabeled)
    rng_aug = np.random.default_rng(s_aug)

    model = Model(model_cfg, cfg.task, data.num_classes, seed=np.random.default_rng(s_init))
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    steps_per_epoch = max(1, math.ceil(data.n_real_labeled / cfg.batch_labeled))
    history: list[HistoryRow] = []
    best_val = math.inf
    best_epoch = 0
    best_state = model.state_dict()
    global_step = 0

    log.info(
        "training: task=%s stains=%s steps/epoch=%d params=%d",
        cfg.task,
        stain_names,
        steps_per_epoch,
        model.param_count(),
    )

    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        for _ in range(steps_per_epoch):
            report = _train_step(
                model, opt, sampler, unlabeled_sampler, references, cfg, data,
                rng_labeled, rng_unlabeled, rng_aug,
            )
            global_step += 1
            history.append(
                HistoryRow(
                    kind="step",
                    epoch=epoch,
                    step=global_step,
                    lr=opt.lr,
                    total=report.total,
                    supervised=report.supervised,
                    unsupervised=report.unsupervised,
                    cosines=tuple(report.per_block_cosine),
                )
            )

        val_loss = _validation_loss(model, data.val, cfg)
        history.append(
            HistoryRow(kind="val", epoch=epoch, step=global_step, lr=opt.lr, val_loss=val_loss)
        )
        if val_loss < best_val - cfg.val_improvement_eps:
            best_val = val_loss
            best_epoch = epoch
            best_state = model.state_dict()
        else:
            opt.lr = max(opt.lr * 0.1, cfg.lr_floor)
        log.info("epoch %d: val_loss=%.6f best=%.6f (epoch %d) lr=%.3g",
                 epoch, val_loss, best_val, best_epoch, opt.lr)
        if epoch - best_epoch >= cfg.resolved_patience:
            log.info("early stop: no improvement for %d epochs", cfg.resolved_patience)
            break

    final_state = model.state_dict()
    model.load_state_dict(best_state)
    result = TrainResult(
        best_state=best_state,
        final_state=final_state,
        history=history,
        best_epoch=best_epoch,
        best_val=best_val,
        epochs_run=epoch,
        model=model,
    )
    if out_dir is not None:
        write_outputs(result, cfg, model_cfg, Path(out_dir))
    return result


def _train_step(
    model: Model,
    opt: AdamW,
    sampler: MixtureSampler,
    unlabeled_sampler: Optional[MixtureSampler],
    references: Optional[ReferenceSampler],
    cfg: TrainConfig,
    data: DatasetBundle,
    rng_labeled: np.random.Generator,
    rng_unlabeled: np.random.Generator,
    rng_aug: np.random.Generator,
) -> LossReport:
    images, targets, _ = sample_labeled_batch(sampler, cfg.batch_labeled, rng_labeled, cfg.task)
    if cfg.stain_norm_aug != "none":
        images = [_stain_aug(img, cfg.stain_norm_aug, references, rng_aug) for img in images]
    x = _stack_images(images)
    logits = model.predict_mask(x) if cfg.task == "segmentation" else model.predict_class(x)
    sup = supervised_loss(logits, _stack_targets(targets, cfg.task), cfg.task)

    unsup_value = 0.0
    per_block: list[float] = []
    if cfg.fcl_enabled:
        raws, perturbed = [], []
        for _ in range(cfg.batch_unlabeled):
            stain, idx = unlabeled_sampler.draw(rng_unlabeled)
            raw = unlabeled_sampler.pools[stain].image(idx)
            raw, twin = make_unlabeled_pair(
                raw, references, rng_unlabeled, cfg.blur_kernel_choices, cfg.blur_sigma_range
            )
            raws.append(raw)
            perturbed.append(twin)
        real_pyr = model.encode(_stack_images(raws), detached=True)
        aug_pyr = model.encode(_stack_images(perturbed))
        unsup, per_block = fcl_loss(real_pyr, aug_pyr, cfg.fcl_blocks)
        unsup_value = float(unsup.value)
        loss = total_loss(sup, unsup, cfg.loss_weight)
    else:
        loss = sup

    zero_grad(model.params)
    backward(loss)
    opt.step()
    return make_report(sup, unsup_value, per_block, cfg.loss_weight if cfg.fcl_enabled else 0.0)


def _stain_aug(
    img: Image, kind: str, references: ReferenceSampler, rng: np.random.Generator
) -> Image:
    if kind == "reinhard":
        return reinhard_transfer(img, references.draw_profile(rng))
    src = macenko_fit(img)
    return macenko_transfer(img, src, references.draw_matrix(rng))


def write_outputs(
    result: TrainResult, cfg: TrainConfig, model_cfg: EncoderConfig, out_dir: Path
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [HISTORY_HEADER] + [row.csv() for row in result.history]
    (out_dir / "history.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    save_checkpoint(result.best_state, out_dir / "best.ckpt")
    save_checkpoint(result.final_state, out_dir / "final.ckpt")
    run_doc = {
        "config": asdict(cfg),
        "model": asdict(model_cfg),
        "seed": cfg.seed,
        "best_epoch": result.best_epoch,
        "best_val": result.best_val,
        "epochs_run": result.epochs_run,
        "git_hash": _git_hash(),
        "package_version": __version__,
        "created_unix": time.time(),
    }
    (out_dir / "run.json").write_text(json.dumps(run_doc, indent=2) + "\n", encoding="utf-8")
