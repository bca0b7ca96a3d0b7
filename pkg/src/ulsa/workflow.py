"""End-to-end orchestration shared by the CLI and the release-gate tests:
label subsetting, offline translation of the labeled pool, training with one
or more seeds, and evaluation over run directories.
"""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .config import ABLATION_VARIANTS, RunConfig
from .datagen import subset_labels
from .errors import UlsaError
from .manifest import Manifest, merge
from .metrics import EvalReport, evaluate
from .model import Model
from .numerics import load_checkpoint
from .trainer import DatasetBundle, TrainResult, train
from .translate import Translator, batch_translate, check_registry_complete

log = logging.getLogger(__name__)


def labeled_source_manifest(manifest: Manifest, source_names: list[str]) -> Manifest:
    records = [
        r
        for r in manifest.records
        if r.split == "train" and r.labeled and r.stain in source_names
    ]
    return Manifest(records, base_dir=manifest.base_dir, image_size=manifest.image_size)


def translate_labeled_pool(
    manifest: Manifest,
    cfg: RunConfig,
    out_dir: Path,
    translator: Optional[Translator] = None,
) -> Manifest:
    """Translate every labeled source train record into every target stain.

    Writes one subdirectory per target under `out_dir` and returns the merged
    synthetic manifest (also saved as out_dir/synthetic.jsonl).
    """
    translator = translator or cfg.make_translator()
    check_registry_complete(translator, cfg.stain_set)
    src = labeled_source_manifest(manifest, cfg.stain_set.source_names)
    parts = []
    total_errors: list[str] = []
    for target in cfg.stain_set.target_names:
        part, errors = batch_translate(src, target, out_dir / target, translator)
        total_errors.extend(errors)
        parts.append(part)
    if total_errors:
        log.warning("translation skipped %d records", len(total_errors))
    synthetic = merge(parts, out_dir)
    synthetic.save(out_dir / "synthetic.jsonl")
    return synthetic


def prepare_manifests(cfg: RunConfig, work_dir: Path) -> tuple[Manifest, Optional[Manifest]]:
    """Load the benchmark manifest, apply the label fraction, and produce the
    synthetic manifest when the method trains on translations."""
    manifest = Manifest.load(cfg.manifest_path)
    if cfg.train.label_fraction < 1.0:
        manifest = subset_labels(manifest, cfg.train.label_fraction, seed=cfg.seed)
    needs_translation = cfg.resolved_train().translation_enabled
    if not needs_translation:
        return manifest, None
    if cfg.synthetic_manifest is not None and cfg.train.label_fraction >= 1.0:
        return manifest, Manifest.load(cfg.synthetic_manifest)
    synthetic = translate_labeled_pool(manifest, cfg, work_dir / "synthetic")
    return manifest, synthetic


def run_training(cfg: RunConfig, out_dir: Path, seed: Optional[int] = None) -> TrainResult:
    """One full training run into `out_dir` (history, checkpoints, run.json)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest, synthetic = prepare_manifests(cfg, out_dir)
    train_cfg = cfg.resolved_train(seed)
    bundle = DatasetBundle.from_manifests(
        manifest,
        cfg.stain_set,
        cfg.task,
        cfg.num_classes,
        synthetic=synthetic,
    )
    return train(train_cfg, bundle, cfg.model, out_dir=out_dir)


def run_seeds(cfg: RunConfig, out_root: Path, seeds: Sequence[int]) -> list[Path]:
    """Train once per seed into out_root/seed<k>; returns the run directories."""
    dirs = []
    for seed in seeds:
        run_dir = Path(out_root) / f"seed{seed}"
        log.info("training %s seed=%d -> %s", cfg.method, seed, run_dir)
        run_training(cfg, run_dir, seed=seed)
        dirs.append(run_dir)
    return dirs


def load_run_model(cfg: RunConfig, run_dir: Path, which: str = "best") -> Model:
    state = load_checkpoint(Path(run_dir) / f"{which}.ckpt")
    model = Model(cfg.model, cfg.task, cfg.num_classes, seed=0)
    model.load_state_dict(state)
    return model


def evaluate_runs(cfg: RunConfig, run_dirs: Sequence[Path], which: str = "best") -> EvalReport:
    manifest = Manifest.load(cfg.manifest_path)
    models = [load_run_model(cfg, d, which) for d in run_dirs]
    if not models:
        raise UlsaError("no run directories to evaluate")
    return evaluate(models, manifest, cfg.task, cfg.stain_set, cfg.num_classes)


def run_method(cfg: RunConfig, method: str, out_root: Path, seeds: Sequence[int]) -> EvalReport:
    """Train `method` for every seed and evaluate the best checkpoints."""
    mcfg = replace_method(cfg, method)
    dirs = run_seeds(mcfg, Path(out_root) / method, seeds)
    report = evaluate_runs(mcfg, dirs)
    report.save(Path(out_root) / method)
    return report


def replace_method(cfg: RunConfig, method: str) -> RunConfig:
    return replace(cfg, method=method)


def sweep_label_fractions(
    cfg: RunConfig, fractions: Sequence[float], out_root: Path, seeds: Sequence[int]
) -> dict[float, EvalReport]:
    """Label-efficiency sweep: one method trained at several label budgets."""
    reports: dict[float, EvalReport] = {}
    for fraction in fractions:
        fcfg = replace(cfg, train=replace(cfg.train, label_fraction=fraction))
        tag = f"frac{fraction:g}".replace(".", "p")
        dirs = run_seeds(fcfg, Path(out_root) / tag, seeds)
        report = evaluate_runs(fcfg, dirs)
        report.save(Path(out_root) / tag)
        reports[fraction] = report
    return reports


def run_ablations(cfg: RunConfig, out_root: Path, seeds: Sequence[int]) -> dict[str, EvalReport]:
    return {m: run_method(cfg, m, out_root, seeds) for m in ABLATION_VARIANTS}
