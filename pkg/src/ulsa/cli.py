"""Command-line interface: the whole workflow as batch subcommands.

generate      build the synthetic multi-stain benchmark
translate     render the labeled source pool into every target stain
fit-reference fit a recolor profile or stain basis from one image
normalize     recolor a manifest's images against a fitted reference
train         train one method (one or more seeds)
evaluate      score trained checkpoints on the test split, per stain
sweep-labels  repeat training across label fractions
ablate        train the method-variant set and compare
selftest      run the built-in oracle checks

Logs go to stderr; data goes to files (or stdout for reports). Exit codes:
0 success, 2 configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from . import __version__, constants
from .config import ABLATION_VARIANTS, config_help, load_run_config
from .errors import ConfigError, UlsaError
from .imagecore import read_png, write_png
from .manifest import Manifest
from .workflow import (
    evaluate_runs,
    run_ablations,
    run_seeds,
    sweep_label_fractions,
    translate_labeled_pool,
)

log = logging.getLogger("ulsa")


@contextmanager
def _run_lock(out_dir: Path):
    """One writer per run directory; stale locks must be removed by hand."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".ulsa.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UlsaError(f"{out_dir} is locked by another run; remove {lock} if stale")
    os.write(fd, f"{os.getpid()}\n".encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _resolve(args, cfg):
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "runs", None) is not None:
        cfg.runs = args.runs
    if args.out is not None:
        cfg.out_dir = Path(args.out)
    return cfg


def _seeds(cfg) -> list[int]:
    return [cfg.seed + i for i in range(cfg.runs)]


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    from .datagen import make_benchmark

    kwargs = {}
    if args.config:
        cfg = load_run_config(args.config)
        kwargs["stain_set"] = cfg.stain_set
        kwargs["stain_params"] = cfg.stain_params
    out = Path(args.out)
    with _run_lock(out):
        manifest = make_benchmark(
            out,
            n_labeled_source=args.n_labeled,
            n_unlabeled_per_stain=args.n_unlabeled,
            n_val=args.n_val,
            n_test=args.n_test,
            task=args.task,
            seed=args.seed if args.seed is not None else 0,
            **kwargs,
        )
    log.info("wrote %d records to %s", len(manifest.records), out / "manifest.jsonl")
    print(out / "manifest.jsonl")
    return 0


def cmd_translate(args) -> int:
    cfg = _resolve(args, load_run_config(args.config))
    out = Path(args.out) if args.out else cfg.out_dir / "synthetic"
    manifest = Manifest.load(cfg.manifest_path)
    with _run_lock(out):
        synthetic = translate_labeled_pool(manifest, cfg, out)
    log.info("translated %d records into %s", len(synthetic.records), out)
    print(out / "synthetic.jsonl")
    return 0


def cmd_fit_reference(args) -> int:
    from .stainnorm import macenko_fit, profile_of

    img = read_png(args.image)
    ref = profile_of(img) if args.method == "reinhard" else macenko_fit(img)
    Path(args.out).write_text(ref.to_json() + "\n", encoding="utf-8")
    log.info("wrote %s reference to %s", args.method, args.out)
    return 0


def cmd_normalize(args) -> int:
    from .stainnorm import StainMatrix, StainProfile, load_reference, macenko_fit, macenko_transfer, reinhard_transfer

    ref = load_reference(args.reference)
    manifest = Manifest.load(args.manifest)
    out = Path(args.out)
    with _run_lock(out):
        records = []
        for i, rec in enumerate(manifest.records):
            img = read_png(manifest.image_file(rec))
            if isinstance(ref, StainProfile):
                norm = reinhard_transfer(img, ref)
            else:
                norm = macenko_transfer(img, macenko_fit(img), ref)
            name = f"{i:06d}_{Path(rec.image_path).stem}.png"
            write_png(norm, out / name)
            records.append(
                type(rec)(
                    image_path=name,
                    stain=rec.stain,
                    split=rec.split,
                    patient_id=rec.patient_id,
                    label=rec.label,
                    mask_path=None,
                    origin=rec.origin,
                )
            )
        normed = Manifest(records, base_dir=out, image_size=manifest.image_size)
        normed.save(out / "manifest.jsonl")
    log.info("normalized %d images into %s", len(records), out)
    print(out / "manifest.jsonl")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args, load_run_config(args.config))
    with _run_lock(cfg.out_dir):
        dirs = run_seeds(cfg, cfg.out_dir, _seeds(cfg))
        report = evaluate_runs(cfg, dirs)
        report.save(cfg.out_dir)
    print(report.render_text())
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve(args, load_run_config(args.config))
    run_dirs = [Path(d) for d in args.run_dir] if args.run_dir else sorted(
        p for p in cfg.out_dir.glob("seed*") if p.is_dir()
    )
    if not run_dirs:
        raise ConfigError(f"no run directories given and none found under {cfg.out_dir}")
    report = evaluate_runs(cfg, run_dirs, which=args.checkpoint)
    out = Path(args.report_out) if args.report_out else cfg.out_dir
    report.save(out)
    if args.svg:
        _bar_chart(
            {s: report.stain_mean(s) for s in report.stains},
            report.metric_name,
            out / "report.svg",
        )
    print(report.render_text())
    return 0


def cmd_sweep_labels(args) -> int:
    cfg = _resolve(args, load_run_config(args.config))
    fractions = [float(f) for f in args.fractions.split(",")]
    if any(not (0.0 < f <= 1.0) for f in fractions):
        raise ConfigError(f"fractions must lie in (0, 1], got {fractions}")
    with _run_lock(cfg.out_dir):
        reports = sweep_label_fractions(cfg, fractions, cfg.out_dir, _seeds(cfg))
        summary = {
            f"{f:g}": {
                "overall_mean": rep.overall_mean,
                "overall_std": rep.overall_std,
                "per_stain": {s: rep.stain_mean(s) for s in rep.stains},
            }
            for f, rep in reports.items()
        }
        (cfg.out_dir / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n", "utf-8")
        if args.svg:
            _line_chart(
                sorted((f, rep.overall_mean) for f, rep in reports.items()),
                "label fraction",
                reports[fractions[0]].metric_name,
                cfg.out_dir / "sweep.svg",
            )
    for f in sorted(reports):
        rep = reports[f]
        print(f"fraction {f:g}: overall {rep.overall_mean:.4f} (std {rep.overall_std:.4f})")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve(args, load_run_config(args.config))
    with _run_lock(cfg.out_dir):
        reports = run_ablations(cfg, cfg.out_dir, _seeds(cfg))
        summary = {
            m: {"overall_mean": rep.overall_mean, "overall_std": rep.overall_std}
            for m, rep in reports.items()
        }
        (cfg.out_dir / "ablations.json").write_text(json.dumps(summary, indent=2) + "\n", "utf-8")
        if args.svg:
            _bar_chart(
                {m: rep.overall_mean for m, rep in reports.items()},
                reports["ulsa"].metric_name,
                cfg.out_dir / "ablations.svg",
            )
    for m in ABLATION_VARIANTS:
        rep = reports[m]
        print(f"{m:>8}: overall {rep.overall_mean:.4f} (std {rep.overall_std:.4f})")
    return 0


def cmd_selftest(args) -> int:
    from .selfcheck import run_all

    results = run_all(seed=args.seed if args.seed is not None else 0)
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += 0 if ok else 1
    return 0 if failed == 0 else 1


# --------------------------------------------------------------------------
# plotting helpers (optional dependency)


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("svg")
        import matplotlib.pyplot as plt

        return plt
    except ImportError:
        raise UlsaError("SVG output needs matplotlib (pip install 'ulsa[plots]')")


def _bar_chart(values: dict[str, float], ylabel: str, path: Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(list(values), [v * 100 for v in values.values()], color="#4878a8")
    ax.set_ylabel(f"{ylabel} (%)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    log.info("wrote %s", path)


def _line_chart(points: list[tuple[float, float]], xlabel: str, ylabel: str, path: Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot([p[0] for p in points], [p[1] * 100 for p in points], marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(f"{ylabel} (%)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    log.info("wrote %s", path)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ulsa",
        description=__doc__,
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"ulsa {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more stderr logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, runs=False):
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=str, default=None, help="override the output directory")
        if runs:
            p.add_argument("--runs", type=int, default=None,
                           help="repeat with seed+i and aggregate mean/std (default 3)")

    p = sub.add_parser("generate", help="build the synthetic multi-stain benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="optional config for custom stains")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-labeled", type=int, default=constants.DEFAULT_N_LABELED)
    p.add_argument("--n-unlabeled", type=int, default=constants.DEFAULT_N_UNLABELED)
    p.add_argument("--n-val", type=int, default=constants.DEFAULT_N_VAL)
    p.add_argument("--n-test", type=int, default=constants.DEFAULT_N_TEST)
    p.add_argument("--task", choices=("segmentation", "classification"), default="segmentation")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser(
        "translate",
        help="render the labeled source pool into every target stain",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", required=True)
    common(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("fit-reference", help="fit a recolor profile or stain basis")
    p.add_argument("--image", required=True)
    p.add_argument("--method", choices=("reinhard", "macenko"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_reference)

    p = sub.add_parser("normalize", help="recolor a manifest against a reference")
    p.add_argument("--manifest", required=True)
    p.add_argument("--reference", required=True, help="JSON from fit-reference")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser(
        "train",
        help="train the configured method",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", required=True)
    common(p, runs=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score trained checkpoints per stain")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", action="append", default=None, help="repeatable")
    p.add_argument("--checkpoint", choices=("best", "final"), default="best")
    p.add_argument("--report-out", default=None)
    p.add_argument("--svg", action="store_true", help="also write an SVG chart")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-labels", help="repeat training across label fractions")
    p.add_argument("--config", required=True)
    p.add_argument("--fractions", default="0.1,0.25,0.5,1.0")
    p.add_argument("--svg", action="store_true")
    common(p, runs=True)
    p.set_defaults(func=cmd_sweep_labels)

    p = sub.add_parser("ablate", help=f"train the variant set {ABLATION_VARIANTS}")
    p.add_argument("--config", required=True)
    p.add_argument("--svg", action="store_true")
    common(p, runs=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(
        stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except UlsaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
