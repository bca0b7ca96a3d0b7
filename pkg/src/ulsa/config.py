"""Run-configuration files: a TOML document with strict key checking.

Sections:
  [run]      method, task, seed, out_dir, runs
  [data]     manifest, synthetic_manifest, num_classes
  [train]    schedule/batch keys of TrainConfig (method-controlled flags are
             owned by [run].method and rejected here)
  [model]    num_blocks, base_channels
  [stains.X] role, dark, light, gamma     (optional; defaults ship built in)
  [translator] kind = "parametric" | "files", root (for kind = "files")

Unknown keys anywhere are hard errors; the resolved configuration is echoed
into run.json by the trainer.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import constants
from .errors import ConfigError
from .model import EncoderConfig
from .trainer import TrainConfig
from .translate import (
    FileImportTranslator,
    ParametricStain,
    ParametricTranslator,
    StainId,
    StainSet,
    Translator,
)

METHODS = {
    "ulsa": dict(translation_enabled=True, fcl_enabled=True, fcl_blocks="all", stain_norm_aug="none"),
    "baseline": dict(translation_enabled=False, fcl_enabled=False, fcl_blocks="all", stain_norm_aug="none"),
    "reinhard-norm": dict(translation_enabled=False, fcl_enabled=False, fcl_blocks="all", stain_norm_aug="reinhard"),
    "macenko-norm": dict(translation_enabled=False, fcl_enabled=False, fcl_blocks="all", stain_norm_aug="macenko"),
    "no_cgan": dict(translation_enabled=False, fcl_enabled=True, fcl_blocks="all", stain_norm_aug="none"),
    "no_fcl": dict(translation_enabled=True, fcl_enabled=False, fcl_blocks="all", stain_norm_aug="none"),
    "lb_fcl": dict(translation_enabled=True, fcl_enabled=True, fcl_blocks="last_only", stain_norm_aug="none"),
}
ABLATION_VARIANTS = ("ulsa", "no_cgan", "no_fcl", "lb_fcl")

_TRAIN_KEYS = {
    "loss_weight", "batch_total", "batch_labeled", "batch_unlabeled", "lr",
    "weight_decay", "lr_floor", "patience", "max_epochs", "blur_kernel_choices",
    "blur_sigma_range", "label_fraction", "val_improvement_eps",
}
_METHOD_OWNED = {"translation_enabled", "fcl_enabled", "fcl_blocks", "stain_norm_aug", "task", "seed"}


@dataclass
class RunConfig:
    method: str = "ulsa"
    task: str = "segmentation"
    seed: int = 0
    runs: int = 3
    out_dir: Path = Path("runs/out")
    manifest_path: Path = Path("bench/manifest.jsonl")
    synthetic_manifest: Optional[Path] = None
    num_classes: int = constants.NUM_SEG_CLASSES
    train: TrainConfig = field(default_factory=TrainConfig.desk_scale)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    stain_set: StainSet = field(default_factory=lambda: constants.DEFAULT_STAIN_SET)
    stain_params: dict[str, ParametricStain] = field(
        default_factory=lambda: dict(constants.DEFAULT_STAIN_PARAMS)
    )
    translator_kind: str = "parametric"
    translator_root: Optional[Path] = None

    def resolved_train(self, seed: Optional[int] = None) -> TrainConfig:
        """TrainConfig with the method selector's flags applied."""
        flags = METHODS[self.method]
        return replace(
            self.train,
            task=self.task,
            seed=self.seed if seed is None else seed,
            **flags,
        )

    def make_translator(self) -> Translator:
        if self.translator_kind == "parametric":
            return ParametricTranslator(self.stain_params)
        if self.translator_kind == "files":
            if self.translator_root is None:
                raise ConfigError("[translator] kind='files' needs a root directory")
            return FileImportTranslator.scan(self.translator_root)
        raise ConfigError(f"unknown translator kind {self.translator_kind!r}")


_SCHEMA: dict[str, tuple[str, ...]] = {
    "run": ("method", "task", "seed", "out_dir", "runs"),
    "data": ("manifest", "synthetic_manifest", "num_classes"),
    "train": tuple(sorted(_TRAIN_KEYS)),
    "model": ("num_blocks", "base_channels"),
    "stains.<name>": ("role", "dark", "light", "gamma"),
    "translator": ("kind", "root"),
}


def config_help() -> str:
    """Accepted config-file keys, generated from the parser's own schema."""
    lines = ["config file sections and keys (TOML):"]
    for section, keys in _SCHEMA.items():
        lines.append(f"  [{section}]: {', '.join(keys)}")
    lines.append(f"  [run].method choices: {', '.join(sorted(METHODS))}")
    return "\n".join(lines)


def _check_keys(section: str, doc: dict, allowed: set[str]) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"[{section}]: unknown keys {sorted(unknown)}")


def _coerce(section: str, key: str, value: Any, kind: type) -> Any:
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"[{section}].{key}: expected {kind.__name__}, got {value!r}")
    return value


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}")

    _check_keys("<root>", doc, {"run", "data", "train", "model", "stains", "translator"})
    cfg = RunConfig()

    run = doc.get("run", {})
    _check_keys("run", run, {"method", "task", "seed", "out_dir", "runs"})
    cfg.method = _coerce("run", "method", run.get("method", cfg.method), str)
    if cfg.method not in METHODS:
        raise ConfigError(f"[run].method must be one of {sorted(METHODS)}, got {cfg.method!r}")
    cfg.task = _coerce("run", "task", run.get("task", cfg.task), str)
    if cfg.task not in ("segmentation", "classification"):
        raise ConfigError(f"[run].task must be segmentation or classification, got {cfg.task!r}")
    cfg.seed = _coerce("run", "seed", run.get("seed", cfg.seed), int)
    cfg.runs = _coerce("run", "runs", run.get("runs", cfg.runs), int)
    if "out_dir" in run:
        cfg.out_dir = Path(_coerce("run", "out_dir", run["out_dir"], str))

    data = doc.get("data", {})
    _check_keys("data", data, {"manifest", "synthetic_manifest", "num_classes"})
    if "manifest" in data:
        cfg.manifest_path = Path(_coerce("data", "manifest", data["manifest"], str))
    if not cfg.manifest_path.is_absolute():
        cfg.manifest_path = path.parent / cfg.manifest_path
    if "synthetic_manifest" in data:
        p = Path(_coerce("data", "synthetic_manifest", data["synthetic_manifest"], str))
        cfg.synthetic_manifest = p if p.is_absolute() else path.parent / p
    cfg.num_classes = _coerce("data", "num_classes", data.get("num_classes", cfg.num_classes), int)

    train = dict(doc.get("train", {}))
    owned = set(train) & _METHOD_OWNED
    if owned:
        raise ConfigError(
            f"[train]: keys {sorted(owned)} are controlled by [run].method / [run]; remove them"
        )
    _check_keys("train", train, _TRAIN_KEYS)
    kwargs: dict[str, Any] = {}
    for key, kind in (
        ("loss_weight", float), ("batch_total", int), ("batch_labeled", int),
        ("batch_unlabeled", int), ("lr", float), ("weight_decay", float),
        ("lr_floor", float), ("patience", int), ("max_epochs", int),
        ("label_fraction", float), ("val_improvement_eps", float),
    ):
        if key in train:
            kwargs[key] = _coerce("train", key, train[key], kind)
    if "blur_kernel_choices" in train:
        kwargs["blur_kernel_choices"] = tuple(
            _coerce("train", "blur_kernel_choices", k, int) for k in train["blur_kernel_choices"]
        )
    if "blur_sigma_range" in train:
        lo, hi = train["blur_sigma_range"]
        kwargs["blur_sigma_range"] = (float(lo), float(hi))
    base = TrainConfig.desk_scale()
    try:
        cfg.train = replace(base, **kwargs)
    except Exception as exc:  # dataclass validation
        raise ConfigError(f"[train]: {exc}")

    model = doc.get("model", {})
    _check_keys("model", model, {"num_blocks", "base_channels"})
    cfg.model = EncoderConfig(
        num_blocks=_coerce("model", "num_blocks", model.get("num_blocks", 4), int),
        base_channels=_coerce("model", "base_channels", model.get("base_channels", 16), int),
    )

    stains = doc.get("stains", {})
    if stains:
        sources, targets, params = [], [], {}
        for name, body in stains.items():
            _check_keys(f"stains.{name}", body, {"role", "dark", "light", "gamma"})
            role = _coerce(f"stains.{name}", "role", body.get("role", ""), str)
            if role not in ("source", "target"):
                raise ConfigError(f"[stains.{name}].role must be source or target")
            try:
                params[name] = ParametricStain(
                    dark=tuple(body["dark"]), light=tuple(body["light"]),
                    gamma=float(body.get("gamma", 1.0)),
                )
            except KeyError as exc:
                raise ConfigError(f"[stains.{name}]: missing {exc}")
            except Exception as exc:
                raise ConfigError(f"[stains.{name}]: {exc}")
            (sources if role == "source" else targets).append(StainId(name, role))
        try:
            cfg.stain_set = StainSet(tuple(sources), tuple(targets))
        except Exception as exc:
            raise ConfigError(f"[stains]: {exc}")
        cfg.stain_params = params

    translator = doc.get("translator", {})
    _check_keys("translator", translator, {"kind", "root"})
    cfg.translator_kind = _coerce("translator", "kind", translator.get("kind", "parametric"), str)
    if cfg.translator_kind not in ("parametric", "files"):
        raise ConfigError(f"[translator].kind must be parametric or files")
    if "root" in translator:
        p = Path(_coerce("translator", "root", translator["root"], str))
        cfg.translator_root = p if p.is_absolute() else path.parent / p

    return cfg
