"""Stain translation: turning labeled images of one stain into synthetic
labeled images of another, with the annotation carried over untouched.

Translators are pluggable. The parametric translator models each synthetic
stain as a one-dimensional density ramp between a light background color and
a dark fully-stained color with a gamma nonlinearity; translation inverts the
source ramp per pixel and re-renders under the destination ramp, so structure
is preserved by construction. The file-import translator serves externally
produced translations (e.g. from an image-to-image network trained elsewhere)
straight from disk, keyed by source filename.
"""

from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from .errors import MissingTranslator, TranslationFailed, UlsaError
from .imagecore import Image, read_png, write_png
from .manifest import Manifest, Record

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StainId:
    name: str
    role: str  # "source" | "target"

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise UlsaError(f"stain role must be source or target, got {self.role!r}")
        if not self.name:
            raise UlsaError("stain name must be non-empty")


@dataclass(frozen=True)
class StainSet:
    sources: tuple[StainId, ...]
    targets: tuple[StainId, ...]

    def __post_init__(self):
        if not self.sources or not self.targets:
            raise UlsaError("need at least one source and one target stain")
        names = [s.name for s in self.sources] + [t.name for t in self.targets]
        if len(set(names)) != len(names):
            raise UlsaError(f"stain names must be unique, got {names}")

    @property
    def source_names(self) -> list[str]:
        return [s.name for s in self.sources]

    @property
    def target_names(self) -> list[str]:
        return [t.name for t in self.targets]

    @property
    def all_names(self) -> list[str]:
        return self.source_names + self.target_names

    @staticmethod
    def from_names(sources: list[str], targets: list[str]) -> "StainSet":
        return StainSet(
            tuple(StainId(n, "source") for n in sources),
            tuple(StainId(n, "target") for n in targets),
        )


@dataclass(frozen=True)
class ParametricStain:
    """A synthetic stain: lerp(light, dark, density**gamma) per pixel."""

    dark: np.ndarray  # RGB at density 1
    light: np.ndarray  # RGB at density 0 (background)
    gamma: float = 1.0

    def __post_init__(self):
        dark = np.asarray(self.dark, dtype=np.float64).reshape(3)
        light = np.asarray(self.light, dtype=np.float64).reshape(3)
        object.__setattr__(self, "dark", dark)
        object.__setattr__(self, "light", light)
        if np.any(dark < 0) or np.any(dark > 1) or np.any(light < 0) or np.any(light > 1):
            raise UlsaError("stain colors must lie in [0,1]^3")
        if not np.all(light > dark):
            raise UlsaError("light color must be strictly brighter than dark per channel")
        if not (0.5 <= self.gamma <= 2.0):
            raise UlsaError(f"gamma must be in [0.5, 2], got {self.gamma}")

    def render(self, density: np.ndarray) -> Image:
        """Render a [0,1] density field (H, W) under this stain."""
        d = np.clip(np.asarray(density, dtype=np.float64), 0.0, 1.0)
        t = np.power(d, self.gamma)[..., None]
        return Image.from_array(self.light + (self.dark - self.light) * t)

    def density_of(self, img: Image) -> np.ndarray:
        """Recover the density field from a rendered image.

        Least-squares projection of each pixel onto the light->dark color
        line, clamped to [0,1], then the inverse gamma.
        """
        axis = self.dark - self.light
        t = (img.pixels - self.light) @ axis / float(axis @ axis)
        t = np.clip(t, 0.0, 1.0)
        return np.power(t, 1.0 / self.gamma)


def parametric_translate(img: Image, src: ParametricStain, dst: ParametricStain) -> Image:
    """Re-render an image from one parametric stain into another."""
    return dst.render(src.density_of(img))


class Translator(Protocol):
    def pairs(self) -> set[tuple[str, str]]:
        """Ordered (src, dst) stain-name pairs this translator covers."""
        ...

    def translate(self, img: Image, src: str, dst: str, stem: Optional[str] = None) -> Image:
        ...


@dataclass(frozen=True)
class ParametricTranslator:
    """Covers every ordered pair among its configured stains."""

    stains: dict[str, ParametricStain]

    def pairs(self) -> set[tuple[str, str]]:
        names = list(self.stains)
        return {(a, b) for a in names for b in names if a != b}

    def translate(self, img: Image, src: str, dst: str, stem: Optional[str] = None) -> Image:
        if src == dst:
            raise UlsaError("translation requires src != dst")
        if src not in self.stains or dst not in self.stains:
            raise MissingTranslator(f"no parametric stain for pair ({src}, {dst})")
        return parametric_translate(img, self.stains[src], self.stains[dst])


@dataclass(frozen=True)
class FileImportTranslator:
    """Serves pre-rendered translations from `<root>/<src>_to_<dst>/<stem>.png`."""

    root: Path
    covered: frozenset[tuple[str, str]] = field(default_factory=frozenset)

    @staticmethod
    def scan(root: str | Path) -> "FileImportTranslator":
        root = Path(root)
        pairs = set()
        for d in sorted(root.glob("*_to_*")):
            if d.is_dir():
                src, _, dst = d.name.partition("_to_")
                pairs.add((src, dst))
        return FileImportTranslator(root, frozenset(pairs))

    def pairs(self) -> set[tuple[str, str]]:
        return set(self.covered)

    def translate(self, img: Image, src: str, dst: str, stem: Optional[str] = None) -> Image:
        if src == dst:
            raise UlsaError("translation requires src != dst")
        if stem is None:
            raise TranslationFailed("file-import translation needs the source filename stem")
        path = self.root / f"{src}_to_{dst}" / f"{stem}.png"
        if not path.is_file():
            raise TranslationFailed(f"no pre-rendered translation at {path}")
        return read_png(path)


def check_registry_complete(translator: Translator, stains: StainSet) -> None:
    """Fail fast unless every ordered source->target pair is covered."""
    have = translator.pairs()
    need = {(s, t) for s in stains.source_names for t in stains.target_names}
    missing = sorted(need - have)
    if missing:
        raise MissingTranslator(f"translator missing pairs {missing}")


def batch_translate(
    manifest_in: Manifest,
    dst: str,
    out_dir: str | Path,
    translator: Translator,
) -> tuple[Manifest, list[str]]:
    """Translate every record of a manifest into stain `dst`.

    Writes one PNG per input record (deterministically named from the input
    filename), copies labels and mask files untouched, and returns a manifest
    whose records carry stain=dst and origin="synthetic". Per-record failures
    are collected and returned, not raised; the failing records are skipped.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(exist_ok=True)
    except OSError as exc:
        raise UlsaError(f"cannot create output directory {out_dir}: {exc}") from exc

    out_records: list[Record] = []
    errors: list[str] = []
    for rec in manifest_in.records:
        stem = Path(rec.image_path).stem
        try:
            if rec.stain == dst:
                raise TranslationFailed(f"{rec.image_path}: already stain {dst}")
            img = read_png(manifest_in.image_file(rec))
            translated = translator.translate(img, rec.stain, dst, stem=stem)
            if (translated.height, translated.width) != (img.height, img.width):
                raise TranslationFailed(f"{rec.image_path}: translator changed dimensions")
        except (UlsaError, OSError) as exc:
            errors.append(f"{rec.image_path}: {exc}")
            continue

        out_name = f"{stem}_to_{dst}.png"
        write_png(translated, out_dir / out_name)
        mask_rel = None
        if rec.mask_path is not None:
            mask_name = f"{stem}_to_{dst}_mask.png"
            shutil.copyfile(manifest_in.mask_file(rec), out_dir / "masks" / mask_name)
            mask_rel = f"masks/{mask_name}"
        out_records.append(
            replace(rec, image_path=out_name, mask_path=mask_rel, stain=dst, origin="synthetic")
        )

    if errors:
        log.warning("batch_translate: skipped %d/%d records", len(errors), len(manifest_in.records))
    return Manifest(out_records, base_dir=out_dir, image_size=manifest_in.image_size), errors
