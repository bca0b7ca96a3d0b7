"""Synthetic multi-stain benchmark generation plus tile extraction.

Scenes are smooth random blob layouts over three classes (background,
tubule-like, glomerulus-like). Each scene yields a density field in [0, 1]
whose level encodes the class, so structure is recoverable from color under
any parametric stain, and an integer ground-truth mask. Rendering the same
scene under several stains produces pixel-aligned multi-stain data with
shared masks — the property the whole benchmark leans on.

Also here: grid tiling with per-stain tissue thresholds for importing large
images, and seed-deterministic label-fraction subsetting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import constants
from .errors import UlsaError
from .imagecore import Image, resize_bilinear, write_mask_png, write_png
from .manifest import Manifest, Record
from .translate import ParametricStain, StainSet


@dataclass(frozen=True)
class SceneSpec:
    size: int = constants.DEFAULT_IMAGE_SIZE
    tubule_count: tuple[int, int] = (3, 7)  # inclusive range
    tubule_radius: tuple[float, float] = (3.0, 6.5)
    glom_count: tuple[int, int] = (1, 2)
    glom_radius: tuple[float, float] = (7.0, 12.0)
    # tight class margins: under a gamma-warped stain the normalized-intensity
    # decision boundaries shift into the noise band, which is the domain gap
    class_density: tuple[float, float, float] = (0.15, 0.5, 0.85)
    noise_scale: float = 0.1

    def __post_init__(self):
        if self.size < 16:
            raise UlsaError("scene size must be >= 16")


def _smooth_noise(size: int, rng: np.random.Generator) -> np.ndarray:
    """Band-limited noise in [-1, 1]: a coarse grid upsampled bilinearly."""
    coarse = rng.normal(0.0, 1.0, size=(size // 8 + 2, size // 8 + 2))
    img = Image.from_array(np.repeat(coarse[:, :, None], 3, axis=2) * 0.25 + 0.5)
    up = resize_bilinear(img, size, size).pixels[:, :, 0]
    out = (up - 0.5) * 4.0
    return np.clip(out, -1.0, 1.0)


def _paint_ellipses(
    mask: np.ndarray,
    cls: int,
    count: int,
    radius_range: tuple[float, float],
    rng: np.random.Generator,
) -> None:
    """Rasterize `count` random ellipses of class `cls` onto background pixels."""
    size = mask.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(count):
        a = rng.uniform(*radius_range)
        b = rng.uniform(*radius_range)
        cy = rng.uniform(a, size - a)
        cx = rng.uniform(b, size - b)
        theta = rng.uniform(0.0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        mask[inside & (mask == 0)] = cls


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One scene: (density field in [0,1] of shape (H, W), int mask (H, W)).

    Glomerulus-like blobs are placed first, tubule-like ones only on remaining
    background, so class regions are disjoint by construction.
    """
    mask = np.zeros((spec.size, spec.size), dtype=np.int64)
    n_glom = int(rng.integers(spec.glom_count[0], spec.glom_count[1] + 1))
    n_tub = int(rng.integers(spec.tubule_count[0], spec.tubule_count[1] + 1))
    _paint_ellipses(mask, 2, n_glom, spec.glom_radius, rng)
    _paint_ellipses(mask, 1, n_tub, spec.tubule_radius, rng)
    base = np.asarray(spec.class_density)[mask]
    density = np.clip(base + spec.noise_scale * _smooth_noise(spec.size, rng), 0.0, 1.0)
    return density, mask


def render_stain(density: np.ndarray, stain: ParametricStain) -> Image:
    """Per-pixel lerp(light, dark, density**gamma)."""
    return stain.render(density)


def tile_and_filter(
    img: Image,
    stain: str,
    tile: int = 512,
    stride: int = 512,
    thresholds: dict[str, float] | None = None,
    min_tissue_fraction: float = constants.DEFAULT_MIN_TISSUE_FRACTION,
) -> list[tuple[Image, tuple[int, int]]]:
    """Grid-tile a large image, keeping tiles with enough tissue.

    A pixel counts as tissue when its channel-mean brightness falls below the
    stain's threshold; a tile is kept iff its tissue fraction >= the minimum.
    Returns (tile, (row, col)) pairs in row-major order.
    """
    if img.height < tile or img.width < tile:
        raise UlsaError(f"image {img.height}x{img.width} smaller than tile {tile}")
    thresholds = thresholds or constants.DEFAULT_TISSUE_THRESHOLDS
    threshold = thresholds.get(stain, constants.DEFAULT_TISSUE_THRESHOLD)
    brightness = img.pixels.mean(axis=2)
    kept = []
    for y in range(0, img.height - tile + 1, stride):
        for x in range(0, img.width - tile + 1, stride):
            patch = brightness[y : y + tile, x : x + tile]
            if (patch < threshold).mean() >= min_tissue_fraction:
                kept.append((Image(img.pixels[y : y + tile, x : x + tile].copy()), (y, x)))
    return kept


def _classification_label(mask: np.ndarray) -> int:
    return int(np.any(mask == 2))


def make_benchmark(
    out_dir: str | Path,
    stain_set: StainSet = constants.DEFAULT_STAIN_SET,
    stain_params: dict[str, ParametricStain] | None = None,
    n_labeled_source: int = constants.DEFAULT_N_LABELED,
    n_unlabeled_per_stain: int = constants.DEFAULT_N_UNLABELED,
    n_val: int = constants.DEFAULT_N_VAL,
    n_test: int = constants.DEFAULT_N_TEST,
    task: str = "segmentation",
    spec: SceneSpec | None = None,
    seed: int = 0,
) -> Manifest:
    """Write a full benchmark directory and its manifest.

    Labeled train/val exist for source stains only. Test scenes are rendered
    under *every* stain with shared ground truth (targets are test-only, used
    purely for evaluation). Unlabeled pools get fresh scenes per stain. One
    scene is one patient, so split disjointness holds by construction.
    """
    if len(stain_set.all_names) < 2:
        raise UlsaError("need at least 2 stains")
    stain_params = stain_params or constants.DEFAULT_STAIN_PARAMS
    for name in stain_set.all_names:
        if name not in stain_params:
            raise UlsaError(f"no parametric stain registered for {name!r}")
    spec = spec or (
        SceneSpec() if task == "segmentation" else SceneSpec(glom_count=(0, 1))
    )
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UlsaError(f"cannot create benchmark directory {out_dir}: {exc}") from exc

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    records: list[Record] = []
    patient = 0

    def next_patient() -> str:
        nonlocal patient
        patient += 1
        return f"p{patient:06d}"

    def emit(
        scene_tag: str,
        stain: str,
        split: str,
        pid: str,
        density: np.ndarray,
        mask: np.ndarray,
        labeled: bool,
    ) -> None:
        sub = out_dir / split / stain
        sub.mkdir(parents=True, exist_ok=True)
        img_rel = f"{split}/{stain}/{scene_tag}.png"
        write_png(render_stain(density, stain_params[stain]), out_dir / img_rel)
        label = None
        mask_rel = None
        if labeled:
            if task == "segmentation":
                mask_rel = f"{split}/{stain}/{scene_tag}_mask.png"
                write_mask_png(mask, out_dir / mask_rel)
            else:
                label = _classification_label(mask)
        records.append(
            Record(
                image_path=img_rel,
                stain=stain,
                split=split,
                patient_id=pid,
                label=label,
                mask_path=mask_rel,
                origin="real",
            )
        )

    sources = stain_set.source_names
    # labeled source data: train + val, round-robin over sources
    for split, count in (("train", n_labeled_source), ("val", n_val)):
        for i in range(count):
            density, mask = generate_scene(spec, rng)
            emit(f"{split}{i:05d}", sources[i % len(sources)], split, next_patient(), density, mask, True)

    # shared test scenes rendered under every stain
    for i in range(n_test):
        density, mask = generate_scene(spec, rng)
        pid = next_patient()
        for stain in stain_set.all_names:
            emit(f"test{i:05d}", stain, "test", pid, density, mask, True)

    # unlabeled pools, fresh scenes per stain
    for stain in stain_set.all_names:
        for i in range(n_unlabeled_per_stain):
            density, mask = generate_scene(spec, rng)
            emit(f"u{i:05d}", stain, "train", next_patient(), density, mask, False)

    manifest = Manifest(records, base_dir=out_dir, image_size=(spec.size, spec.size))
    manifest.check_split_disjointness()
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def subset_labels(manifest: Manifest, fraction: float, seed: int) -> Manifest:
    """Keep ceil(fraction * n) labeled train records, chosen by one fixed
    seed-deterministic shuffle so smaller fractions nest inside larger ones.
    Unlabeled and val/test records pass through untouched."""
    if not (0.0 < fraction <= 1.0):
        raise UlsaError(f"fraction must be in (0, 1], got {fraction}")
    labeled_idx = [
        i for i, r in enumerate(manifest.records) if r.split == "train" and r.labeled
    ]
    keep_n = math.ceil(fraction * len(labeled_idx))
    order = np.random.default_rng(seed).permutation(len(labeled_idx))
    kept = {labeled_idx[j] for j in order[:keep_n]}
    records = [
        r
        for i, r in enumerate(manifest.records)
        if not (r.split == "train" and r.labeled) or i in kept
    ]
    return Manifest(records, base_dir=manifest.base_dir, image_size=manifest.image_size)
