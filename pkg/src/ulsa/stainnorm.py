"""Classical stain normalization.

Two normalizers live here. The statistics-transfer normalizer matches
per-channel mean/std in the decorrelated lαβ space against a reference image;
it doubles as the reference-recoloring operator inside the semi-supervised
perturbation. The stain-deconvolution normalizer estimates two optical-density
stain vectors from the pixel cloud and rescales concentrations against a
reference basis; it serves as the slower comparison method.

Both profile types serialize to small JSON documents so fitted references can
be reused across CLI invocations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateStains, InsufficientTissue, UlsaError
from .imagecore import Image, lab_to_rgb, rgb_to_lab

STD_FLOOR = 1e-6
# Optical density on [0,1] pixels: OD = -log10((rgb + OD_EPS) / (1 + OD_EPS)).
# The (1 + eps) normalization pins saturated white to exactly zero OD, so
# background pixels unmix to zero concentrations and survive round trips
# bit-for-bit.
OD_EPS = 1.0 / 255.0


@dataclass(frozen=True)
class StainProfile:
    """Channelwise lαβ mean/std of a reference image (population std, floored)."""

    mean: np.ndarray  # (3,)
    std: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(3))
        std = np.maximum(np.asarray(self.std, dtype=np.float64).reshape(3), STD_FLOOR)
        object.__setattr__(self, "std", std)

    def to_json(self) -> str:
        return json.dumps({"kind": "lab_profile", "mean": self.mean.tolist(), "std": self.std.tolist()})

    @staticmethod
    def from_json(text: str) -> "StainProfile":
        doc = json.loads(text)
        if doc.get("kind") != "lab_profile":
            raise UlsaError("not a lab_profile JSON document")
        return StainProfile(np.array(doc["mean"]), np.array(doc["std"]))


@dataclass(frozen=True)
class StainMatrix:
    """Two unit-norm optical-density stain vectors plus reference concentrations.

    Columns are ordered so the first has the larger first-OD-channel component,
    which makes repeated fits bit-identical.
    """

    vectors: np.ndarray  # (3, 2), columns unit norm, entries >= 0
    max_concentrations: np.ndarray  # (2,), 99th-percentile concentrations

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64).reshape(3, 2)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(
            self, "max_concentrations", np.asarray(self.max_concentrations, dtype=np.float64).reshape(2)
        )
        norms = np.linalg.norm(v, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise UlsaError(f"stain vectors must be unit norm, got norms {norms}")
        if np.any(v < 0):
            raise UlsaError("stain vector entries must be >= 0")

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": "stain_matrix",
                "vectors": self.vectors.tolist(),
                "max_concentrations": self.max_concentrations.tolist(),
            }
        )

    @staticmethod
    def from_json(text: str) -> "StainMatrix":
        doc = json.loads(text)
        if doc.get("kind") != "stain_matrix":
            raise UlsaError("not a stain_matrix JSON document")
        return StainMatrix(np.array(doc["vectors"]), np.array(doc["max_concentrations"]))


def load_reference(path: str | Path) -> StainProfile | StainMatrix:
    text = Path(path).read_text(encoding="utf-8")
    kind = json.loads(text).get("kind")
    if kind == "lab_profile":
        return StainProfile.from_json(text)
    if kind == "stain_matrix":
        return StainMatrix.from_json(text)
    raise UlsaError(f"unknown reference document kind {kind!r} in {path}")


def profile_of(img: Image) -> StainProfile:
    """Channelwise lαβ mean and population std of an image."""
    lab = rgb_to_lab(img).reshape(-1, 3)
    return StainProfile(lab.mean(axis=0), lab.std(axis=0))


def reinhard_transfer(img: Image, reference: StainProfile) -> Image:
    """Recolor `img` so its lαβ statistics match `reference`.

    Per channel: x -> (x - mu_src) * (sigma_ref / sigma_src) + mu_ref, then
    back to RGB with clamping. On clamp-free inputs the output profile equals
    the reference to ~1e-6.
    """
    lab = rgb_to_lab(img)
    flat = lab.reshape(-1, 3)
    mu = flat.mean(axis=0)
    sd = np.maximum(flat.std(axis=0), STD_FLOOR)
    mapped = (lab - mu) * (reference.std / sd) + reference.mean
    return lab_to_rgb(mapped)


def optical_density(pixels: np.ndarray) -> np.ndarray:
    """Optical density of [0,1] pixels; saturated white maps to exactly zero."""
    return -np.log10((np.asarray(pixels, dtype=np.float64) + OD_EPS) / (1.0 + OD_EPS))


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    return np.power(10.0, -od) * (1.0 + OD_EPS) - OD_EPS


def macenko_fit(img: Image, alpha_pct: float = 1.0, beta: float = 0.15) -> StainMatrix:
    """Estimate the two dominant stain vectors of an image.

    Pixels whose OD is weak in any channel (<= `beta`) are discarded; the
    remaining cloud is projected onto its top-2 principal plane, the
    `alpha_pct` / (100 - alpha_pct) percentile angles give the extreme
    directions, and those map back to unit stain vectors. Reference
    concentrations are the per-stain 99th percentiles from least-squares
    unmixing.
    """
    od = optical_density(img.pixels).reshape(-1, 3)
    kept = od[np.all(od > beta, axis=1)]
    if kept.shape[0] < 100:
        raise InsufficientTissue(
            f"only {kept.shape[0]} pixels exceed the OD threshold {beta}; need >= 100"
        )

    cov = np.cov(kept.T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    plane = eigvecs[:, [2, 1]]  # top-2 principal directions, descending
    # orient each axis deterministically (positive-sum hemisphere)
    for k in range(2):
        if plane[:, k].sum() < 0:
            plane[:, k] = -plane[:, k]

    proj = kept @ plane
    angles = np.arctan2(proj[:, 1], proj[:, 0])
    lo = np.percentile(angles, alpha_pct)
    hi = np.percentile(angles, 100.0 - alpha_pct)
    if abs(hi - lo) < 1e-3:
        raise DegenerateStains(f"extreme OD angles differ by {abs(hi - lo):.2e} rad (< 1e-3)")

    v_lo = plane @ np.array([np.cos(lo), np.sin(lo)])
    v_hi = plane @ np.array([np.cos(hi), np.sin(hi)])
    vectors = np.stack([v_lo, v_hi], axis=1)
    # stain vectors live in the nonnegative octant; flip, zero tiny negatives,
    # renormalize
    for k in range(2):
        if vectors[:, k].sum() < 0:
            vectors[:, k] = -vectors[:, k]
    vectors = np.maximum(vectors, 0.0)
    norms = np.linalg.norm(vectors, axis=0)
    if np.any(norms < 1e-9):
        raise DegenerateStains("a recovered stain vector collapsed to zero")
    vectors = vectors / norms
    if vectors[0, 0] < vectors[0, 1]:
        vectors = vectors[:, ::-1].copy()

    conc = np.linalg.lstsq(vectors, kept.T, rcond=None)[0]
    conc = np.maximum(conc, 0.0)
    max_conc = np.percentile(conc, 99.0, axis=1)
    return StainMatrix(vectors, np.maximum(max_conc, 1e-12))


def macenko_transfer(img: Image, source: StainMatrix, reference: StainMatrix) -> Image:
    """Unmix `img` against `source`, rescale concentrations, remix with `reference`.

    Unmixing is plain least squares with concentrations clamped at zero; pure
    white stays white because zero OD unmixes to zero concentrations.
    """
    h, w = img.height, img.width
    od = optical_density(img.pixels).reshape(-1, 3)
    conc = np.linalg.lstsq(source.vectors, od.T, rcond=None)[0]
    conc = np.maximum(conc, 0.0)
    scale = reference.max_concentrations / np.maximum(source.max_concentrations, 1e-12)
    od_new = (reference.vectors @ (conc * scale[:, None])).T
    rgb = od_to_rgb(od_new).reshape(h, w, 3)
    return Image.from_array(rgb, clamp=True)
