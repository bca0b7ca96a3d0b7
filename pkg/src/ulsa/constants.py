"""Fixed default constants for the synthetic multi-stain benchmark.

The three default stains are chosen to force a visible appearance gap:
the source renders pink structure on near-white, while the two targets move
both the hue axis that carries structure information and the density
nonlinearity. Exact endpoints are pinned here so generated benchmarks are
reproducible byte-for-byte across machines.
"""

from __future__ import annotations

from .translate import ParametricStain, StainSet

# name -> (dark RGB at density 1, light RGB at density 0, gamma)
# The gamma spread is what makes the gap hard: per-sample normalization can
# absorb affine color shifts but not a nonlinear density warp.
DEFAULT_STAIN_PARAMS: dict[str, ParametricStain] = {
    # pink-on-white, linear ramp; structure signal strongest in green
    "srcA": ParametricStain(dark=(0.70, 0.20, 0.45), light=(0.99, 0.96, 0.96), gamma=1.0),
    # dark-green-on-pink, strong compressive warp; green nearly flat
    "tgtB": ParametricStain(dark=(0.08, 0.45, 0.16), light=(0.95, 0.62, 0.90), gamma=1.9),
    # brown-on-gray, expansive warp, compressed dynamic range
    "tgtC": ParametricStain(dark=(0.38, 0.26, 0.12), light=(0.90, 0.88, 0.86), gamma=0.55),
}

DEFAULT_STAIN_SET = StainSet.from_names(sources=["srcA"], targets=["tgtB", "tgtC"])

# per-stain brightness threshold for tissue detection (pixels darker than the
# threshold count as tissue); keyed by stain name with a catch-all default
DEFAULT_TISSUE_THRESHOLDS: dict[str, float] = {
    "srcA": 0.88,
    "tgtB": 0.80,
    "tgtC": 0.82,
}
DEFAULT_TISSUE_THRESHOLD = 0.80
DEFAULT_MIN_TISSUE_FRACTION = 0.1

# benchmark defaults (desk scale)
DEFAULT_IMAGE_SIZE = 64
DEFAULT_N_LABELED = 500
DEFAULT_N_UNLABELED = 2000
DEFAULT_N_VAL = 60
DEFAULT_N_TEST = 100

SEGMENTATION_CLASSES = ("background", "tubule_like", "glomerulus_like")
NUM_SEG_CLASSES = len(SEGMENTATION_CLASSES)
