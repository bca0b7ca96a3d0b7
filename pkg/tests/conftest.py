import numpy as np
import pytest

from ulsa.datagen import SceneSpec, make_benchmark
from ulsa.imagecore import Image
from ulsa.stainnorm import od_to_rgb

# canonical two-stain optical-density basis used across stain tests
H1 = np.array([0.65, 0.70, 0.29])
H2 = np.array([0.07, 0.99, 0.11])
TWO_STAIN_BASIS = np.stack([H1 / np.linalg.norm(H1), H2 / np.linalg.norm(H2)], axis=1)


def two_stain_image(rng: np.random.Generator, size: int = 48, basis: np.ndarray = None):
    """Forward-synthesized two-stain mixture with pure-stain atoms.

    12% of pixels are exactly pure per stain, pinned at a magnitude where
    every optical-density component clears the weak-pixel filter without
    saturating to black; the rest are random interior mixtures. The atoms put
    >1% of angular mass at each extreme, so the percentile wedge spans the
    whole cloud and unmixing is clamp-free. Returns (image, basis,
    concentrations).
    """
    basis = TWO_STAIN_BASIS if basis is None else basis
    n = size * size
    n_pure = int(0.12 * n)
    w = rng.beta(0.2, 0.2, size=n)
    m = rng.uniform(1.0, 2.2, size=n)
    w[:n_pure] = 1.0
    w[n_pure : 2 * n_pure] = 0.0
    m[: 2 * n_pure] = 2.3
    conc = np.stack([w * m, (1.0 - w) * m])
    img = Image.from_array(od_to_rgb(basis @ conc).T.reshape(size, size, 3))
    return img, basis, conc


def angle_deg(u: np.ndarray, v: np.ndarray) -> float:
    c = abs(float(u @ v)) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@pytest.fixture(scope="session")
def tiny_benchmark(tmp_path_factory):
    """A miniature but complete benchmark directory: 3 stains, 32px scenes."""
    root = tmp_path_factory.mktemp("tinybench")
    manifest = make_benchmark(
        root,
        n_labeled_source=16,
        n_unlabeled_per_stain=10,
        n_val=6,
        n_test=6,
        spec=SceneSpec(size=32),
        seed=7,
    )
    return root, manifest


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
