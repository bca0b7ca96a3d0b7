"""Image primitives: the RGB image type, the decorrelated log-space color
transform used by statistics transfer, Gaussian blur, bilinear resizing, and
8-bit PNG I/O.

All pixel math runs on float64 arrays in [0, 1]; 8-bit only exists at the
file boundary. Every operation here is a pure function and clamps its output
back into [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import UlsaError

# Fixed RGB -> cone-response (LMS) matrix of the classic statistics-transfer
# method, stored verbatim; the reverse direction uses the numerical inverse so
# round trips close to float precision (the published rounded inverse does
# not).
RGB_TO_LMS = np.array(
    [
        [0.3811, 0.5783, 0.0402],
        [0.1967, 0.7244, 0.0782],
        [0.0241, 0.1288, 0.8444],
    ]
)
LMS_TO_RGB = np.linalg.inv(RGB_TO_LMS)

# Orthogonal-style decorrelation of log-LMS into one achromatic and two
# opponent-color axes.
_DECOR_SCALE = np.diag([1.0 / np.sqrt(3.0), 1.0 / np.sqrt(6.0), 1.0 / np.sqrt(2.0)])
_DECOR_MIX = np.array([[1.0, 1.0, 1.0], [1.0, 1.0, -2.0], [1.0, -1.0, 0.0]])
LOGLMS_TO_LAB = _DECOR_SCALE @ _DECOR_MIX
LAB_TO_LOGLMS = np.linalg.inv(LOGLMS_TO_LAB)

# Additive floor before the log so black pixels stay finite.
LOG_FLOOR = 1.0 / 255.0


@dataclass(frozen=True)
class Image:
    """An RGB image: float64 pixels of shape (H, W, 3), each channel in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 1 or p.shape[1] < 1:
            raise UlsaError(f"Image needs shape (H, W, 3) with H, W >= 1, got {p.shape}")
        if p.dtype != np.float64:
            object.__setattr__(self, "pixels", p.astype(np.float64))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @staticmethod
    def from_array(arr: np.ndarray, clamp: bool = True) -> "Image":
        arr = np.asarray(arr, dtype=np.float64)
        if clamp:
            arr = np.clip(arr, 0.0, 1.0)
        return Image(arr)

    def allclose(self, other: "Image", atol: float = 1e-12) -> bool:
        return self.pixels.shape == other.pixels.shape and np.allclose(
            self.pixels, other.pixels, atol=atol, rtol=0.0
        )


def _clamp01(arr: np.ndarray) -> np.ndarray:
    return np.clip(arr, 0.0, 1.0)


def rgb_to_lab(img: Image) -> np.ndarray:
    """Map an RGB image into the decorrelated log-LMS (lαβ) space.

    Returns an (H, W, 3) float64 array. Achromatic pixels land near a single
    line; the first channel carries intensity, the other two carry opponent
    color.
    """
    lms = img.pixels @ RGB_TO_LMS.T
    log_lms = np.log10(lms + LOG_FLOOR)
    return log_lms @ LOGLMS_TO_LAB.T


def lab_to_rgb(lab: np.ndarray) -> Image:
    """Invert :func:`rgb_to_lab`; output clamped into [0, 1]."""
    lab = np.asarray(lab, dtype=np.float64)
    log_lms = lab @ LAB_TO_LOGLMS.T
    lms = np.power(10.0, log_lms) - LOG_FLOOR
    rgb = lms @ LMS_TO_RGB.T
    return Image(_clamp01(rgb))


def gaussian_kernel_1d(kernel: int, sigma: float) -> np.ndarray:
    """Normalized discrete Gaussian weights of odd length `kernel`."""
    half = kernel // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    return w / w.sum()


def gaussian_blur(img: Image, kernel: int, sigma: float) -> Image:
    """Separable Gaussian blur with reflect padding.

    `kernel` must be odd and positive (3 or 5 in the training pipeline);
    `sigma` > 0. Shape is preserved and channel means move by less than ~1e-3
    because reflect padding keeps mass approximately constant.
    """
    if kernel <= 0 or kernel % 2 == 0:
        raise UlsaError(f"blur kernel must be odd and positive, got {kernel}")
    if sigma <= 0:
        raise UlsaError(f"blur sigma must be > 0, got {sigma}")
    w = gaussian_kernel_1d(kernel, sigma)
    half = kernel // 2
    p = img.pixels
    # pad rows, convolve vertically, then the same horizontally
    padded = np.pad(p, ((half, half), (0, 0), (0, 0)), mode="reflect")
    out = np.zeros_like(p)
    for i in range(kernel):
        out += w[i] * padded[i : i + p.shape[0]]
    padded = np.pad(out, ((0, 0), (half, half), (0, 0)), mode="reflect")
    out = np.zeros_like(p)
    for i in range(kernel):
        out += w[i] * padded[:, i : i + p.shape[1]]
    return Image(_clamp01(out))


def resize_bilinear(img: Image, out_h: int, out_w: int) -> Image:
    """Bilinear resize using half-pixel-center coordinates.

    Source coordinate of output pixel i is (i + 0.5) * in/out - 0.5, clamped
    to the valid range; identical sizes return a bit-identical copy.
    """
    if out_h < 1 or out_w < 1:
        raise UlsaError(f"resize target must be >= 1x1, got {out_h}x{out_w}")
    p = img.pixels
    in_h, in_w = p.shape[:2]
    if (out_h, out_w) == (in_h, in_w):
        return Image(p.copy())

    def _axis_coords(n_in: int, n_out: int):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    ylo, yhi, fy = _axis_coords(in_h, out_h)
    xlo, xhi, fx = _axis_coords(in_w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = p[ylo][:, xlo] * (1 - fx) + p[ylo][:, xhi] * fx
    bot = p[yhi][:, xlo] * (1 - fx) + p[yhi][:, xhi] * fx
    out = top * (1 - fy) + bot * fy
    return Image(_clamp01(out))


def read_png(path: str | Path) -> Image:
    """Decode an 8-bit RGB PNG; u8 value v maps to v / 255."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return Image(arr / 255.0)


def write_png(img: Image, path: str | Path) -> None:
    """Encode to 8-bit RGB PNG, rounding half-up after clamping."""
    u8 = np.floor(_clamp01(img.pixels) * 255.0 + 0.5).astype(np.uint8)
    PILImage.fromarray(u8, mode="RGB").save(path, format="PNG")


def read_mask_png(path: str | Path) -> np.ndarray:
    """Decode a single-channel PNG of integer class ids into an (H, W) int array."""
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.int64)


def write_mask_png(mask: np.ndarray, path: str | Path) -> None:
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > 255:
        raise UlsaError("mask class ids must fit into u8")
    PILImage.fromarray(mask.astype(np.uint8), mode="L").save(path, format="PNG")
