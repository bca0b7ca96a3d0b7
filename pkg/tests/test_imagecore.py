import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ulsa.errors import UlsaError
from ulsa.imagecore import (
    Image,
    gaussian_blur,
    gaussian_kernel_1d,
    lab_to_rgb,
    read_png,
    resize_bilinear,
    rgb_to_lab,
    write_png,
)

# reference value computed by evaluating the published matrix chain at zero
# with an independent implementation (inverse matrix applied to 1 - 1/255)
LAB_ZERO_GRAY = np.array([0.995678333165, 0.996816698396, 0.999162236843])


def random_image(rng, h=12, w=9, lo=0.0, hi=1.0):
    return Image(rng.uniform(lo, hi, size=(h, w, 3)))


class TestColorTransform:
    def test_round_trip_random(self, rng):
        img = random_image(rng)
        back = lab_to_rgb(rgb_to_lab(img))
        assert np.abs(back.pixels - img.pixels).max() < 1e-4

    def test_achromatic_pixels_collapse_to_line(self, rng):
        gray = np.repeat(rng.uniform(0.05, 0.95, size=(8, 8, 1)), 3, axis=2)
        lab = rgb_to_lab(Image(gray))
        # opponent channels are (nearly) constant across intensity, the first
        # channel is not
        assert lab[:, :, 1].std() < 2e-3
        assert lab[:, :, 2].std() < 2e-3
        assert lab[:, :, 0].std() > 1e-2

    def test_constant_image_maps_to_constant(self):
        img = Image(np.full((5, 4, 3), 0.37))
        lab = rgb_to_lab(img)
        assert np.all(lab == lab[0, 0])

    def test_lab_zero_is_fixed_gray(self):
        out = lab_to_rgb(np.zeros((3, 2, 3)))
        assert np.abs(out.pixels - LAB_ZERO_GRAY).max() < 1e-9

    def test_extreme_lab_clamps(self):
        out = lab_to_rgb(np.array([[[5.0, -4.0, 6.0], [-9.0, 9.0, -9.0]]]))
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, seed):
        img = random_image(np.random.default_rng(seed))
        back = lab_to_rgb(rgb_to_lab(img))
        assert np.abs(back.pixels - img.pixels).max() < 1e-4


class TestGaussianBlur:
    def test_tiny_sigma_is_near_identity(self, rng):
        img = random_image(rng)
        out = gaussian_blur(img, 3, 0.01)
        assert np.abs(out.pixels - img.pixels).max() < 1e-3

    def test_constant_image_is_fixed_point(self):
        img = Image(np.full((9, 9, 3), 0.42))
        for kernel in (3, 5):
            out = gaussian_blur(img, kernel, 0.3)
            assert np.abs(out.pixels - img.pixels).max() < 1e-12

    def test_delta_reproduces_kernel_weights(self):
        # independent evaluation of the kernel formula
        w = np.exp(-(np.arange(-1, 2) ** 2) / (2 * 0.4**2))
        w /= w.sum()
        expected = np.outer(w, w)
        img = np.zeros((7, 7, 3))
        img[3, 3] = 1.0
        out = gaussian_blur(Image(img), 3, 0.4)
        assert np.abs(out.pixels[2:5, 2:5, 0] - expected).max() < 1e-12
        assert out.pixels[0, 0, 0] == 0.0

    def test_kernel_weights_helper_matches_formula(self):
        w = gaussian_kernel_1d(5, 0.7)
        ref = np.exp(-(np.arange(-2, 3) ** 2) / (2 * 0.7**2))
        assert np.allclose(w, ref / ref.sum(), atol=1e-15)

    def test_rejects_bad_kernel(self, rng):
        img = random_image(rng)
        with pytest.raises(UlsaError):
            gaussian_blur(img, 4, 0.2)
        with pytest.raises(UlsaError):
            gaussian_blur(img, -3, 0.2)
        with pytest.raises(UlsaError):
            gaussian_blur(img, 3, 0.0)

    def test_channel_means_approximately_preserved(self, rng):
        img = random_image(rng, 16, 16)
        out = gaussian_blur(img, 5, 0.4)
        drift = np.abs(out.pixels.mean(axis=(0, 1)) - img.pixels.mean(axis=(0, 1)))
        assert drift.max() < 1e-3

    @given(
        a=st.floats(0.1, 0.6),
        b=st.floats(0.1, 0.4),
        seed=st.integers(0, 1000),
        kernel=st.sampled_from([3, 5]),
    )
    @settings(max_examples=25, deadline=None)
    def test_linearity(self, a, b, seed, kernel):
        rng = np.random.default_rng(seed)
        x = random_image(rng, 10, 10)
        y = random_image(rng, 10, 10)
        combo = Image(a * x.pixels + b * y.pixels)
        lhs = gaussian_blur(combo, kernel, 0.3).pixels
        rhs = a * gaussian_blur(x, kernel, 0.3).pixels + b * gaussian_blur(y, kernel, 0.3).pixels
        assert np.abs(lhs - rhs).max() < 1e-6

    def test_output_within_input_range(self, rng):
        img = random_image(rng, 14, 14, lo=0.2, hi=0.8)
        out = gaussian_blur(img, 5, 0.4)
        assert out.pixels.min() >= img.pixels.min() - 1e-6
        assert out.pixels.max() <= img.pixels.max() + 1e-6


class TestResize:
    def test_identity_is_bit_exact(self, rng):
        img = random_image(rng, 11, 7)
        out = resize_bilinear(img, 11, 7)
        assert np.array_equal(out.pixels, img.pixels)

    def test_constant_stays_constant(self):
        img = Image(np.full((8, 6, 3), 0.63))
        out = resize_bilinear(img, 15, 3)
        assert np.abs(out.pixels - 0.63).max() < 1e-12

    def test_checkerboard_to_single_pixel_averages(self):
        img = np.zeros((2, 2, 3))
        img[0, 1] = 1.0
        img[1, 0] = 1.0
        out = resize_bilinear(Image(img), 1, 1)
        assert np.abs(out.pixels - 0.5).max() < 1e-12

    def test_rejects_empty_target(self, rng):
        with pytest.raises(UlsaError):
            resize_bilinear(random_image(rng), 0, 4)


class TestPngIO:
    def test_round_trip_exact_on_u8_grid(self, rng, tmp_path):
        u8 = rng.integers(0, 256, size=(9, 5, 3))
        img = Image(u8 / 255.0)
        write_png(img, tmp_path / "x.png")
        back = read_png(tmp_path / "x.png")
        assert np.array_equal(back.pixels, img.pixels)

    def test_encode_rounds_half_up(self, tmp_path):
        # 0.5/255 rounds up to 1, just below rounds down to 0
        img = Image(np.full((2, 2, 3), 0.5 / 255.0))
        write_png(img, tmp_path / "y.png")
        assert read_png(tmp_path / "y.png").pixels[0, 0, 0] == 1.0 / 255.0
        img = Image(np.full((2, 2, 3), 0.49 / 255.0))
        write_png(img, tmp_path / "z.png")
        assert read_png(tmp_path / "z.png").pixels[0, 0, 0] == 0.0


class TestImageType:
    def test_rejects_bad_shapes(self):
        with pytest.raises(UlsaError):
            Image(np.zeros((4, 4)))
        with pytest.raises(UlsaError):
            Image(np.zeros((0, 4, 3)))

    def test_from_array_clamps(self):
        img = Image.from_array(np.array([[[1.5, -0.5, 0.5]]]))
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0
