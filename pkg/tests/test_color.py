import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdsr.color import (
    KERNEL,
    STD_FLOOR,
    color_correct,
    dilated_lowpass,
    pixel_color_correct,
    wavelet_color_correct,
    wavelet_decompose,
)


def test_kernel_exact():
    expected = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 16
    assert np.array_equal(KERNEL, expected)
    assert KERNEL.sum() == 1.0


def test_lowpass_preserves_constants():
    img = np.full((12, 12, 3), 0.37)
    np.testing.assert_allclose(dilated_lowpass(img, 4), img, rtol=0, atol=1e-15)


def test_lowpass_matches_direct_sum():
    rng = np.random.default_rng(0)
    img = rng.random((10, 11))
    out = dilated_lowpass(img, 2)

    def at(r, c):
        # reflect without edge repeat
        r = -r if r < 0 else (2 * (img.shape[0] - 1) - r if r >= img.shape[0] else r)
        c = -c if c < 0 else (2 * (img.shape[1] - 1) - c if c >= img.shape[1] else c)
        return img[r, c]

    for r in range(img.shape[0]):
        for c in range(img.shape[1]):
            v = sum(KERNEL[i, j] * at(r + 2 * (i - 1), c + 2 * (j - 1)) for i in range(3) for j in range(3))
            assert out[r, c] == pytest.approx(v, abs=1e-14)


def test_wavelet_reconstruction_random_images():
    rng = np.random.default_rng(1)
    worst = 0.0
    for n in range(50):
        img = rng.random((32, 32, 3))
        pyr = wavelet_decompose(img, 1 + n % 4)
        assert len(pyr.high) == 1 + n % 4
        worst = max(worst, float(np.abs(pyr.reconstruct() - img).max()))
    assert worst < 1e-6


def test_wavelet_level_limits():
    with pytest.raises(ValueError):
        wavelet_decompose(np.zeros((16, 16, 3)), 4)
    with pytest.raises(ValueError):
        wavelet_decompose(np.zeros((16, 16, 3)), 0)
    wavelet_decompose(np.zeros((17, 17, 3)), 4)


def test_pixel_correction_matches_reference_stats():
    rng = np.random.default_rng(2)
    for _ in range(50):
        y = rng.random((16, 16, 3)) * rng.uniform(0.2, 2.0) + rng.uniform(-1, 1)
        x = rng.random((4, 4, 3))
        out = pixel_color_correct(y, x, clamp=False)
        flat_o, flat_x = out.reshape(-1, 3), x.reshape(-1, 3)
        np.testing.assert_allclose(flat_o.mean(0), flat_x.mean(0), rtol=0, atol=1e-5)
        np.testing.assert_allclose(flat_o.std(0), flat_x.std(0), rtol=0, atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(scale=st.floats(0.1, 5.0), shift=st.floats(-2.0, 2.0), seed=st.integers(0, 2**16))
def test_pixel_correction_inverts_affine(scale, shift, seed):
    x = np.random.default_rng(seed).random((8, 8, 3))
    out = pixel_color_correct(scale * x + shift, x, clamp=False)
    np.testing.assert_allclose(out, x, rtol=0, atol=1e-6)


def test_constant_channel_uses_floor():
    y = np.random.default_rng(3).random((8, 8, 3))
    y[..., 1] = 0.5
    x = np.random.default_rng(4).random((8, 8, 3))
    out, info = pixel_color_correct(y, x, return_info=True, clamp=False)
    assert info["degenerate_channels"] == [1]
    np.testing.assert_allclose(out[..., 1], x[..., 1].mean(), atol=1e-12)
    assert np.isfinite(out).all()
    assert STD_FLOOR == 1e-6


def test_clamp_and_modes():
    rng = np.random.default_rng(5)
    y, x = rng.random((32, 32, 3)) * 3 - 1, rng.random((32, 32, 3))
    for mode in ("pixel", "wavelet", "none"):
        out = color_correct(y, x, mode)
        assert out.min() >= 0.0 and out.max() <= 1.0
    with pytest.raises(ValueError):
        color_correct(y, x, "lab")


def test_wavelet_correction_swaps_low_band():
    rng = np.random.default_rng(6)
    y, x = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    out = wavelet_color_correct(y, x, 3, clamp=False)
    yp, xp = wavelet_decompose(y, 3), wavelet_decompose(x, 3)
    np.testing.assert_allclose(out, sum(yp.high) + xp.low, atol=1e-15)
    # correcting an image against itself is the identity
    np.testing.assert_allclose(wavelet_color_correct(x, x, 3, clamp=False), x, atol=1e-12)
    with pytest.raises(ValueError):
        wavelet_color_correct(y, x[:16], 3)
