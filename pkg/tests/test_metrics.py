import numpy as np
import pytest

from blursplat import metrics
from blursplat.errors import ShapeMismatch


def test_psnr_closed_form_and_cap():
    a = np.full((8, 8, 3), 0.6)
    assert abs(metrics.psnr(a, a - 0.1) - 20.0) < 1e-6
    assert metrics.psnr(a, a) == 100.0
    assert metrics.psnr(a, a + 1e-7) == 100.0


def test_ssim_identical_and_negative():
    x = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert metrics.ssim(x, x) == 1.0
    assert metrics.ssim(x, 1.0 - x) < 0.0


def test_ssim_matches_skimage_style_valid_window_reference():
    # independent brute force over every valid 11x11 window
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(14, 15, 2))
    y = np.clip(x + rng.normal(scale=0.1, size=x.shape), 0, 1)
    w1 = metrics.gaussian_window(11, 1.5)
    w = np.outer(w1, w1)[..., None]
    vals = []
    for i in range(14 - 10):
        for j in range(15 - 10):
            a, b = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            mx, my = (w * a).sum((0, 1)), (w * b).sum((0, 1))
            sxx = (w * a * a).sum((0, 1)) - mx**2
            syy = (w * b * b).sum((0, 1)) - my**2
            sxy = (w * a * b).sum((0, 1)) - mx * my
            vals.append(((2 * mx * my + 1e-4) * (2 * sxy + 9e-4)) / ((mx**2 + my**2 + 1e-4) * (sxx + syy + 9e-4)))
    assert metrics.ssim(x, y) == pytest.approx(np.mean(vals), abs=1e-12)


def test_ssim_small_image_uses_whole_image_window():
    x = np.random.default_rng(2).uniform(size=(5, 7, 3))
    assert metrics.ssim(x, x) == 1.0


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        metrics.psnr(np.zeros((4, 4, 3)), np.zeros((4, 4)))
    with pytest.raises(ShapeMismatch):
        metrics.ssim(np.zeros((12, 12, 3)), np.zeros((12, 13, 3)))
    with pytest.raises(ShapeMismatch):
        metrics.error_map(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_error_map_properties():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(2, 9, 9, 3))
    zero = metrics.error_map(a, a)
    assert np.array_equal(zero, np.broadcast_to(zero[0, 0], zero.shape))
    assert np.array_equal(metrics.error_map(a, b), metrics.error_map(b, a))
    hot = a.copy()
    hot[4, 5] = np.where(a[4, 5] > 0.5, a[4, 5] - 1.0, a[4, 5] + 1.0)
    m = metrics.error_map(a, np.clip(hot, -1, 2))
    top = metrics.error_map(np.ones((1, 1, 3)), np.zeros((1, 1, 3)))[0, 0]
    assert np.array_equal(m[4, 5], top)
    others = np.ones((9, 9), dtype=bool)
    others[4, 5] = False
    assert np.all(m[others] == zero[0, 0])


def test_image_round_trip(tmp_path):
    img = np.random.default_rng(4).uniform(size=(6, 5, 3))
    metrics.save_image(img, tmp_path / "a.png")
    back = metrics.load_image(tmp_path / "a.png")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    assert np.array_equal(metrics.to_uint8(back), metrics.to_uint8(img))
