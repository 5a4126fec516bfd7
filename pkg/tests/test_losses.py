import numpy as np
import pytest
from scipy.signal import correlate2d

from blursplat import losses
from blursplat.errors import ShapeMismatch


def ssim_dense(x, y):
    """Independent zero-padded SSIM built from full 2D correlations."""
    w1 = losses.gaussian_window()
    w = np.outer(w1, w1)
    out = []
    for c in range(x.shape[2]):
        f = lambda a: correlate2d(a, w, mode="same", boundary="fill")
        a, b = x[..., c], y[..., c]
        mx, my = f(a), f(b)
        sxx, syy, sxy = f(a * a) - mx**2, f(b * b) - my**2, f(a * b) - mx * my
        out.append(((2 * mx * my + losses.C1) * (2 * sxy + losses.C2))
                   / ((mx**2 + my**2 + losses.C1) * (sxx + syy + losses.C2)))
    return np.stack(out, axis=-1)


def test_gaussian_window():
    w = losses.gaussian_window()
    assert w.shape == (11,) and np.isclose(w.sum(), 1.0)
    assert np.isclose(w[4] / w[5], np.exp(-1 / (2 * 1.5**2)))


def test_ssim_map_matches_dense_filter():
    rng = np.random.default_rng(0)
    x, y = rng.uniform(size=(2, 13, 17, 3))
    assert np.allclose(losses.ssim_map(x, y), ssim_dense(x, y), atol=1e-12)


def test_identical_images_have_zero_loss():
    x = np.random.default_rng(1).uniform(size=(12, 12, 3))
    loss, grad = losses.photometric_loss(x, x.copy(), 0.2)
    assert abs(loss) < 1e-15
    assert losses.ssim_loss(x, x)[0] == pytest.approx(1.0, abs=1e-15)


def test_l1_only_constant_offset():
    x = np.full((8, 8, 3), 0.5)
    loss, _ = losses.photometric_loss(x + 0.25, x, lam=0.0)
    assert loss == pytest.approx(0.25, abs=1e-15)


@pytest.mark.parametrize("lam", [0.0, 0.2, 1.0])
def test_loss_gradient_matches_finite_differences(lam):
    rng = np.random.default_rng(2)
    x, y = rng.uniform(size=(2, 8, 8, 3))
    _, grad = losses.photometric_loss(x, y, lam)
    h = 1e-6
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd[idx] = (losses.photometric_loss(xp, y, lam)[0] - losses.photometric_loss(xm, y, lam)[0]) / (2 * h)
    assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-4


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        losses.photometric_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
