import math

import numpy as np
import pytest

from mnmmol import mri
from mnmmol.metrics import magnitude, psnr, ssim


def loop_ssim(a, b, win=7):
    """Window-by-window SSIM with explicit loops and periodic borders."""
    H, W = a.shape
    R = b.max()
    c1, c2 = (0.01 * R) ** 2, (0.03 * R) ** 2
    h = win // 2
    total = 0.0
    for i in range(H):
        for j in range(W):
            pa = [a[(i + di) % H, (j + dj) % W] for di in range(-h, h + 1) for dj in range(-h, h + 1)]
            pb = [b[(i + di) % H, (j + dj) % W] for di in range(-h, h + 1) for dj in range(-h, h + 1)]
            n = len(pa)
            ma, mb = sum(pa) / n, sum(pb) / n
            va = sum(p * p for p in pa) / n - ma * ma
            vb = sum(p * p for p in pb) / n - mb * mb
            cov = sum(p * q for p, q in zip(pa, pb)) / n - ma * mb
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return total / (H * W)


def test_identical_images():
    x = mri.generate_phantom(16, 16, 0)
    assert psnr(x, x) == math.inf
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_psnr_direct_formula():
    ref = np.zeros((2, 10, 10))
    ref[0, 0, 0] = 1.0
    x = ref.copy()
    x[0] += 0.1  # mse over complex pixels = 0.01
    assert psnr(x, ref) == pytest.approx(20.0, abs=1e-12)


def test_ssim_half_reference_against_loops():
    ref = mri.generate_phantom(16, 16, 1)
    got = ssim(0.5 * ref, ref)
    want = loop_ssim(magnitude(0.5 * ref), magnitude(ref))
    assert got == pytest.approx(want, abs=1e-12)
    assert 0.0 < got < 1.0


def test_single_window_by_hand():
    # constant images: SSIM reduces to the luminance term (2ab + c1) / (a^2 + b^2 + c1)
    a, b = np.full((16, 16), 0.5), np.ones((16, 16))
    c1 = 0.01 ** 2
    assert ssim(a, b) == pytest.approx((2 * 0.5 + c1) / (0.25 + 1 + c1), abs=1e-12)


def test_errors():
    with pytest.raises(ValueError):
        psnr(np.ones((2, 4, 4)), np.ones((2, 4, 5)))
    with pytest.raises(ValueError):
        ssim(np.ones((2, 4, 4)), np.ones((2, 5, 4)))
    with pytest.raises(ValueError):
        psnr(np.ones((2, 4, 4)), np.zeros((2, 4, 4)))


def test_magnitude_of_channels():
    x = np.stack([np.full((2, 2), 3.0), np.full((2, 2), 4.0)])
    np.testing.assert_array_equal(magnitude(x), np.full((2, 2), 5.0))
