"""Image quality metrics on complex (2-channel) images, computed on magnitudes."""
import numpy as np
from scipy.ndimage import uniform_filter


def magnitude(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(x[0] ** 2 + x[1] ** 2) if x.ndim == 3 and x.shape[0] == 2 else np.abs(x)


def _pair(x, ref):
    x, ref = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref):
    """10 log10(max|ref|^2 / mse), mse over complex pixels. Returns inf when exact."""
    x, ref = _pair(x, ref)
    mref = magnitude(ref)
    peak = float(mref.max())
    if peak == 0.0:
        raise ValueError("psnr: reference image is all zero")
    diff = x - ref
    if ref.ndim == 3 and ref.shape[0] == 2:
        mse = float(np.mean(diff[0] ** 2 + diff[1] ** 2))
    else:
        mse = float(np.mean(diff ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def ssim(x, ref, win=7):
    """Single-scale SSIM of magnitude images with a uniform ``win`` x ``win`` window.

    Dynamic range R = max|ref|, C1 = (0.01 R)^2, C2 = (0.03 R)^2. Windows wrap
    at the border; the map is averaged over every pixel.
    """
    x, ref = _pair(x, ref)
    a, b = magnitude(x), magnitude(ref)
    R = float(b.max())
    if R == 0.0:
        raise ValueError("ssim: reference image is all zero")
    c1, c2 = (0.01 * R) ** 2, (0.03 * R) ** 2
    f = lambda im: uniform_filter(im, size=win, mode="wrap")
    mu_a, mu_b = f(a), f(b)
    saa = f(a * a) - mu_a ** 2
    sbb = f(b * b) - mu_b ** 2
    sab = f(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))
