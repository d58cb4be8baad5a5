"""Pure numpy circular conv2d kernels (fallback when the extension is absent)."""
import numpy as np


def _shift_stack(x, k):
    # out[c, a, b, i, j] = x[c, (i + a - p) % H, (j + b - p) % W]
    p = k // 2
    C, H, W = x.shape
    out = np.empty((C, k, k, H, W))
    for a in range(k):
        xa = np.roll(x, p - a, axis=1)
        for b in range(k):
            out[:, a, b] = np.roll(xa, p - b, axis=2)
    return out


def conv2d_forward(x, w, bias):
    k = w.shape[2]
    cols = _shift_stack(x, k)
    out = np.tensordot(w, cols, axes=([1, 2, 3], [0, 1, 2]))
    out += bias[:, None, None]
    return out


def conv2d_grad_input(gy, w):
    cout, cin, k, _ = w.shape
    p = k // 2
    g = np.tensordot(w, gy, axes=([0], [0]))  # (cin, k, k, H, W)
    gx = np.zeros((cin,) + gy.shape[1:])
    for a in range(k):
        for b in range(k):
            gx += np.roll(g[:, a, b], (a - p, b - p), axis=(1, 2))
    return gx


def conv2d_grad_weight(gy, x, k):
    cols = _shift_stack(x, k)
    return np.tensordot(gy, cols, axes=([1, 2], [3, 4]))
