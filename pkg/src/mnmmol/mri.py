"""Multicoil Cartesian MRI forward model and synthetic data.

Images are ``(2, H, W)`` float64 arrays (real and imaginary channels).
k-space is held as complex ``(C, H, W)`` arrays with the DC sample at
``(H // 2, W // 2)``; the 2-D FFT is centered and unitary.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .cg import cg_solve

CENTER = 8


class ModelMismatchError(ValueError):
    pass


def to_complex(x):
    x = np.asarray(x)
    return x[0] + 1j * x[1]


def to_channels(z):
    z = np.asarray(z)
    return np.stack([z.real, z.imag]).astype(np.float64)


def fft2c(z):
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(z, axes=(-2, -1)), norm="ortho"), axes=(-2, -1))


def ifft2c(k):
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=(-2, -1)), norm="ortho"), axes=(-2, -1))


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    """Binary sampling mask, normalized coil maps and noise level."""

    mask: np.ndarray
    coil_maps: np.ndarray
    noise_sigma: float = 0.0
    model_id: str = field(init=False)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float64)
        maps = np.asarray(self.coil_maps, dtype=np.complex128)
        if maps.ndim == 2:
            maps = maps[None]
        if maps.ndim != 3 or mask.shape != maps.shape[1:]:
            raise ValueError(f"mask {mask.shape} and coil maps {maps.shape} disagree")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask entries must be 0 or 1")
        energy = np.sum(np.abs(maps) ** 2, axis=0)
        if np.max(np.abs(energy - 1.0)) > 1e-9:
            raise ValueError("coil maps must satisfy sum_c |S_c|^2 = 1 at every pixel")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "coil_maps", maps)
        h = hashlib.sha1(mask.tobytes())
        h.update(maps.tobytes())
        object.__setattr__(self, "model_id", h.hexdigest()[:16])

    @property
    def shape(self):
        return self.mask.shape

    @property
    def coils(self):
        return self.coil_maps.shape[0]

    # complex-valued building blocks
    def forward_c(self, z):
        return self.mask * fft2c(self.coil_maps * z)

    def adjoint_c(self, k):
        return np.sum(np.conj(self.coil_maps) * ifft2c(self.mask * k), axis=0)

    def aha(self, x):
        """A^H A on a 2-channel image (self-adjoint in the real dot product)."""
        return to_channels(self.adjoint_c(self.forward_c(to_complex(x))))


@dataclass(frozen=True, eq=False)
class KSpaceData:
    samples: np.ndarray
    model_id: str

    def norm(self):
        return float(np.linalg.norm(self.samples))

    def __add__(self, other):
        if isinstance(other, KSpaceData):
            if other.model_id != self.model_id:
                raise ModelMismatchError("cannot add k-space data from different models")
            other = other.samples
        return KSpaceData(self.samples + other, self.model_id)


def _check_image(x, mm):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (2,) + mm.shape:
        raise ValueError(f"image shape {x.shape} does not match model {(2,) + mm.shape}")
    return x


def apply_A(x, mm):
    x = _check_image(x, mm)
    return KSpaceData(mm.forward_c(to_complex(x)), mm.model_id)


def apply_AH(b, mm):
    if b.model_id != mm.model_id:
        raise ModelMismatchError(f"k-space bound to model {b.model_id}, got {mm.model_id}")
    if b.samples.shape != mm.coil_maps.shape:
        raise ValueError(f"k-space shape {b.samples.shape} does not match {mm.coil_maps.shape}")
    return to_channels(mm.adjoint_c(b.samples))


def apply_AHA(x, mm):
    return mm.aha(_check_image(x, mm))


def sense_init(b, mm, mu=1e-2, tol=1e-6, max_iter=200):
    """Regularized least squares: solve (A^H A + mu I) x = A^H b by CG."""
    rhs = apply_AH(b, mm)
    return cg_solve(lambda v: mm.aha(v) + mu * v, rhs, tol=tol, max_iter=max_iter)


# ---------------------------------------------------------------- synthetic data

def _grid(H, W):
    y = (np.arange(H) - H / 2 + 0.5) / (H / 2)
    x = (np.arange(W) - W / 2 + 0.5) / (W / 2)
    return np.meshgrid(y, x, indexing="ij")


def _ellipse(Y, X, cy, cx, ry, rx, angle, edge):
    c, s = np.cos(angle), np.sin(angle)
    u = ((X - cx) * c + (Y - cy) * s) / rx
    v = (-(X - cx) * s + (Y - cy) * c) / ry
    r = np.sqrt(u * u + v * v)
    return 1.0 / (1.0 + np.exp((r - 1.0) / edge))


def generate_phantom(H, W, seed):
    """Smooth-edged ellipse phantom with a random linear phase, max modulus 1."""
    rng = np.random.default_rng(seed)
    Y, X = _grid(H, W)
    edge = 1.5 / max(H, W)
    img = rng.uniform(0.55, 0.8) * _ellipse(Y, X, rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                                            rng.uniform(0.75, 0.9), rng.uniform(0.6, 0.8),
                                            rng.uniform(-0.3, 0.3), 4 * edge)
    for _ in range(rng.integers(3, 7)):
        r = rng.uniform(0.08, 0.3, size=2)
        img = img + rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 0.4) * _ellipse(
            Y, X, rng.uniform(-0.45, 0.45), rng.uniform(-0.35, 0.35), r[0], r[1],
            rng.uniform(0, np.pi), 2 * edge)
    img = np.clip(img, 0.0, None)
    a, b, c = rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-np.pi, np.pi)
    z = img * np.exp(1j * (a * X + b * Y + c))
    z /= np.max(np.abs(z))
    return to_channels(z)


def generate_coil_maps(C, H, W, seed):
    """Smooth complex sensitivities placed around the field of view, normalized."""
    rng = np.random.default_rng(seed)
    Y, X = _grid(H, W)
    maps = np.empty((C, H, W), dtype=np.complex128)
    for c in range(C):
        ang = 2 * np.pi * c / C + rng.uniform(-0.3, 0.3)
        cy, cx = 1.3 * np.sin(ang), 1.3 * np.cos(ang)
        width = rng.uniform(0.9, 1.4)
        mag = np.exp(-((Y - cy) ** 2 + (X - cx) ** 2) / (2 * width ** 2))
        phase = rng.uniform(-np.pi, np.pi) + rng.uniform(-1, 1) * X + rng.uniform(-1, 1) * Y
        maps[c] = mag * np.exp(1j * phase)
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return maps


def _center(n):
    return max(1, min(CENTER, n // 4))


def generate_vd_mask(H, W, accel, seed, kind="2d"):
    """Variable-density Cartesian mask with a fully sampled center.

    ``kind='2d'`` samples points (an 8x8 center is always kept), ``kind='1d'``
    samples whole phase-encode columns (8 center lines kept). On small grids
    the center shrinks to a quarter of each side. The number of kept
    samples is exactly ``round(total / accel)``; the remaining samples are
    drawn without replacement with Gaussian weights on k-space radius.
    """
    if accel < 1:
        raise ValueError("accel must be >= 1")
    if accel == 1:
        return np.ones((H, W))
    rng = np.random.default_rng(seed)
    ch, cw = _center(H), _center(W)
    if kind == "2d":
        total, center = H * W, ch * cw
        ky, kx = _grid(H, W)
        radius2 = ky ** 2 + kx ** 2
        keep = np.zeros((H, W), dtype=bool)
        cy, cx = H // 2 - ch // 2, W // 2 - cw // 2
        keep[cy:cy + ch, cx:cx + cw] = True
    elif kind == "1d":
        total, center = W, cw
        kx = (np.arange(W) - W / 2 + 0.5) / (W / 2)
        radius2 = kx ** 2
        keep = np.zeros(W, dtype=bool)
        c0 = W // 2 - cw // 2
        keep[c0:c0 + cw] = True
    else:
        raise ValueError(f"unknown mask kind {kind!r}")
    if accel > total / center:
        raise ValueError(f"accel {accel} too large for a {H}x{W} grid with a fully sampled center")
    n_target = int(round(total / accel))
    n_extra = max(n_target - int(keep.sum()), 0)
    weights = np.exp(-radius2 / (2 * 0.35 ** 2)) + 0.02
    flat_keep = keep.ravel()
    cand = np.flatnonzero(~flat_keep)
    # Gumbel top-k == weighted sampling without replacement
    keys = np.log(weights.ravel()[cand]) + rng.gumbel(size=cand.size)
    chosen = cand[np.argsort(-keys, kind="stable")[:n_extra]]
    flat_keep = flat_keep.copy()
    flat_keep[chosen] = True
    if kind == "2d":
        return flat_keep.reshape(H, W).astype(np.float64)
    return np.broadcast_to(flat_keep[None, :], (H, W)).astype(np.float64)


def add_noise(b, mm, sigma, seed):
    """Circular Gaussian noise (std ``sigma`` per real channel) at sampled locations."""
    rng = np.random.default_rng(seed)
    shape = b.samples.shape
    n = sigma * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return KSpaceData(b.samples + mm.mask * n, b.model_id)


@dataclass(eq=False)
class Sample:
    x_ref: np.ndarray
    b: KSpaceData
    mm: MeasurementModel


def synthetic_dataset(count, size=(32, 32), coils=4, accel=4, sigma=0.01, seed=0, kind="2d"):
    """Seeded phantoms with per-sample coil maps and one shared sampling mask."""
    H, W = size
    ss = np.random.SeedSequence(seed)
    mask_seed, *children = ss.generate_state(1 + 3 * count)
    mask = generate_vd_mask(H, W, accel, int(mask_seed), kind=kind)
    samples = []
    for i in range(count):
        ps, ms, ns = (int(s) for s in children[3 * i:3 * i + 3])
        x = generate_phantom(H, W, ps)
        mm = MeasurementModel(mask, generate_coil_maps(coils, H, W, ms), sigma)
        b = apply_A(x, mm)
        if sigma > 0:
            b = add_noise(b, mm, sigma, ns)
        samples.append(Sample(x, b, mm))
    return samples
