"""Score networks and the operators built from them.

``CombinedOperator`` realizes Q(x) = A^H A x + F(x) / lam and its residual
H(x) = x - Q(x). Everything is expressed with :mod:`diffgraph` primitives so
both operators are differentiable in the image and in the network weights.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from . import kernels


class ScoreNetwork:
    """Small circular-padding CNN on 2-channel images.

    Parameters
    ----------
    layers : list of (weight, bias)
        Conv weights ``(cout, cin, k, k)`` and biases ``(cout,)``. ReLU sits
        between consecutive layers.
    residual : bool
        If true the network computes ``x - N(x)`` (the MOL parametrization,
        where the CNN ``N`` is the residual); otherwise ``N(x)``.
    """

    def __init__(self, layers, residual=False):
        self.layers = [(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64)) for w, b in layers]
        self.residual = residual
        for w, b in self.layers:
            if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0 or b.shape != (w.shape[0],):
                raise ValueError(f"bad layer shapes {w.shape}, {b.shape}")
        if self.layers[0][0].shape[1] != 2 or self.layers[-1][0].shape[0] != 2:
            raise ValueError("network must map 2 channels to 2 channels")

    @classmethod
    def init(cls, seed=0, hidden=16, depth=3, kernel=3, gain=1.0, noise=0.05, residual=False):
        """Build a network that starts as the linear map ``x -> gain * x``.

        Four hidden channels carry ``[x, -x]`` through the ReLUs (so the map
        is exact); the other hidden channels get random weights scaled by
        ``noise`` and feed the output through zero weights. For
        ``residual=True`` the CNN starts at ``(1 - gain) * x`` so that
        ``F = x - N(x)`` again equals ``gain * x``.
        """
        if hidden < 4:
            raise ValueError("need at least 4 hidden channels")
        rng = np.random.default_rng(seed)
        p = kernel // 2
        dims = [2] + [hidden] * (depth - 1) + [2]
        layers = []
        for i, (cin, cout) in enumerate(zip(dims[:-1], dims[1:])):
            w = noise * rng.standard_normal((cout, cin, kernel, kernel)) * np.sqrt(2.0 / (cin * kernel * kernel))
            b = np.zeros(cout)
            layers.append([w, b])
        out_gain = (1.0 - gain) if residual else gain
        if depth == 1:
            layers[0][0][:] = 0.0
            layers[0][0][[0, 1], [0, 1], p, p] = out_gain
            return cls(layers, residual)
        w0 = layers[0][0]
        w0[:4] = 0.0
        w0[0, 0, p, p], w0[1, 1, p, p], w0[2, 0, p, p], w0[3, 1, p, p] = 1.0, 1.0, -1.0, -1.0
        for w, _ in layers[1:-1]:
            w[:4] = 0.0
            w[:, :4] = 0.0
            for c in range(4):
                w[c, c, p, p] = 1.0
        wl = layers[-1][0]
        wl[:] = 0.0
        wl[0, 0, p, p], wl[0, 2, p, p] = out_gain, -out_gain
        wl[1, 1, p, p], wl[1, 3, p, p] = out_gain, -out_gain
        return cls(layers, residual)

    @classmethod
    def zeros(cls, hidden=16, depth=3, kernel=3):
        dims = [2] + [hidden] * (depth - 1) + [2]
        return cls([(np.zeros((co, ci, kernel, kernel)), np.zeros(co)) for ci, co in zip(dims[:-1], dims[1:])])

    # parameters ------------------------------------------------------------
    def params(self):
        return [a for layer in self.layers for a in layer]

    def leaves(self):
        return [dg.leaf(a) for a in self.params()]

    @property
    def n_params(self):
        return sum(a.size for a in self.params())

    @property
    def theta(self):
        return np.concatenate([a.ravel() for a in self.params()])

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.size}")
        out, i = [], 0
        for w, b in self.layers:
            nw = theta[i:i + w.size].reshape(w.shape)
            i += w.size
            nb = theta[i:i + b.size].reshape(b.shape)
            i += b.size
            out.append((nw, nb))
        return ScoreNetwork(out, self.residual)

    def with_params(self, arrays):
        return ScoreNetwork(list(zip(arrays[0::2], arrays[1::2])), self.residual)

    def copy(self):
        return copy.deepcopy(self)

    # evaluation ------------------------------------------------------------
    def cnn(self, x, params=None):
        """The convolutional part alone."""
        ps = self.params() if params is None else params
        h = x
        n = len(self.layers)
        for i in range(n):
            h = dg.conv2d(h, ps[2 * i], ps[2 * i + 1])
            if i < n - 1:
                h = dg.relu(h)
        return h

    def __call__(self, x, params=None):
        x = dg.as_var(x)
        out = self.cnn(x, params)
        return dg.sub(x, out) if self.residual else out


class LinearScore:
    """Linear stand-in for a score network: F(x) = beta x - kappa A^H A x.

    With ``kappa`` equal to the operator's lambda the combined operator becomes
    ``(beta / lambda) I`` for any forward model.
    """

    residual = False

    def __init__(self, beta, kappa, mm):
        self.beta, self.kappa, self.mm = float(beta), float(kappa), mm

    def params(self):
        return []

    def leaves(self):
        return []

    def __call__(self, x, params=None):
        x = dg.as_var(x)
        return dg.sub(dg.scale(x, self.beta), dg.scale(dg.linear_map(x, self.mm.aha, name="AHA"), self.kappa))


@dataclass(eq=False)
class CombinedOperator:
    """Q(x) = A^H A x + F(x) / lam and its residual H = I - Q."""

    score: object
    mm: object
    lam: float = 10.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be > 0")

    def Q(self, x, params=None, lam=None):
        x = dg.as_var(x)
        inv = 1.0 / self.lam if lam is None else dg.div(1.0, lam)
        return dg.add(dg.linear_map(x, self.mm.aha, name="AHA"), dg.scale(self.score(x, params), inv))

    def H(self, x, params=None, lam=None):
        x = dg.as_var(x)
        return dg.sub(x, self.Q(x, params, lam))

    def Q_np(self, x):
        return self.Q(x).value

    def H_np(self, x):
        return self.H(x).value


def score_apply(F, x, params=None):
    return F(x, params)


def combined_Q(op, x):
    return op.Q(x)


def residual_H(op, x):
    return op.H(x)


# ---------------------------------------------------------------- spectral norm

class PowerIterationError(RuntimeError):
    pass


def _top_singular_start(w, shape):
    """Real top right-singular vector of a circular conv, from per-frequency SVDs."""
    cout, cin, k, _ = w.shape
    H, W = shape
    p = k // 2
    # frequency response of out[o,i,j] = sum w[o,c,a,b] x[c,i+a-p,j+b-p]
    kern = np.zeros((cout, cin, H, W))
    for a in range(k):
        for b in range(k):
            kern[:, :, (p - a) % H, (p - b) % W] += w[:, :, a, b]
    what = np.fft.fft2(kern).transpose(2, 3, 0, 1)
    _, s, vh = np.linalg.svd(what)
    fi, fj = np.unravel_index(np.argmax(s[..., 0]), (H, W))
    u = vh[fi, fj, 0].conj()
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    phase = np.exp(2j * np.pi * (fi * ii / H + fj * jj / W))
    v = np.real(u[:, None, None] * phase)
    if not np.any(v):
        v = np.imag(u[:, None, None] * phase)
    return v


def conv_spectral_norm(w, shape, tol=1e-6, max_iter=500, min_iter=20, seed=0):
    """Operator norm of a circular conv (bias ignored) on images of ``shape``.

    Power iteration on W^T W, stopped when the relative change of the
    estimate falls below ``tol`` (after at least ``min_iter`` steps). The
    start vector is the top singular vector read off the DFT block diagonal,
    mixed with a little noise, so clustered top singular values do not stall it.
    """
    w = np.asarray(w, dtype=np.float64)
    cout, cin, k, _ = w.shape
    zero_b = np.zeros(cout)
    if not np.any(w):
        return 0.0
    v = _top_singular_start(w, shape)
    v /= np.linalg.norm(v)
    noise = np.random.default_rng(seed).standard_normal(v.shape)
    v = v + 1e-3 * noise / np.linalg.norm(noise)
    v /= np.linalg.norm(v)
    est = 0.0
    change = float("inf")
    for it in range(1, max_iter + 1):
        u = kernels.conv2d_forward(v, w, zero_b)
        wtw = kernels.conv2d_grad_input(u, w)
        nrm = np.linalg.norm(wtw)
        if nrm == 0.0:
            return 0.0
        new = np.sqrt(nrm)
        v = wtw / nrm
        change = abs(new - est) / new
        if it >= min_iter and change <= tol:
            return float(np.linalg.norm(kernels.conv2d_forward(v, w, zero_b)))
        est = new
    raise PowerIterationError(f"power iteration did not converge in {max_iter} steps "
                              f"(last relative change {change:.2e})")


def spectral_normalize(F, target_L, shape, tol=1e-6, max_iter=500, slack=1e-9):
    """Rescale conv layers so the product of their norms is at most ``target_L``.

    ReLUs count as 1-Lipschitz, so the product bounds the CNN's global
    Lipschitz constant. All layers share the same factor. Networks already
    within ``target_L * (1 + slack)`` are returned unchanged.
    """
    if not 0.0 < target_L < 1.0:
        raise ValueError("target_L must lie in (0, 1)")
    norms = [conv_spectral_norm(w, shape, tol=tol, max_iter=max_iter) for w, _ in F.layers]
    prod = float(np.prod(norms))
    if prod <= target_L * (1.0 + slack):
        return F.copy()
    s = (target_L / prod) ** (1.0 / len(F.layers))
    return ScoreNetwork([(w * s, b) for w, b in F.layers], F.residual)


def layer_norm_product(F, shape):
    return float(np.prod([conv_spectral_norm(w, shape) for w, _ in F.layers]))


# ---------------------------------------------------------------- probes

def monotonicity_probe(op, z1, z2):
    """Re<z1 - z2, Q(z1) - Q(z2)> / ||z1 - z2||^2."""
    d = np.asarray(z1, dtype=np.float64) - np.asarray(z2, dtype=np.float64)
    dd = np.vdot(d, d)
    if dd == 0.0:
        raise ValueError("monotonicity_probe needs z1 != z2")
    return float(np.vdot(d, op.Q_np(z1) - op.Q_np(z2)) / dd)


def lipschitz_ratio(H, z1, z2):
    """||H(z2) - H(z1)|| / ||z2 - z1|| for a numpy-valued map."""
    d = np.linalg.norm(np.asarray(z2) - np.asarray(z1))
    if d == 0.0:
        raise ValueError("lipschitz_ratio needs z1 != z2")
    return float(np.linalg.norm(H(z2) - H(z1)) / d)
