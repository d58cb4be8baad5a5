"""Deep-equilibrium forward solvers and implicit backpropagation.

Two fixed-point maps share one iteration driver:

* :class:`SteepestDescentMap` -- T(x) = x - s Q(x) + s A^H b with s = gamma*lambda.
* :class:`ForwardBackwardMap` -- T(x) = R(x - alpha F(x) + alpha lam A^H b),
  R = (I + alpha lam A^H A)^{-1}, the MOL baseline.

Both have fixed points satisfying lam A^H (A x - b) + F(x) = 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg
from .cg import CGConvergenceError, cg_solve  # noqa: F401  (re-exported)
from .mri import apply_AH, to_complex


@dataclass
class SolverConfig:
    """Iteration controls.

    ``gamma_lambda`` is the product of step size and lambda; the convergence
    guarantee needs it in (0, 1].
    """

    gamma_lambda: float = 1.0
    alpha: float = 1.0
    tol: float = 1e-5
    atol: float = 1e-12
    max_iter: int = 100
    backward_tol: float = 1e-5
    backward_max_iter: int = 100
    m_assumed: float = 0.1
    divergence_factor: float = 10.0
    inner_tol: float = 1e-10

    def __post_init__(self):
        if not 0.0 < self.gamma_lambda <= 1.0:
            raise ValueError("gamma_lambda must lie in (0, 1]")
        if self.tol <= 0 or self.backward_tol <= 0:
            raise ValueError("tolerances must be > 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.max_iter < 1 or self.backward_max_iter < 1:
            raise ValueError("iteration limits must be positive")


@dataclass
class FixedPointResult:
    x_star: np.ndarray
    residuals: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    trajectory: list | None = None


class DivergenceError(RuntimeError):
    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


class AdjointConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------- maps

class SteepestDescentMap:
    """x -> x - s Q(x) + s A^H b for a :class:`CombinedOperator`."""

    def __init__(self, op, b, step=1.0):
        self.op = op
        self.step = float(step)
        self.ahb = apply_AH(b, op.mm)

    @property
    def mm(self):
        return self.op.mm

    @property
    def lam(self):
        return self.op.lam

    def score_params(self):
        return self.op.score.params()

    def graph(self, x, params=None, lam=None, ahb=None):
        ahb = self.ahb if ahb is None else ahb
        s = self.step
        return dg.add(dg.sub(x, dg.scale(self.op.Q(x, params, lam), s)), dg.scale(ahb, s))

    def __call__(self, x):
        return self.graph(dg.Var(x)).value

    def with_b(self, b):
        return SteepestDescentMap(self.op, b, self.step)


class ForwardBackwardMap:
    """x -> (I + alpha lam A^H A)^{-1} (x - alpha F(x) + alpha lam A^H b)."""

    def __init__(self, score, mm, b, lam=10.0, alpha=1.0, inner_tol=1e-10):
        self.score, self._mm, self._lam = score, mm, float(lam)
        self.alpha, self.inner_tol = float(alpha), inner_tol
        self._b = b
        self.ahb = apply_AH(b, mm)

    @property
    def mm(self):
        return self._mm

    @property
    def lam(self):
        return self._lam

    def score_params(self):
        return self.score.params()

    def resolve(self, r, lam=None):
        lam = self._lam if lam is None else lam
        c = self.alpha * lam
        return cg_solve(lambda v: v + c * self._mm.aha(v), r, tol=self.inner_tol, max_iter=1000)

    def _resolvent(self, r, lam):
        lam_v = float(lam.value) if isinstance(lam, dg.Var) else self._lam
        y = self.resolve(r.value, lam_v)

        def back(g):
            gr = self.resolve(g, lam_v)
            gl = -self.alpha * np.vdot(gr, self._mm.aha(y))
            return gr, np.array(gl)

        return dg.custom(y, (r, lam if isinstance(lam, dg.Var) else dg.Var(lam_v)), back, "resolvent")

    def graph(self, x, params=None, lam=None, ahb=None):
        ahb = dg.as_var(self.ahb if ahb is None else ahb)
        a = self.alpha
        lam_term = dg.scale(ahb, a * self._lam) if lam is None else dg.scale(dg.scale(ahb, lam), a)
        r = dg.add(dg.sub(x, dg.scale(self.score(x, params), a)), lam_term)
        return self._resolvent(r, lam)

    def __call__(self, x):
        return self.graph(dg.Var(x)).value

    def with_b(self, b):
        return ForwardBackwardMap(self.score, self._mm, b, self._lam, self.alpha, self.inner_tol)


# ---------------------------------------------------------------- forward

def iterate(T, x0, tol=1e-5, max_iter=100, atol=1e-12, divergence_factor=10.0, keep_trajectory=False):
    """Run x_{k+1} = T(x_k) until the relative change is at most ``tol``."""
    x = np.array(x0, dtype=np.float64)
    res = FixedPointResult(x_star=x, trajectory=[x.copy()] if keep_trajectory else None)
    first = None
    for k in range(max_iter):
        x_new = T(x)
        step = float(np.linalg.norm(x_new - x))
        xn = float(np.linalg.norm(x))
        r = step / xn if xn > 0 else step
        res.residuals.append(r)
        res.iterations = k + 1
        if keep_trajectory:
            res.trajectory.append(x_new.copy())
        first = step if first is None else first
        # absolute step length: the relative change stays flat under geometric blow-up
        bad = not np.all(np.isfinite(x_new)) or not np.isfinite(r)
        if bad or (first > 0 and step > divergence_factor * first):
            res.x_star = x
            raise DivergenceError(f"fixed-point iteration diverged at step {k + 1} "
                                  f"(step {step:.3e}, initial {first:.3e})", res)
        x = x_new
        if r <= tol or step <= atol:
            res.converged = True
            break
    res.x_star = x
    return res


def steepest_descent_fp(op, b, x0, cfg=None, keep_trajectory=False):
    cfg = cfg or SolverConfig()
    T = SteepestDescentMap(op, b, cfg.gamma_lambda)
    return iterate(T, x0, cfg.tol, cfg.max_iter, cfg.atol, cfg.divergence_factor, keep_trajectory)


def forward_backward_fp(F, mm, b, x0, cfg=None, lam=10.0, keep_trajectory=False):
    cfg = cfg or SolverConfig()
    T = ForwardBackwardMap(F, mm, b, lam, cfg.alpha, cfg.inner_tol)
    return iterate(T, x0, cfg.tol, cfg.max_iter, cfg.atol, cfg.divergence_factor, keep_trajectory)


def fixed_point_residual(score, mm, b, x, lam):
    """||lam A^H (A x - b) + F(x)|| / ||lam A^H b||."""
    ahb = apply_AH(b, mm)
    r = lam * (mm.aha(x) - ahb) + score(dg.Var(x)).value
    return float(np.linalg.norm(r) / np.linalg.norm(lam * ahb))


# ---------------------------------------------------------------- backward

@dataclass
class DEQGradients:
    params: list
    lam: float
    ahb: np.ndarray
    b: np.ndarray
    iterations: int


def deq_backward(T, x_star, g, tol=1e-5, max_iter=100):
    """Implicit gradient through the fixed point of ``T``.

    Solves u = J_x(T)^T u + g by fixed-point iteration, then returns the
    vector-Jacobian products of T with respect to the network parameters,
    lambda and A^H b (and, through A, the k-space data) at ``x_star``.
    """
    g = np.asarray(g, dtype=np.float64)
    params = [dg.Var(p) for p in T.score_params()]
    xl = dg.leaf(x_star)
    y = T.graph(xl, params)
    u = g.copy()
    it = 0
    if np.any(g):
        while True:
            u_new = dg.backward(y, u, [xl])[0] + g
            it += 1
            nu = float(np.linalg.norm(u))
            change = float(np.linalg.norm(u_new - u)) / (nu if nu > 0 else 1.0)
            u = u_new
            if not np.all(np.isfinite(u)):
                raise AdjointConvergenceError("adjoint iteration produced non-finite values")
            if change <= tol:
                break
            if it >= max_iter:
                raise AdjointConvergenceError(f"adjoint iteration did not converge in {max_iter} "
                                              f"steps (relative change {change:.3e})")
    pl = [dg.leaf(p) for p in T.score_params()]
    lam_l = dg.leaf(T.lam)
    ahb_l = dg.leaf(T.ahb)
    y = T.graph(dg.Var(x_star), pl, lam_l, ahb_l)
    grads = dg.backward(y, u, pl + [lam_l, ahb_l])
    g_ahb = grads[-1]
    g_b = T.mm.forward_c(to_complex(g_ahb))
    return DEQGradients(params=grads[:-2], lam=float(grads[-2]), ahb=g_ahb, b=g_b, iterations=it)


def unrolled_gradient(T, x0, x_ref, steps):
    """Gradient of ||T^steps(x0) - x_ref||^2 by backpropagating through every step."""
    pl = [dg.leaf(p) for p in T.score_params()]
    lam_l = dg.leaf(T.lam)
    x = dg.Var(x0)
    for _ in range(steps):
        x = T.graph(x, pl, lam_l)
    loss = dg.sumsq(dg.sub(x, x_ref))
    grads = dg.grad(loss, pl + [lam_l])
    return grads[:-1], float(grads[-1]), x.value
