"""Sensitivity of DEQ reconstructions to k-space perturbations."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fixed_point import (AdjointConvergenceError, DivergenceError, SolverConfig,
                          SteepestDescentMap, deq_backward, iterate)
from .metrics import psnr
from .mri import KSpaceData, sense_init
from .operators import CombinedOperator


@dataclass
class PerturbationReport:
    epsilon: float
    n_star: np.ndarray
    psnr_clean: float
    psnr_perturbed: float
    delta_norm: float
    ahn_norm: float
    bound: float
    bound_satisfied: bool
    diverged: bool = False
    objective_trace: list = field(default_factory=list)


@dataclass
class BoundCheck:
    applicable: bool
    satisfied: bool
    delta_norm: float
    bound: float
    ahn_norm: float
    margin: float


def _as_map(op_or_map, b, cfg):
    if isinstance(op_or_map, CombinedOperator):
        return SteepestDescentMap(op_or_map, b, cfg.gamma_lambda)
    return op_or_map


def _solve(T, x0, cfg):
    return iterate(T, x0, cfg.tol, cfg.max_iter, cfg.atol, cfg.divergence_factor)


def _psnr(x, ref):
    return psnr(x, ref) if ref is not None else float("nan")


def _ahn_norm(mm, n):
    return float(np.linalg.norm(mm.adjoint_c(n)))


class _Problem:
    """Clean solve plus helpers shared by the perturbation routines."""

    def __init__(self, op_or_map, b, cfg, x_ref, x0, m):
        self.cfg = cfg or SolverConfig()
        self.T = _as_map(op_or_map, b, self.cfg)
        self.b = b
        self.mm = self.T.mm
        self.x_ref = x_ref
        if x0 is None:
            x0 = sense_init(b, self.mm)
        clean = _solve(self.T, x0, self.cfg)
        if not clean.converged:
            raise RuntimeError("clean forward solve did not converge")
        self.x_clean = clean.x_star
        self.m = m if m is not None else self.cfg.m_assumed
        self.budget_scale = b.norm()

    def solve(self, n):
        """Perturbed fixed point, warm-started at the clean solution."""
        Tn = self.T.with_b(self.b + KSpaceData(n, self.b.model_id))
        return Tn, _solve(Tn, self.x_clean, self.cfg)

    def report(self, eps, n, y, diverged, trace):
        d = float(np.linalg.norm(y - self.x_clean))
        ahn = _ahn_norm(self.mm, n)
        bound = ahn / self.m
        return PerturbationReport(eps, n, _psnr(self.x_clean, self.x_ref), _psnr(y, self.x_ref), d, ahn,
                                  bound, (not diverged) and d <= bound * (1 + 1e-9) + 1e-12, diverged, trace)


def _project(n, radius):
    nn = float(np.linalg.norm(n))
    return n if nn <= radius else n * (radius / nn)


def adversarial_perturb(op, b, epsilon, steps=20, seed=0, x_ref=None, x0=None, cfg=None, m=None,
                        step_size=None, max_backtracks=6, n_init=None):
    """Worst-case perturbation of ``b`` within ||n|| <= epsilon ||b||.

    Projected gradient ascent on U(n) = ||x*(b + n) - x*(b)||^2 with implicit
    gradients. Steps have length ``step_size`` (default 0.1 epsilon ||b||),
    halve when U would drop and double after an accepted step; the best
    perturbation seen is returned. ``op`` is a :class:`CombinedOperator` or a
    fixed-point map with a ``with_b`` method.

    ``n_init`` warm-starts the ascent (projected onto the budget); passing the
    result at a smaller epsilon makes the achieved objective non-decreasing
    in epsilon.
    """
    P = _Problem(op, b, cfg, x_ref, x0, m)
    radius = epsilon * P.budget_scale
    mask = P.mm.mask
    if radius == 0.0:
        n = np.zeros_like(b.samples)
        return P.report(epsilon, n, P.x_clean, False, [0.0])
    if n_init is not None and np.any(n_init):
        n = _project(mask * np.asarray(n_init, dtype=complex), radius)
    else:
        rng = np.random.default_rng(seed)
        n = mask * (rng.standard_normal(b.samples.shape) + 1j * rng.standard_normal(b.samples.shape))
        n *= radius / np.linalg.norm(n)
    base = 0.1 * radius if step_size is None else float(step_size)
    s = base

    def evaluate(n):
        Tn, res = P.solve(n)
        err = res.x_star - P.x_clean
        return Tn, res, float(np.vdot(err, err))

    try:
        Tn, res, U = evaluate(n)
    except DivergenceError as exc:
        return P.report(epsilon, n, exc.result.x_star, True, [float("inf")])
    trace = [U]
    for _ in range(steps):
        try:
            grad = deq_backward(Tn, res.x_star, 2.0 * (res.x_star - P.x_clean),
                                P.cfg.backward_tol, P.cfg.backward_max_iter).b * mask
        except AdjointConvergenceError:
            break
        gn = float(np.linalg.norm(grad))
        if gn == 0.0:
            trace.append(U)
            continue
        for _ in range(max_backtracks):
            cand = _project(n + (s / gn) * grad, radius)
            try:
                cTn, cres, cU = evaluate(cand)
            except DivergenceError as exc:
                trace.append(float("inf"))
                return P.report(epsilon, cand, exc.result.x_star, True, trace)
            if cU >= U:
                n, Tn, res, U = cand, cTn, cres, cU
                s = min(2 * s, 2 * radius)
                break
            s *= 0.5
        else:
            s = base
        trace.append(U)
    return P.report(epsilon, n, res.x_star, False, trace)


def gaussian_perturb(op, b, epsilon, trials=10, seed=0, x_ref=None, x0=None, cfg=None, m=None):
    """Random circular-Gaussian perturbations rescaled to ||n|| = epsilon ||b||."""
    P = _Problem(op, b, cfg, x_ref, x0, m)
    radius = epsilon * P.budget_scale
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(trials):
        n = P.mm.mask * (rng.standard_normal(b.samples.shape) + 1j * rng.standard_normal(b.samples.shape))
        if radius == 0.0:
            out.append(P.report(epsilon, np.zeros_like(n), P.x_clean, False, []))
            continue
        n *= radius / np.linalg.norm(n)
        try:
            _, res = P.solve(n)
            out.append(P.report(epsilon, n, res.x_star, False, []))
        except DivergenceError as exc:
            out.append(P.report(epsilon, n, exc.result.x_star, True, []))
    return out


def verify_robustness_bound(op, b, n, m_certified, radius, x_clean=None, x0=None, cfg=None):
    """Check ||x*(b + n) - x*(b)|| <= ||A^H n|| / m when ||A^H n|| <= m * radius.

    ``radius`` is the absolute ball radius. Returns ``applicable=False`` when
    the precondition fails or a solve does not converge.
    """
    cfg = cfg or SolverConfig()
    T = _as_map(op, b, cfg)
    mm = T.mm
    ahn = _ahn_norm(mm, n)
    bound = ahn / m_certified
    if ahn > m_certified * radius:
        return BoundCheck(False, False, float("nan"), bound, ahn, float("nan"))
    if not np.any(n):
        return BoundCheck(True, True, 0.0, 0.0, 0.0, 0.0)
    try:
        if x_clean is None:
            x0 = sense_init(b, mm) if x0 is None else x0
            clean = _solve(T, x0, cfg)
            if not clean.converged:
                return BoundCheck(False, False, float("nan"), bound, ahn, float("nan"))
            x_clean = clean.x_star
        pert = _solve(T.with_b(b + KSpaceData(n, b.model_id)), x_clean, cfg)
    except DivergenceError:
        return BoundCheck(False, False, float("nan"), bound, ahn, float("nan"))
    if not pert.converged:
        return BoundCheck(False, False, float("nan"), bound, ahn, float("nan"))
    d = float(np.linalg.norm(pert.x_star - x_clean))
    return BoundCheck(True, d <= bound * (1 + 1e-9) + 1e-12, d, bound, ahn, bound - d)
