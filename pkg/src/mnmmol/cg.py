"""Conjugate gradient for symmetric positive definite maps on real arrays."""
import numpy as np


class CGConvergenceError(RuntimeError):
    def __init__(self, residual, iterations):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"CG did not converge in {iterations} iterations "
                         f"(relative residual {residual:.3e})")


def cg_solve(apply, rhs, tol=1e-6, max_iter=200, x0=None, info=False):
    """Solve ``apply(x) = rhs`` for an SPD linear map.

    Stops once ``||rhs - apply(x)|| <= tol * ||rhs||``. With ``info=True``
    returns ``(x, iterations, relative_residual)``.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    bnorm = np.linalg.norm(rhs)
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=np.float64)
    if bnorm == 0.0:
        x = np.zeros_like(rhs)
        return (x, 0, 0.0) if info else x
    r = rhs - apply(x) if x0 is not None else rhs.copy()
    p = r.copy()
    rs = np.vdot(r, r)
    it = 0
    rel = np.sqrt(rs) / bnorm
    while rel > tol:
        if it >= max_iter:
            raise CGConvergenceError(rel, it)
        Ap = apply(p)
        alpha = rs / np.vdot(p, Ap)
        x += alpha * p
        r -= alpha * Ap
        rs_new = np.vdot(r, r)
        p = r + (rs_new / rs) * p
        rs = rs_new
        it += 1
        rel = np.sqrt(rs) / bnorm
    return (x, it, rel) if info else x
