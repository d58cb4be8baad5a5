"""Local Lipschitz estimation by projected gradient ascent inside a ball."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg


class CollisionError(RuntimeError):
    pass


@dataclass
class BallSpec:
    """Ball around ``center``.

    With ``relative=True`` (the default) the radius is ``delta * ||center||``,
    the same units as the SENSE-deviation statistic used to pick ``delta``.
    """

    center: np.ndarray
    delta: float
    relative: bool = True

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if not self.delta > 0:
            raise ValueError("delta must be > 0")

    @property
    def radius(self):
        if self.relative:
            return self.delta * float(np.linalg.norm(self.center))
        return self.delta

    def contains(self, z, tol=1e-9):
        return float(np.linalg.norm(np.asarray(z) - self.center)) <= self.radius * (1 + tol) + tol


@dataclass
class LipschitzEstimate:
    L: float
    z1: np.ndarray
    z2: np.ndarray
    ascent_trace: list = field(default_factory=list)


def project_ball(z, ball):
    z = np.asarray(z, dtype=np.float64)
    d = z - ball.center
    n = float(np.linalg.norm(d))
    R = ball.radius
    if n <= R:
        return z.copy()
    return ball.center + (R / n) * d


def _random_in_ball(rng, ball):
    d = rng.standard_normal(ball.center.shape)
    d /= np.linalg.norm(d)
    return ball.center + ball.radius * rng.uniform() * d


def ratio_sq(H, z1, z2):
    """Squared ratio ||H(z2) - H(z1)||^2 / ||z2 - z1||^2 as a graph node."""
    num = dg.sumsq(dg.sub(H(z2), H(z1)))
    den = dg.sumsq(dg.sub(z2, z1))
    return dg.div(num, den)


def _value_and_grad(H, z1, z2):
    a, b = dg.leaf(z1), dg.leaf(z2)
    r = ratio_sq(H, a, b)
    g1, g2 = dg.grad(r, [a, b])
    return float(r.value), g1, g2


def estimate_local_lipschitz(H, ball, steps=200, step_size=None, seed=0, max_backtracks=10):
    """Lower estimate of max ||H(z2) - H(z1)|| / ||z2 - z1|| over the ball.

    ``H`` maps a :class:`~mnmmol.diffgraph.Var` to a Var. Ascent runs on the
    squared ratio with normalized gradient steps (default length ``0.1``
    radii), halving the step whenever the ratio would decrease and doubling
    it after each accepted step. Both points are projected back each step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    R = ball.radius
    if not R > 0:
        raise ValueError("ball radius must be > 0")
    base = 0.1 * R if step_size is None else float(step_size)
    tiny = 1e-12 * max(R, 1e-300)
    collisions = 0

    def separate(z1, z2):
        nonlocal collisions
        while np.linalg.norm(z2 - z1) <= tiny:
            collisions += 1
            if collisions > 5:
                raise CollisionError("z1 and z2 collided repeatedly during ascent")
            d = rng.standard_normal(z2.shape)
            z2 = project_ball(z2 + (R / 100) * d / np.linalg.norm(d), ball)
        return z2

    z1 = _random_in_ball(rng, ball)
    z2 = separate(z1, _random_in_ball(rng, ball))
    r2, g1, g2 = _value_and_grad(H, z1, z2)
    trace = []
    s = base
    for _ in range(steps):
        gn = float(np.sqrt(np.vdot(g1, g1) + np.vdot(g2, g2)))
        if gn > 0:
            for _ in range(max_backtracks):
                n1 = project_ball(z1 + (s / gn) * g1, ball)
                n2 = separate(n1, project_ball(z2 + (s / gn) * g2, ball))
                nr2, ng1, ng2 = _value_and_grad(H, n1, n2)
                if nr2 >= r2:
                    z1, z2, r2, g1, g2 = n1, n2, nr2, ng1, ng2
                    s = min(2 * s, 2 * R)
                    break
                s *= 0.5
            else:
                s = base
        trace.append(float(np.sqrt(r2)))
    return LipschitzEstimate(L=float(np.sqrt(r2)), z1=z1, z2=z2, ascent_trace=trace)
