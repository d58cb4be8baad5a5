"""Property suites on seeded synthetic instances.

Each check returns a :class:`CheckResult`; :func:`run_all` runs every suite
and is what ``mnmmol verify-lemmas`` reports.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from . import io as mio
from .cg import cg_solve
from .fixed_point import (ForwardBackwardMap, SolverConfig, SteepestDescentMap, deq_backward, iterate,
                          unrolled_gradient)
from .lipschitz import BallSpec, estimate_local_lipschitz, project_ball, ratio_sq
from .metrics import psnr, ssim
from .mri import (MeasurementModel, Sample, add_noise, apply_A, generate_coil_maps, generate_phantom,
                  generate_vd_mask, sense_init, to_channels)
from .operators import (CombinedOperator, LinearScore, ScoreNetwork, conv_spectral_norm, lipschitz_ratio,
                        monotonicity_probe, spectral_normalize)
from .robustness import adversarial_perturb, gaussian_perturb, verify_robustness_bound
from .trainer import ReconModel, choose_delta, penalty_value_and_grad

TIGHT = SolverConfig(tol=1e-12, atol=1e-14, max_iter=5000, backward_tol=1e-12, backward_max_iter=5000)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass
class Instance:
    """A random nonlinear combined operator with its fixed point and a ball around it."""

    op: CombinedOperator
    x_ref: np.ndarray
    b: object
    x_star: np.ndarray
    ball: BallSpec

    @property
    def mm(self):
        return self.op.mm


def random_problem(seed, size=(16, 16), coils=2, accel=4, sigma=0.01):
    H, W = size
    s = np.random.SeedSequence(seed).generate_state(4)
    mm = MeasurementModel(generate_vd_mask(H, W, accel, int(s[0])), generate_coil_maps(coils, H, W, int(s[1])))
    x = generate_phantom(H, W, int(s[2]))
    b = add_noise(apply_A(x, mm), mm, sigma, int(s[3])) if sigma > 0 else apply_A(x, mm)
    return mm, x, b


def random_network(seed, lam, modulus, hidden=8, coupling=0.3, residual=False):
    """Score network ``modulus * lam * x`` plus a random ReLU branch.

    The identity channels stay exact; the random hidden channels reach the
    output through weights of size ``coupling``. Jittering the identity path
    instead would move its ReLU kinks onto near-zero background pixels, where
    the residual's local Lipschitz constant then sits at about 1.
    """
    rng = np.random.default_rng(seed)
    net = ScoreNetwork.init(seed=seed, hidden=hidden, depth=3, gain=modulus * lam, noise=1.0, residual=residual)
    layers = [(w.copy(), b) for w, b in net.layers]
    wl = layers[-1][0]
    wl[:, 4:] = coupling * rng.standard_normal(wl[:, 4:].shape) / np.sqrt(wl[:, 4:].size)
    return ScoreNetwork(layers, residual)


def random_instance(seed, size=(16, 16), delta=0.1):
    rng = np.random.default_rng(seed + 1000)
    mm, x, b = random_problem(seed, size)
    lam = float(rng.uniform(2.0, 10.0))
    net = random_network(seed, lam, float(rng.uniform(0.2, 0.4)), coupling=lam * float(rng.uniform(0.03, 0.1)))
    op = CombinedOperator(net, mm, lam)
    res = iterate(SteepestDescentMap(op, b), sense_init(b, mm), TIGHT.tol, TIGHT.max_iter, TIGHT.atol)
    return Instance(op, x, b, res.x_star, BallSpec(res.x_star, delta))


def _random_in_ball(rng, ball):
    d = rng.standard_normal(ball.center.shape)
    return ball.center + ball.radius * rng.uniform() ** (1.0 / d.size) * d / np.linalg.norm(d)


def _timed(name, fn, *args):
    t = time.perf_counter()
    try:
        ok, detail = fn(*args)
    except Exception as exc:  # a crashing suite is a failing suite
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t)


def _max_sv_AH(mm):
    n = 2 * mm.shape[0] * mm.shape[1]
    M = np.stack([mm.aha(e.reshape((2,) + mm.shape)).ravel() for e in np.eye(n)], axis=1)
    return float(np.sqrt(np.linalg.eigvalsh(M)[-1]))


# ---------------------------------------------------------------- local monotonicity

def local_monotone(configs=20, size=(16, 16), steps=200, seed=0, pairs=30):
    """Pairs with H-ratio <= 1 - m have monotonicity quotient >= m (m = 1 - L estimate)."""
    worst, checked = np.inf, 0
    for k in range(configs):
        inst = random_instance(seed + k, size)
        H = lambda z, op=inst.op: op.H(z)
        est = estimate_local_lipschitz(H, inst.ball, steps, seed=seed + k)
        if not est.L < 1:
            return False, f"config {k}: L estimate {est.L:.4f} >= 1"
        m = 1.0 - est.L
        rng = np.random.default_rng(seed + k)
        cands = [(est.z1, est.z2)] + [(_random_in_ball(rng, inst.ball), _random_in_ball(rng, inst.ball))
                                      for _ in range(pairs)]
        for z1, z2 in cands:
            r = lipschitz_ratio(inst.op.H_np, z1, z2)
            if r <= 1.0 - m:
                q = monotonicity_probe(inst.op, z1, z2)
                worst = min(worst, q - m)
                checked += 1
                if q < m - 1e-9:
                    return False, f"config {k}: quotient {q:.6f} < m {m:.6f}"
    return True, f"{configs} configs, {checked} pairs, min(quotient - m) = {worst:.3e}"


# ---------------------------------------------------------------- convergence

def linear_rate(size=(16, 16), seed=0):
    """Q = (beta/lam) I: ||x_k - x*|| = ||x_0 - x*|| (1 - gamma lam m)^k to 1e-10."""
    mm, _, b = random_problem(seed, size)
    worst = 0.0
    iters = {}
    ahb = to_channels(mm.adjoint_c(b.samples))
    for m, step in itertools.product((0.05, 0.2, 0.5), (0.5, 1.0)):
        lam = 4.0
        op = CombinedOperator(LinearScore(m * lam, lam, mm), mm, lam)
        x_star = ahb / m
        x0 = np.random.default_rng(seed).standard_normal(x_star.shape)
        T = SteepestDescentMap(op, b, step)
        res = iterate(T, x0, 1e-9, 20000, 0.0, keep_trajectory=True)
        e0 = np.linalg.norm(x0 - x_star)
        for k, xk in enumerate(res.trajectory):
            pred = e0 * (1 - step * m) ** k
            worst = max(worst, abs(np.linalg.norm(xk - x_star) - pred) / e0)
        iters[(m, step)] = res.iterations
    if worst > 1e-10:
        return False, f"max deviation {worst:.3e}"
    slower = [m for m in (0.05, 0.2, 0.5) if iters[(m, 1.0)] > iters[(m, 0.5)]]
    if slower:
        return False, f"gamma*lam=1 slower than 0.5 for m in {slower}"
    return True, f"max relative deviation {worst:.2e}"


def contraction_rate(configs=5, size=(16, 16), steps=200, seed=0, slack=1e-6):
    """Per-step error ratio inside the ball is at most 1 - gamma lam m_certified."""
    worst = -np.inf
    for k in range(configs):
        inst = random_instance(seed + 100 + k, size)
        est = estimate_local_lipschitz(lambda z, op=inst.op: op.H(z), inst.ball, steps, seed=seed + k)
        m = 1.0 - est.L
        for step in (0.5, 1.0):
            x0 = project_ball(inst.x_star + inst.ball.radius * 0.9 * _unit(seed + k, inst.x_star.shape),
                              inst.ball)
            res = iterate(SteepestDescentMap(inst.op, inst.b, step), x0, 1e-11, 5000, 0.0, keep_trajectory=True)
            ratios = _error_ratios(res.trajectory, inst.x_star)
            bound = 1.0 - step * m
            excess = max((r - bound for r in ratios), default=-np.inf)
            worst = max(worst, excess)
            if excess > slack:
                return False, f"config {k}, step {step}: ratio exceeds {bound:.5f} by {excess:.2e}"
    return True, f"{configs} configs, max(ratio - bound) = {worst:.2e}"


def _unit(seed, shape):
    d = np.random.default_rng(seed).standard_normal(shape)
    return d / np.linalg.norm(d)


def _error_ratios(traj, x_star, floor=1e-7):
    scale = np.linalg.norm(x_star)
    errs = [np.linalg.norm(x - x_star) for x in traj]
    return [e1 / e0 for e0, e1 in zip(errs, errs[1:]) if e1 > floor * scale]


def local_uniqueness(configs=3, size=(16, 16), inits=20, seed=0, tol=1e-5):
    """Solves from ``inits`` points in the ball agree pairwise within 10 tol (relative to ||x*||)."""
    worst = 0.0
    for k in range(configs):
        inst = random_instance(seed + 200 + k, size)
        rng = np.random.default_rng(seed + k)
        T = SteepestDescentMap(inst.op, inst.b)
        finals = []
        for _ in range(inits):
            res = iterate(T, _random_in_ball(rng, inst.ball), tol, 2000)
            if not res.converged:
                return False, f"config {k}: solve did not converge"
            finals.append(res.x_star)
        spread = pairwise_spread(finals) / np.linalg.norm(inst.x_star)
        worst = max(worst, spread)
        if spread > 10 * tol:
            return False, f"config {k}: pairwise spread {spread:.3e} > {10 * tol:.1e}"
    return True, f"max pairwise spread {worst:.2e} (limit {10 * tol:.1e})"


def pairwise_spread(xs):
    return max((float(np.linalg.norm(a - b)) for a, b in itertools.combinations(xs, 2)), default=0.0)


# ---------------------------------------------------------------- robustness

def linear_robustness(size=(16, 16), seed=0):
    """Bound tightness for Q = m I: footnote construction, Gaussian identity, PGA within 1%."""
    mm, x, b = random_problem(seed, size)
    lam = 5.0
    # footnote: Q = 0.01 I
    m = 0.01
    op = CombinedOperator(LinearScore(m * lam, lam, mm), mm, lam)
    cfg = SolverConfig(tol=1e-13, atol=1e-15, max_iter=20000)
    T = SteepestDescentMap(op, b)
    x_star = iterate(T, np.zeros_like(x), cfg.tol, cfg.max_iter, cfg.atol).x_star
    delta = 0.1
    n = mm.mask * np.random.default_rng(seed).standard_normal(b.samples.shape).astype(complex)
    target = 0.005 * delta * np.linalg.norm(x_star)
    n *= target / np.linalg.norm(mm.adjoint_c(n))
    chk = verify_robustness_bound(op, b, n, m, delta * np.linalg.norm(x_star), x_clean=x_star, cfg=cfg)
    if not (chk.applicable and abs(chk.delta_norm - chk.bound) <= 1e-6 * chk.bound):
        return False, f"footnote construction: delta {chk.delta_norm:.6e} vs bound {chk.bound:.6e}"

    m = 0.5
    op = CombinedOperator(LinearScore(m * lam, lam, mm), mm, lam)
    cfg = SolverConfig(tol=1e-13, atol=1e-15, max_iter=2000, backward_tol=1e-13, backward_max_iter=2000)
    reps = gaussian_perturb(op, b, 0.1, trials=5, seed=seed, x_ref=x, cfg=cfg, m=m)
    g_err = max(abs(r.delta_norm - r.bound) / r.bound for r in reps)
    if g_err > 1e-8:
        return False, f"gaussian trials: |delta - ||A^H n||/m| relative {g_err:.2e}"
    adv = adversarial_perturb(op, b, 0.1, steps=20, seed=seed, x_ref=x, cfg=cfg, m=m)
    analytic = 0.1 * b.norm() * _max_sv_AH(mm) / m
    gap = abs(adv.delta_norm - analytic) / analytic
    consistent = abs(adv.delta_norm - adv.bound) / adv.bound
    if gap > 0.01 or consistent > 0.01:
        return False, f"PGA worst case {adv.delta_norm:.5e} vs analytic {analytic:.5e} ({gap:.2%})"
    if np.any(np.diff(adv.objective_trace) < 0):
        return False, "ascent trace decreased"
    return True, f"PGA within {gap:.3%} of analytic worst case; gaussian identity to {g_err:.1e}"


def robustness_bound(configs=5, size=(16, 16), steps=200, trials=10, seed=0):
    """Random perturbations meeting ||A^H n|| <= m delta ||x*|| obey ||Delta|| <= ||A^H n|| / m."""
    applied = held = 0
    worst = np.inf
    for k in range(configs):
        inst = random_instance(seed + 300 + k, size)
        est = estimate_local_lipschitz(lambda z, op=inst.op: op.H(z), inst.ball, steps, seed=seed + k)
        m = 1.0 - est.L
        radius = inst.ball.radius
        rng = np.random.default_rng(seed + k)
        for t in range(trials):
            n = inst.mm.mask * (rng.standard_normal(inst.b.samples.shape)
                                + 1j * rng.standard_normal(inst.b.samples.shape))
            n *= rng.uniform(0.1, 1.0) * m * radius / np.linalg.norm(inst.mm.adjoint_c(n))
            chk = verify_robustness_bound(inst.op, inst.b, n, m, radius, x_clean=inst.x_star, cfg=TIGHT)
            if chk.applicable:
                applied += 1
                held += chk.satisfied
                worst = min(worst, chk.margin / chk.bound)
    if applied == 0:
        return False, "no perturbation met the precondition"
    return held == applied, f"{held}/{applied} perturbations within bound, min relative margin {worst:.3e}"


# ---------------------------------------------------------------- implicit gradients

def implicit_gradient(size=(16, 16), seed=0, unroll=200):
    """deq_backward against backpropagation through ``unroll`` forward steps, both maps."""
    mm, x, b = random_problem(seed, size)
    lam = 5.0
    out = []
    fb_net = random_network(seed, 1.0, 0.5, residual=True)
    maps = {
        "steepest-descent": SteepestDescentMap(CombinedOperator(random_network(seed, lam, 0.3), mm, lam), b),
        "forward-backward": ForwardBackwardMap(fb_net, mm, b, lam),
    }
    worst = 0.0
    for name, T in maps.items():
        x0 = sense_init(b, mm)
        res = iterate(T, x0, 1e-14, 2000, 1e-15)
        g_unr, l_unr, x_unr = unrolled_gradient(T, x0, x, unroll)
        G = deq_backward(T, res.x_star, 2.0 * (res.x_star - x), 1e-13, 2000)
        a = np.concatenate([g.ravel() for g in G.params] + [[G.lam]])
        u = np.concatenate([g.ravel() for g in g_unr] + [[l_unr]])
        err = float(np.linalg.norm(a - u) / np.linalg.norm(u))
        worst = max(worst, err)
        out.append(f"{name} {err:.1e}")
    return worst < 1e-5, "relative error " + ", ".join(out)


# ---------------------------------------------------------------- module checks

def autodiff_finite_difference(seed=0):
    rng = np.random.default_rng(seed)
    net = ScoreNetwork.init(seed=seed, hidden=4, gain=0.7, noise=1.0)
    net = net.with_theta(net.theta + 0.1 * rng.standard_normal(net.n_params))
    x = rng.standard_normal((2, 6, 6))
    f = lambda th: float(dg.sumsq(dg.tanh(net.with_theta(th)(dg.Var(x)))).value)
    leaves = net.leaves()
    g = np.concatenate([a.ravel() for a in dg.grad(dg.sumsq(dg.tanh(net(dg.Var(x), leaves))), leaves)])
    th = net.theta
    idx = rng.choice(th.size, 25, replace=False)
    h = 1e-6
    worst = 0.0
    for i in idx:
        e = np.zeros_like(th)
        e[i] = h
        fd = (f(th + e) - f(th - e)) / (2 * h)
        worst = max(worst, abs(fd - g[i]) / max(1.0, abs(fd)))
    return worst < 1e-6, f"max finite-difference deviation {worst:.2e}"


def forward_model_adjoint(seed=0):
    mm, x, b = random_problem(seed, (16, 16), coils=3)
    rng = np.random.default_rng(seed)
    y = mm.mask * (rng.standard_normal(b.samples.shape) + 1j * rng.standard_normal(b.samples.shape))
    lhs = np.vdot(y, mm.forward_c(x[0] + 1j * x[1]))
    rhs = np.vdot(mm.adjoint_c(y), x[0] + 1j * x[1])
    err = abs(lhs - rhs) / abs(lhs)
    top = _max_sv_AH(mm) ** 2
    return err < 1e-12 and top <= 1 + 1e-12, f"adjoint mismatch {err:.1e}, ||A^H A|| = {top:.12f}"


def cg_dense(seed=0):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((32, 32))
    M = M @ M.T + 32 * np.eye(32)
    r = rng.standard_normal(32)
    x = cg_solve(lambda v: M @ v, r, tol=1e-12)
    err = np.linalg.norm(x - np.linalg.solve(M, r)) / np.linalg.norm(np.linalg.solve(M, r))
    return err < 1e-8, f"relative error vs dense solve {err:.1e}"


def spectral_norm_dense(seed=0):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((2, 2, 3, 3))
    shape = (16, 16)
    n = 2 * 256
    zero = np.zeros(2)
    M = np.stack([dg.conv2d(dg.Var(e.reshape(2, 16, 16)), dg.Var(w), dg.Var(zero)).value.ravel()
                  for e in np.eye(n)], axis=1)
    svd = np.linalg.svd(M, compute_uv=False)[0]
    est = conv_spectral_norm(w, shape)
    if abs(est - svd) > 1e-6 * svd:
        return False, f"power iteration {est:.9f} vs SVD {svd:.9f}"
    net = ScoreNetwork.init(seed=seed, hidden=8, noise=1.0, residual=True)
    net = net.with_theta(net.theta + 0.2 * rng.standard_normal(net.n_params))
    once = spectral_normalize(net, 0.9, shape)
    twice = spectral_normalize(once, 0.9, shape)
    moved = max(float(np.max(np.abs(a - b))) for a, b in zip(once.params(), twice.params()))
    return moved <= 1e-12, f"power iteration within {abs(est - svd) / svd:.1e} of SVD; idempotence {moved:.1e}"


def lipschitz_oracles(seed=0):
    c = 0.7
    ball = BallSpec(np.random.default_rng(seed).standard_normal((2, 8, 8)), 0.5)
    Lc = estimate_local_lipschitz(lambda z: dg.scale(z, c), ball, 20, seed=seed).L
    if abs(Lc - c) > 1e-12:
        return False, f"H = {c} I gave {Lc}"
    tb = BallSpec(np.zeros(1), 0.1, relative=False)
    Lt = estimate_local_lipschitz(lambda z: dg.tanh(dg.scale(z, 3.0)), tb, 200, seed=seed).L
    if not 2.9 <= Lt <= 3.0 + 1e-12:
        return False, f"tanh(3x) estimate {Lt}"
    pts = [_random_in_ball(np.random.default_rng(i), ball) + 3 * ball.radius for i in range(100)]
    once = [project_ball(p, ball) for p in pts]
    idem = max(float(np.linalg.norm(project_ball(p, ball) - p)) for p in once) / ball.radius
    return idem <= 1e-12, f"cI exact, tanh(3x) {Lt:.4f}, projection idempotent to {idem:.1e}"


def penalty_gradient(seed=0):
    rng = np.random.default_rng(seed)
    mm, x, b = random_problem(seed, (8, 8), coils=2)
    net = ScoreNetwork.init(seed=seed, hidden=4, gain=1.5, noise=1.0)
    net = net.with_theta(net.theta + 0.1 * rng.standard_normal(net.n_params))
    lam = 5.0
    model = ReconModel(net, lam, "mnm-mol", SolverConfig())
    est = estimate_local_lipschitz(model.constrained_residual(mm), BallSpec(x, 0.2), 20, seed=seed)
    T, beta = est.L - 0.05, 3.0
    _, grads, lam_grad = penalty_value_and_grad(model, mm, est.z1, est.z2, T, beta)

    def pen(theta, lam):
        H = ReconModel(net.with_theta(theta), lam, "mnm-mol", SolverConfig()).constrained_residual(mm)
        L = np.sqrt(float(ratio_sq(H, dg.Var(est.z1), dg.Var(est.z2)).value))
        return beta * max(L - T, 0.0) ** 2

    g = np.concatenate([a.ravel() for a in grads])
    th, h, worst = net.theta, 1e-6, 0.0
    scale = 1e-3 * np.abs(g).max()
    for i in rng.choice(th.size, 20, replace=False):
        e = np.zeros_like(th)
        e[i] = h
        fd = (pen(th + e, lam) - pen(th - e, lam)) / (2 * h)
        worst = max(worst, abs(fd - g[i]) / max(abs(fd), scale))
    fd = (pen(th, lam + h) - pen(th, lam - h)) / (2 * h)
    worst = max(worst, abs(fd - lam_grad) / abs(fd))
    return worst < 1e-4, f"max relative deviation {worst:.1e} over 20 weights and lambda"


def delta_selection(seed=0):
    samples = []
    for k in range(4):
        mm, x, b = random_problem(seed + k, (16, 16), coils=3)
        samples.append(Sample(x, b, mm))
    mu = 1e-2
    ratios = [np.linalg.norm(sense_init(s.b, s.mm, mu) - s.x_ref) / np.linalg.norm(s.x_ref) for s in samples]
    delta = choose_delta(samples, mu)
    return abs(delta - max(ratios)) <= 1e-12, f"delta {delta:.6f}, max over 4 samples {max(ratios):.6f}"


def container_roundtrip(seed=0):
    rng = np.random.default_rng(seed)
    for shape in [(), (3,), (2, 5, 7), (1, 2, 3, 4)]:
        a = rng.standard_normal(shape)
        a.flat[0] = -0.0 if a.size else 0
        back, _ = mio.decode_array(mio.encode_array(a))
        if back.shape != a.shape or back.tobytes() != np.ascontiguousarray(a).tobytes():
            return False, f"round trip changed array of shape {shape}"
    return True, "bit-exact on 4 shapes"


def metric_identities(seed=0):
    x = generate_phantom(16, 16, seed)
    if psnr(x, x) != np.inf or abs(ssim(x, x) - 1.0) > 1e-12:
        return False, "identity does not give psnr inf / ssim 1"
    ref = np.zeros((2, 10, 10))
    ref[0, 0, 0] = 1.0
    noisy = ref.copy()
    noisy[1] += 0.1
    v = psnr(noisy, ref)
    return abs(v - 20.0) < 1e-12, f"psnr at mse 0.01 = {v:.12f}"


# ---------------------------------------------------------------- driver

def run_all(section=None):
    section = section or mio.LemmaSection()
    size = tuple(section.size)
    n, steps, seed = section.configs, section.lipschitz_steps, section.seed
    checks = [
        ("autodiff: gradient vs finite differences", autodiff_finite_difference, seed),
        ("forward model: adjoint identity and ||A^H A|| <= 1", forward_model_adjoint, seed),
        ("cg: dense SPD solve", cg_dense, seed),
        ("spectral norm: dense SVD and idempotent normalization", spectral_norm_dense, seed),
        ("lipschitz: linear, tanh and projection oracles", lipschitz_oracles, seed),
        ("local Lipschitz implies local monotone", local_monotone, n, size, steps, seed),
        ("linear convergence rate", linear_rate, size, seed),
        ("contraction rate inside the ball", contraction_rate, max(n // 4, 1), size, steps, seed),
        ("local uniqueness of the fixed point", local_uniqueness, max(n // 7, 1), size, 20, seed),
        ("linear robustness oracle", linear_robustness, size, seed),
        ("robustness bound", robustness_bound, max(n // 4, 1), size, steps, 10, seed),
        ("implicit gradient vs unrolled", implicit_gradient, size, seed),
        ("trainer: penalty gradient vs finite differences", penalty_gradient, seed),
        ("trainer: delta is the largest SENSE deviation", delta_selection, seed),
        ("array container round trip", container_roundtrip, seed),
        ("metric identities", metric_identities, seed),
    ]
    return [_timed(name, fn, *args) for name, fn, *args in checks]


def format_report(results):
    lines = []
    for r in results:
        lines.append(f"[{'PASS' if r.passed else 'FAIL'}] {r.name} ({r.seconds:.1f}s): {r.detail}")
    n_ok = sum(r.passed for r in results)
    lines.append(f"{n_ok}/{len(results)} checks passed")
    return "\n".join(lines)
