import numpy as np
import pytest

from mnmmol import lemmas, mri
from mnmmol.fixed_point import SolverConfig, SteepestDescentMap, iterate
from mnmmol.lipschitz import estimate_local_lipschitz
from mnmmol.operators import CombinedOperator, LinearScore
from mnmmol.robustness import adversarial_perturb, gaussian_perturb, verify_robustness_bound

LIN_CFG = SolverConfig(tol=1e-13, atol=1e-15, max_iter=2000, backward_tol=1e-13, backward_max_iter=2000)


@pytest.fixture(scope="module")
def linear():
    mm, x, b = lemmas.random_problem(0, (8, 8))
    m, lam = 0.5, 5.0
    return CombinedOperator(LinearScore(m * lam, lam, mm), mm, lam), x, b, m


@pytest.fixture(scope="module")
def inst():
    return lemmas.random_instance(21, (8, 8))


def test_zero_budget(inst):
    rep = adversarial_perturb(inst.op, inst.b, 0.0, x_ref=inst.x_ref, cfg=lemmas.TIGHT)
    assert rep.delta_norm == 0.0 and rep.psnr_perturbed == rep.psnr_clean
    for r in gaussian_perturb(inst.op, inst.b, 0.0, trials=3, x_ref=inst.x_ref, cfg=lemmas.TIGHT):
        assert r.delta_norm == 0.0 and r.psnr_perturbed == r.psnr_clean


def test_linear_gaussian_identity(linear):
    op, x, b, m = linear
    for r in gaussian_perturb(op, b, 0.1, trials=5, seed=1, x_ref=x, cfg=LIN_CFG, m=m):
        assert abs(r.delta_norm - r.bound) <= 1e-8 * r.bound
        assert np.linalg.norm(r.n_star) == pytest.approx(0.1 * b.norm(), rel=1e-12)


def test_linear_adversarial_hits_top_singular_value(linear):
    op, x, b, m = linear
    # the top singular values of A^H cluster within 1% here, so ascent needs more than the default steps
    rep = adversarial_perturb(op, b, 0.1, steps=60, seed=2, x_ref=x, cfg=LIN_CFG, m=m)
    analytic = 0.1 * b.norm() * lemmas._max_sv_AH(op.mm) / m
    assert abs(rep.delta_norm - analytic) <= 0.01 * analytic
    assert np.linalg.norm(rep.n_star) <= 0.1 * b.norm() + 1e-9
    assert np.all(np.diff(rep.objective_trace) >= 0)


def test_adversarial_dominates_gaussian(inst):
    adv = adversarial_perturb(inst.op, inst.b, 0.05, steps=10, seed=3, x_ref=inst.x_ref, cfg=lemmas.TIGHT)
    gau = gaussian_perturb(inst.op, inst.b, 0.05, trials=5, seed=3, x_ref=inst.x_ref, cfg=lemmas.TIGHT)
    assert np.mean([r.delta_norm for r in gau]) <= adv.delta_norm
    assert np.linalg.norm(adv.n_star) <= 0.05 * inst.b.norm() + 1e-9


def test_nested_budgets_monotone(inst):
    prev, last = None, 0.0
    for eps in (0.01, 0.02, 0.04):
        rep = adversarial_perturb(inst.op, inst.b, eps, steps=5, seed=4, cfg=lemmas.TIGHT, n_init=prev)
        assert rep.delta_norm >= last - 1e-12
        prev, last = rep.n_star, rep.delta_norm


def test_bound_zero_perturbation(inst):
    chk = verify_robustness_bound(inst.op, inst.b, np.zeros_like(inst.b.samples), 0.1, inst.ball.radius,
                                  x_clean=inst.x_star, cfg=lemmas.TIGHT)
    assert chk.applicable and chk.satisfied and chk.delta_norm == 0.0


def test_footnote_construction_is_tight():
    mm, x, b = lemmas.random_problem(5, (8, 8))
    m, lam, delta = 0.01, 5.0, 0.1
    op = CombinedOperator(LinearScore(m * lam, lam, mm), mm, lam)
    cfg = SolverConfig(tol=1e-13, atol=1e-15, max_iter=20000)
    x_star = iterate(SteepestDescentMap(op, b), np.zeros_like(x), cfg.tol, cfg.max_iter, cfg.atol).x_star
    n = mm.mask * np.random.default_rng(5).standard_normal(b.samples.shape).astype(complex)
    n *= 0.005 * delta * np.linalg.norm(x_star) / np.linalg.norm(mm.adjoint_c(n))
    chk = verify_robustness_bound(op, b, n, m, delta * np.linalg.norm(x_star), x_clean=x_star, cfg=cfg)
    assert chk.applicable and chk.satisfied
    assert chk.delta_norm == pytest.approx(chk.bound, rel=1e-6)


def test_bound_holds_on_certified_instance(inst):
    m = 1 - estimate_local_lipschitz(inst.op.H, inst.ball, 200, seed=0).L
    rng = np.random.default_rng(6)
    applied = 0
    for _ in range(10):
        n = inst.mm.mask * (rng.standard_normal(inst.b.samples.shape) + 1j * rng.standard_normal(inst.b.samples.shape))
        n *= rng.uniform(0.1, 1.0) * m * inst.ball.radius / np.linalg.norm(inst.mm.adjoint_c(n))
        chk = verify_robustness_bound(inst.op, inst.b, n, m, inst.ball.radius, x_clean=inst.x_star, cfg=lemmas.TIGHT)
        applied += chk.applicable
        assert not chk.applicable or chk.satisfied
    assert applied == 10


def test_precondition_failure_not_applicable(inst):
    n = inst.mm.mask * np.ones_like(inst.b.samples)
    n *= 10 * inst.ball.radius / np.linalg.norm(inst.mm.adjoint_c(n))
    chk = verify_robustness_bound(inst.op, inst.b, n, 0.5, inst.ball.radius, x_clean=inst.x_star)
    assert not chk.applicable and not chk.satisfied


def test_divergent_perturbation_is_reported():
    mm, x, b = lemmas.random_problem(7, (8, 8))
    # Q = -0.05 I: any nonzero start runs away
    op = CombinedOperator(LinearScore(-1.05 * 1.0 + 1.0, 1.0, mm), mm, 1.0)
    T = SteepestDescentMap(op, b)
    with pytest.raises(RuntimeError):
        adversarial_perturb(T, b, 0.1, x0=np.ones_like(x))
