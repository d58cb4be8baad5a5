"""End-to-end DEQ training with a local Lipschitz penalty.

Three variants share one loop:

``mnm-mol``
    Steepest-descent DEQ; penalty on the combined residual H = I - Q.
``mol-l``
    Forward-backward DEQ with F = I - N; penalty on N = I - F.
``mol-sn``
    Forward-backward DEQ with F = I - N; no penalty, N spectrally normalized
    after every update.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffgraph as dg
from .fixed_point import (AdjointConvergenceError, DivergenceError, ForwardBackwardMap,
                          SolverConfig, SteepestDescentMap, deq_backward, iterate)
from .lipschitz import BallSpec, estimate_local_lipschitz, ratio_sq
from .mri import sense_init
from .operators import CombinedOperator, ScoreNetwork, spectral_normalize

log = logging.getLogger(__name__)

VARIANTS = ("mnm-mol", "mol-l", "mol-sn")


class ForwardFailure(RuntimeError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    variant: str = "mnm-mol"
    m: float = 0.1
    beta: float = 1.0
    delta: float | None = None
    epochs: int = 10
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    pga_steps: int = 15
    seed: int = 0
    mu: float = 1e-2
    lam0: float = 10.0
    learn_lambda: bool = True
    lambda_lr: float = 1e-2
    hidden: int = 16
    depth: int = 3
    kernel: int = 3
    init_gain: float = 1.0
    init_noise: float = 0.05
    failure_budget: float = 0.1
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(
        max_iter=500, backward_max_iter=500, backward_tol=1e-4))

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not 0.0 < self.m < 1.0:
            raise ValueError("m must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.delta is not None and not self.delta > 0:
            raise ValueError("delta must be > 0")
        if isinstance(self.solver, dict):
            self.solver = SolverConfig(**self.solver)

    @property
    def T(self):
        return 1.0 - self.m

    def to_dict(self):
        return asdict(self)


@dataclass(eq=False)
class ReconModel:
    """A trained (or initial) reconstruction network plus its solver settings."""

    score: ScoreNetwork
    lam: float
    variant: str
    solver: SolverConfig
    mu: float = 1e-2
    delta: float | None = None
    m: float = 0.1

    @classmethod
    def initial(cls, cfg, delta=None):
        residual = cfg.variant != "mnm-mol"
        score = ScoreNetwork.init(seed=cfg.seed, hidden=cfg.hidden, depth=cfg.depth, kernel=cfg.kernel,
                                  gain=cfg.init_gain, noise=cfg.init_noise, residual=residual)
        return cls(score, cfg.lam0, cfg.variant, cfg.solver, cfg.mu, delta, cfg.m)

    def operator(self, mm):
        return CombinedOperator(self.score, mm, self.lam)

    def fixed_point_map(self, b, mm, score=None):
        score = self.score if score is None else score
        if self.variant == "mnm-mol":
            return SteepestDescentMap(CombinedOperator(score, mm, self.lam), b, self.solver.gamma_lambda)
        return ForwardBackwardMap(score, mm, b, self.lam, self.solver.alpha, self.solver.inner_tol)

    def constrained_residual(self, mm, params=None, lam=None):
        """The map whose local Lipschitz constant the penalty controls."""
        if self.variant == "mnm-mol":
            op = self.operator(mm)
            return lambda z: op.H(z, params, lam)
        score = self.score
        return lambda z: dg.sub(z, score(z, params))

    def init_image(self, b, mm):
        return sense_init(b, mm, self.mu)

    def reconstruct(self, b, mm, x0=None, cfg=None):
        cfg = cfg or self.solver
        x0 = self.init_image(b, mm) if x0 is None else x0
        T = self.fixed_point_map(b, mm)
        return iterate(T, x0, cfg.tol, cfg.max_iter, cfg.atol, cfg.divergence_factor)


# ---------------------------------------------------------------- optimizers

class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        return [p - self.lr * g for p, g in zip(params, grads)]


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


def make_optimizer(cfg):
    return Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)


# ---------------------------------------------------------------- delta

def sense_deviation(sample, mu):
    x_ls = sense_init(sample.b, sample.mm, mu)
    return float(np.linalg.norm(x_ls - sample.x_ref) / np.linalg.norm(sample.x_ref))


def choose_delta(dataset, mu=1e-2):
    """Largest relative SENSE deviation ||x_LS - x|| / ||x|| over the dataset."""
    if len(dataset) == 0:
        raise ValueError("choose_delta needs a non-empty dataset")
    return max(sense_deviation(s, mu) for s in dataset)


# ---------------------------------------------------------------- loss

@dataclass
class LossInfo:
    loss: float
    data_loss: float
    penalty: float
    L: float
    x_star: np.ndarray
    forward_iterations: int
    backward_iterations: int
    z1: np.ndarray | None = None
    z2: np.ndarray | None = None


def penalty_value_and_grad(model, mm, z1, z2, T, beta):
    """beta * relu(L(theta) - T)^2 at a frozen pair, with its parameter/lambda gradients."""
    pl = model.score.leaves()
    lam_l = dg.leaf(model.lam)
    H = model.constrained_residual(mm, pl, lam_l)
    L = dg.sqrt(ratio_sq(H, dg.Var(z1), dg.Var(z2)))
    pen = dg.scale(dg.square(dg.relu(dg.sub(L, dg.Var(T)))), beta)
    grads = dg.grad(pen, pl + [lam_l])
    return float(pen.value), grads[:-1], float(grads[-1])


def loss_and_grad(sample, model, cfg, delta, seed=0, x0=None):
    """Penalized loss for one sample and its gradient w.r.t. (theta, lambda).

    Returns ``(info, param_grads, lam_grad)``. The Lipschitz pair is found
    with the weights frozen; the penalty is then differentiated through the
    residual evaluated at that pair.
    """
    sc = model.solver
    b, mm = sample.b, sample.mm
    x0 = model.init_image(b, mm) if x0 is None else x0
    T = model.fixed_point_map(b, mm)
    res = iterate(T, x0, sc.tol, sc.max_iter, sc.atol, sc.divergence_factor)
    if not res.converged:
        raise ForwardFailure(f"forward iteration did not converge in {res.iterations} steps")
    x_star = res.x_star
    err = x_star - sample.x_ref
    data_loss = float(np.vdot(err, err))
    G = deq_backward(T, x_star, 2.0 * err, sc.backward_tol, sc.backward_max_iter)
    grads = G.params
    lam_grad = G.lam

    L, penalty, z1, z2 = float("nan"), 0.0, None, None
    if cfg.variant != "mol-sn":
        ball = BallSpec(x_star, delta)
        est = estimate_local_lipschitz(model.constrained_residual(mm), ball, cfg.pga_steps, seed=seed)
        L, z1, z2 = est.L, est.z1, est.z2
        if cfg.beta > 0 and L > cfg.T:
            penalty, pg, plg = penalty_value_and_grad(model, mm, z1, z2, cfg.T, cfg.beta)
            grads = [a + c for a, c in zip(grads, pg)]
            lam_grad += plg
    info = LossInfo(data_loss + penalty, data_loss, penalty, L, x_star, res.iterations, G.iterations, z1, z2)
    return info, grads, lam_grad


# ---------------------------------------------------------------- training

@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    mean_L: float
    violation_rate: float
    failures: int
    lam: float


def train(dataset, cfg, callback=None):
    """Train a model on ``dataset`` (a list of samples with x_ref, b, mm).

    Returns ``(model, history)`` where history is a list of :class:`EpochStats`.
    """
    if len(dataset) == 0:
        raise ValueError("train needs a non-empty dataset")
    delta = cfg.delta if cfg.delta is not None else choose_delta(dataset, cfg.mu)
    model = ReconModel.initial(cfg, delta)
    shape = dataset[0].mm.shape
    if cfg.variant == "mol-sn":
        model.score = _sn_project(model.score, cfg.T, shape)
    opt = make_optimizer(cfg)
    lam_opt = Adam(cfg.lambda_lr) if cfg.optimizer == "adam" else SGD(cfg.lambda_lr)
    x0s = [model.init_image(s.b, s.mm) for s in dataset]
    ss = np.random.SeedSequence(cfg.seed)
    history = []
    for ep in range(cfg.epochs):
        seeds = ss.spawn(1)[0].generate_state(len(dataset))
        losses, Ls, violations, failures = [], [], 0, 0
        for k, sample in enumerate(dataset):
            try:
                info, grads, lam_grad = loss_and_grad(sample, model, cfg, delta, int(seeds[k]), x0s[k])
            except (DivergenceError, AdjointConvergenceError, ForwardFailure) as exc:
                failures += 1
                log.warning("epoch %d sample %d skipped: %s", ep, k, exc)
                if failures > cfg.failure_budget * len(dataset):
                    history.append(EpochStats(ep, float("nan"), float("nan"), float("nan"), failures, model.lam))
                    raise TrainingAborted(f"more than {cfg.failure_budget:.0%} of samples failed in epoch {ep}",
                                          history) from exc
                continue
            losses.append(info.loss)
            if np.isfinite(info.L):
                Ls.append(info.L)
                violations += info.L > cfg.T
            model.score = model.score.with_params(opt.step(model.score.params(), grads))
            if cfg.learn_lambda:
                # log-space keeps lambda positive
                (log_lam,) = lam_opt.step([np.array(np.log(model.lam))], [np.array(lam_grad * model.lam)])
                model.lam = float(np.exp(log_lam))
            if cfg.variant == "mol-sn":
                model.score = _sn_project(model.score, cfg.T, shape)
        stats = EpochStats(ep, float(np.mean(losses)) if losses else float("nan"),
                           float(np.mean(Ls)) if Ls else float("nan"),
                           violations / len(Ls) if Ls else 0.0, failures, model.lam)
        history.append(stats)
        log.info("epoch %d: loss %.5f  mean L %.4f  violations %.2f  lam %.3f",
                 ep, stats.mean_loss, stats.mean_L, stats.violation_rate, model.lam)
        if callback is not None:
            callback(stats, model)
    return model, history


def _sn_project(score, target, shape):
    cnn = ScoreNetwork(score.layers, residual=score.residual)
    return spectral_normalize(cnn, target, shape)
