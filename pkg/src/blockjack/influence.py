"""Blockwise influence functions.

The parameter change caused by deleting block ``(i, j)`` is approximated by a
Newton step on the reweighted loss,

    delta = -(H + lambda * sigma * I)^{-1} grad L(theta_hat; w'),

where the inverse-Hessian-vector product comes from a damped, scaled Neumann
recursion whose Hessian factors are evaluated on sampled sub-sequences that
stay temporally contiguous around the deleted interval.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import BlockIndex, ConfigurationError, SequenceDataset, WeightVector, delete_block
from .model import TrainConfig, TrainResult, _aligned, _theta, grad, train
from .numerics import EigEstimate, RngStream, power_iteration_max_eig

log = logging.getLogger(__name__)


class InverseHvpDiverged(ArithmeticError):
    def __init__(self, step: int):
        super().__init__(f"inverse-HVP recursion diverged at step {step}")
        self.step = step


@dataclass
class InverseHvpConfig:
    depth: int = 200                  # recursion steps v
    damping: float = 0.01             # lambda
    scale: float | str = "auto"       # sigma_max, or "auto" for power iteration
    batch_size: int | None = 64       # sub-sequences per step; None = full batch
    power_iters: int = 100
    tol: float = 1e-10                # early stop on relative update (full batch only)
    hessian: str = "full"             # "full": Hessian under w; "retained": under w'

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError("recursion depth must be >= 1")
        if self.damping < 0:
            raise ConfigurationError("damping must be >= 0")
        if self.scale != "auto" and not float(self.scale) > 0:
            raise ConfigurationError("scale must be positive or 'auto'")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1 or None")
        if self.hessian not in ("full", "retained"):
            raise ConfigurationError(f"unknown hessian choice {self.hessian!r}")


@dataclass
class InfluenceResult:
    block: BlockIndex | None
    delta_theta: np.ndarray
    iterations: int
    grad_norm: float
    residual_grad_norm: float
    converged: bool
    damping: float
    scale: float
    extra: dict = field(default_factory=dict)

    @property
    def delta_norm(self) -> float:
        return float(np.linalg.norm(self.delta_theta))


@dataclass(frozen=True)
class SubSequence:
    """Rows ``index`` restricted to time steps ``[start, stop)``."""

    index: np.ndarray
    start: int
    stop: int
    reset_hidden: bool = False


def deletion_gradient(model, data: SequenceDataset, theta, w, w_prime, base_grad=None) -> np.ndarray:
    """Gradient at ``theta`` of the loss reweighted by ``w_prime``.

    With ``base_grad`` (the gradient under ``w``) only the sequences whose
    weights changed are differentiated, using linearity of the loss in the
    weights.
    """
    if base_grad is None:
        return grad(model, data, theta, w_prime)
    W = w.values if isinstance(w, WeightVector) else np.asarray(w)
    Wp = w_prime.values if isinstance(w_prime, WeightVector) else np.asarray(w_prime)
    diff = W - Wp
    rows = np.flatnonzero(diff.reshape(diff.shape[0], -1).any(axis=1))
    if rows.size == 0:
        return np.array(base_grad, dtype=np.float64, copy=True)
    sub = data.subset(rows)
    _, g_removed = model.loss_and_grad(_theta(theta), sub.x, sub.targets(), diff[rows])
    return base_grad - g_removed


def blockwise_batch(data: SequenceDataset, block: BlockIndex, v: int, rng: RngStream) -> SubSequence:
    """Sample ``v`` sequences other than ``block.i`` and the time span to use.

    The span is the prefix before the deleted interval, so the hidden states
    computed in training stay valid. For the first interval the prefix is
    empty and the suffix after the interval is used with a fresh hidden
    state; when the interval spans the whole sequence (``K = T``) the other
    sequences are untouched by the deletion and are used in full.
    """
    n = data.n
    if v > n - 1:
        raise ConfigurationError(f"cannot sample {v} sub-sequences from {n - 1} eligible")
    if v < 1:
        raise ConfigurationError("need at least one sub-sequence")
    eligible = np.delete(np.arange(n), block.i)
    idx = np.sort(rng.generator().choice(eligible, size=v, replace=False))
    if block.start > 0:
        return SubSequence(idx, 0, block.start)
    if block.stop < data.T:
        return SubSequence(idx, block.stop, data.T, reset_hidden=True)
    return SubSequence(idx, 0, data.T)


class _HessianOperator:
    """Hessian-vector products of the loss under fixed weights."""

    def __init__(self, model, data: SequenceDataset, theta, w):
        self.model = model
        self.theta = _theta(theta)
        self.x, self.Y, self.W = _aligned(data, w)

    def full(self, v: np.ndarray) -> np.ndarray:
        hv = self.model.hvp(self.theta, self.x, self.Y, self.W, v)
        return hv + self.model.l2 * v if self.model.l2 else hv

    def batch(self, sub: SubSequence, population: int, v: np.ndarray) -> np.ndarray:
        sl = slice(sub.start, sub.stop)
        idx = sub.index
        hv = self.model.hvp(self.theta, self.x[idx, sl], self.Y[idx, sl], self.W[idx, sl], v)
        hv *= population / idx.size
        return hv + self.model.l2 * v if self.model.l2 else hv


def estimate_scale(model, data: SequenceDataset, theta, w, iters: int = 100,
                   rng: RngStream | None = None) -> EigEstimate:
    """Largest absolute Hessian eigenvalue via power iteration on full-batch HVPs."""
    op = _HessianOperator(model, data, theta, w)
    return power_iteration_max_eig(op.full, model.n_params, iters, rng or RngStream(0), tol=1e-8)


def neumann_solve(apply, g: np.ndarray, depth: int, damping: float, scale: float,
                  tol: float = 0.0, stochastic: bool = False):
    """Run ``x_s = g + (1 - damping) x_{s-1} - apply_s(x_{s-1}) / scale`` from ``x_0 = g``.

    ``apply(s, x)`` returns the (possibly sampled) Hessian product at step
    ``s``. The fixed point solves ``(H / scale + damping I) x = g``; the
    result is divided by ``scale`` so it estimates
    ``(H + damping * scale * I)^{-1} g``. Returns ``(solution, steps, converged)``.
    """
    g = np.asarray(g, dtype=np.float64)
    x = g.copy()
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0.0:
        return np.zeros_like(g), 0, True
    # without damping the partial sums grow at most linearly in depth
    bound = 10.0 * gnorm * (min(1.0 / damping, depth + 1.0) if damping > 0 else depth + 1.0)
    steps, converged = 0, False
    for s in range(1, depth + 1):
        new = g + (1.0 - damping) * x - apply(s, x) / scale
        if not np.all(np.isfinite(new)):
            raise InverseHvpDiverged(s)
        change = float(np.linalg.norm(new - x))
        x = new
        steps = s
        if not stochastic and tol > 0 and change <= tol * float(np.linalg.norm(x)):
            converged = True
            break
    if stochastic or tol <= 0:
        converged = float(np.linalg.norm(x)) <= bound
    return x / scale, steps, converged


def resolve_scale(cfg: InverseHvpConfig, model, data, theta, w, rng: RngStream) -> float:
    if cfg.scale != "auto":
        return float(cfg.scale)
    est = estimate_scale(model, data, theta, w, cfg.power_iters, rng)
    if est.degenerate or est.value <= 0:
        raise ConfigurationError("Hessian scale estimate is not positive")
    return est.value


def inverse_hvp(model, data: SequenceDataset, theta, w, w_prime, g, cfg: InverseHvpConfig,
                rng: RngStream, block: BlockIndex | None = None, scale: float | None = None):
    """Estimate ``(H + damping * scale * I)^{-1} g``.

    ``H`` is the Hessian under ``w`` (``cfg.hessian="full"``) or under
    ``w_prime`` (``"retained"``; exact Newton step for quadratic losses, but
    often indefinite for recurrent models). Each step evaluates it either on
    the whole data set (``cfg.batch_size=None``) or on a fresh blockwise
    batch rescaled to the population it stands for.
    Returns ``(vector, steps, converged, scale)``.
    """
    if scale is None:
        scale = resolve_scale(cfg, model, data, theta, w, rng.spawn(0))
    if not scale > 0:
        raise ConfigurationError("Hessian scale must be positive")
    retained = cfg.hessian == "retained"
    op = _HessianOperator(model, data, theta, w_prime if retained else w)
    if cfg.batch_size is None:
        def apply(s, x):
            return op.full(x)
        stochastic = False
    else:
        if block is None:
            raise ConfigurationError("stochastic inverse-HVP needs the deleted block")
        n_eligible = data.n - 1
        b = min(cfg.batch_size, n_eligible)
        population = n_eligible if retained else data.n
        batch_rng = rng.spawn(1)

        def apply(s, x):
            sub = blockwise_batch(data, block, b, batch_rng.spawn(s))
            return op.batch(sub, population, x)
        stochastic = True
    vec, steps, converged = neumann_solve(apply, g, cfg.depth, cfg.damping, scale, cfg.tol, stochastic)
    return vec, steps, converged, scale


def influence(model, data: SequenceDataset, theta, w, w_prime, cfg: InverseHvpConfig, rng: RngStream,
              block: BlockIndex | None = None, scale: float | None = None,
              base_grad=None) -> InfluenceResult:
    """Estimated ``theta_hat(w') - theta_hat(w)``."""
    if base_grad is None:
        base_grad = grad(model, data, theta, w)
    g = deletion_gradient(model, data, theta, w, w_prime, base_grad)
    vec, steps, converged, scale = inverse_hvp(model, data, theta, w, w_prime, g, cfg, rng, block, scale)
    return InfluenceResult(
        block=block,
        delta_theta=-vec,
        iterations=steps,
        grad_norm=float(np.linalg.norm(g)),
        residual_grad_norm=float(np.linalg.norm(base_grad)),
        converged=converged,
        damping=cfg.damping,
        scale=scale,
    )


def blockwise_influence(model, data: SequenceDataset, theta, w, block: BlockIndex, cfg: InverseHvpConfig,
                        rng: RngStream, scale: float | None = None, base_grad=None) -> InfluenceResult:
    w_prime = delete_block(w, block)
    res = influence(model, data, theta, w, w_prime, cfg, rng, block, scale, base_grad)
    if not res.converged:
        log.warning("influence for block (%d, %d) did not converge", block.i, block.j)
    return res


def exact_retrain(model, data: SequenceDataset, w_prime, config: TrainConfig, theta_init) -> TrainResult:
    """Retrain under ``w_prime`` warm-started from ``theta_init``."""
    return train(model, data, w_prime, config, theta_init=theta_init)
