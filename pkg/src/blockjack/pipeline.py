"""The blockwise jackknife: resample every block, collect residuals, build bands.

Each block ``(i, j)`` is handled independently with its own random stream
``RngStream(seed).spawn(2, i, j)``, so results do not depend on how blocks
are distributed over worker processes.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import BlockIndex, ConfigurationError, SequenceDataset, delete_block, n_intervals
from .influence import InverseHvpConfig, blockwise_influence, exact_retrain, resolve_scale
from .intervals import LoboResiduals, PerturbedParams, collect_lobo_residuals
from .model import TrainConfig, _theta, grad
from .numerics import RngStream

log = logging.getLogger(__name__)


class BudgetExceeded(ConfigurationError):
    def __init__(self, required: int, budget: int):
        super().__init__(f"exact resampling needs {required} retrains, budget is {budget}")
        self.required = required
        self.budget = budget


@dataclass
class JackknifeConfig:
    K: int | None = None              # interval length; None means K = T
    mode: str = "influence"           # "influence" or "exact"
    ihvp: InverseHvpConfig = field(default_factory=InverseHvpConfig)
    unconverged: str = "use"          # "use" (keep, log) or "skip" (drop the block)
    exact_budget: int = 500

    def __post_init__(self):
        if self.mode not in ("influence", "exact"):
            raise ConfigurationError(f"unknown jackknife mode {self.mode!r}")
        if self.unconverged not in ("use", "skip"):
            raise ConfigurationError(f"unknown unconverged policy {self.unconverged!r}")
        if self.exact_budget < 1:
            raise ConfigurationError("exact_budget must be >= 1")

    def interval(self, T: int) -> int:
        K = T if self.K is None else self.K
        n_intervals(T, K)  # validates the range
        return K


@dataclass(frozen=True)
class BlockRecord:
    i: int
    j: int
    K: int
    delta_norm: float
    converged: bool
    iterations: int


@dataclass
class JackknifeResult:
    perturbed: PerturbedParams
    residuals: LoboResiduals
    records: list[BlockRecord]
    scale: float | None = None

    def write_diagnostics(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["i", "j", "K", "delta_norm", "converged", "iterations"])
            for r in self.records:
                wr.writerow([r.i, r.j, r.K, repr(r.delta_norm), int(r.converged), r.iterations])


def check_budget(n: int, T: int, K: int, budget: int) -> int:
    required = n * n_intervals(T, K)
    if required > budget:
        raise BudgetExceeded(required, budget)
    return required


@dataclass
class _BlockTask:
    """Everything a worker needs to resample one block; read-only."""

    model: object
    data: SequenceDataset
    theta: np.ndarray
    w: object
    K: int
    mode: str
    ihvp: InverseHvpConfig
    train: TrainConfig
    seed: int
    scale: float | None
    base_grad: np.ndarray | None

    def run(self, i: int, j: int):
        block = BlockIndex(i, j, self.K)
        if self.mode == "exact":
            res = exact_retrain(self.model, self.data, delete_block(self.w, block), self.train, self.theta)
            theta = res.params.theta
            return theta, BlockRecord(i, j, self.K, float(np.linalg.norm(theta - self.theta)),
                                      res.converged, res.iterations)
        res = blockwise_influence(self.model, self.data, self.theta, self.w, block, self.ihvp,
                                  RngStream(self.seed).spawn(2, i, j), self.scale, self.base_grad)
        return self.theta + res.delta_theta, BlockRecord(i, j, self.K, res.delta_norm,
                                                         res.converged, res.iterations)


_WORKER_TASK: _BlockTask | None = None


def _init_worker(task: _BlockTask) -> None:
    global _WORKER_TASK
    _WORKER_TASK = task
    logging.getLogger().setLevel(logging.ERROR)


def _run_chunk(blocks):
    return [_WORKER_TASK.run(i, j) for i, j in blocks]


def _map_blocks(task: _BlockTask, blocks: list[tuple[int, int]], jobs: int):
    if jobs <= 1 or len(blocks) <= 1:
        return [task.run(i, j) for i, j in blocks]
    # contiguous chunks keep the output ordered by (i, j)
    chunks = [c.tolist() for c in np.array_split(np.array(blocks), min(jobs * 4, len(blocks)))]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(task,)) as pool:
        return [out for part in pool.map(_run_chunk, chunks) for out in part]


def resample_blocks(model, data: SequenceDataset, theta_hat, w, jk: JackknifeConfig,
                    train_config: TrainConfig, seed: int, jobs: int = 1):
    """Perturbed parameters for every block ``(i, j)``, ordered by ``(i, j)``.

    Returns ``(thetas, records, scale)`` where ``thetas`` has shape
    ``(n, J, P)``.
    """
    theta = _theta(theta_hat)
    K = jk.interval(data.T)
    J = n_intervals(data.T, K)
    scale = base_grad = None
    if jk.mode == "exact":
        check_budget(data.n, data.T, K, jk.exact_budget)
    else:
        # shared by every block: one power iteration and one full gradient
        scale = resolve_scale(jk.ihvp, model, data, theta, w, RngStream(seed).spawn(1))
        base_grad = grad(model, data, theta, w)
        log.info("Hessian scale %.6g", scale)
    task = _BlockTask(model, data, theta, w, K, jk.mode, jk.ihvp, train_config, seed, scale, base_grad)
    blocks = [(i, j) for i in range(data.n) for j in range(J)]
    outputs = _map_blocks(task, blocks, jobs)
    thetas = np.stack([th for th, _ in outputs]).reshape(data.n, J, -1)
    records = [rec for _, rec in outputs]
    return thetas, records, scale


def run_jackknife(model, data: SequenceDataset, theta_hat, w, jk: JackknifeConfig,
                  train_config: TrainConfig | None = None, seed: int = 0, jobs: int = 1) -> JackknifeResult:
    """Resample all blocks and collect leave-one-block-out residuals.

    Under the ``skip`` policy, blocks whose inverse-HVP did not converge are
    left out of the variability sets.
    """
    train_config = train_config or TrainConfig()
    K = jk.interval(data.T)
    thetas, records, scale = resample_blocks(model, data, theta_hat, w, jk, train_config, seed, jobs)
    present = np.ones(thetas.shape[:2], dtype=bool)
    unconverged = [(r.i, r.j) for r in records if not r.converged]
    if unconverged:
        log.warning("%d of %d blocks did not converge (policy: %s)", len(unconverged), len(records),
                    jk.unconverged)
        if jk.unconverged == "skip":
            for i, j in unconverged:
                present[i, j] = False
    perturbed = PerturbedParams(thetas, present, K)
    residuals = collect_lobo_residuals(model, data, perturbed, require_complete=jk.unconverged == "use")
    return JackknifeResult(perturbed, residuals, records, scale)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(a @ b / (na * nb))
