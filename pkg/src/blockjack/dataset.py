"""Sequence containers, loss-weight deletion and the synthetic AR generator."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import RngStream


class ConfigurationError(ValueError):
    pass


class FullDeletionWarning(UserWarning):
    """A deletion zeroed every weight; retraining under it is meaningless."""


@dataclass(frozen=True)
class NoiseProfile:
    kind: str = "static"
    sigma2: float = 0.0

    def __post_init__(self):
        if self.kind not in ("static", "time_dependent"):
            raise ConfigurationError(f"unknown noise profile {self.kind!r}")
        if self.sigma2 < 0:
            raise ConfigurationError("static noise variance must be >= 0")

    def variance(self, T: int) -> np.ndarray:
        """Noise variance for time steps 1..T."""
        if self.kind == "static":
            return np.full(T, float(self.sigma2))
        return np.arange(1, T + 1) / 10.0

    def to_dict(self) -> dict:
        if self.kind == "static":
            return {"kind": "static", "sigma2": self.sigma2}
        return {"kind": "time_dependent"}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseProfile":
        return cls(d.get("kind", "static"), float(d.get("sigma2", 0.0)))


@dataclass(frozen=True)
class SequenceDataset:
    """``n`` fixed-length sequences.

    ``x`` has shape ``(n, T, d_in)``; ``y`` has shape ``(n, T + horizon)`` so
    that the prediction made at step ``t`` for horizon ``t'`` targets
    ``y[:, t + t']`` (all indices zero-based).
    """

    x: np.ndarray
    y: np.ndarray
    horizon: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, :, None]
        if x.ndim != 3 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ConfigurationError(f"bad dataset shapes x={x.shape} y={y.shape}")
        if y.shape[1] > x.shape[1] + self.horizon:
            raise ConfigurationError("y is longer than T + horizon")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ConfigurationError("dataset contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def T(self) -> int:
        return self.x.shape[1]

    @property
    def d_in(self) -> int:
        return self.x.shape[2]

    @property
    def n_out(self) -> int:
        return self.horizon + 1

    def subset(self, idx) -> "SequenceDataset":
        idx = np.atleast_1d(np.asarray(idx))
        return SequenceDataset(self.x[idx], self.y[idx], self.horizon, self.meta)

    def targets(self) -> np.ndarray:
        """Labels aligned with prediction slots, shape ``(n, T, horizon+1)``.

        Slots whose target lies past the observed range hold 0.
        """
        out = np.zeros((self.n, self.T, self.n_out))
        L = self.y.shape[1]
        for tp in range(self.n_out):
            stop = min(self.T, L - tp)
            if stop > 0:
                out[:, :stop, tp] = self.y[:, tp:tp + stop]
        return out

    def observed_mask(self) -> np.ndarray:
        t = np.arange(self.T)[:, None] + np.arange(self.n_out)[None, :]
        return np.broadcast_to(t < self.y.shape[1], (self.n, self.T, self.n_out))

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "T": self.T,
            "T_prime": self.horizon,
            "d_in": self.d_in,
            "a": self.meta.get("a"),
            "noise": self.meta.get("noise"),
            "seed": self.meta.get("seed"),
            "x": self.x.tolist(),
            "y": self.y.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SequenceDataset":
        meta = {k: d.get(k) for k in ("a", "noise", "seed")}
        return cls(np.array(d["x"], dtype=np.float64), np.array(d["y"], dtype=np.float64),
                   int(d.get("T_prime", 0)), meta)

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load_json(cls, path) -> "SequenceDataset":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save_csv(self, path) -> None:
        """Long-format rows ``(i, t, x, y)``; ``x`` is blank past step T."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["i", "t"] + (["x"] if self.d_in == 1 else [f"x{k}" for k in range(self.d_in)]) + ["y"])
            for i in range(self.n):
                for t in range(self.y.shape[1]):
                    xs = [repr(float(v)) for v in self.x[i, t]] if t < self.T else [""] * self.d_in
                    wr.writerow([i, t, *xs, repr(float(self.y[i, t]))])


@dataclass(frozen=True)
class BlockIndex:
    """Sequence ``i`` and interval ``j`` of length ``K``.

    The interval covers time steps ``[K*j, K*(j+1))``.
    """

    i: int
    j: int
    K: int

    @property
    def start(self) -> int:
        return self.K * self.j

    @property
    def stop(self) -> int:
        return self.K * (self.j + 1)


def n_intervals(T: int, K: int) -> int:
    if not 1 <= K <= T:
        raise ConfigurationError(f"interval length K={K} must lie in [1, {T}]")
    return T // K


def owning_interval(t: int, T: int, K: int) -> tuple[int, bool]:
    """Interval index owning step ``t`` and whether ``t`` is actually covered.

    Trailing steps past ``K * (T // K)`` belong to no block; they are mapped to
    the last block and reported as uncovered.
    """
    J = n_intervals(T, K)
    j = t // K
    if j < J:
        return j, True
    return J - 1, False


@dataclass(frozen=True)
class WeightVector:
    """Per-slot nonnegative loss weights of shape ``(n, T, horizon+1)``.

    ``deletions`` records every zeroing applied to the base pattern, e.g.
    ``(("sequence", 3), ("interval", 1, 5))``; empty for the base vector.
    """

    values: np.ndarray
    deletions: tuple = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ConfigurationError(f"weights must be (n, T, horizon+1), got {v.shape}")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ConfigurationError("weights must be finite and nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    @property
    def provenance(self) -> str:
        kinds = {d[0] for d in self.deletions}
        if not kinds:
            return "full"
        if kinds == {"sequence"}:
            return "seq_deleted"
        if kinds == {"interval"}:
            return "interval_deleted"
        if kinds == {"block"}:
            return "block_deleted"
        return "both"

    def _with(self, values: np.ndarray, record: tuple) -> "WeightVector":
        deletions = self.deletions if record in self.deletions else self.deletions + (record,)
        return WeightVector(values, deletions)


def standard_weights(n: int, T: int, horizon: int = 0, architecture: str = "labeling") -> WeightVector:
    """Weight patterns for common recurrent architectures.

    ``labeling`` weights every step, ``classification`` only the last step,
    ``seq2seq`` the last step at horizons ``1..horizon``. ``forecast`` is the
    multi-horizon extension of labeling: every step at every horizon.
    """
    if architecture in ("labeling", "classification") and horizon != 0:
        raise ConfigurationError(f"{architecture} requires horizon 0, got {horizon}")
    if architecture == "seq2seq" and horizon <= 0:
        raise ConfigurationError("seq2seq requires horizon > 0")
    w = np.zeros((n, T, horizon + 1))
    if architecture in ("labeling", "forecast"):
        w[:] = 1.0
    elif architecture == "classification":
        w[:, T - 1, 0] = 1.0
    elif architecture == "seq2seq":
        w[:, T - 1, 1:] = 1.0
    else:
        raise ConfigurationError(f"unknown architecture {architecture!r}")
    return WeightVector(w)


def delete_sequence_block(w: WeightVector, i: int) -> WeightVector:
    n = w.values.shape[0]
    if not 0 <= i < n:
        raise IndexError(f"sequence index {i} out of range [0, {n})")
    v = w.values.copy()
    v[i] = 0.0
    return w._with(v, ("sequence", int(i)))


def delete_interval_block(w: WeightVector, j: int, K: int) -> WeightVector:
    T = w.values.shape[1]
    J = n_intervals(T, K)
    if not 0 <= j < J:
        raise IndexError(f"interval index {j} out of range [0, {J})")
    v = w.values.copy()
    v[:, K * j:K * (j + 1)] = 0.0
    if not v.any():
        warnings.warn(f"deleting interval {j} (K={K}) zeroes every weight", FullDeletionWarning, stacklevel=2)
    return w._with(v, ("interval", int(j), int(K)))


def delete_block(w: WeightVector, block: BlockIndex) -> WeightVector:
    """Zero the slots of sequence ``block.i`` inside interval ``block.j``.

    This is the unit left out by one resample of the jackknife: the
    intersection of the sequence block and the interval block. With ``K = T``
    it removes the whole sequence; with a single training sequence it removes
    one time interval.
    """
    n, T = w.values.shape[:2]
    if not 0 <= block.i < n:
        raise IndexError(f"sequence index {block.i} out of range [0, {n})")
    J = n_intervals(T, block.K)
    if not 0 <= block.j < J:
        raise IndexError(f"interval index {block.j} out of range [0, {J})")
    v = w.values.copy()
    v[block.i, block.start:block.stop] = 0.0
    return w._with(v, ("block", block.i, block.j, block.K))


def ar_response(x, a: float) -> np.ndarray:
    """Noiseless AR filter ``s_t = a * s_{t-1} + x_t`` along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    s = np.empty_like(x)
    acc = np.zeros(x.shape[:-1])
    for t in range(x.shape[-1]):
        acc = a * acc + x[..., t]
        s[..., t] = acc
    return s


def generate_synthetic(
    n: int,
    T: int,
    a: float = 0.9,
    profile: NoiseProfile = NoiseProfile(),
    rng: RngStream | None = None,
    horizon: int = 0,
    inputs=None,
) -> SequenceDataset:
    """Sample ``n`` sequences of the AR process ``y_t = sum_k a^(t-k) x_k + eps_t``.

    Inputs are i.i.d. standard normal scalars unless ``inputs`` (shape
    ``(n, T + horizon)``) is given. The process runs for ``T + horizon``
    steps; inputs past step ``T`` are drawn but never shown to the model.
    """
    if abs(a) >= 1:
        raise ConfigurationError(f"|a| must be < 1 for a contractive process, got {a}")
    if n < 1 or T < 1 or horizon < 0:
        raise ConfigurationError("need n >= 1, T >= 1, horizon >= 0")
    rng = rng or RngStream(0)
    gen = rng.generator()
    L = T + horizon
    if inputs is None:
        x = gen.standard_normal((n, L))
    else:
        x = np.asarray(inputs, dtype=np.float64).reshape(n, L)
    eps = gen.standard_normal((n, L)) * np.sqrt(profile.variance(L))
    y = ar_response(x, a) + eps
    meta = {"a": a, "noise": profile.to_dict(), "seed": rng.seed}
    return SequenceDataset(x[:, :T, None], y, horizon, meta)
