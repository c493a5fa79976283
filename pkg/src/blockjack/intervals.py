"""Leave-one-block-out residuals and jackknife confidence bands."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .dataset import SequenceDataset, n_intervals


class IncompleteError(RuntimeError):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(f"({i}, {j})" for i, j in self.missing[:10])
        more = "" if len(self.missing) <= 10 else f" and {len(self.missing) - 10} more"
        super().__init__(f"missing perturbed parameters for blocks {shown}{more}")


# index arithmetic tolerance: (1 - 0.1) * 10 must give exactly 9
_EPS = 1e-9


def upper_rank(m: int, alpha: float) -> int:
    return math.ceil((1.0 - alpha) * (m + 1) - _EPS)


def lower_rank(m: int, alpha: float) -> int:
    return math.floor(alpha * (m + 1) + _EPS)


def _check(values, alpha):
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("quantile of an empty set")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return np.sort(v, kind="stable")


def quantile_upper(values, alpha: float) -> float:
    """The ``ceil((1-alpha)(m+1))``-th smallest of ``m`` values, or +inf past the end."""
    v = _check(values, alpha)
    k = upper_rank(v.size, alpha)
    return float(v[k - 1]) if k <= v.size else math.inf


def quantile_lower(values, alpha: float) -> float:
    """The ``floor(alpha(m+1))``-th smallest of ``m`` values, or -inf below rank 1."""
    v = _check(values, alpha)
    k = lower_rank(v.size, alpha)
    return float(v[k - 1]) if k >= 1 else -math.inf


def _ranked(sorted_vals: np.ndarray, counts: np.ndarray, ranks: np.ndarray, fill: float) -> np.ndarray:
    """Pick the ``ranks``-th (1-based) entry along axis 0, ``fill`` where out of range.

    ``sorted_vals`` is sorted along axis 0 with NaNs (absent blocks) last.
    """
    ok = (ranks >= 1) & (ranks <= counts)
    idx = np.clip(ranks - 1, 0, sorted_vals.shape[0] - 1)
    picked = np.take_along_axis(sorted_vals, idx[None], axis=0)[0]
    return np.where(ok, picked, fill)


@dataclass
class PerturbedParams:
    """Resampled parameter vectors indexed by block ``(i, j)``."""

    thetas: np.ndarray    # (n, J, P)
    present: np.ndarray   # (n, J) bool
    K: int

    @classmethod
    def empty(cls, n: int, J: int, P: int, K: int) -> "PerturbedParams":
        return cls(np.zeros((n, J, P)), np.zeros((n, J), dtype=bool), K)

    @classmethod
    def from_mapping(cls, mapping: Mapping, n: int, T: int, K: int) -> "PerturbedParams":
        J = n_intervals(T, K)
        P = None
        out = None
        for (i, j), theta in mapping.items():
            th = getattr(theta, "theta", theta)
            if out is None:
                P = len(th)
                out = cls.empty(n, J, P, K)
            out.thetas[i, j] = th
            out.present[i, j] = True
        if out is None:
            raise IncompleteError([(i, j) for i in range(n) for j in range(J)])
        return out

    def set(self, i: int, j: int, theta) -> None:
        self.thetas[i, j] = getattr(theta, "theta", theta)
        self.present[i, j] = True

    def missing(self) -> list[tuple[int, int]]:
        return [tuple(map(int, ij)) for ij in np.argwhere(~self.present)]


@dataclass
class LoboResiduals:
    """Absolute errors ``|y - f|`` of each resampled model on its own deleted block.

    ``values[i, t, t']`` is evaluated with the model that left out block
    ``(i, owner(t))``; NaN marks blocks that are absent. ``covered[t]`` is
    False for trailing steps that no interval block owns.
    """

    values: np.ndarray    # (n, T, horizon+1)
    K: int
    covered: np.ndarray   # (T,)

    @property
    def owner(self) -> np.ndarray:
        T = self.values.shape[1]
        J = n_intervals(T, self.K)
        return np.minimum(np.arange(T) // self.K, J - 1)


def collect_lobo_residuals(model, data: SequenceDataset, perturbed: PerturbedParams,
                           require_complete: bool = True) -> LoboResiduals:
    if require_complete and not perturbed.present.all():
        raise IncompleteError(perturbed.missing())
    K = perturbed.K
    n, T = data.n, data.T
    J = n_intervals(T, K)
    Y = data.targets()
    obs = data.observed_mask()
    res = np.full(Y.shape, np.nan)
    owner = np.minimum(np.arange(T) // K, J - 1)
    for i in range(n):
        for j in range(J):
            if not perturbed.present[i, j]:
                continue
            ts = owner == j
            f = model.predict(perturbed.thetas[i, j], data.x[i:i + 1])[0]
            res[i, ts] = np.abs(Y[i, ts] - f[ts])
    res[~obs] = np.nan
    covered = np.arange(T) < K * J
    return LoboResiduals(res, K, covered)


@dataclass
class ConfidenceBand:
    """Per-slot interval limits, shape ``(..., T, horizon+1)``.

    A leading test-sequence axis is present when built for several inputs.
    """

    lower: np.ndarray
    upper: np.ndarray
    point: np.ndarray
    alpha: float
    inverted: np.ndarray      # slots whose limits were swapped
    unsupported: np.ndarray   # (T,) steps no interval block owns

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def __getitem__(self, k) -> "ConfidenceBand":
        return ConfidenceBand(self.lower[k], self.upper[k], self.point[k], self.alpha,
                              self.inverted[k], self.unsupported)

    def __len__(self) -> int:
        return self.lower.shape[0]

    def write_csv(self, path, test_ids=None) -> None:
        """Rows ``(test_id, t, t_prime, f_point, f_lower, f_upper, alpha)``."""
        lo, up, pt = self.lower, self.upper, self.point
        if lo.ndim == 2:
            lo, up, pt = self.lower[None], self.upper[None], self.point[None]
        ids = range(lo.shape[0]) if test_ids is None else test_ids
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["test_id", "t", "t_prime", "f_point", "f_lower", "f_upper", "alpha"])
            for k, tid in enumerate(ids):
                for t in range(lo.shape[1]):
                    for tp in range(lo.shape[2]):
                        wr.writerow([tid, t, tp, _fmt(pt[k, t, tp]), _fmt(lo[k, t, tp]),
                                     _fmt(up[k, t, tp]), _fmt(self.alpha)])


def _fmt(v) -> str:
    # repr gives the shortest round-tripping form and "inf"/"-inf" for infinities
    return repr(float(v))


def perturbed_predictions(model, x, perturbed: PerturbedParams) -> np.ndarray:
    """Predictions of every resampled model, shape ``(n, N, T, horizon+1)``.

    Entry ``[i, :, t]`` uses the model that deleted block ``(i, owner(t))``;
    absent blocks give NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    n, J = perturbed.present.shape
    N, T = x.shape[:2]
    owner = np.minimum(np.arange(T) // perturbed.K, J - 1)
    out = np.full((n, N, T, model.horizon + 1), np.nan)
    for i in range(n):
        for j in range(J):
            ts = owner == j
            if ts.any() and perturbed.present[i, j]:
                # recurrence needs the full prefix, so predict everything and slice
                out[i][:, ts] = model.predict(perturbed.thetas[i, j], x)[:, ts]
    return out


def build_bands(model, x, theta_hat, perturbed: PerturbedParams, residuals: LoboResiduals,
                alpha: float, preds: np.ndarray | None = None) -> ConfidenceBand:
    """Jackknife bands for test inputs ``x`` of shape ``(N, T, d_in)``.

    At each slot the upper limit is the upper quantile of
    ``f(x; theta_(i,j)) + r_(i,j)`` over blocks ``i`` of the interval owning
    ``t``, the lower limit the lower quantile of ``f - r``. Pass ``preds``
    (from ``perturbed_predictions``) to reuse them across several alphas.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if preds is None:
        preds = perturbed_predictions(model, x, perturbed)
    r = residuals.values[:, None]                      # (n, 1, T, O)
    plus = np.sort(preds + r, axis=0)
    minus = np.sort(preds - r, axis=0)
    counts = np.sum(~np.isnan(preds + r), axis=0)      # (N, T, O)
    if np.any(counts == 0):
        raise IncompleteError([])
    up_rank = np.ceil((1.0 - alpha) * (counts + 1) - _EPS).astype(int)
    lo_rank = np.floor(alpha * (counts + 1) + _EPS).astype(int)
    upper = _ranked(plus, counts, up_rank, math.inf)
    lower = _ranked(minus, counts, lo_rank, -math.inf)
    inverted = lower > upper
    lower, upper = np.where(inverted, upper, lower), np.where(inverted, lower, upper)
    point = model.predict(getattr(theta_hat, "theta", theta_hat), x)
    return ConfidenceBand(lower, upper, point, alpha, inverted, ~residuals.covered)


def build_band(model, x_star, theta_hat, perturbed: PerturbedParams, residuals: LoboResiduals,
               alpha: float) -> ConfidenceBand:
    """Band for a single test sequence ``x_star`` of shape ``(T, d_in)``."""
    return build_bands(model, np.asarray(x_star)[None], theta_hat, perturbed, residuals, alpha)[0]
