"""Coverage, width, RMSE and threshold-audit metrics for confidence bands."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import SequenceDataset
from .intervals import ConfidenceBand


def _labels(labels) -> np.ndarray:
    if isinstance(labels, SequenceDataset):
        return labels.targets()
    return np.asarray(labels, dtype=np.float64)


def _limits(bands):
    """Stack bands into ``(lower, upper, point)`` arrays of shape ``(N, T, O)``."""
    if isinstance(bands, ConfidenceBand):
        lo, up, pt = bands.lower, bands.upper, bands.point
    else:
        bands = list(bands)
        if not bands:
            raise ValueError("no bands given")
        lo = np.stack([b.lower for b in bands])
        up = np.stack([b.upper for b in bands])
        pt = np.stack([b.point for b in bands])
    if lo.ndim == 2:
        lo, up, pt = lo[None], up[None], pt[None]
    return lo, up, pt


def _aligned(bands, labels):
    lo, up, pt = _limits(bands)
    y = _labels(labels)
    if y.ndim == lo.ndim - 1:
        y = y[..., None]
    if y.shape != lo.shape:
        raise ValueError(f"labels of shape {y.shape} do not match bands of shape {lo.shape}")
    return lo, up, pt, y


@dataclass
class CoverageReport:
    alpha: float
    per_slot: np.ndarray        # (T, horizon+1) coverage fraction
    mean_coverage: float
    mean_width: np.ndarray      # (T, horizon+1), over finite bands; NaN if none are finite
    finite_fraction: np.ndarray  # (T, horizon+1)
    n_infinite: int
    rmse: float
    n_test: int

    @property
    def per_t(self) -> np.ndarray:
        """Coverage per time step, averaged over horizons."""
        return self.per_slot.mean(axis=1)

    @property
    def overall_width(self) -> float:
        """Mean width over all finite slots."""
        w = self.mean_width[np.isfinite(self.mean_width)]
        return float(w.mean()) if w.size else float("nan")

    def summary(self) -> dict:
        return {
            "alpha": self.alpha,
            "mean_coverage": self.mean_coverage,
            "per_t_coverage": [float(c) for c in self.per_t],
            "mean_width": self.overall_width,
            "rmse": self.rmse,
            "n_test": self.n_test,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n", encoding="utf-8")

    def write_csv(self, path) -> None:
        """Slot-level rows ``(t, t_prime, coverage, mean_width, finite_fraction)``."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "t_prime", "coverage", "mean_width", "finite_fraction"])
            T, O = self.per_slot.shape
            for t in range(T):
                for tp in range(O):
                    wr.writerow([t, tp, repr(float(self.per_slot[t, tp])),
                                 repr(float(self.mean_width[t, tp])),
                                 repr(float(self.finite_fraction[t, tp]))])


def covered(bands, labels) -> np.ndarray:
    """Boolean ``(N, T, O)`` array: label inside the closed band."""
    lo, up, _, y = _aligned(bands, labels)
    return (lo <= y) & (y <= up)


def mean_width(bands):
    """Per-slot mean width over finite bands and the fraction of finite bands.

    Slots where every band is infinite get NaN width.
    """
    lo, up, _ = _limits(bands)
    w = up - lo
    finite = np.isfinite(w)
    count = finite.sum(axis=0)
    total = np.where(finite, w, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return mean, count / w.shape[0]


def rmse(predictions, labels) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    y = _labels(labels)
    if p.shape != y.shape:
        raise ValueError(f"predictions {p.shape} and labels {y.shape} are misaligned")
    return float(np.sqrt(np.mean((p - y) ** 2)))


def coverage(bands, labels) -> CoverageReport:
    lo, up, pt, y = _aligned(bands, labels)
    hit = (lo <= y) & (y <= up)
    per_slot = hit.mean(axis=0)
    width, finite_frac = mean_width(bands)
    alpha = bands.alpha if isinstance(bands, ConfidenceBand) else list(bands)[0].alpha
    return CoverageReport(
        alpha=float(alpha),
        per_slot=per_slot,
        mean_coverage=float(hit.mean()),
        mean_width=width,
        finite_fraction=finite_frac,
        n_infinite=int(np.sum(~np.isfinite(up - lo))),
        rmse=rmse(pt, y),
        n_test=int(lo.shape[0]),
    )


def audit_precision(bands, labels, threshold: float, side: str = "below_lower") -> float | None:
    """Precision of a threshold alarm raised from the band limits.

    ``below_lower`` fires when ``f_lower < threshold`` and is correct when the
    label is below the threshold; ``above_upper`` fires when
    ``f_upper > threshold`` and is correct when the label exceeds it. Returns
    None when the alarm never fires.
    """
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    lo, up, _, y = _aligned(bands, labels)
    if side == "below_lower":
        fired, truth = lo < threshold, y < threshold
    elif side == "above_upper":
        fired, truth = up > threshold, y > threshold
    else:
        raise ValueError(f"unknown side {side!r}")
    n_fired = int(fired.sum())
    if n_fired == 0:
        return None
    return int((fired & truth).sum()) / n_fired
