"""Nearest-rank percentile thresholds and retention masks."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DomainError, EmptySampleError

POSITION = "position-only"
ORIENTATION = "orientation-only"
JOINT = "joint-either"
MODES = (POSITION, ORIENTATION, JOINT)
DEFAULT_SWEEP = (100, 90, 80, 70)


@dataclass(frozen=True)
class ThresholdSpec:
    keep_percent: int = 100
    mode: str = POSITION

    def __post_init__(self):
        if isinstance(self.keep_percent, bool) or int(self.keep_percent) != self.keep_percent:
            raise ConfigurationError(f"keep_percent must be an integer, got {self.keep_percent!r}")
        if not 1 <= self.keep_percent <= 100:
            raise ConfigurationError(f"keep_percent must be in 1..100, got {self.keep_percent}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown rejection mode {self.mode!r}")


@dataclass(frozen=True)
class RetentionResult:
    threshold_value_p: float | None
    threshold_value_q: float | None
    kept_indices: tuple[int, ...]
    rejected_indices: tuple[int, ...]

    @property
    def kept_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.kept_indices) + len(self.rejected_indices), dtype=bool)
        mask[list(self.kept_indices)] = True
        return mask


def nearest_rank(n: int, keep_percent: int) -> int:
    """1-based rank ⌈keep_percent · n / 100⌉, computed in integers."""
    return -(-keep_percent * n // 100)


def percentile_threshold(values: Sequence[float], keep_percent: int) -> float:
    """The ⌈keep_percent/100 · n⌉-th smallest value. At 100 this is the maximum."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise EmptySampleError("percentile of an empty list")
    if not np.all(np.isfinite(arr)):
        raise DomainError("uncertainty values must be finite")
    ThresholdSpec(keep_percent)
    k = nearest_rank(arr.size, int(keep_percent))
    return float(np.partition(arr, k - 1)[k - 1])


def retention_mask(values: Sequence[float], keep_percent: int) -> tuple[np.ndarray, float]:
    """Boolean keep-mask (value <= threshold) and the threshold. Ties at the cut are kept."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    thr = percentile_threshold(arr, keep_percent)
    return arr <= thr, thr


def _as_pair(u_p, u_q) -> tuple[np.ndarray, np.ndarray]:
    u_p = np.asarray(u_p, dtype=np.float64).reshape(-1)
    u_q = np.asarray(u_q, dtype=np.float64).reshape(-1)
    if u_p.size == 0:
        raise EmptySampleError("no predictions to filter")
    if u_p.size != u_q.size:
        raise ConfigurationError("u_p and u_q lengths differ")
    return u_p, u_q


def spec_thresholds(u_p: Sequence[float], u_q: Sequence[float],
                    spec: ThresholdSpec) -> tuple[float | None, float | None]:
    """The thresholds (θ_p, θ_q) a spec needs, computed from the given values. Unused ones are None."""
    u_p, u_q = _as_pair(u_p, u_q)
    thr_p = percentile_threshold(u_p, spec.keep_percent) if spec.mode != ORIENTATION else None
    thr_q = percentile_threshold(u_q, spec.keep_percent) if spec.mode != POSITION else None
    return thr_p, thr_q


def retain(u_p: Sequence[float], u_q: Sequence[float], mode: str, threshold_p: float | None,
           threshold_q: float | None) -> RetentionResult:
    """Keep-set for fixed thresholds, e.g. ones frozen on a calibration split."""
    u_p, u_q = _as_pair(u_p, u_q)
    ThresholdSpec(100, mode)
    keep = np.ones(u_p.size, dtype=bool)
    if mode != ORIENTATION:
        keep &= u_p <= threshold_p
    if mode != POSITION:
        keep &= u_q <= threshold_q
    idx = np.arange(u_p.size)
    return RetentionResult(threshold_p, threshold_q, tuple(int(i) for i in idx[keep]),
                           tuple(int(i) for i in idx[~keep]))


def apply_rejection_values(u_p: Sequence[float], u_q: Sequence[float], spec: ThresholdSpec,
                           calibration: tuple[Sequence[float], Sequence[float]] | None = None) -> RetentionResult:
    """Filter by percentile thresholds of the values themselves, or of ``calibration`` = (u_p, u_q) if given."""
    thr = spec_thresholds(*(calibration if calibration is not None else (u_p, u_q)), spec)
    return retain(u_p, u_q, spec.mode, *thr)


def apply_rejection(predictions: Sequence, spec: ThresholdSpec) -> RetentionResult:
    """Keep prediction i iff its governing uncertainty is at or below the percentile threshold.

    ``joint-either`` thresholds u_p and u_q independently and rejects a
    prediction if either exceeds its own threshold.
    """
    return apply_rejection_values([pr.u_p for pr in predictions], [pr.u_q for pr in predictions], spec)


def write_retention_csv(path, sample_ids: Sequence[str], u_p: Sequence[float], u_q: Sequence[float],
                        sweep: Sequence[int] = DEFAULT_SWEEP, mode: str = POSITION,
                        calibration: tuple[Sequence[float], Sequence[float]] | None = None) -> None:
    """Per-sample keep flags across the sweep (1 kept, 0 rejected)."""
    masks = [apply_rejection_values(u_p, u_q, ThresholdSpec(k, mode), calibration).kept_mask for k in sweep]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "u_p", "u_q"] + [f"kept_at_{k}" for k in sweep])
        for i, sid in enumerate(sample_ids):
            w.writerow([sid, repr(float(u_p[i])), repr(float(u_q[i]))] + [int(m[i]) for m in masks])
