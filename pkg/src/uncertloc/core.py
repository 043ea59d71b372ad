"""Pose and error primitives.

Orientation is carried as the pair ``(cos θ, sin θ)`` rather than an angle so
that regression targets are continuous. Errors are reported in meters and
degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateOrientationError, DomainError, EmptySampleError

UNIT_TOL = 1e-9
MIN_ORIENTATION_NORM = 1e-12


def _as_vec2(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (2,):
        raise DomainError(f"{name} must be a 2-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values: {arr.tolist()}")
    return arr


@dataclass(frozen=True)
class Pose2D:
    """Planar pose. ``cos``/``sin`` must form a unit vector."""

    x: float
    y: float
    cos: float
    sin: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.cos, self.sin)):
            raise DomainError(f"non-finite pose {self}")
        if abs(math.hypot(self.cos, self.sin) - 1.0) > UNIT_TOL:
            raise DomainError(f"orientation pair is not unit-norm: ({self.cos}, {self.sin})")

    @classmethod
    def from_angle(cls, x: float, y: float, theta: float) -> "Pose2D":
        return cls(float(x), float(y), math.cos(theta), math.sin(theta))

    @classmethod
    def from_arrays(cls, p, q) -> "Pose2D":
        p = _as_vec2(p, "position")
        q = normalize_orientation(q)
        return cls(float(p[0]), float(p[1]), float(q[0]), float(q[1]))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def q(self) -> np.ndarray:
        return np.array([self.cos, self.sin])

    @property
    def theta(self) -> float:
        return math.atan2(self.sin, self.cos)


@dataclass(frozen=True)
class RawPoseOutput:
    """One deterministic or dropout forward pass of the regressor.

    ``q_hat`` is the raw head output and need not be unit-norm; ``s_p`` and
    ``s_q`` are log-variances.
    """

    p_hat: np.ndarray
    q_hat: np.ndarray
    s_p: float
    s_q: float

    def __post_init__(self):
        vals = np.concatenate([np.ravel(self.p_hat), np.ravel(self.q_hat), [self.s_p, self.s_q]])
        if not np.all(np.isfinite(vals)):
            raise DomainError("raw network output contains non-finite values")


@dataclass(frozen=True)
class ErrorPair:
    position_error: float
    orientation_error: float

    def __post_init__(self):
        if not (math.isfinite(self.position_error) and self.position_error >= 0.0):
            raise DomainError(f"bad position error {self.position_error}")
        if not (math.isfinite(self.orientation_error) and 0.0 <= self.orientation_error <= 180.0):
            raise DomainError(f"bad orientation error {self.orientation_error}")


def position_error(pred, truth) -> float:
    """Euclidean distance between two planar positions, in meters."""
    a = _as_vec2(pred, "pred")
    b = _as_vec2(truth, "truth")
    return float(math.hypot(a[0] - b[0], a[1] - b[1]))


def normalize_orientation(q) -> np.ndarray:
    q = _as_vec2(q, "orientation")
    norm = math.hypot(q[0], q[1])
    if norm <= MIN_ORIENTATION_NORM:
        raise DegenerateOrientationError(f"orientation pair {q.tolist()} has near-zero norm")
    return q / norm


def orientation_error(pred_q, truth_q) -> float:
    """Angle in degrees, within [0, 180], between a predicted pair and a unit truth pair.

    The prediction is normalized first, so only its direction matters.
    """
    p = normalize_orientation(pred_q)
    t = _as_vec2(truth_q, "truth_q")
    if abs(math.hypot(t[0], t[1]) - 1.0) > UNIT_TOL:
        raise DomainError(f"truth orientation {t.tolist()} is not unit-norm")
    dot = float(np.clip(p[0] * t[0] + p[1] * t[1], -1.0, 1.0))
    cross = abs(float(p[0] * t[1] - p[1] * t[0]))
    # atan2 form equals arccos(dot) but stays well-conditioned near 0 and 180
    return min(180.0, math.degrees(math.atan2(cross, dot)))


def error_pair(pose: Pose2D, p_star, q_star) -> ErrorPair:
    return ErrorPair(position_error(p_star, pose.position), orientation_error(q_star, pose.q))


@dataclass(frozen=True)
class ErrorSummary:
    min: float
    median: float
    max: float
    mean: float

    def as_dict(self) -> dict:
        return {"min": self.min, "median": self.median, "max": self.max, "mean": self.mean}


def summarize_errors(errors: Sequence[float]) -> ErrorSummary:
    """Min, median, max and arithmetic mean of a non-empty list.

    For an even count the median is the average of the two central order
    statistics.
    """
    arr = np.asarray(errors, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise EmptySampleError("cannot summarize an empty error list")
    if not np.all(np.isfinite(arr)):
        raise DomainError("error list contains non-finite values")
    s = np.sort(arr)
    n = s.size
    mid = n // 2
    median = float(s[mid]) if n % 2 else float((s[mid - 1] + s[mid]) / 2.0)
    # rounding in the sum can push the mean one ulp outside [min, max]
    mean = min(max(float(np.mean(s)), float(s[0])), float(s[-1]))
    return ErrorSummary(float(s[0]), median, float(s[-1]), mean)
