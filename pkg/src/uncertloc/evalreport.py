"""Evaluation over a test split: threshold sweep reports, scatter and trajectory exports.

Rejection modes:

* ``per-quantity`` (default): position statistics are filtered by the u_p
  percentile and orientation statistics by the u_q percentile.
* ``position-only`` / ``orientation-only`` / ``joint-either``: one mask
  (see :mod:`uncertloc.rejection`) filters both quantities.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .core import ErrorPair, ErrorSummary, Pose2D, error_pair, summarize_errors
from .errors import ConfigurationError, DomainError
from .mcdropout import DEFAULT_T, UncertainPose, mc_infer, sample_seeds, write_pass_log
from .net import DropoutSpec, ModelParams
from .rejection import (DEFAULT_SWEEP, JOINT, MODES, ORIENTATION, POSITION, ThresholdSpec,
                        apply_rejection_values)

PER_QUANTITY = "per-quantity"
EVAL_MODES = (PER_QUANTITY,) + MODES
BAND_COLORS = {70: "red", 80: "orange", 90: "green", 100: "blue"}


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    sequence_id: str
    index_in_sequence: int
    truth: Pose2D
    prediction: UncertainPose
    errors: ErrorPair

    def check_consistency(self, tol: float = 1e-9) -> None:
        again = error_pair(self.truth, self.prediction.p_star, self.prediction.q_star)
        if (abs(again.position_error - self.errors.position_error) > tol
                or abs(again.orientation_error - self.errors.orientation_error) > tol):
            raise DomainError(f"record {self.sample_id}: stored errors do not match its poses")


@dataclass(frozen=True)
class QuantityReport:
    threshold: float | None
    retained_count: int
    rejected_count: int
    stats: ErrorSummary | None  # None when nothing was retained

    @property
    def empty(self) -> bool:
        return self.stats is None

    def as_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "retained_count": self.retained_count,
            "rejected_count": self.rejected_count,
            "empty": self.empty,
            "stats": None if self.stats is None else self.stats.as_dict(),
        }


@dataclass(frozen=True)
class ThresholdReport:
    keep_percent: int
    mode: str
    n_total: int
    position: QuantityReport
    orientation: QuantityReport

    @property
    def retained_count(self) -> int:
        return (self.orientation if self.mode == ORIENTATION else self.position).retained_count

    @property
    def rejected_count(self) -> int:
        return self.n_total - self.retained_count

    def as_dict(self) -> dict:
        return {"keep_percent": self.keep_percent, "mode": self.mode, "n_total": self.n_total,
                "position": self.position.as_dict(), "orientation": self.orientation.as_dict()}


def _check_mode(mode: str):
    if mode not in EVAL_MODES:
        raise ConfigurationError(f"unknown evaluation mode {mode!r}; expected one of {EVAL_MODES}")


def _uncertainties(records: Sequence[EvalRecord]):
    return [r.prediction.u_p for r in records], [r.prediction.u_q for r in records]


def quantity_masks(records: Sequence[EvalRecord], keep_percent: int, mode: str,
                   calibration: Sequence[EvalRecord] | None = None):
    """Keep-masks (position, orientation) and thresholds (θ_p, θ_q) for one sweep entry.

    Thresholds are percentiles of ``records`` themselves unless ``calibration``
    records are given, in which case they are frozen from those.
    """
    _check_mode(mode)
    u_p, u_q = _uncertainties(records)
    cal = _uncertainties(calibration) if calibration else None
    if mode == PER_QUANTITY:
        rp = apply_rejection_values(u_p, u_q, ThresholdSpec(keep_percent, POSITION), cal)
        rq = apply_rejection_values(u_p, u_q, ThresholdSpec(keep_percent, ORIENTATION), cal)
        return rp.kept_mask, rq.kept_mask, rp.threshold_value_p, rq.threshold_value_q
    r = apply_rejection_values(u_p, u_q, ThresholdSpec(keep_percent, mode), cal)
    return r.kept_mask, r.kept_mask, r.threshold_value_p, r.threshold_value_q


def _quantity(errors: np.ndarray, mask: np.ndarray, threshold) -> QuantityReport:
    kept = int(mask.sum())
    stats = summarize_errors(errors[mask]) if kept else None
    return QuantityReport(threshold, kept, int(mask.size - kept), stats)


def threshold_reports(records: Sequence[EvalRecord], thresholds: Sequence[int] = DEFAULT_SWEEP,
                      mode: str = PER_QUANTITY,
                      calibration: Sequence[EvalRecord] | None = None) -> list[ThresholdReport]:
    if not records:
        raise ConfigurationError("no evaluation records")
    pos = np.array([r.errors.position_error for r in records])
    ori = np.array([r.errors.orientation_error for r in records])
    reports = []
    for k in thresholds:
        mp, mq, tp, tq = quantity_masks(records, k, mode, calibration)
        reports.append(ThresholdReport(int(k), mode, len(records), _quantity(pos, mp, tp), _quantity(ori, mq, tq)))
    return reports


def check_compatible(params: ModelParams, samples: Sequence) -> None:
    cfg = params.config
    for s in samples:
        if len(s.image_feat) != cfg.image_dim or len(s.scan) != cfg.scan_dim:
            raise ConfigurationError(
                f"sample {s.sample_id} has dims ({len(s.image_feat)}, {len(s.scan)}); "
                f"checkpoint expects ({cfg.image_dim}, {cfg.scan_dim})"
            )


def infer_records(params: ModelParams, samples: Sequence, T: int = DEFAULT_T,
                  dropout: DropoutSpec = DropoutSpec(), seed: int = 0, pass_log=None) -> list[EvalRecord]:
    """MC inference for every sample, in sorted sample-id order. Sample i uses substream i of ``seed``."""
    check_compatible(params, samples)
    ordered = sorted(samples, key=lambda s: s.sample_id)
    records = []
    for s, ss in zip(ordered, sample_seeds(seed, len(ordered))):
        pred, passes = mc_infer(params, s, T, dropout, ss)
        if pass_log is not None:
            write_pass_log(pass_log, s.sample_id, passes)
        records.append(EvalRecord(s.sample_id, s.sequence_id, s.index_in_sequence, s.pose, pred,
                                  error_pair(s.pose, pred.p_star, pred.q_star)))
    return records


@dataclass
class Evaluation:
    reports: list[ThresholdReport]
    records: list[EvalRecord]
    T: int
    mode: str
    seed: int
    dropout_rate: float
    calibration: list[EvalRecord] | None = None


def evaluate(params: ModelParams, samples: Sequence, T: int = DEFAULT_T,
             thresholds: Sequence[int] = DEFAULT_SWEEP, mode: str = PER_QUANTITY,
             dropout: DropoutSpec = DropoutSpec(), seed: int = 0, pass_log=None,
             calibration_samples: Sequence | None = None, calibration_seed: int = 1) -> Evaluation:
    """MC inference plus the threshold sweep.

    With ``calibration_samples`` the thresholds are frozen from MC outputs on
    that set (seeded by ``calibration_seed``) instead of the evaluated samples.
    """
    _check_mode(mode)
    for k in thresholds:
        ThresholdSpec(k)
    records = infer_records(params, samples, T, dropout, seed, pass_log)
    cal = None
    if calibration_samples:
        cal = infer_records(params, calibration_samples, T, dropout, calibration_seed)
    return Evaluation(threshold_reports(records, thresholds, mode, cal), records, T, mode, seed, dropout.rate, cal)


def spearman(x: Sequence[float], y: Sequence[float]) -> float | None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 3 or np.all(x == x[0]) or np.all(y == y[0]):
        return None
    return float(spearmanr(x, y).statistic)


def calibration(records: Sequence[EvalRecord]) -> dict:
    """Spearman rank correlation between each uncertainty and its error."""
    return {
        "spearman_u_p_position_error": spearman([r.prediction.u_p for r in records],
                                                [r.errors.position_error for r in records]),
        "spearman_u_q_orientation_error": spearman([r.prediction.u_q for r in records],
                                                   [r.errors.orientation_error for r in records]),
    }


def mean_reductions(reports: Sequence[ThresholdReport]) -> dict:
    """Percent reduction of mean position/orientation error relative to the 100% report."""
    base = next((r for r in reports if r.keep_percent == 100), None)
    if base is None or base.position.empty or base.orientation.empty:
        return {}
    out = {}
    for r in reports:
        if r.keep_percent == 100:
            continue
        entry = {}
        for name in ("position", "orientation"):
            q, b = getattr(r, name), getattr(base, name)
            entry[name] = None if q.empty or b.stats.mean == 0 else 100.0 * (1.0 - q.stats.mean / b.stats.mean)
        out[str(r.keep_percent)] = entry
    return out


def report_json(ev: Evaluation, extra: dict | None = None) -> str:
    source = "evaluated set" if ev.calibration is None else f"calibration set ({len(ev.calibration)} samples)"
    doc = {
        "n_samples": len(ev.records),
        "T": ev.T,
        "mode": ev.mode,
        "seed": ev.seed,
        "dropout_rate": ev.dropout_rate,
        "threshold_source": source,
        "reports": [r.as_dict() for r in ev.reports],
        "mean_error_reduction_percent": mean_reductions(ev.reports),
        "calibration": calibration(ev.records),
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def report_table(reports: Sequence[ThresholdReport]) -> str:
    """Plain-text table: Min/Median/Max/Mean rows for position and orientation, one column per threshold."""
    label_w = 28
    col_w = 12
    lines = ["Threshold".ljust(label_w) + "".join(f"{r.keep_percent}% th.".rjust(col_w) for r in reports)]
    lines.append("-" * len(lines[0]))
    for quantity, unit in (("position", "Position (m)"), ("orientation", "Orientation (deg)")):
        for i, stat in enumerate(("min", "median", "max", "mean")):
            head = (unit if i == 0 else "").ljust(label_w - 8) + stat.capitalize().ljust(8)
            cells = []
            for r in reports:
                q = getattr(r, quantity)
                cells.append(("empty" if q.empty else _fmt(getattr(q.stats, stat))).rjust(col_w))
            lines.append(head + "".join(cells))
        lines.append(f"{unit} retained".ljust(label_w)
                     + "".join(f"{getattr(r, quantity).retained_count}/{r.n_total}".rjust(col_w) for r in reports))
        lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def _num(v) -> str:
    return repr(float(v))


def records_csv(records: Sequence[EvalRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "sequence_id", "index", "gt_x", "gt_y", "gt_cos", "gt_sin",
                "pred_x", "pred_y", "pred_cos", "pred_sin", "u_p", "u_q", "epistemic_p", "aleatoric_p",
                "epistemic_q", "aleatoric_q", "T", "position_error", "orientation_error"])
    for r in records:
        p = r.prediction
        w.writerow([r.sample_id, r.sequence_id, r.index_in_sequence,
                    *map(_num, (r.truth.x, r.truth.y, r.truth.cos, r.truth.sin, *p.p_star, *p.q_star,
                                p.u_p, p.u_q, p.epistemic_p, p.aleatoric_p, p.epistemic_q, p.aleatoric_q)),
                    p.T, _num(r.errors.position_error), _num(r.errors.orientation_error)])
    return buf.getvalue()


def read_records_csv(text: str) -> list[EvalRecord]:
    """Parse :func:`records_csv` output. Each record's errors are re-checked against its poses."""
    records = []
    for row in csv.DictReader(io.StringIO(text)):
        f = {k: float(v) for k, v in row.items() if k not in ("sample_id", "sequence_id", "index", "T")}
        pred = UncertainPose(np.array([f["pred_x"], f["pred_y"]]), np.array([f["pred_cos"], f["pred_sin"]]),
                             f["u_p"], f["u_q"], f["epistemic_p"], f["aleatoric_p"], f["epistemic_q"],
                             f["aleatoric_q"], int(row["T"]))
        rec = EvalRecord(row["sample_id"], row["sequence_id"], int(row["index"]),
                         Pose2D(f["gt_x"], f["gt_y"], f["gt_cos"], f["gt_sin"]), pred,
                         ErrorPair(f["position_error"], f["orientation_error"]))
        rec.check_consistency()
        records.append(rec)
    return records


def band_labels(masks_by_keep: dict[int, np.ndarray]) -> list[str]:
    """Label each sample with the tightest sweep level that still keeps it.

    With the default sweep this gives kept-at-70 (red), kept-at-80 (orange,
    rejected at 70), kept-at-90 (green, rejected at 80) and kept-at-100 (blue,
    rejected already at 90). A sample kept by no level is ``rejected-all``.
    """
    levels = sorted(masks_by_keep)
    n = len(next(iter(masks_by_keep.values())))
    labels = []
    for i in range(n):
        kept = [k for k in levels if masks_by_keep[k][i]]
        labels.append(f"kept-at-{kept[0]}" if kept else "rejected-all")
    return labels


def _color(label: str) -> str:
    if label.startswith("kept-at-"):
        return BAND_COLORS.get(int(label.rsplit("-", 1)[1]), "")
    return ""


def scatter_bands(records: Sequence[EvalRecord], thresholds: Sequence[int] = DEFAULT_SWEEP,
                  mode: str = PER_QUANTITY,
                  calibration: Sequence[EvalRecord] | None = None) -> tuple[list[str], list[str]]:
    pos_masks, ori_masks = {}, {}
    for k in thresholds:
        mp, mq, _, _ = quantity_masks(records, k, mode, calibration)
        pos_masks[int(k)], ori_masks[int(k)] = mp, mq
    return band_labels(pos_masks), band_labels(ori_masks)


def export_scatter(records: Sequence[EvalRecord], thresholds: Sequence[int] = DEFAULT_SWEEP,
                   mode: str = PER_QUANTITY, calibration: Sequence[EvalRecord] | None = None) -> str:
    """CSV of (error, uncertainty, band) per sample for position and orientation."""
    if not records:
        raise ConfigurationError("no records to export")
    band_p, band_q = scatter_bands(records, thresholds, mode, calibration)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "position_error", "u_p", "band_p", "color_p",
                "orientation_error", "u_q", "band_q", "color_q"])
    for r, bp, bq in zip(records, band_p, band_q):
        w.writerow([r.sample_id, _num(r.errors.position_error), _num(r.prediction.u_p), bp, _color(bp),
                    _num(r.errors.orientation_error), _num(r.prediction.u_q), bq, _color(bq)])
    return buf.getvalue()


def export_trajectory(records: Sequence[EvalRecord], keep_percent: int, mode: str = PER_QUANTITY,
                      calibration: Sequence[EvalRecord] | None = None) -> str:
    """Retained ground-truth and predicted positions, ordered by (sequence_id, index).

    Retention follows the mask that governs position statistics in ``mode``.
    """
    mp, _, _, _ = quantity_masks(records, keep_percent, mode, calibration)
    rows = sorted((r.sequence_id, r.index_in_sequence, i) for i, r in enumerate(records) if mp[i])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sequence_id", "index", "sample_id", "gt_x", "gt_y", "pred_x", "pred_y"])
    for seq, idx, i in rows:
        r = records[i]
        w.writerow([seq, idx, r.sample_id, _num(r.truth.x), _num(r.truth.y),
                    _num(r.prediction.p_star[0]), _num(r.prediction.p_star[1])])
    return buf.getvalue()


def noise_region_aleatoric(records: Sequence[EvalRecord], world) -> tuple[float, float]:
    """Mean aleatoric position variance inside vs outside the world's noise regions."""
    inside = [r.prediction.aleatoric_p for r in records if world.in_noise_region(r.truth.x, r.truth.y)]
    outside = [r.prediction.aleatoric_p for r in records if not world.in_noise_region(r.truth.x, r.truth.y)]
    return (float(np.mean(inside)) if inside else math.nan, float(np.mean(outside)) if outside else math.nan)
