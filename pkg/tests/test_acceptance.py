"""One test per acceptance criterion. Each prints a PASS/FAIL line; a summary follows the run."""

import csv
import io
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from helpers import random_batch, random_params, small_config
from test_mcdropout import _deviation_oracle, _random_passes, _sample
from test_net import _central_difference, _grad_case, _rel_err
from uncertloc.cli import RunConfig, cmd_evaluate, cmd_gen_data, cmd_train
from uncertloc.core import summarize_errors
from uncertloc.evalreport import quantity_masks, read_records_csv, scatter_bands
from uncertloc.mcdropout import decompose, mc_infer
from uncertloc.net import DropoutSpec, ModelConfig, ModelParams, TrainConfig, forward_batch, loss_and_grad, train
from uncertloc.rejection import JOINT, ORIENTATION, POSITION, ThresholdSpec, apply_rejection_values
from uncertloc.synthdata import default_world, linear_pose_dataset

SEEDS = (0, 1, 2)


def test_criterion_01_decomposition_oracle(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    lengths = np.concatenate([[1, 1000], rng.integers(1, 1001, 998)])
    worst, exact = 0.0, True
    for T in lengths:
        passes = _random_passes(rng, int(T), offset=float(rng.uniform(-5, 5)))
        d = decompose(passes)
        want = _deviation_oracle(passes)
        for g, w in zip((d.epistemic_p, d.aleatoric_p, d.epistemic_q, d.aleatoric_q), want):
            worst = max(worst, abs(g - w) / abs(w) if w else abs(g))
        exact &= d.u_p == d.epistemic_p + d.aleatoric_p and d.u_q == d.epistemic_q + d.aleatoric_q
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and exact and elapsed < 10
    acceptance(1, ok, f"1000 lists, worst rel err {worst:.1e}, u exact={exact}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_zero_dropout(acceptance):
    t0 = time.perf_counter()
    cfg = small_config()
    worst = 0.0
    for seed in range(5):
        params = random_params(cfg, seed)
        sample = _sample(cfg, seed)
        for T in (1, 2, 3, 10, 40, 100, 500):
            pose, _ = mc_infer(params, sample, T, DropoutSpec(0.0), seed)
            worst = max(worst, pose.epistemic_p, pose.epistemic_q)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 5
    acceptance(2, ok, f"max epistemic {worst:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_03_gradients(acceptance):
    t0 = time.perf_counter()
    worst, where = 0.0, ""
    n_cases = 24
    for seed in range(n_cases):
        params, batch, mask = _grad_case(seed)
        _, analytic = loss_and_grad(params, *batch, mask)
        numeric = _central_difference(params, batch, mask, h=1e-5)
        for name in params.names():
            e = _rel_err(analytic[name], numeric[name])
            if e > worst:
                worst, where = e, f"{name}@config{seed}"
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    acceptance(3, ok, f"{n_cases} configs, worst rel err {worst:.1e} ({where}), {elapsed:.1f}s")
    assert ok


def test_criterion_04_heteroscedastic_optimum(acceptance):
    t0 = time.perf_counter()
    cfg = small_config()
    worst = 0.0
    for r2 in (1e-6, 1e-3, 0.05, 0.5, 1.0, 2.0, 30.0, 1e3):
        params = ModelParams(cfg, {k: np.zeros(s) for k, s in cfg.param_shapes().items()})
        params.tensors["head_sp_b"] = np.array([math.log(r2)])
        params.tensors["head_sq_b"] = np.array([math.log(r2)])
        r = math.sqrt(r2)
        _, g = loss_and_grad(params, np.ones((1, 4)), np.ones((1, 4)), np.array([[r, 0.0]]), np.array([[0.0, r]]))
        worst = max(worst, abs(g["head_sp_b"][0]), abs(g["head_sq_b"][0]))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 1
    acceptance(4, ok, f"max |dL/ds| at s=log r^2: {worst:.1e}, {elapsed:.2f}s")
    assert ok


def test_criterion_05_retention(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    u = rng.permutation(1000) + rng.uniform(0, 0.5, 1000)
    counts = [len(apply_rejection_values(u, u, ThresholdSpec(k, POSITION)).kept_indices) for k in (100, 90, 80, 70)]
    nested = True
    for _ in range(100):
        n = int(rng.integers(1, 1000))
        u_p = rng.exponential(1.0, n)
        u_q = rng.exponential(1.0, n)
        for mode in (POSITION, ORIENTATION, JOINT):
            kept = [set(apply_rejection_values(u_p, u_q, ThresholdSpec(k, mode)).kept_indices)
                    for k in (70, 80, 90, 100)]
            nested &= kept[0] <= kept[1] <= kept[2] <= kept[3]
    elapsed = time.perf_counter() - t0
    ok = counts == [1000, 900, 800, 700] and nested and elapsed < 5
    acceptance(5, ok, f"counts {counts}, nested={nested}, {elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data, train and evaluate with the default configuration for each root seed."""
    root = tmp_path_factory.mktemp("acceptance")
    runs = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        base = RunConfig(seed=seed)
        data = cmd_gen_data(replace(base, out=str(root / f"s{seed}" / "data")))
        trained = cmd_train(replace(base, out=str(root / f"s{seed}" / "train"), dataset=str(data)))
        ev_cfg = replace(base, out=str(root / f"s{seed}" / "eval"), dataset=str(data), checkpoint=str(trained))
        ev = cmd_evaluate(ev_cfg)
        runs[seed] = dict(config=ev_cfg, eval=ev, report=json.loads((ev / "report.json").read_text()),
                          records=read_records_csv((ev / "records.csv").read_text()))
    return runs, time.perf_counter() - t0


def _quantity(report, keep):
    return next(r for r in report["reports"] if r["keep_percent"] == keep)


@pytest.mark.slow
def test_criterion_06_rejection_reduces_error(pipeline, acceptance):
    runs, elapsed = pipeline
    ok = elapsed < 600
    parts = []
    for seed, run in runs.items():
        full, k70 = _quantity(run["report"], 100), _quantity(run["report"], 70)
        p_full, p70 = full["position"]["stats"], k70["position"]["stats"]
        o_full, o70 = full["orientation"]["stats"], k70["orientation"]["stats"]
        good = p70["mean"] < p_full["mean"] and o70["mean"] < o_full["mean"] and p70["max"] <= p_full["max"]
        ok &= good
        parts.append(f"seed {seed}: pos {p_full['mean']:.3f}->{p70['mean']:.3f} m, "
                     f"ori {o_full['mean']:.2f}->{o70['mean']:.2f} deg")
    acceptance(6, ok, "; ".join(parts) + f"; {elapsed:.0f}s total")
    assert ok


@pytest.mark.slow
def test_criterion_07_calibration(pipeline, acceptance):
    runs, _ = pipeline
    rhos = {s: r["report"]["calibration"]["spearman_u_p_position_error"] for s, r in runs.items()}
    ok = all(rho is not None and rho > 0.2 for rho in rhos.values())
    acceptance(7, ok, "spearman(u_p, position error): " + ", ".join(f"seed {s} {v:.3f}" for s, v in rhos.items()))
    assert ok


@pytest.mark.slow
def test_criterion_08_noise_region_aleatoric(pipeline, acceptance):
    runs, _ = pipeline
    ok = True
    parts = []
    world = default_world()
    for seed, run in runs.items():
        recs = run["records"]
        inside = [r.prediction.aleatoric_p for r in recs if world.in_noise_region(r.truth.x, r.truth.y)]
        outside = [r.prediction.aleatoric_p for r in recs if not world.in_noise_region(r.truth.x, r.truth.y)]
        good = bool(inside) and bool(outside) and np.mean(inside) > np.mean(outside)
        ok &= good
        parts.append(f"seed {seed}: in {np.mean(inside):.3f} (n={len(inside)}) vs out {np.mean(outside):.3f}")
    acceptance(8, ok, "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_criterion_09_report_fidelity(pipeline, acceptance, tmp_path):
    runs, _ = pipeline
    ok = True
    for seed, run in runs.items():
        recs = run["records"]
        full = _quantity(run["report"], 100)
        ok &= full["position"]["stats"] == summarize_errors([r.errors.position_error for r in recs]).as_dict()
        ok &= full["orientation"]["stats"] == summarize_errors([r.errors.orientation_error for r in recs]).as_dict()
        rows = list(csv.DictReader(io.StringIO((run["eval"] / "scatter.csv").read_text())))
        ok &= [r["sample_id"] for r in rows] == [r.sample_id for r in recs]
        masks = {k: quantity_masks(recs, k, run["config"].mode) for k in (70, 80, 90, 100)}
        for i, row in enumerate(rows):
            for col, m in (("band_p", 0), ("band_q", 1)):
                k = int(row[col].rsplit("-", 1)[1])
                ok &= bool(masks[k][m][i]) and not any(masks[j][m][i] for j in (70, 80, 90) if j < k)
        ok &= scatter_bands(recs) == ([r["band_p"] for r in rows], [r["band_q"] for r in rows])
        again = cmd_evaluate(replace(run["config"], out=str(tmp_path / f"again{seed}")))
        for name in ("report.json", "report.txt", "records.csv", "scatter.csv", "retention.csv",
                     "trajectory_100.csv", "trajectory_70.csv"):
            ok &= (again / name).read_bytes() == (run["eval"] / name).read_bytes()
    acceptance(9, ok, "100% report == summarize_errors, bands match masks, rerun byte-identical (3 seeds)")
    assert ok


@pytest.mark.slow
def test_criterion_10_convergence_smoke(acceptance):
    t0 = time.perf_counter()
    train_set = linear_pose_dataset(2000, seed=0)
    test_set = linear_pose_dataset(500, seed=1)
    # default budget; dropout off because the set is noiseless
    config = TrainConfig(dropout=DropoutSpec(0.0))
    result = train(train_set, config, ModelConfig(scan_scale=1.0 / 12.0))
    image = np.array([s.image_feat for s in test_set])
    scan = np.array([s.scan for s in test_set])
    truth = np.array([[s.pose.x, s.pose.y] for s in test_set])
    out = forward_batch(result.params, image, scan)
    err = float(np.mean(np.hypot(*(out.p_hat - truth).T)))
    elapsed = time.perf_counter() - t0
    ok = err < 0.05 and elapsed < 180
    acceptance(10, ok, f"held-out mean position error {err:.4f} m after {config.epochs} epochs, {elapsed:.0f}s")
    assert ok
