import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_batch, random_params, small_config
from uncertloc.errors import ConfigurationError, DomainError, EmptySampleError
from uncertloc.mcdropout import (StochasticPass, aggregate, decompose, mc_infer, mc_infer_many, read_pass_log,
                                 sample_seeds, write_pass_log)
from uncertloc.net import DropoutSpec, forward
from uncertloc.synthdata import SampleTuple
from uncertloc.core import Pose2D


def _deviation_oracle(passes):
    # two-pass variance from explicit deviations, summed over dims, plus mean σ²
    T = len(passes)
    out = []
    for attr, var in (("p_hat", "sigma2_p"), ("q_hat", "sigma2_q")):
        ys = [list(getattr(ps, attr)) for ps in passes]
        spread = 0.0
        for d in range(2):
            m = math.fsum(y[d] for y in ys) / T
            spread += math.fsum((y[d] - m) ** 2 for y in ys) / T
        out += [spread, math.fsum(getattr(ps, var) for ps in passes) / T]
    return out


def _random_passes(rng, T, offset=0.0):
    return [StochasticPass(rng.normal(offset, 1.0, 2), rng.normal(0.0, 1.0, 2),
                           float(rng.uniform(0.01, 2.0)), float(rng.uniform(0.01, 2.0))) for _ in range(T)]


def test_hand_fed_example():
    passes = [StochasticPass(np.array([1.0, 0.0]), np.array([1.0, 0.0]), 0.5, 0.5),
              StochasticPass(np.array([3.0, 0.0]), np.array([1.0, 0.0]), 1.5, 0.5)]
    d = decompose(passes)
    assert (d.epistemic_p, d.aleatoric_p, d.u_p) == (1.0, 1.0, 2.0)
    assert d.epistemic_q == 0.0 and d.u_q == 0.5


def test_single_pass_has_zero_epistemic():
    ps = StochasticPass(np.array([0.3, -1.2]), np.array([0.6, 0.8]), 0.2, 0.4)
    d = decompose([ps])
    assert d.epistemic_p == 0.0 and d.epistemic_q == 0.0
    assert d.u_p == 0.2 and d.u_q == 0.4


def test_decomposition_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    exact = True
    lengths = np.concatenate([[1, 2, 1000], rng.integers(1, 1001, 997)])
    for T in lengths:
        passes = _random_passes(rng, int(T), offset=float(rng.uniform(-5, 5)))
        d = decompose(passes)
        want = _deviation_oracle(passes)
        got = [d.epistemic_p, d.aleatoric_p, d.epistemic_q, d.aleatoric_q]
        for g, w in zip(got, want):
            worst = max(worst, abs(g - w) / max(abs(w), 1e-300) if w else abs(g))
        exact &= d.u_p == d.epistemic_p + d.aleatoric_p and d.u_q == d.epistemic_q + d.aleatoric_q
    assert worst < 1e-9 and exact


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.floats(-100, 100), st.integers(0, 2**32 - 1))
def test_epistemic_translation_invariant(T, shift, seed):
    passes = _random_passes(np.random.default_rng(seed), T)
    moved = [StochasticPass(ps.p_hat + shift, ps.q_hat - shift, ps.sigma2_p, ps.sigma2_q) for ps in passes]
    a, b = decompose(passes), decompose(moved)
    assert b.epistemic_p == pytest.approx(a.epistemic_p, rel=1e-6, abs=1e-9)
    assert b.aleatoric_p == a.aleatoric_p
    assert a.epistemic_p >= 0 and a.epistemic_q >= 0


def test_invalid_passes():
    with pytest.raises(EmptySampleError):
        decompose([])
    with pytest.raises(DomainError):
        StochasticPass(np.zeros(2), np.zeros(2), 0.0, 1.0)
    with pytest.raises(DomainError):
        StochasticPass(np.zeros(2), np.zeros(2), 1.0, math.inf)


def _sample(cfg, seed):
    image, scan, _, _ = random_batch(cfg, 1, seed)
    return SampleTuple(image[0], scan[0], Pose2D(0.0, 0.0, 1.0, 0.0), "s", 0)


def test_zero_dropout_degeneracy():
    cfg = small_config()
    worst = 0.0
    for seed in range(5):
        params = random_params(cfg, seed)
        sample = _sample(cfg, seed)
        for T in (1, 2, 7, 40, 200):
            pose, _ = mc_infer(params, sample, T, DropoutSpec(0.0), seed)
            worst = max(worst, pose.epistemic_p, pose.epistemic_q)
    assert worst <= 1e-12


def test_mc_infer_consistent_with_passes():
    cfg = small_config()
    params = random_params(cfg, 2)
    sample = _sample(cfg, 2)
    pose, passes = mc_infer(params, sample, 30, DropoutSpec(0.3), 5)
    again = aggregate(passes)
    assert pose.u_p == again.u_p and pose.u_q == again.u_q
    np.testing.assert_array_equal(pose.p_star, np.mean([ps.p_hat for ps in passes], axis=0))
    assert np.linalg.norm(pose.q_star) == pytest.approx(1.0, abs=1e-12)
    assert pose.T == 30 and pose.epistemic_p > 0


def test_mc_infer_seed_determinism():
    cfg = small_config()
    params = random_params(cfg, 3)
    sample = _sample(cfg, 3)
    a, _ = mc_infer(params, sample, 20, DropoutSpec(0.2), 9)
    b, _ = mc_infer(params, sample, 20, DropoutSpec(0.2), 9)
    c, _ = mc_infer(params, sample, 20, DropoutSpec(0.2), 10)
    assert a.as_dict() == b.as_dict()
    assert a.as_dict() != c.as_dict()


def test_pass_t_uses_its_own_mask():
    cfg = small_config()
    params = random_params(cfg, 4)
    sample = _sample(cfg, 4)
    from uncertloc.mcdropout import pass_masks
    masks = pass_masks(6, 5, cfg.fusion_dim, 0.25)
    _, passes = mc_infer(params, sample, 5, DropoutSpec(0.25), 6)
    for t in range(5):
        raw = forward(params, sample.image_feat, sample.scan, masks[t])
        np.testing.assert_allclose(passes[t].p_hat, raw.p_hat, atol=1e-13)
        assert passes[t].sigma2_q == pytest.approx(math.exp(raw.s_q), rel=1e-13)


def test_many_uses_independent_substreams():
    cfg = small_config()
    params = random_params(cfg, 5)
    samples = [_sample(cfg, 50), _sample(cfg, 50)]
    res = mc_infer_many(params, samples, 10, DropoutSpec(0.3), 1)
    assert res[0][0].u_p != res[1][0].u_p
    one, _ = mc_infer(params, samples[1], 10, DropoutSpec(0.3), sample_seeds(1, 2)[1])
    assert one.as_dict() == res[1][0].as_dict()


def test_rejects_nonpositive_T():
    cfg = small_config()
    with pytest.raises(ConfigurationError):
        mc_infer(random_params(cfg, 0), _sample(cfg, 0), 0)


def test_pass_log_roundtrip():
    rng = np.random.default_rng(7)
    buf = io.StringIO()
    logged = {"a:00001": _random_passes(rng, 3), "a:00000": _random_passes(rng, 4)}
    for sid, passes in logged.items():
        write_pass_log(buf, sid, passes)
    back = read_pass_log(io.StringIO(buf.getvalue()))
    assert set(back) == set(logged)
    for sid, passes in logged.items():
        assert aggregate(back[sid]).as_dict() == aggregate(passes).as_dict()


@pytest.mark.parametrize("c", [0.1, 1 / 3, 2.2, 1e-3])
def test_constant_passes(c):
    ps = StochasticPass(np.array([0.3, 1.7]), np.array([0.6, -0.8]), c, c)
    for T in (1, 3, 7, 40, 1000):
        d = decompose([ps] * T)
        assert d.aleatoric_p == c and d.aleatoric_q == c
        assert d.epistemic_p == 0.0 and d.epistemic_q == 0.0


def test_single_pass_pose():
    ps = StochasticPass(np.array([0.3, -1.2]), np.array([0.0, 2.0]), 0.2, 0.4)
    pose = aggregate([ps])
    np.testing.assert_array_equal(pose.p_star, ps.p_hat)
    np.testing.assert_array_equal(pose.q_star, [0.0, 1.0])
    assert pose.u_p == 0.2


def test_translation_shifts_p_star():
    passes = _random_passes(np.random.default_rng(11), 25)
    shift = np.array([3.5, -2.0])
    moved = [StochasticPass(ps.p_hat + shift, ps.q_hat, ps.sigma2_p, ps.sigma2_q) for ps in passes]
    a, b = aggregate(passes), aggregate(moved)
    np.testing.assert_allclose(b.p_star, a.p_star + shift, atol=1e-12)
    assert abs(b.epistemic_p - a.epistemic_p) <= 1e-9 * a.epistemic_p
