"""Monte-Carlo dropout inference and the epistemic/aleatoric split.

For T stochastic passes ``(ŷ_t, σ̂²_t)``::

    epistemic = Σ_dims [ mean_t(ŷ_t²) - mean_t(ŷ_t)² ]
    aleatoric = mean_t(σ̂²_t)
    u         = epistemic + aleatoric

The vector-valued outputs are reduced to one scalar per quantity by summing
the per-dimension population variances. ``q_star`` is the normalized mean of
the raw orientation outputs. ``u_q`` uses the raw outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import normalize_orientation
from .errors import ConfigurationError, DomainError, EmptySampleError
from .net import DropoutSpec, ModelParams, forward_batch, sample_dropout_mask

DEFAULT_T = 40


@dataclass(frozen=True)
class StochasticPass:
    p_hat: np.ndarray
    q_hat: np.ndarray
    sigma2_p: float
    sigma2_q: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma2_p) and self.sigma2_p > 0
                and np.isfinite(self.sigma2_q) and self.sigma2_q > 0):
            raise DomainError(f"pass variances must be positive and finite: {self.sigma2_p}, {self.sigma2_q}")


@dataclass(frozen=True)
class Decomposition:
    epistemic_p: float
    aleatoric_p: float
    epistemic_q: float
    aleatoric_q: float

    @property
    def u_p(self) -> float:
        return self.epistemic_p + self.aleatoric_p

    @property
    def u_q(self) -> float:
        return self.epistemic_q + self.aleatoric_q


@dataclass(frozen=True)
class UncertainPose:
    p_star: np.ndarray
    q_star: np.ndarray
    u_p: float
    u_q: float
    epistemic_p: float
    aleatoric_p: float
    epistemic_q: float
    aleatoric_q: float
    T: int

    def as_dict(self) -> dict:
        return {
            "p_star": [float(v) for v in self.p_star],
            "q_star": [float(v) for v in self.q_star],
            "u_p": self.u_p, "u_q": self.u_q,
            "epistemic_p": self.epistemic_p, "aleatoric_p": self.aleatoric_p,
            "epistemic_q": self.epistemic_q, "aleatoric_q": self.aleatoric_q,
            "T": self.T,
        }


def _spread(y: np.ndarray) -> float:
    # population variance per dimension, summed; the deviation form equals
    # mean(y²) - mean(y)² without its cancellation error
    z = y - y[0]
    dev = z - np.mean(z, axis=0)
    return float(np.sum(np.mean(dev * dev, axis=0)))


def _mean(x: np.ndarray) -> float:
    # shifted by the first value so a constant list averages to itself exactly
    return float(x[0] + np.mean(x - x[0]))


def decompose_arrays(p_hat, q_hat, sigma2_p, sigma2_q) -> Decomposition:
    """Same as :func:`decompose`, on stacked arrays of shape (T, 2) and (T,)."""
    p_hat = np.asarray(p_hat, dtype=np.float64).reshape(-1, 2)
    q_hat = np.asarray(q_hat, dtype=np.float64).reshape(-1, 2)
    sigma2_p = np.asarray(sigma2_p, dtype=np.float64).reshape(-1)
    sigma2_q = np.asarray(sigma2_q, dtype=np.float64).reshape(-1)
    if p_hat.shape[0] == 0:
        raise EmptySampleError("no passes to decompose")
    if not (q_hat.shape[0] == sigma2_p.size == sigma2_q.size == p_hat.shape[0]):
        raise ConfigurationError("pass arrays have inconsistent lengths")
    return Decomposition(_spread(p_hat), _mean(sigma2_p), _spread(q_hat), _mean(sigma2_q))


def decompose(passes: Sequence[StochasticPass]) -> Decomposition:
    if len(passes) == 0:
        raise EmptySampleError("no passes to decompose")
    return decompose_arrays(
        [ps.p_hat for ps in passes], [ps.q_hat for ps in passes],
        [ps.sigma2_p for ps in passes], [ps.sigma2_q for ps in passes],
    )


def aggregate(passes: Sequence[StochasticPass]) -> UncertainPose:
    """Mean pose and decomposed uncertainty from recorded passes, reduced in list order."""
    if len(passes) == 0:
        raise EmptySampleError("no passes to aggregate")
    p = np.array([ps.p_hat for ps in passes], dtype=np.float64)
    q = np.array([ps.q_hat for ps in passes], dtype=np.float64)
    d = decompose(passes)
    return UncertainPose(
        p_star=p.mean(axis=0),
        q_star=normalize_orientation(q.mean(axis=0)),
        u_p=d.u_p, u_q=d.u_q,
        epistemic_p=d.epistemic_p, aleatoric_p=d.aleatoric_p,
        epistemic_q=d.epistemic_q, aleatoric_q=d.aleatoric_q,
        T=len(passes),
    )


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def pass_masks(seed, T: int, width: int, rate: float) -> np.ndarray:
    """(T, width) dropout multipliers; row t is pass t's mask."""
    return sample_dropout_mask(_rng(seed), (T, width), rate)


def mc_infer(params: ModelParams, sample, T: int = DEFAULT_T, dropout: DropoutSpec = DropoutSpec(),
             seed=0) -> tuple[UncertainPose, list[StochasticPass]]:
    """T dropout passes on one sample, aggregated in pass order."""
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    masks = pass_masks(seed, T, params.config.fusion_dim, dropout.rate)
    image = np.repeat(np.asarray(sample.image_feat, dtype=np.float64)[None, :], T, axis=0)
    scan = np.repeat(np.asarray(sample.scan, dtype=np.float64)[None, :], T, axis=0)
    out = forward_batch(params, image, scan, masks)
    passes = [
        StochasticPass(out.p_hat[t].copy(), out.q_hat[t].copy(),
                       float(np.exp(out.s_p[t])), float(np.exp(out.s_q[t])))
        for t in range(T)
    ]
    return aggregate(passes), passes


def sample_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    """Independent per-sample substreams, in sample order."""
    return np.random.SeedSequence(seed).spawn(n)


def mc_infer_many(params: ModelParams, samples: Sequence, T: int = DEFAULT_T,
                  dropout: DropoutSpec = DropoutSpec(), seed: int = 0):
    """:func:`mc_infer` over many samples. Sample i uses substream i of ``seed``."""
    return [mc_infer(params, s, T, dropout, ss) for s, ss in zip(samples, sample_seeds(seed, len(samples)))]


def write_pass_log(fh, sample_id: str, passes: Iterable[StochasticPass]) -> None:
    for t, ps in enumerate(passes):
        fh.write(json.dumps({
            "sample_id": sample_id, "t": t,
            "p_hat": [float(v) for v in ps.p_hat], "q_hat": [float(v) for v in ps.q_hat],
            "sigma2_p": ps.sigma2_p, "sigma2_q": ps.sigma2_q,
        }) + "\n")


def read_pass_log(lines: Iterable[str]) -> dict[str, list[StochasticPass]]:
    """Group a JSONL pass log by sample id, ordered by pass index."""
    grouped: dict[str, list[tuple[int, StochasticPass]]] = {}
    for line in lines:
        if not line.strip():
            continue
        r = json.loads(line)
        ps = StochasticPass(np.asarray(r["p_hat"], dtype=np.float64), np.asarray(r["q_hat"], dtype=np.float64),
                            float(r["sigma2_p"]), float(r["sigma2_q"]))
        grouped.setdefault(r["sample_id"], []).append((int(r["t"]), ps))
    return {k: [ps for _, ps in sorted(v, key=lambda e: e[0])] for k, v in grouped.items()}
