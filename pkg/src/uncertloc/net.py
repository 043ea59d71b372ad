"""Two-modality pose regressor with attention fusion, trained on a heteroscedastic loss.

Architecture, per sample::

    image_feat --tanh MLP--> h_img ─┐
                                    ├─ 2 tokens ─ multi-head self-attention ─ flatten ─ dropout ─┬─ p_hat (2)
    scan_feat  --tanh MLP--> h_scan ┘                                                          ├─ s_p   (1)
                                                                                               ├─ q_hat (2)
                                                                                               └─ s_q   (1)

All heads are linear. ``s_p``/``s_q`` are log-variances. Gradients are
derived by hand; :func:`loss_and_grad` is the single reverse pass used by
training and by the gradient checks in the test suite.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import RawPoseOutput
from .errors import ConfigurationError, TrainingDivergedError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "uncertloc-checkpoint"
CHECKPOINT_VERSION = 1
S_HEAD_INIT_SCALE = 0.01


@dataclass(frozen=True)
class ModelConfig:
    image_dim: int = 16
    scan_dim: int = 32
    hidden_dim: int = 32
    num_heads: int = 2
    encoder_depth: int = 2
    # multiplies raw scan ranges before the scan encoder
    scan_scale: float = 1.0

    def __post_init__(self):
        for name in ("image_dim", "scan_dim", "hidden_dim", "num_heads", "encoder_depth"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ConfigurationError(
                f"hidden_dim={self.hidden_dim} is not divisible by num_heads={self.num_heads}"
            )
        if not (math.isfinite(self.scan_scale) and self.scan_scale > 0):
            raise ConfigurationError("scan_scale must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def fusion_dim(self) -> int:
        return 2 * self.hidden_dim

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        H = self.hidden_dim
        for branch, in_dim in (("img", self.image_dim), ("scan", self.scan_dim)):
            for layer in range(self.encoder_depth):
                fan_in = in_dim if layer == 0 else H
                shapes[f"{branch}_W{layer}"] = (fan_in, H)
                shapes[f"{branch}_b{layer}"] = (H,)
        for name in ("attn_Wq", "attn_Wk", "attn_Wv"):
            shapes[name] = (self.num_heads, H, self.head_dim)
        shapes["attn_Wo"] = (H, H)
        shapes["attn_bo"] = (H,)
        F = self.fusion_dim
        for head, width in HEADS:
            shapes[f"head_{head}_W"] = (F, width)
            shapes[f"head_{head}_b"] = (width,)
        return shapes


HEADS = (("p", 2), ("sp", 1), ("q", 2), ("sq", 1))


@dataclass(frozen=True)
class DropoutSpec:
    """Dropout on the flattened attention output. Kept units are scaled by 1/(1-rate)."""

    rate: float = 0.2

    def __post_init__(self):
        if not (0.0 <= self.rate < 1.0):
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 300
    batch_size: int = 32
    seed: int = 0
    dropout: DropoutSpec = field(default_factory=DropoutSpec)
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ConfigurationError("learning_rate must be finite and >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["dropout"] = self.dropout.rate
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        rate = d.pop("dropout", DropoutSpec().rate)
        if isinstance(rate, dict):
            rate = rate["rate"]
        return cls(dropout=DropoutSpec(float(rate)), **d)


class ModelParams:
    """Named float64 tensors plus the config that fixes their shapes."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        self.validate()

    def validate(self):
        expected = self.config.param_shapes()
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ConfigurationError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ConfigurationError(
                    f"{name} has shape {self.tensors[name].shape}, config expects {shape}"
                )

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.config.param_shapes())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def first_nonfinite(self) -> str | None:
        for name in self.names():
            if not np.all(np.isfinite(self.tensors[name])):
                return name
        return None

    def equals(self, other: "ModelParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.names()
        )


def init_params(config: ModelConfig, rng: np.random.Generator, position_mean=(0.0, 0.0)) -> ModelParams:
    """Scaled-normal initialisation.

    The position head bias starts at ``position_mean`` so the network does not
    spend its first epochs walking the offset in. Log-variance heads start with
    tiny weights and zero bias, i.e. unit variance.
    """
    t: dict[str, np.ndarray] = {}
    for name, shape in config.param_shapes().items():
        if name.split("_")[-1].startswith("b"):
            t[name] = np.zeros(shape)
        elif name.startswith("head_s"):
            t[name] = S_HEAD_INIT_SCALE * rng.standard_normal(shape)
        else:
            fan_in = shape[-2]
            t[name] = rng.standard_normal(shape) / math.sqrt(fan_in)
    t["head_p_b"] = np.asarray(position_mean, dtype=np.float64).reshape(2).copy()
    return ModelParams(config, t)


def sample_dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    """Multiplicative inverted-dropout mask: 0 for dropped units, 1/(1-rate) for kept ones."""
    if not (0.0 <= rate < 1.0):
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_inputs(params: ModelParams, image, scan, mask):
    cfg = params.config
    image = np.asarray(image, dtype=np.float64)
    scan = np.asarray(scan, dtype=np.float64)
    if image.ndim != 2 or image.shape[1] != cfg.image_dim:
        raise ConfigurationError(f"image features shape {image.shape}, expected (B, {cfg.image_dim})")
    if scan.ndim != 2 or scan.shape[1] != cfg.scan_dim:
        raise ConfigurationError(f"scan features shape {scan.shape}, expected (B, {cfg.scan_dim})")
    if image.shape[0] != scan.shape[0]:
        raise ConfigurationError("image and scan batch sizes differ")
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (image.shape[0], cfg.fusion_dim):
            raise ConfigurationError(
                f"dropout mask shape {mask.shape}, expected ({image.shape[0]}, {cfg.fusion_dim})"
            )
    return image, scan, mask


def _encode(params: ModelParams, branch: str, x: np.ndarray, cache: list):
    h = x
    for layer in range(params.config.encoder_depth):
        h_in = h
        h = np.tanh(h_in @ params[f"{branch}_W{layer}"] + params[f"{branch}_b{layer}"])
        cache.append((h_in, h))
    return h


def _forward(params: ModelParams, image, scan, mask):
    cfg = params.config
    image, scan, mask = _check_inputs(params, image, scan, mask)
    B = image.shape[0]
    enc_img: list = []
    enc_scan: list = []
    h_img = _encode(params, "img", image, enc_img)
    h_scan = _encode(params, "scan", scan * cfg.scan_scale, enc_scan)

    X = np.stack([h_img, h_scan], axis=1)  # (B, 2, H)
    Q = np.einsum("bth,khd->bktd", X, params["attn_Wq"])
    K = np.einsum("bth,khd->bktd", X, params["attn_Wk"])
    V = np.einsum("bth,khd->bktd", X, params["attn_Wv"])
    scale = 1.0 / math.sqrt(cfg.head_dim)
    A = _softmax(np.einsum("bktd,bkud->bktu", Q, K) * scale)  # (B, k, 2, 2)
    O = np.einsum("bktu,bkud->bktd", A, V)
    C = O.transpose(0, 2, 1, 3).reshape(B, 2, cfg.hidden_dim)
    Y = C @ params["attn_Wo"] + params["attn_bo"]
    f = Y.reshape(B, cfg.fusion_dim)
    z = f if mask is None else f * mask

    out = {head: z @ params[f"head_{head}_W"] + params[f"head_{head}_b"] for head, _ in HEADS}
    out["sp"] = out["sp"][:, 0]
    out["sq"] = out["sq"][:, 0]
    cache = dict(enc_img=enc_img, enc_scan=enc_scan, X=X, Q=Q, K=K, V=V, A=A, C=C, z=z,
                 mask=mask, scale=scale)
    return out, cache


@dataclass
class BatchOutput:
    p_hat: np.ndarray  # (B, 2)
    s_p: np.ndarray  # (B,)
    q_hat: np.ndarray  # (B, 2)
    s_q: np.ndarray  # (B,)
    attention: np.ndarray  # (B, heads, 2, 2), rows sum to 1

    def __len__(self):
        return self.p_hat.shape[0]

    def raw(self, i: int) -> RawPoseOutput:
        return RawPoseOutput(self.p_hat[i].copy(), self.q_hat[i].copy(), float(self.s_p[i]),
                             float(self.s_q[i]))


def forward_batch(params: ModelParams, image, scan, mask=None) -> BatchOutput:
    out, cache = _forward(params, image, scan, mask)
    return BatchOutput(out["p"], out["sp"], out["q"], out["sq"], cache["A"])


def forward(params: ModelParams, image_feat, scan_feat, dropout_mask=None) -> RawPoseOutput:
    """Single-sample forward pass. ``dropout_mask`` is a multiplier vector of length fusion_dim."""
    mask = None if dropout_mask is None else np.asarray(dropout_mask, dtype=np.float64)[None, :]
    res = forward_batch(params, np.asarray(image_feat, dtype=np.float64)[None, :],
                        np.asarray(scan_feat, dtype=np.float64)[None, :], mask)
    return res.raw(0)


def heteroscedastic_loss(p_hat, s_p, q_hat, s_q, p, q) -> float:
    """(1/2N) Σ [exp(-s_p)‖p - p̂‖² + s_p] + (1/2N) Σ [exp(-s_q)‖q - q̂‖² + s_q]."""
    p_hat, q_hat, p, q = (np.asarray(a, dtype=np.float64).reshape(-1, 2) for a in (p_hat, q_hat, p, q))
    s_p = np.asarray(s_p, dtype=np.float64).reshape(-1)
    s_q = np.asarray(s_q, dtype=np.float64).reshape(-1)
    n = p.shape[0]
    if n == 0:
        raise ConfigurationError("loss over an empty batch")
    rp = np.sum((p - p_hat) ** 2, axis=1)
    rq = np.sum((q - q_hat) ** 2, axis=1)
    total = np.sum(np.exp(-s_p) * rp + s_p) + np.sum(np.exp(-s_q) * rq + s_q)
    value = float(total / (2.0 * n))
    if not math.isfinite(value):
        raise TrainingDivergedError("loss is not finite")
    return value


def loss(batch: Iterable[tuple[RawPoseOutput, object]]) -> float:
    """Loss over (raw output, Pose2D truth) pairs."""
    batch = list(batch)
    if not batch:
        raise ConfigurationError("loss over an empty batch")
    return heteroscedastic_loss(
        [o.p_hat for o, _ in batch], [o.s_p for o, _ in batch],
        [o.q_hat for o, _ in batch], [o.s_q for o, _ in batch],
        [t.position for _, t in batch], [t.q for _, t in batch],
    )


def loss_and_grad(params: ModelParams, image, scan, p, q, mask=None) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and its exact gradient w.r.t. every parameter, for fixed dropout masks."""
    cfg = params.config
    out, c = _forward(params, image, scan, mask)
    p = np.asarray(p, dtype=np.float64).reshape(-1, 2)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 2)
    B = p.shape[0]
    value = heteroscedastic_loss(out["p"], out["sp"], out["q"], out["sq"], p, q)

    g: dict[str, np.ndarray] = {}
    # dL/d(outputs)
    wp = np.exp(-out["sp"])
    wq = np.exp(-out["sq"])
    d_out = {
        "p": (wp / B)[:, None] * (out["p"] - p),
        "sp": ((1.0 - wp * np.sum((p - out["p"]) ** 2, axis=1)) / (2.0 * B))[:, None],
        "q": (wq / B)[:, None] * (out["q"] - q),
        "sq": ((1.0 - wq * np.sum((q - out["q"]) ** 2, axis=1)) / (2.0 * B))[:, None],
    }
    z = c["z"]
    dz = np.zeros_like(z)
    for head, _ in HEADS:
        g[f"head_{head}_W"] = z.T @ d_out[head]
        g[f"head_{head}_b"] = d_out[head].sum(axis=0)
        dz += d_out[head] @ params[f"head_{head}_W"].T

    df = dz if c["mask"] is None else dz * c["mask"]
    dY = df.reshape(B, 2, cfg.hidden_dim)
    g["attn_Wo"] = np.einsum("bth,bti->hi", c["C"], dY)
    g["attn_bo"] = dY.sum(axis=(0, 1))
    dC = dY @ params["attn_Wo"].T
    dO = dC.reshape(B, 2, cfg.num_heads, cfg.head_dim).transpose(0, 2, 1, 3)

    A, Q, K, V, X = c["A"], c["Q"], c["K"], c["V"], c["X"]
    dA = np.einsum("bktd,bkud->bktu", dO, V)
    dV = np.einsum("bktu,bktd->bkud", A, dO)
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * c["scale"]
    dQ = np.einsum("bktu,bkud->bktd", dS, K)
    dK = np.einsum("bktu,bktd->bkud", dS, Q)
    dX = np.zeros_like(X)
    for name, dproj in (("attn_Wq", dQ), ("attn_Wk", dK), ("attn_Wv", dV)):
        g[name] = np.einsum("bth,bktd->khd", X, dproj)
        dX += np.einsum("bktd,khd->bth", dproj, params[name])

    for branch, token in (("img", 0), ("scan", 1)):
        dh = dX[:, token, :]
        for layer in reversed(range(cfg.encoder_depth)):
            h_in, h = c[f"enc_{branch}"][layer]
            da = dh * (1.0 - h * h)
            g[f"{branch}_W{layer}"] = h_in.T @ da
            g[f"{branch}_b{layer}"] = da.sum(axis=0)
            dh = da @ params[f"{branch}_W{layer}"].T
    return value, g


def backward(params: ModelParams, image, scan, p, q, mask=None) -> dict[str, np.ndarray]:
    return loss_and_grad(params, image, scan, p, q, mask)[1]


def stack_inputs(samples: Sequence) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Arrays (image, scan, position, orientation) from objects with image_feat/scan/pose."""
    if len(samples) == 0:
        raise ConfigurationError("empty sample list")
    image = np.array([s.image_feat for s in samples], dtype=np.float64)
    scan = np.array([s.scan for s in samples], dtype=np.float64)
    p = np.array([[s.pose.x, s.pose.y] for s in samples], dtype=np.float64)
    q = np.array([[s.pose.cos, s.pose.sin] for s in samples], dtype=np.float64)
    return image, scan, p, q


class _Adam:
    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]):
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for name in params.names():
            gr = grads[name]
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * gr
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * gr * gr
            update = cfg.learning_rate * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + cfg.eps)
            params.tensors[name] = params.tensors[name] - update


class _SGD:
    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.cfg = cfg

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]):
        for name in params.names():
            params.tensors[name] = params.tensors[name] - self.cfg.learning_rate * grads[name]


@dataclass
class TrainResult:
    params: ModelParams
    initial_params: ModelParams
    loss_curve: list[float]


def train_arrays(image, scan, p, q, config: TrainConfig, model_config: ModelConfig | None = None,
                 init: ModelParams | None = None) -> TrainResult:
    """Mini-batch training on pre-stacked arrays.

    Randomness comes from two streams derived from ``config.seed``: one for
    initialisation, one for shuffling and dropout masks. Each sample gets a
    fresh mask at every step.
    """
    image = np.asarray(image, dtype=np.float64)
    scan = np.asarray(scan, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n = image.shape[0]
    if n == 0:
        raise ConfigurationError("empty training set")
    if config.batch_size > n:
        raise ConfigurationError(f"batch_size={config.batch_size} exceeds dataset size {n}")
    if init is None:
        if model_config is None:
            model_config = ModelConfig(image_dim=image.shape[1], scan_dim=scan.shape[1])
        init = init_params(model_config, np.random.default_rng([config.seed, 0]),
                           position_mean=p.mean(axis=0))
    params = init.copy()
    rng = np.random.default_rng([config.seed, 1])
    opt = _Adam(params, config) if config.optimizer == "adam" else _SGD(params, config)

    curve: list[float] = []
    step = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            step = _run_epoch(params, opt, rng, (image, scan, p, q), config, epoch, step, curve)
    return TrainResult(params, init, curve)


def _run_epoch(params: ModelParams, opt, rng: np.random.Generator, arrays, config: TrainConfig,
               epoch: int, step: int, curve: list[float]) -> int:
    image, scan, p, q = arrays
    n = image.shape[0]
    order = rng.permutation(n)
    total = 0.0
    for start in range(0, n, config.batch_size):
        idx = order[start:start + config.batch_size]
        mask = sample_dropout_mask(rng, (idx.size, params.config.fusion_dim), config.dropout.rate)
        try:
            value, grads = loss_and_grad(params, image[idx], scan[idx], p[idx], q[idx], mask)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"step {step} (epoch {epoch}): loss is not finite",
                                        step=step, tensor="loss") from exc
        for name in params.names():
            if not np.all(np.isfinite(grads[name])):
                raise TrainingDivergedError(f"step {step}: non-finite gradient for {name}",
                                            step=step, tensor=name)
        opt.step(params, grads)
        bad = params.first_nonfinite()
        if bad is not None:
            raise TrainingDivergedError(f"step {step}: parameter {bad} became non-finite",
                                        step=step, tensor=bad)
        total += value * idx.size
        step += 1
    curve.append(total / n)
    log.debug("epoch %d mean loss %.6f", epoch, curve[-1])
    return step


def train(dataset: Sequence, config: TrainConfig, model_config: ModelConfig | None = None,
          init: ModelParams | None = None) -> TrainResult:
    image, scan, p, q = stack_inputs(dataset)
    return train_arrays(image, scan, p, q, config, model_config, init)


def save_checkpoint(path, params: ModelParams, train_config: TrainConfig | None = None,
                    extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(params.config),
        "train_config": None if train_config is None else train_config.as_dict(),
        "extra": extra or {},
        "params": {
            name: {"shape": list(params[name].shape), "data": params[name].ravel().tolist()}
            for name in params.names()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Read a checkpoint; shapes are validated against the stored model config."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {doc.get('version')}")
    try:
        config = ModelConfig(**doc["model_config"])
        entries = doc["params"]
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"{path}: malformed checkpoint ({exc})") from exc
    tensors = {}
    for name, entry in entries.items():
        data = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if data.size != math.prod(shape):
            raise ConfigurationError(f"{name}: {data.size} values do not fill shape {shape}")
        tensors[name] = data.reshape(shape)
    return ModelParams(config, tensors), doc


def write_loss_curve(path, curve: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(curve):
            w.writerow([i + 1, repr(float(v))])
