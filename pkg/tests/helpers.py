"""Shared fixtures-by-function for the test modules."""

import numpy as np

from uncertloc.net import ModelConfig, init_params


def small_config(**kw) -> ModelConfig:
    base = dict(image_dim=4, scan_dim=4, hidden_dim=8, num_heads=2, encoder_depth=2)
    base.update(kw)
    return ModelConfig(**base)


def random_params(cfg: ModelConfig, seed: int, scale: float = 1.0):
    """Parameters with every tensor (biases included) drawn at random."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    for name in params.names():
        # log-variance heads stay moderate so exp(-s) does not swamp the loss
        k = 0.3 if name.startswith("head_s") else scale
        params.tensors[name] = k * rng.standard_normal(params[name].shape) / np.sqrt(params[name].shape[-1])
    return params


def random_batch(cfg: ModelConfig, n: int, seed: int):
    rng = np.random.default_rng(seed)
    image = rng.standard_normal((n, cfg.image_dim))
    scan = rng.uniform(0.5, 3.0, (n, cfg.scan_dim))
    p = rng.uniform(-2, 2, (n, 2))
    th = rng.uniform(-np.pi, np.pi, n)
    q = np.stack([np.cos(th), np.sin(th)], axis=1)
    return image, scan, p, q
