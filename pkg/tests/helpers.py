"""Shared builders for the test suite."""

import numpy as np

from longred.model import DecoderModel, ModelConfig, init_params
from longred.tensor import Tensor


def tiny_config(L=2, N=2, d=8, V=16, T=8, **kw) -> ModelConfig:
    return ModelConfig(n_layers=L, n_heads=N, d_model=d, vocab_size=V, context_window=T, **kw)


def checkable_model(seed=0, L=2, N=2, d=8, V=16, T=8, **kw) -> DecoderModel:
    """Float64 model with weights large enough that finite differences at
    eps=1e-3 resolve every gradient component (a 0.02-std embedding puts
    RMSNorm in its strongly curved regime). Matrices use std 0.6/sqrt(d)
    so curvature, and with it the O(eps^2) truncation, stays flat in d."""
    cfg = tiny_config(L, N, d, V, T, **kw)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng, std=0.6 / np.sqrt(d))
    params["embed"] = Tensor(rng.normal(0.0, 1.0, params["embed"].shape), requires_grad=True)
    for name, p in params.items():
        if name.endswith("norm"):
            p.data = 1.0 + 0.1 * rng.normal(size=p.shape)
    return DecoderModel(cfg, params)


def perturbed_copy(model: DecoderModel, scale: float, seed: int) -> DecoderModel:
    rng = np.random.default_rng(seed)
    other = model.copy()
    for p in other.params.values():
        p.data = p.data + scale * rng.normal(size=p.shape)
    return other


def random_tokens(rng, B, T, V):
    return rng.integers(0, V, size=(B, T))
