"""Rotary-embedding scaling (base change, index interpolation) and the
partial-sum bound on attention-score change under a base swap."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ModelConfig


@dataclass(frozen=True)
class ExtensionSpec:
    kind: str  # "abf" or "pi"
    target_window: int
    new_base: float | None = None
    scale: float | None = None

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind == "abf":
            if self.new_base is None or self.scale is not None:
                raise ValueError("ABF extension takes new_base only")
        elif kind == "pi":
            if self.scale is None or self.new_base is not None:
                raise ValueError("PI extension takes scale only")
        else:
            raise ValueError(f"unknown extension kind {self.kind!r}")

    def apply(self, config: ModelConfig) -> ModelConfig:
        if self.kind == "abf":
            return extend_abf(config, self.new_base, self.target_window)
        return extend_pi(config, self.scale, self.target_window)


def extend_abf(config: ModelConfig, new_base: float, target_window: int) -> ModelConfig:
    """Swap the rotary base and enlarge the window; weights are untouched."""
    if not new_base > 1:
        raise ValueError("new_base must exceed 1")
    if target_window <= config.context_window:
        raise ValueError(
            f"target window {target_window} must exceed current window {config.context_window}"
        )
    return config.replace(rope_base=float(new_base), context_window=int(target_window))


def extend_pi(config: ModelConfig, scale: float, target_window: int) -> ModelConfig:
    """Divide positions by ``scale`` before rotation and enlarge the window."""
    if scale < 1:
        raise ValueError("interpolation scale must be >= 1")
    if target_window <= config.context_window:
        raise ValueError(
            f"target window {target_window} must exceed current window {config.context_window}"
        )
    if target_window > scale * config.context_window:
        raise ValueError("target window exceeds scale * current window")
    return config.replace(pi_scale=config.pi_scale * float(scale), context_window=int(target_window))


@dataclass(frozen=True)
class BoundConfig:
    base: float
    dim: int
    max_len: int

    def __post_init__(self):
        if self.dim % 2 or self.dim < 2:
            raise ValueError("dim must be a positive even number")
        if self.max_len < 0:
            raise ValueError("max_len must be >= 0")
        if not self.base > 1:
            raise ValueError("base must exceed 1")

    def thetas(self) -> np.ndarray:
        k = np.arange(self.dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * k / self.dim)


def partial_sum_magnitudes(cfg: BoundConfig, t) -> np.ndarray:
    """|S_j| for j = 1..d/2 where S_j = sum_{k<j} exp(i t theta_k).

    ``t`` may be a scalar (returns shape [d/2]) or an array of relative
    distances (returns shape t.shape + (d/2,)).
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > cfg.max_len):
        raise ValueError("relative distance outside [0, max_len]")
    phase = t_arr[..., None] * cfg.thetas()
    s = np.cumsum(np.cos(phase), axis=-1) + 1j * np.cumsum(np.sin(phase), axis=-1)
    return np.abs(s)


def rope_bound(cfg: BoundConfig) -> float:
    """Sum over t in [0, T] of (T - t) * sum_j |S_{j}| at distance t."""
    T = cfg.max_len
    if T == 0:
        return 0.0
    t = np.arange(T + 1, dtype=np.float64)
    mags = partial_sum_magnitudes(cfg, t).sum(axis=-1)
    return float(np.sum((T - t) * mags))


def bound_table(bases: Sequence[float], dim: int, max_len: int) -> list[tuple[float, float]]:
    return [(float(b), rope_bound(BoundConfig(b, dim, max_len))) for b in bases]
