"""Skipped positional indices for short inputs that mimic long-range positions.

A length-T input is split into head / mid / tail. The head keeps positions
0..T_b-1, the tail is moved to the end of the long window (T_l-T_b..T_l-1)
and the mid segment becomes a contiguous run ending at a sampled position
T_me. Two samplers pick T_me: plain uniform, and a CREAM-style sampler that
first draws a scale factor alpha from a truncated Gaussian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .model import PositionPlan


@dataclass(frozen=True)
class SegmentSplit:
    T: int
    T_b: int

    @property
    def head(self) -> range:
        return range(0, self.T_b)

    @property
    def mid(self) -> range:
        return range(self.T_b, self.T - self.T_b)

    @property
    def tail(self) -> range:
        return range(self.T - self.T_b, self.T)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (self.T_b, self.T - 2 * self.T_b, self.T_b)


def split_segments(T: int, T_b: int) -> SegmentSplit:
    if T_b < 1:
        raise ValueError("T_b must be >= 1")
    if 2 * T_b >= T:
        raise ValueError(f"2*T_b ({2 * T_b}) must be smaller than T ({T})")
    return SegmentSplit(T, T_b)


@dataclass(frozen=True)
class SkipConfig:
    """``t_b`` is an int for a fixed boundary or ``"cream_random"``."""

    T: int
    T_l: int
    t_b: int | str = "cream_random"
    sampler: str = "cream"
    sigma: float = 3.0
    grid_points: int = 1000

    def __post_init__(self):
        if self.T_l <= self.T:
            raise ValueError("T_l must exceed T")
        if self.sampler not in ("uniform", "cream"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.sigma <= 0 or self.grid_points < 2:
            raise ValueError("sigma must be positive and grid_points >= 2")
        for tb in self.realizable_t_b():
            split_segments(self.T, tb)

    @property
    def extension_factor(self) -> float:
        return self.T_l / self.T

    def realizable_t_b(self) -> tuple[int, ...]:
        if isinstance(self.t_b, str):
            if self.t_b != "cream_random":
                raise ValueError(f"unknown T_b policy {self.t_b!r}")
            short = max(1, int(math.floor(4 * self.extension_factor + 0.5)))
            third = self.T // 3
            return (short, third)
        return (int(self.t_b),)

    def draw_t_b(self, rng: np.random.Generator) -> int:
        choices = self.realizable_t_b()
        if len(choices) == 1:
            return choices[0]
        return choices[int(rng.integers(len(choices)))]


def _layout(T: int, T_l: int, T_b: int, t_me: int, meta: dict) -> PositionPlan:
    mid_len = T - 2 * T_b
    mid = np.arange(t_me - mid_len + 1, t_me + 1)
    idx = np.concatenate([np.arange(T_b), mid, np.arange(T_l - T_b, T_l)])
    meta = dict(meta, t_me=int(t_me), t_b=int(T_b))
    return PositionPlan(idx, T_l - 1, (T_b, mid_len, T_b), meta)


def uniform_range(T: int, T_l: int, T_b: int) -> tuple[int, int]:
    """Inclusive range for the end of the mid segment."""
    lo, hi = T - T_b, T_l - T_b - 1
    if lo > hi:
        raise ValueError("empty sampling range for the mid segment end")
    return lo, hi


def uniform_skip(cfg: SkipConfig, rng: np.random.Generator, T_b: int | None = None) -> PositionPlan:
    T_b = cfg.draw_t_b(rng) if T_b is None else T_b
    split_segments(cfg.T, T_b)
    lo, hi = uniform_range(cfg.T, cfg.T_l, T_b)
    t_me = int(rng.integers(lo, hi, endpoint=True))
    return _layout(cfg.T, cfg.T_l, T_b, t_me, {"sampler": "uniform"})


def _cream_grid(cfg: SkipConfig) -> tuple[np.ndarray, np.ndarray]:
    k = cfg.extension_factor
    x = np.linspace(1.0, k, cfg.grid_points)
    mu = 1.0 + k
    return x, ndtr((x - mu) / cfg.sigma)


def sample_cream_alpha(cfg: SkipConfig, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from a Gaussian truncated to [1, T_l/T], rounded.

    The uniform variate is drawn between the CDF values at the grid ends so
    the piecewise-linear inversion always lands on the grid.
    """
    if cfg.extension_factor <= 1:
        raise ValueError("extension factor must exceed 1")
    x, F = _cream_grid(cfg)
    Fu = rng.uniform(F[0], F[-1])
    u = float(np.interp(Fu, F, x))
    alpha = int(math.floor(u + 0.5))
    return min(max(alpha, 1), int(math.floor(cfg.extension_factor)))


def cream_range(T: int, T_b: int, alpha: int) -> tuple[int, int]:
    """Alpha-scaled inclusive range for the end of the mid segment.

    The lower end grows with alpha, so larger scale factors push the mid
    segment toward the far end of the long window.
    """
    return T_b + alpha * (T - 2 * T_b), alpha * T - T_b - 1


def cream_skip(cfg: SkipConfig, rng: np.random.Generator, T_b: int | None = None) -> PositionPlan:
    T_b = cfg.draw_t_b(rng) if T_b is None else T_b
    split_segments(cfg.T, T_b)
    alpha = sample_cream_alpha(cfg, rng)
    lo, hi = cream_range(cfg.T, T_b, alpha)
    ulo, uhi = uniform_range(cfg.T, cfg.T_l, T_b)
    fallback = lo > hi or lo < ulo or hi > uhi
    if fallback:
        lo, hi = ulo, uhi
    t_me = int(rng.integers(lo, hi, endpoint=True))
    return _layout(cfg.T, cfg.T_l, T_b, t_me, {"sampler": "cream", "alpha": alpha, "fallback": fallback})


def sample_plan(cfg: SkipConfig, rng: np.random.Generator) -> PositionPlan:
    if cfg.sampler == "uniform":
        return uniform_skip(cfg, rng)
    return cream_skip(cfg, rng)


def sample_plans(cfg: SkipConfig, rng: np.random.Generator, count: int) -> list[PositionPlan]:
    return [sample_plan(cfg, rng) for _ in range(count)]
