"""Pre-norm decoder-only transformer with rotary attention.

Forward passes take an explicit position vector (one per sequence, or one
shared by the batch) so the same weights can be run on contiguous,
interpolated or skipped positions.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tt
from .tensor import Tensor

DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    vocab_size: int
    context_window: int
    rope_base: float = 10000.0
    ffn_mult: float = 2.0
    pi_scale: float = 1.0
    dtype: str = "float64"
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "vocab_size", "context_window"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be a multiple of n_heads")
        if self.head_dim % 2:
            raise ValueError("per-head dimension must be even for rotary embedding")
        if not self.rope_base > 1:
            raise ValueError("rope_base must exceed 1")
        if self.pi_scale < 1:
            raise ValueError("pi_scale must be >= 1")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_dim(self) -> int:
        return int(round(self.ffn_mult * self.d_model))

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class PositionPlan:
    """Strictly increasing integer positions for one input sequence.

    ``segments`` holds (head, mid, tail) lengths for skipped plans and
    ``meta`` carries sampler diagnostics (end of the mid segment, alpha,
    whether a fallback range was used).
    """

    indices: np.ndarray
    max_position: int
    segments: tuple[int, int, int] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("position plan must be a non-empty 1-d sequence")
        if idx.dtype.kind not in "iu":
            if not np.all(idx == np.round(idx)):
                raise ValueError("position plan indices must be integers")
            idx = idx.astype(np.int64)
        self.indices = idx.astype(np.int64)
        if np.any(np.diff(self.indices) <= 0):
            raise ValueError("position plan must be strictly increasing")
        if self.indices[0] < 0 or self.indices[-1] > self.max_position:
            raise ValueError("position plan index outside [0, max_position]")
        if self.segments is not None and sum(self.segments) != len(self.indices):
            raise ValueError("segment sizes do not cover the plan")

    def __len__(self) -> int:
        return len(self.indices)

    @classmethod
    def contiguous(cls, length: int, max_position: int | None = None) -> "PositionPlan":
        return cls(np.arange(length), length - 1 if max_position is None else max_position)


@dataclass
class LayerTrace:
    """Per-layer residual-stream outputs and per-head attention weights.

    ``hidden[l]`` has shape [B, T, d_model]; ``hidden[0]`` is the embedding
    output. ``attention[l-1]`` has shape [B, N, T, T] for layer l.
    """

    hidden: list = field(default_factory=list)
    attention: list = field(default_factory=list)

    def hidden_of(self, sample: int, layer: int) -> np.ndarray:
        return _data(self.hidden[layer])[sample]

    def attention_of(self, sample: int, layer: int, head: int) -> np.ndarray:
        """Attention matrix of ``head`` at transformer layer ``layer`` (1-based)."""
        return _data(self.attention[layer - 1])[sample, head]


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def rope_tables(positions, head_dim: int, base: float, pi_scale: float = 1.0, dtype=np.float64):
    """cos/sin tables of shape positions.shape + (head_dim/2,).

    Subspace i at (effective) position p turns by p * base**(-2i/d).
    """
    if head_dim % 2:
        raise ValueError("rotary embedding needs an even head dimension")
    pos = np.asarray(positions, dtype=np.float64) / pi_scale
    inv_freq = 1.0 / base ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = pos[..., None] * inv_freq
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def apply_rope(q, k, plan, theta: float, pi_scale: float = 1.0):
    """Rotate query/key rows [T, d] by the plan's positions.

    Accepts Tensors or arrays; returns the same kind.
    """
    positions = plan.indices if isinstance(plan, PositionPlan) else np.asarray(plan)
    qt = q if isinstance(q, Tensor) else Tensor(q)
    kt = k if isinstance(k, Tensor) else Tensor(k)
    if qt.shape[-2] != len(positions) or kt.shape[-2] != len(positions):
        raise ValueError("plan length does not match sequence length")
    cos, sin = rope_tables(positions, qt.shape[-1], theta, pi_scale, qt.dtype)
    qr, kr = tt.rope_rotate(qt, cos, sin), tt.rope_rotate(kt, cos, sin)
    if isinstance(q, Tensor):
        return qr, kr
    return qr.data, kr.data


class DecoderModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.frozen = False
        if params is None:
            params = init_params(config, np.random.default_rng(0))
        self.params = params
        check_param_shapes(config, params)

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> "DecoderModel":
        return cls(config, init_params(config, rng, std))

    # -- parameter management ----------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterable[tuple[str, Tensor]]:
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def freeze(self) -> "DecoderModel":
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def copy(self) -> "DecoderModel":
        params = {k: Tensor(v.data.copy(), requires_grad=not self.frozen) for k, v in self.params.items()}
        m = DecoderModel(self.config, params)
        m.frozen = self.frozen
        return m

    def with_config(self, config: ModelConfig) -> "DecoderModel":
        """Same weights (shared, not copied) under a new positional configuration."""
        m = copy.copy(self)
        m.config = config
        check_param_shapes(config, self.params)
        return m

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward ------------------------------------------------------------
    def __call__(self, tokens, positions=None, capture_hidden=False, capture_attention=False):
        return forward_trace(self, tokens, positions, capture_hidden, capture_attention)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F, V = cfg.d_model, cfg.ffn_dim, cfg.vocab_size
    shapes = {"embed": (V, D)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update(
            {
                p + "attn_norm": (D,),
                p + "wq": (D, D),
                p + "wk": (D, D),
                p + "wv": (D, D),
                p + "wo": (D, D),
                p + "ffn_norm": (D,),
                p + "w_gate": (D, F),
                p + "w_up": (D, F),
                p + "w_down": (F, D),
            }
        )
    shapes["final_norm"] = (D,)
    shapes["head"] = (D, V)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> dict[str, Tensor]:
    dt = cfg.np_dtype
    out_std = std / np.sqrt(2 * cfg.n_layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm"):
            arr = np.ones(shape)
        elif name.endswith(("wo", "w_down")):
            arr = rng.normal(0.0, out_std, shape)
        else:
            arr = rng.normal(0.0, std, shape)
        params[name] = Tensor(arr.astype(dt), requires_grad=True)
    return params


def check_param_shapes(cfg: ModelConfig, params: dict[str, Tensor]) -> None:
    want = param_shapes(cfg)
    if set(want) != set(params):
        missing = sorted(set(want) - set(params))
        extra = sorted(set(params) - set(want))
        raise ValueError(f"parameter names mismatch: missing={missing} extra={extra}")
    for k, shape in want.items():
        if params[k].shape != shape:
            raise ValueError(f"{k}: shape {params[k].shape} != {shape}")


def _positions_array(positions, batch: int, length: int) -> np.ndarray:
    if positions is None:
        return np.arange(length)
    if isinstance(positions, PositionPlan):
        pos = positions.indices
    elif isinstance(positions, (list, tuple)) and positions and isinstance(positions[0], PositionPlan):
        pos = np.stack([p.indices for p in positions])
    else:
        pos = np.asarray(positions)
    if pos.shape[-1] != length:
        raise ValueError(f"plan length {pos.shape[-1]} does not match token count {length}")
    if pos.ndim == 2 and pos.shape[0] != batch:
        raise ValueError("per-sequence plans must match the batch size")
    return pos


_MASKS: dict[int, np.ndarray] = {}


def causal_mask(length: int) -> np.ndarray:
    m = _MASKS.get(length)
    if m is None:
        m = np.tril(np.ones((length, length), dtype=bool))
        _MASKS[length] = m
    return m


def forward_trace(
    model: DecoderModel,
    tokens,
    positions=None,
    capture_hidden: bool = False,
    capture_attention: bool = False,
) -> tuple[Tensor, LayerTrace]:
    """Run the decoder; returns logits [B, T, V] (or [T, V] for 1-d input) and a trace.

    ``positions`` may be None (0..T-1), a PositionPlan or index array shared
    by the batch, or a list/array of per-sequence plans.
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    if tokens.dtype.kind not in "iu":
        raise TypeError("tokens must be integer ids")
    B, T = tokens.shape
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise IndexError(f"token id outside [0, {cfg.vocab_size})")
    if T > cfg.context_window:
        raise ValueError(f"{T} tokens exceed the context window {cfg.context_window}")
    pos = _positions_array(positions, B, T)

    N, d, D = cfg.n_heads, cfg.head_dim, cfg.d_model
    p = model.params
    cos, sin = rope_tables(pos, d, cfg.rope_base, cfg.pi_scale, cfg.np_dtype)
    if cos.ndim == 2:  # shared plan: [T, d/2] -> broadcast over batch and heads
        cos, sin = cos[None, None], sin[None, None]
    else:  # per-sequence plans: [B, T, d/2] -> [B, 1, T, d/2]
        cos, sin = cos[:, None], sin[:, None]
    mask = causal_mask(T)
    scale = 1.0 / np.sqrt(d)

    trace = LayerTrace()
    h = tt.embedding(p["embed"], tokens)
    if capture_hidden:
        trace.hidden.append(h)
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        x = tt.rms_norm(h, p[pre + "attn_norm"], cfg.norm_eps)
        q = (x @ p[pre + "wq"]).reshape(B, T, N, d).transpose(0, 2, 1, 3)
        k = (x @ p[pre + "wk"]).reshape(B, T, N, d).transpose(0, 2, 1, 3)
        v = (x @ p[pre + "wv"]).reshape(B, T, N, d).transpose(0, 2, 1, 3)
        q = tt.rope_rotate(q, cos, sin)
        k = tt.rope_rotate(k, cos, sin)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        attn = tt.softmax_rows(scores, mask)
        if capture_attention:
            trace.attention.append(attn.data)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        h = h + ctx @ p[pre + "wo"]
        x = tt.rms_norm(h, p[pre + "ffn_norm"], cfg.norm_eps)
        gate = tt.silu(x @ p[pre + "w_gate"])
        h = h + (gate * (x @ p[pre + "w_up"])) @ p[pre + "w_down"]
        if capture_hidden:
            trace.hidden.append(h)
    logits = tt.rms_norm(h, p["final_norm"], cfg.norm_eps) @ p["head"]
    if squeeze:
        logits = logits.reshape(T, cfg.vocab_size)
    return logits, trace
