"""Discrepancy measures between two models run on the same inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .model import DecoderModel, forward_trace
from .tensor import Tensor, no_grad

KL_FLOOR = 1e-12


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def hidden_similarity(H, H_hat) -> float:
    """Mean over positions of the cosine between matching rows of [T, d] states."""
    H, H_hat = _arr(H), _arr(H_hat)
    if H.shape != H_hat.shape:
        raise ValueError(f"shape mismatch {H.shape} vs {H_hat.shape}")
    return float(np.mean(tt.cosine_rows(Tensor(H), Tensor(H_hat)).data))


def _row_kl(A: np.ndarray, A_hat: np.ndarray) -> np.ndarray:
    """sum_j a log(a / max(a_hat, floor)) along the last axis; 0 log 0 = 0."""
    safe_a = np.where(A > 0, A, 1.0)
    terms = np.where(A > 0, A * (np.log(safe_a) - np.log(np.maximum(A_hat, KL_FLOOR))), 0.0)
    return terms.sum(axis=-1)


def attention_kld(A, A_hat, tol: float = 1e-4) -> float:
    """Mean over query rows of KL(A_t || A_hat_t) for causal [T, T] attention."""
    A, A_hat = _arr(A), _arr(A_hat)
    if A.shape != A_hat.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("attention_kld expects two square matrices of equal shape")
    for M in (A, A_hat):
        if np.any(np.abs(M.sum(axis=1) - 1.0) > tol):
            raise ValueError("attention rows must each sum to 1")
        if np.any(M < 0):
            raise ValueError("attention entries must be nonnegative")
    return float(np.mean(_row_kl(A, A_hat)))


@dataclass
class DriftReport:
    per_layer_sim: np.ndarray  # [L+1], entry 0 is the embedding output
    per_layer_head_kld: np.ndarray  # [L, N], row l-1 is transformer layer l
    sample_count: int
    sequence_length: int

    @property
    def per_layer_kld(self) -> np.ndarray:
        """KL averaged over heads, indexed like ``per_layer_sim`` (layer 0 has none)."""
        return np.concatenate([[0.0], self.per_layer_head_kld.mean(axis=1)])

    def mean_similarity(self) -> float:
        """Equal-weight mean over the transformer layers 1..L."""
        return float(np.mean(self.per_layer_sim[1:]))

    def mean_kld(self) -> float:
        return float(np.mean(self.per_layer_head_kld))

    def records(self) -> list[dict]:
        kld = self.per_layer_kld
        rows = []
        for layer, sim in enumerate(self.per_layer_sim):
            rec = {"layer": layer, "sim": float(sim), "kld": float(kld[layer])}
            if layer:
                rec["head_kld"] = [float(v) for v in self.per_layer_head_kld[layer - 1]]
            rows.append(rec)
        return rows


def _check_comparable(a: DecoderModel, b: DecoderModel) -> None:
    ca, cb = a.config, b.config
    for name in ("n_layers", "n_heads", "vocab_size", "d_model"):
        if getattr(ca, name) != getattr(cb, name):
            raise ValueError(f"models differ in {name}: {getattr(ca, name)} vs {getattr(cb, name)}")


def drift_report(
    teacher: DecoderModel,
    student: DecoderModel,
    batch,
    plan=None,
    chunk: int = 8,
) -> DriftReport:
    """Hidden-state similarity and attention KL between two models.

    Both models see the same tokens and the same positions. Values are
    averaged over positions, then over samples.
    """
    _check_comparable(teacher, student)
    batch = np.asarray(batch)
    if batch.ndim != 2:
        raise ValueError("batch must be [samples, length]")
    S, T = batch.shape
    L, N = teacher.config.n_layers, teacher.config.n_heads
    sims = np.zeros(L + 1)
    klds = np.zeros((L, N))
    with no_grad():
        for start in range(0, S, chunk):
            toks = batch[start : start + chunk]
            _, ta = forward_trace(teacher, toks, plan, True, True)
            _, tb = forward_trace(student, toks, plan, True, True)
            for layer in range(L + 1):
                c = tt.cosine_rows(ta.hidden[layer], tb.hidden[layer]).data  # [b, T]
                sims[layer] += c.mean(axis=1).sum()
            for layer in range(L):
                A = ta.attention[layer].astype(np.float64)
                A_hat = tb.attention[layer].astype(np.float64)
                klds[layer] += _row_kl(A, A_hat).mean(axis=2).sum(axis=0)
    return DriftReport(sims / S, klds / S, S, T)


@dataclass
class PositionalVectorSet:
    vectors: np.ndarray  # [L+1, T, d_model]
    sample_count: int


def positional_vectors(model: DecoderModel, batch, plan=None, chunk: int = 8) -> PositionalVectorSet:
    """Per-layer mean hidden state at each position across the batch."""
    try:
        batch = np.asarray(batch)
    except ValueError as exc:
        raise ValueError("ragged batch") from exc
    if batch.ndim != 2 or batch.dtype == object:
        raise ValueError("ragged batch: all sequences must share one length")
    S, T = batch.shape
    if S < 1:
        raise ValueError("need at least one sample")
    total = np.zeros((model.config.n_layers + 1, T, model.config.d_model))
    with no_grad():
        for start in range(0, S, chunk):
            _, tr = forward_trace(model, batch[start : start + chunk], plan, True, False)
            for layer, h in enumerate(tr.hidden):
                total[layer] += h.data.sum(axis=0)
    return PositionalVectorSet(total / S, S)


def posvec_similarity_matrix(pv: PositionalVectorSet, layer: int) -> np.ndarray:
    """Cosine similarity between every pair of positional vectors at ``layer``."""
    if not 0 <= layer < pv.vectors.shape[0]:
        raise IndexError(f"layer {layer} outside [0, {pv.vectors.shape[0] - 1}]")
    V = pv.vectors[layer]
    norms = np.linalg.norm(V, axis=1)
    if np.any(norms == 0):
        raise ZeroDivisionError("zero-norm positional vector")
    U = V / norms[:, None]
    M = U @ U.T
    M = 0.5 * (M + M.T)
    np.fill_diagonal(M, 1.0)
    return np.clip(M, -1.0, 1.0)
