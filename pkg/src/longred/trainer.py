"""Joint objective for window extension with restoration distillation.

Each optimizer step combines three losses on three sub-batches:

* long-text next-token cross-entropy on the extended window,
* short-text distillation: negative cosine similarity between student and
  frozen teacher hidden states at a fixed set of layers,
* short-to-long distillation: the student reads a length-T input at skipped
  positions, the teacher at ordinary positions, and the last-layer states
  are pulled together.

``final = long + alpha_short * short + alpha_s2l * s2l``.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tt
from .drift import drift_report
from .model import DecoderModel, PositionPlan, forward_trace
from .positions import SkipConfig, sample_plans
from .tensor import Tensor, no_grad


class NumericError(RuntimeError):
    """A loss or gradient went non-finite; ``record`` holds the partial step."""

    def __init__(self, message: str, record: "StepRecord | None" = None):
        super().__init__(message)
        self.record = record


@dataclass
class TrainPlan:
    alpha_short: float = 5.0
    alpha_s2l: float = 10.0
    n_distill_layers: int = 2
    distill_layers: tuple[int, ...] | None = None
    mix_ratio: tuple[float, float, float] = (4.0, 3.0, 1.0)
    long_len: int = 256
    short_len: int = 32
    orig_len: int = 64
    lr: float = 2e-5
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    steps: int = 300
    batch_tokens: int = 2048
    mode: str = "longred"  # "longred" or "cpt" (every sub-batch under the LM loss)

    def __post_init__(self):
        if self.alpha_short < 0 or self.alpha_s2l < 0:
            raise ValueError("loss weights must be nonnegative")
        if len(self.mix_ratio) != 3 or any(r < 0 for r in self.mix_ratio) or sum(self.mix_ratio) <= 0:
            raise ValueError("mix_ratio must be three nonnegative numbers with a positive sum")
        if self.n_distill_layers < 1:
            raise ValueError("n_distill_layers must be >= 1")
        if self.mode not in ("longred", "cpt"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.short_len >= self.orig_len:
            raise ValueError("short_len must be below the original window")

    @property
    def lengths(self) -> tuple[int, int, int]:
        return (self.long_len, self.short_len, self.orig_len)


@dataclass
class StepRecord:
    step: int
    loss_long: float
    loss_short: float
    loss_s2l: float
    loss_final: float
    tokens: tuple[int, int, int]
    wall_time: float = 0.0
    grad_norm: float = 0.0
    status: str = "ok"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tokens"] = list(self.tokens)
        return d


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay; decay skips 1-d gains."""

    def __init__(self, params: dict[str, Tensor], lr=2e-5, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if not p.requires_grad:
                raise RuntimeError(f"parameter {k} is frozen")
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd and p.ndim >= 2:
                p.data *= 1.0 - self.lr * self.wd
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def clip_grad_norm(params: Sequence[Tensor], max_norm: float | None) -> float:
    sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm is not None and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return norm


# ---------------------------------------------------------------------------
# Layer selection and losses
# ---------------------------------------------------------------------------


def select_distill_layers(
    teacher: DecoderModel, student: DecoderModel, probe_batch, M: int
) -> tuple[int, ...]:
    """Last layer plus the M-1 other layers with the largest head-averaged
    attention KL; ties go to the lower index. Layer 0 (embeddings) has no
    attention and scores 0."""
    L = student.config.n_layers
    if M < 1 or M > L + 1:
        raise ValueError(f"M must lie in [1, {L + 1}]")
    kld = drift_report(teacher, student, probe_batch).per_layer_kld
    ranked = sorted(range(L), key=lambda l: (-kld[l], l))
    return tuple(sorted(ranked[: M - 1])) + (L,)


def _check_layers(layers: Sequence[int], L: int) -> None:
    for l in layers:
        if not 0 <= l <= L:
            raise IndexError(f"layer {l} outside [0, {L}]")


def loss_long(student: DecoderModel, batch) -> Tensor:
    """Next-token cross-entropy averaged over positions, then sequences."""
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] < 2:
        raise ValueError("loss_long expects [batch, length >= 2] tokens")
    logits, _ = forward_trace(student, batch[:, :-1])
    return tt.cross_entropy(logits, batch[:, 1:])


def _mean_cosine(a: Tensor, b: Tensor) -> Tensor:
    # mean over positions then samples; every sample has the same length
    return tt.cosine_rows(a, b).mean()


def loss_short(student: DecoderModel, teacher: DecoderModel, batch, layers: Sequence[int]) -> Tensor:
    """-sum over ``layers`` of the student/teacher hidden-state similarity."""
    batch = np.asarray(batch)
    _check_layers(layers, student.config.n_layers)
    _, st = forward_trace(student, batch, None, capture_hidden=True)
    with no_grad():
        _, te = forward_trace(teacher, batch, None, capture_hidden=True)
    total = None
    for l in layers:
        term = _mean_cosine(st.hidden[l], te.hidden[l])
        total = term if total is None else total + term
    return -total


def loss_s2l(
    student: DecoderModel,
    teacher: DecoderModel,
    batch,
    plans: PositionPlan | Sequence[PositionPlan],
) -> Tensor:
    """-similarity of last-layer states: student on skipped positions,
    teacher on 0..T-1."""
    batch = np.asarray(batch)
    T = batch.shape[1]
    plan_list = [plans] if isinstance(plans, PositionPlan) else list(plans)
    for p in plan_list:
        if len(p) != T:
            raise ValueError(f"plan length {len(p)} != sequence length {T}")
    positions = plan_list[0] if len(plan_list) == 1 else plan_list
    _, st = forward_trace(student, batch, positions, capture_hidden=True)
    with no_grad():
        _, te = forward_trace(teacher, batch, None, capture_hidden=True)
    L = student.config.n_layers
    return -_mean_cosine(st.hidden[L], te.hidden[L])


# ---------------------------------------------------------------------------
# Training step
# ---------------------------------------------------------------------------


class Trainer:
    def __init__(
        self,
        student: DecoderModel,
        teacher: DecoderModel | None,
        plan: TrainPlan,
        skip: SkipConfig | None,
        rng: np.random.Generator,
    ):
        if student.frozen:
            raise ValueError("student must be trainable")
        if teacher is not None and not teacher.frozen:
            raise ValueError("teacher must be frozen")
        self.student = student
        self.teacher = teacher
        self.plan = plan
        self.skip = skip
        self.rng = rng
        self.opt = AdamW(
            student.params,
            lr=plan.lr,
            betas=(plan.beta1, plan.beta2),
            eps=plan.adam_eps,
            weight_decay=plan.weight_decay,
        )
        self.layers = tuple(plan.distill_layers) if plan.distill_layers else (student.config.n_layers,)
        self.step_count = 0

    def _lm_over(self, batches) -> Tensor | None:
        losses, weights = [], []
        for b in batches:
            if len(b):
                losses.append(loss_long(self.student, b))
                weights.append(b.shape[0] * (b.shape[1] - 1))
        if not losses:
            return None
        total = float(sum(weights))
        out = losses[0] * (weights[0] / total)
        for l, w in zip(losses[1:], weights[1:]):
            out = out + l * (w / total)
        return out

    def step(self, batches) -> StepRecord:
        b1, b2, b3 = (np.asarray(b) for b in batches)
        p = self.plan
        t0 = time.perf_counter()
        self.student.zero_grad()
        tokens = (int(b1.size), int(b2.size), int(b3.size))

        if p.mode == "cpt":
            lm = self._lm_over((b1, b2, b3))
            if lm is None:
                raise ValueError("empty batch")
            values = (lm.item(), 0.0, 0.0)
            _finite_or_raise(values, self.step_count + 1, tokens)
            lm.backward()
        else:
            values = [0.0, 0.0, 0.0]
            if len(b1):
                ll = loss_long(self.student, b1)
                values[0] = ll.item()
                _finite_or_raise(values, self.step_count + 1, tokens)
                ll.backward()
            if len(b2):
                if self.teacher is None:
                    raise ValueError("short-text distillation needs a teacher")
                if p.alpha_short:
                    ls = loss_short(self.student, self.teacher, b2, self.layers)
                    values[1] = ls.item()
                    _finite_or_raise(values, self.step_count + 1, tokens)
                    ls.backward(p.alpha_short)
                else:
                    with no_grad():
                        values[1] = loss_short(self.student, self.teacher, b2, self.layers).item()
            if len(b3):
                if self.teacher is None or self.skip is None:
                    raise ValueError("short-to-long distillation needs a teacher and a skip config")
                plans = sample_plans(self.skip, self.rng, len(b3))
                if p.alpha_s2l:
                    l3 = loss_s2l(self.student, self.teacher, b3, plans)
                    values[2] = l3.item()
                    _finite_or_raise(values, self.step_count + 1, tokens)
                    l3.backward(p.alpha_s2l)
                else:
                    with no_grad():
                        values[2] = loss_s2l(self.student, self.teacher, b3, plans).item()

        params = self.student.parameters()
        gnorm = clip_grad_norm(params, p.grad_clip)
        if not math.isfinite(gnorm):
            rec = _record(self.step_count + 1, values, p, tokens, 0.0, gnorm, "nan_grad")
            raise NumericError("non-finite gradient", rec)
        self.opt.step()
        self.step_count += 1
        return _record(self.step_count, values, p, tokens, time.perf_counter() - t0, gnorm)


def _record(step, values, plan, tokens, wall, gnorm, status="ok") -> StepRecord:
    ll, ls, l3 = values
    final = ll + plan.alpha_short * ls + plan.alpha_s2l * l3
    return StepRecord(step, ll, ls, l3, final, tokens, wall, gnorm, status)


def _finite_or_raise(values, step, tokens) -> None:
    if not all(math.isfinite(v) for v in values):
        raise NumericError(
            f"non-finite loss at step {step}: {values}",
            StepRecord(step, *values, float("nan"), tokens, 0.0, float("nan"), "nan_loss"),
        )


def train_step(
    student: DecoderModel,
    teacher: DecoderModel | None,
    plan: TrainPlan,
    batches,
    rng: np.random.Generator,
    skip: SkipConfig | None = None,
    trainer: Trainer | None = None,
) -> StepRecord:
    """One optimizer update. Pass ``trainer`` to keep optimizer state across calls."""
    if trainer is None:
        trainer = Trainer(student, teacher, plan, skip, rng)
    return trainer.step(batches)
