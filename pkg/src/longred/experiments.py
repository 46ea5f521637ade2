"""Desk-scale extension experiments on the synthetic corpus.

The pipeline pretrains a small byte-level model at window T, extends it to
T_l with a rotary base change, then adapts it for a fixed number of steps
either with plain long-text training ("cpt") or with the joint
distillation objective ("longred"). Helpers measure short-window
perplexity, long-range key/value recall and drift against the original.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import substream
from .corpus import MixedBatcher, PackedDataset, RecallDoc, SyntheticCorpus, pack_corpus, tokenize
from .drift import DriftReport, drift_report
from .model import DecoderModel, ModelConfig, forward_trace
from .positions import SkipConfig
from .rope import extend_abf
from .tensor import no_grad
from .trainer import Trainer, TrainPlan, loss_long, select_distill_layers

log = logging.getLogger("longred.experiments")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = ModelConfig(4, 4, 128, 256, 64, rope_base=1e4, dtype="float32")
    corpus_seed: int = 0
    dense_fraction: float = 0.5
    # pretraining: warmup, then cosine decay to zero over pretrain_steps
    init_std: float | None = None  # None: d_model ** -0.5
    pretrain_sequences: int = 12000
    pretrain_batch: int = 16
    pretrain_lr: float = 1.5e-3
    warmup_steps: int = 100
    pretrain_steps: int = 4000
    eval_every: int = 250
    converge_tol: float = 0.01
    converge_window: int = 2
    # extension and adaptation
    long_len: int = 256
    short_len: int = 32
    new_base: float = 1e7
    adapt_lr: float = 1e-4
    adapt_steps: int = 300
    batch_tokens: int = 1024
    grad_clip: float | None = 1.0
    alpha_short: float = 5.0
    alpha_s2l: float = 10.0
    mix_ratio: tuple[float, float, float] = (4.0, 3.0, 1.0)
    n_distill_layers: int = 2
    skip_t_b: int | str = "cream_random"
    # data sizes
    d1_docs: int = 600
    d2_sequences: int = 3000
    d3_sequences: int = 1000
    eval_sequences: int = 64
    eval_long_docs: int = 256
    drift_samples: int = 16

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Corpora:
    d1: PackedDataset
    d2: PackedDataset
    d3: PackedDataset
    eval_short: PackedDataset
    eval_long: list[RecallDoc]


@dataclass
class PretrainResult:
    model: DecoderModel
    eval_losses: list[float]
    steps: int
    converged: bool
    seconds: float = 0.0


@dataclass
class AdaptResult:
    model: DecoderModel
    method: str
    seed: int
    distill_layers: tuple[int, ...] = ()
    losses: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def pretrain_data(cfg: ExperimentConfig) -> tuple[PackedDataset, PackedDataset]:
    gen = SyntheticCorpus(cfg.corpus_seed)
    T = cfg.model.context_window
    rng = substream(cfg.corpus_seed, "data")
    train = pack_corpus(tokenize(gen.short_stream(rng, T * cfg.pretrain_sequences, dense=cfg.dense_fraction)), T, "pre")
    held = np.random.default_rng([cfg.corpus_seed, 99])
    ev = pack_corpus(tokenize(gen.short_stream(held, T * cfg.eval_sequences, dense=cfg.dense_fraction)), T, "eval")
    return train, ev


def adaptation_data(cfg: ExperimentConfig, seed: int) -> Corpora:
    """D1 long documents, D2/D3 short text, plus fixed held-out evaluation sets.

    Training sets depend on ``seed``; the evaluation sets do not.
    """
    gen = SyntheticCorpus(cfg.corpus_seed)
    T, Tl, Ts = cfg.model.context_window, cfg.long_len, cfg.short_len
    rng = np.random.default_rng([cfg.corpus_seed, 10, seed])
    d1 = pack_corpus(tokenize(gen.long_stream(rng, Tl, cfg.d1_docs, cfg.dense_fraction)), Tl, "D1")
    d2 = pack_corpus(tokenize(gen.short_stream(rng, Ts * cfg.d2_sequences, dense=cfg.dense_fraction)), Ts, "D2")
    d3 = pack_corpus(tokenize(gen.short_stream(rng, T * cfg.d3_sequences, dense=cfg.dense_fraction)), T, "D3")
    _, ev = pretrain_data(cfg)
    held = np.random.default_rng([cfg.corpus_seed, 1234])
    long_docs = [gen.long_document(held, Tl, dense=cfg.dense_fraction) for _ in range(cfg.eval_long_docs)]
    return Corpora(d1, d2, d3, ev, long_docs)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def perplexity(model: DecoderModel, ds: PackedDataset, chunk: int = 16) -> float:
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(ds), chunk):
            seqs = ds.sequences[i : i + chunk]
            n = seqs.shape[0] * (seqs.shape[1] - 1)
            total += loss_long(model, seqs).item() * n
            count += n
    return math.exp(total / count)


def recall_accuracy(model: DecoderModel, docs: list[RecallDoc], chunk: int = 16) -> float:
    """Share of value bytes predicted exactly (greedy) from the preceding text."""
    hits = []
    with no_grad():
        for i in range(0, len(docs), chunk):
            group = docs[i : i + chunk]
            toks = np.stack([tokenize(d.data) for d in group])
            logits, _ = forward_trace(model, toks[:, :-1])
            pred = logits.data.argmax(-1)
            for j, d in enumerate(group):
                hits += [pred[j, p - 1] == toks[j, p] for p in d.value_positions]
    return float(np.mean(hits))


def drift_against(original: DecoderModel, model: DecoderModel, ds: PackedDataset, n: int) -> DriftReport:
    return drift_report(original, model, ds.sequences[:n])


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def lr_at(cfg: ExperimentConfig, step: int) -> float:
    """Linear warmup, then cosine decay to zero at ``pretrain_steps``."""
    if step < cfg.warmup_steps:
        return cfg.pretrain_lr * (step + 1) / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / max(1, cfg.pretrain_steps - cfg.warmup_steps)
    return 0.5 * cfg.pretrain_lr * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def pretrain(cfg: ExperimentConfig, seed: int = 0) -> PretrainResult:
    """Train at the original window for the full learning-rate schedule.

    The run counts as converged when held-out loss fell by less than
    ``converge_tol`` (relative) over the last ``converge_window`` evaluations.
    """
    t0 = time.perf_counter()
    train, ev = pretrain_data(cfg)
    std = cfg.model.d_model**-0.5 if cfg.init_std is None else cfg.init_std
    model = DecoderModel.init(cfg.model, substream(seed, "init"), std)
    T = cfg.model.context_window
    plan = TrainPlan(
        mode="cpt",
        lr=cfg.pretrain_lr,
        grad_clip=cfg.grad_clip,
        long_len=T,
        short_len=T // 2,
        orig_len=T,
        mix_ratio=(1.0, 0.0, 0.0),
    )
    trainer = Trainer(model, None, plan, None, substream(seed, "sampler"))
    batcher = MixedBatcher([train], (1.0,), cfg.pretrain_batch * T, substream(seed, "batch"))
    empty = (np.zeros((0, T // 2), dtype=np.int64), np.zeros((0, T), dtype=np.int64))
    losses = []
    for step in range(cfg.pretrain_steps):
        trainer.opt.lr = lr_at(cfg, step)
        (batch,) = batcher.draw()
        trainer.step((batch,) + empty)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.pretrain_steps:
            losses.append(math.log(perplexity(model, ev)))
            log.info("pretrain step %d eval loss %.4f", step + 1, losses[-1])
    w = cfg.converge_window
    converged = len(losses) > w and losses[-w - 1] - losses[-1] < cfg.converge_tol * losses[-1]
    return PretrainResult(model, losses, cfg.pretrain_steps, bool(converged), time.perf_counter() - t0)


def load_or_pretrain(cfg: ExperimentConfig, cache_dir: str | Path | None, seed: int = 0) -> PretrainResult:
    """Reuse a cached original model keyed by the config digest."""
    if cache_dir is None:
        return pretrain(cfg, seed)
    cache = Path(cache_dir)
    path = cache / f"original-{cfg.digest()}-{seed}.lrd"
    info = path.with_suffix(".json")
    if path.exists() and info.exists():
        meta = json.loads(info.read_text())
        return PretrainResult(
            load_checkpoint(path), meta["eval_losses"], meta["steps"], meta["converged"], meta.get("seconds", 0.0)
        )
    res = pretrain(cfg, seed)
    cache.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.model, path)
    meta = {"eval_losses": res.eval_losses, "steps": res.steps, "converged": res.converged, "seconds": res.seconds}
    info.write_text(json.dumps(meta))
    return res


def extend(original: DecoderModel, cfg: ExperimentConfig) -> DecoderModel:
    """Trainable copy of ``original`` with the rotary base swapped and window enlarged."""
    student = original.copy()
    student.frozen = False
    for p in student.parameters():
        p.requires_grad = True
    return student.with_config(extend_abf(original.config, cfg.new_base, cfg.long_len))


def adapt(original: DecoderModel, cfg: ExperimentConfig, method: str, seed: int, data: Corpora | None = None) -> AdaptResult:
    """Extend ``original`` and train it for ``cfg.adapt_steps`` steps.

    ``cpt`` trains on D1 only with the LM loss; ``longred`` mixes D1/D2/D3
    with the distillation terms against the frozen original.
    """
    if method not in ("cpt", "longred"):
        raise ValueError(f"unknown method {method!r}")
    data = data or adaptation_data(cfg, seed)
    teacher = original.copy().freeze()
    student = extend(original, cfg)
    T = cfg.model.context_window
    common = dict(
        lr=cfg.adapt_lr,
        grad_clip=cfg.grad_clip,
        long_len=cfg.long_len,
        short_len=cfg.short_len,
        orig_len=T,
        batch_tokens=cfg.batch_tokens,
        steps=cfg.adapt_steps,
    )
    if method == "cpt":
        plan = TrainPlan(alpha_short=0.0, alpha_s2l=0.0, mix_ratio=(1.0, 0.0, 0.0), **common)
        skip, layers = None, ()
    else:
        probe_rng = substream(seed, "probe")
        idx = np.sort(probe_rng.choice(len(data.d2), size=8, replace=False))
        layers = select_distill_layers(teacher, student, data.d2.sequences[idx], cfg.n_distill_layers)
        plan = TrainPlan(
            alpha_short=cfg.alpha_short,
            alpha_s2l=cfg.alpha_s2l,
            mix_ratio=cfg.mix_ratio,
            n_distill_layers=cfg.n_distill_layers,
            distill_layers=layers,
            **common,
        )
        skip = SkipConfig(T, cfg.long_len, cfg.skip_t_b, "cream")
    trainer = Trainer(student, teacher, plan, skip, substream(seed, "sampler"))
    batcher = MixedBatcher([data.d1, data.d2, data.d3], plan.mix_ratio, plan.batch_tokens, substream(seed, "batch"))
    losses = []
    for _ in range(cfg.adapt_steps):
        losses.append(trainer.step(batcher.draw()).loss_final)
    return AdaptResult(student, method, seed, tuple(layers), losses)
