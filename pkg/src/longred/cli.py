"""Command-line entry point: ``longred <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import corpus
from .checkpoint import CheckpointError, load_checkpoint_with_meta, save_checkpoint
from .config import ConfigError, RunConfig, load_config, substream
from .drift import drift_report
from .model import DecoderModel
from .positions import SkipConfig, sample_plans
from .rope import ExtensionSpec, bound_table
from .trainer import NumericError, Trainer, select_distill_layers

log = logging.getLogger("longred")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _read_dataset(path: str, length: int, name: str) -> corpus.PackedDataset:
    if not path:
        return corpus.PackedDataset(name, length, np.zeros((0, length), dtype=np.int64))
    p = Path(path)
    if p.is_dir():
        ds = corpus.load_packed(p, name)
        if ds.sequence_length != length:
            raise ConfigError(f"{name}: packed length {ds.sequence_length} != expected {length}")
        return ds
    return corpus.pack_corpus(corpus.tokenize(p.read_bytes()), length, name)


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.output_dir:
        cfg.output_dir = args.output_dir
    t = cfg.train
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    if cfg.data.init_checkpoint:
        base, _ = load_checkpoint_with_meta(cfg.data.init_checkpoint)
        if cfg.model is not None and cfg.model != base.config:
            raise ConfigError("[model] disagrees with the initial checkpoint's config")
    elif cfg.model is not None:
        base = DecoderModel.init(cfg.model, substream(cfg.seed, "init"))
    else:
        raise ConfigError("need [model] or data.init_checkpoint")

    teacher = None
    student = base
    if cfg.extension is not None:
        teacher = base.copy().freeze()
        student = base.with_config(cfg.extension.apply(base.config))

    lengths = t.lengths
    datasets = [
        _read_dataset(path, n, name)
        for path, n, name in zip((cfg.data.d1, cfg.data.d2, cfg.data.d3), lengths, ("D1", "D2", "D3"))
    ]
    ratio = tuple(r if len(ds) else 0.0 for r, ds in zip(t.mix_ratio, datasets))
    batcher = corpus.MixedBatcher(datasets, ratio, t.batch_tokens, substream(cfg.seed, "batch"))

    if t.mode == "longred" and teacher is not None and t.distill_layers is None and t.alpha_short:
        probe_src = datasets[1] if len(datasets[1]) else datasets[2]
        rng = substream(cfg.seed, "probe")
        idx = rng.choice(len(probe_src), size=min(cfg.data.probe_size, len(probe_src)), replace=False)
        t.distill_layers = select_distill_layers(teacher, student, probe_src.sequences[np.sort(idx)], t.n_distill_layers)
        log.info("distillation layers: %s", t.distill_layers)

    trainer = Trainer(student, teacher, t, cfg.skip, substream(cfg.seed, "sampler"))
    metrics_path = out / "metrics.jsonl"
    with metrics_path.open("w") as mf:
        for _ in range(t.steps):
            try:
                rec = trainer.step(batcher.draw())
            except NumericError as exc:
                if exc.record is not None:
                    mf.write(_metric_line(exc.record))
                raise
            if rec.step % cfg.metrics_every == 0 or rec.step == t.steps:
                mf.write(_metric_line(rec))
            log.debug("step %d final %.5f (%.2fs)", rec.step, rec.loss_final, rec.wall_time)
    meta = {"distill_layers": list(trainer.layers), "steps": trainer.step_count, "seed": cfg.seed}
    digest = save_checkpoint(student, out / "final.lrd", meta)
    print(f"checkpoint {out / 'final.lrd'} sha256 {digest}")
    return EXIT_OK


def _metric_line(rec) -> str:
    d = rec.to_dict()
    d.pop("wall_time")  # keeps the stream reproducible byte for byte
    return json.dumps(d, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# extend / drift / bound / sample-positions / pack / synth
# ---------------------------------------------------------------------------


def cmd_extend(args) -> int:
    cfg = _load_run_config(args)
    if args.abf is not None and args.pi is not None:
        raise ConfigError("choose one of --abf and --pi")
    if args.abf is not None or args.pi is not None:
        if args.target is None:
            raise ConfigError("--target is required with --abf/--pi")
        kind = "abf" if args.abf is not None else "pi"
        spec = ExtensionSpec(kind, args.target, new_base=args.abf, scale=args.pi)
    elif cfg.extension is not None:
        spec = cfg.extension
    else:
        raise ConfigError("no extension given (use --abf/--pi or an [extension] section)")
    model, meta = load_checkpoint_with_meta(args.input)
    model = model.with_config(spec.apply(model.config))
    meta = dict(meta, extension={"kind": spec.kind, "new_base": spec.new_base, "scale": spec.scale,
                                 "target_window": spec.target_window})
    digest = save_checkpoint(model, args.output, meta)
    print(f"checkpoint {args.output} sha256 {digest}")
    return EXIT_OK


def cmd_drift(args) -> int:
    a, _ = load_checkpoint_with_meta(args.a)
    b, _ = load_checkpoint_with_meta(args.b)
    length = args.length or min(a.config.context_window, b.config.context_window)
    ds = corpus.pack_corpus(corpus.tokenize(Path(args.corpus).read_bytes()), length, "drift")
    seqs = ds.sequences[: args.samples] if args.samples else ds.sequences
    rep = drift_report(a, b, seqs)
    lines = [json.dumps(r, sort_keys=True) for r in rep.records()]
    lines.append(json.dumps({"mean_sim": rep.mean_similarity(), "mean_kld": rep.mean_kld(),
                             "samples": rep.sample_count, "length": rep.sequence_length}, sort_keys=True))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_bound(args) -> int:
    if not args.base:
        raise ConfigError("give at least one --base")
    sys.stdout.write("base,bound\n")
    for base, value in bound_table(args.base, args.dim, args.len):
        sys.stdout.write(f"{base:g},{value:.10g}\n")
    return EXIT_OK


def cmd_sample_positions(args) -> int:
    cfg = _load_run_config(args)
    if args.T is not None:
        t_b = args.t_b if args.t_b is not None else "cream_random"
        try:
            t_b = int(t_b)
        except ValueError:
            pass
        skip = SkipConfig(args.T, args.T_l, t_b, args.sampler, args.sigma)
    elif cfg.skip is not None:
        skip = cfg.skip
    else:
        raise ConfigError("give --T/--T-l or a [skip] section")
    for plan in sample_plans(skip, substream(cfg.seed, "sampler"), args.count):
        sys.stdout.write(" ".join(str(int(i)) for i in plan.indices) + "\n")
    return EXIT_OK


def cmd_pack(args) -> int:
    tokens = corpus.tokenize(Path(args.corpus).read_bytes())
    ds = corpus.pack_corpus(tokens, args.length, args.name)
    corpus.save_packed(ds, args.out)
    print(f"{ds.name}: {len(ds)} x {ds.sequence_length} tokens, digest {ds.digest}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load_run_config(args)
    gen = corpus.SyntheticCorpus(args.corpus_seed)
    rng = substream(cfg.seed, "data")
    if args.kind == "short":
        data = gen.short_stream(rng, args.bytes)
    else:
        data = gen.long_stream(rng, args.length, max(1, args.bytes // args.length))
    Path(args.out).write_bytes(data)
    print(f"wrote {len(data)} bytes to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (TOML)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="longred", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", parents=[common], help="run the training loop of a config")
    s.add_argument("--steps", type=int)
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("extend", parents=[common], help="rewrite a checkpoint's rotary configuration")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--abf", type=float, help="new rotary base")
    s.add_argument("--pi", type=float, help="position interpolation scale")
    s.add_argument("--target", type=int, help="target context window")
    s.set_defaults(func=cmd_extend)

    s = sub.add_parser("drift", parents=[common], help="compare two checkpoints on a corpus")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--length", type=int)
    s.add_argument("--samples", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_drift)

    s = sub.add_parser("bound", parents=[common], help="print base,B table")
    s.add_argument("--base", type=float, action="append", default=[])
    s.add_argument("--dim", type=int, default=128)
    s.add_argument("--len", type=int, default=8192)
    s.set_defaults(func=cmd_bound)

    s = sub.add_parser("sample-positions", parents=[common], help="emit skipped position plans")
    s.add_argument("--T", type=int)
    s.add_argument("--T-l", dest="T_l", type=int)
    s.add_argument("--t-b", dest="t_b")
    s.add_argument("--sampler", choices=("uniform", "cream"), default="uniform")
    s.add_argument("--sigma", type=float, default=3.0)
    s.add_argument("--count", type=int, default=1)
    s.set_defaults(func=cmd_sample_positions)

    s = sub.add_parser("pack", parents=[common], help="tokenize a text file and pack it")
    s.add_argument("--corpus", required=True)
    s.add_argument("--length", type=int, required=True)
    s.add_argument("--name", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pack)

    s = sub.add_parser("synth", parents=[common], help="write synthetic corpus text")
    s.add_argument("--kind", choices=("short", "long"), default="short")
    s.add_argument("--bytes", type=int, default=1 << 20)
    s.add_argument("--length", type=int, default=256, help="long document length")
    s.add_argument("--corpus-seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
            format="%(levelname)s %(message)s",
            stream=sys.stderr,
        )
        return args.func(args)
    except ConfigError as exc:
        print(f"longred: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"longred: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"longred: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"longred: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
