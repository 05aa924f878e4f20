"""Command-line entry point.

Subcommands: gen-data, train, quantize, eval, sensitivity, sweep, report.
Every command takes `--config PATH` plus repeatable `--set key.path=value`
overrides; the fully-resolved config is written into the output directory so
any run can be reproduced bit-identically. Exit codes: 0 success, 1 domain
error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import evaluation as ev
from .config import ExperimentConfig, resolve
from .data import generate_dataset, load_dataset, save_dataset
from .model import Seq2SeqModel
from .qat import ConfigurationError
from .train import (DivergenceError, FormatError, load_checkpoint,
                    save_checkpoint, train, write_trace)


def _prepare(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.json", "w") as f:
        json.dump({**cfg.to_dict(), "digest": cfg.digest()}, f, indent=2, sort_keys=True)
    return out


def _apply_seed_env(cfg: ExperimentConfig):
    env = os.environ.get("RANDQ_SEED")
    if env is not None and "seed" not in _explicit_keys:
        cfg.train.seed = int(env)


_explicit_keys: set = set()


def _datasets(cfg: ExperimentConfig, out: Path):
    train_path, eval_path = out / "train.jsonl", out / "eval.jsonl"
    if train_path.exists() and eval_path.exists():
        return load_dataset(train_path), load_dataset(eval_path)
    return generate_dataset(cfg.task)


def cmd_gen_data(cfg: ExperimentConfig) -> int:
    out = _prepare(cfg)
    train_pairs, eval_pairs = generate_dataset(cfg.task)
    save_dataset(train_pairs, out / "train.jsonl")
    save_dataset(eval_pairs, out / "eval.jsonl")
    print(f"wrote {len(train_pairs)} train / {len(eval_pairs)} eval records to {out}")
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    out = _prepare(cfg)
    train_pairs, eval_pairs = _datasets(cfg, out)
    model = Seq2SeqModel(cfg.model, seed=cfg.train.seed)
    qat = cfg.qat if cfg.qat.active else None
    ckpt, trace = train(model, train_pairs, eval_pairs, cfg.train, qat,
                        digest=cfg.digest())
    save_checkpoint(ckpt, out / "checkpoint.rqck")
    write_trace(trace, out / "trace.csv")
    last_eval = [r for r in trace if r.split == "eval"]
    if last_eval:
        print(f"step {ckpt.step}: eval loss {last_eval[-1].loss:.4f}, "
              f"seq error rate {last_eval[-1].sequence_error_rate:.4f}")
    print(f"checkpoint written to {out / 'checkpoint.rqck'}")
    return 0


def cmd_quantize(cfg: ExperimentConfig, precision: str) -> int:
    out = _prepare(cfg)
    ckpt = load_checkpoint(out / "checkpoint.rqck")
    model = Seq2SeqModel(cfg.model, seed=0)
    assignment = ev.uniform_assignment(model, precision, model.qat_layers())
    quantized = ev.ptq_apply(ckpt, assignment, cfg.model, use_ema=True,
                             granularity=cfg.qat.granularity)
    from .train import checkpoint_from_model
    qckpt = checkpoint_from_model(quantized, ckpt.step, ckpt.ema, ckpt.config_digest)
    path = out / f"checkpoint_{precision}.rqck"
    save_checkpoint(qckpt, path)
    size = ev.model_size_bytes(quantized, assignment, cfg.qat.granularity)
    print(f"{precision} model ({size} bytes) written to {path}")
    return 0


def cmd_eval(cfg: ExperimentConfig, precision: str) -> int:
    out = _prepare(cfg)
    ckpt = load_checkpoint(out / "checkpoint.rqck")
    _, eval_pairs = _datasets(cfg, out)
    model = Seq2SeqModel(cfg.model, seed=0)
    assignment = ev.uniform_assignment(model, precision, model.qat_layers())
    quantized = ev.ptq_apply(ckpt, assignment, cfg.model, use_ema=True,
                             granularity=cfg.qat.granularity)
    row = ev.evaluate(quantized, eval_pairs, precision, assignment=assignment,
                      qat=cfg.qat, seed=cfg.train.seed,
                      granularity=cfg.qat.granularity, max_eval=cfg.max_eval)
    ev.write_report([row], out / f"eval_{precision}.csv")
    print(f"{precision}: loss {row.loss:.4f}, seq error rate "
          f"{row.sequence_error_rate:.4f}, {row.model_size_bytes} bytes")
    return 0


def cmd_sensitivity(cfg: ExperimentConfig, bit: int) -> int:
    out = _prepare(cfg)
    ckpt = load_checkpoint(out / "checkpoint.rqck")
    _, eval_pairs = _datasets(cfg, out)
    deltas, whole = ev.layer_sensitivity(ckpt, eval_pairs, bit, cfg.model,
                                         granularity=cfg.qat.granularity,
                                         max_eval=cfg.max_eval)
    with open(out / f"sensitivity_int{bit}.json", "w") as f:
        json.dump({"per_layer": deltas, "whole_model": whole}, f, indent=2, sort_keys=True)
    for name in sorted(deltas, key=deltas.get, reverse=True):
        print(f"{name}: {deltas[name]:+.4f}")
    print(f"whole model: {whole:+.4f}")
    return 0


def cmd_sweep(cfg: ExperimentConfig) -> int:
    out = _prepare(cfg)
    rows = ev.run_sweep(cfg.grid(), cfg.task, cfg.model, cfg.train,
                        max_eval=cfg.max_eval)
    path = out / "report.csv"
    ev.write_report(rows, path)
    print(f"{len(rows)} rows written to {path}")
    return 0


def cmd_report(cfg: ExperimentConfig) -> int:
    path = Path(cfg.output_dir) / "report.csv"
    rows = ev.read_report(path)
    groups: dict = {}
    for r in rows:
        if r.status != "ok":
            continue
        key = (r.outlier_method, r.qat_method, r.granularity, r.eval_precision)
        groups.setdefault(key, []).append(r.sequence_error_rate)
    print(f"{'outlier':<8} {'qat':<6} {'granularity':<12} {'precision':<10} "
          f"{'seq_err (mean ± std)':<22} seeds")
    import statistics
    for key in sorted(groups):
        vals = groups[key]
        mean = statistics.mean(vals)
        std = statistics.stdev(vals) if len(vals) > 1 else 0.0
        print(f"{key[0]:<8} {key[1]:<6} {key[2]:<12} {key[3]:<10} "
              f"{mean:.4f} ± {std:.4f}{'':<6} {len(vals)}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="randq",
        description="Quantization-aware-training experiments on a toy seq2seq task.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="experiment config JSON")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY.PATH=VALUE", help="override one config key")

    common(sub.add_parser("gen-data", help="generate and save the synthetic dataset"))
    common(sub.add_parser("train", help="train one model and save a checkpoint"))
    p = sub.add_parser("quantize", help="post-training quantize a checkpoint")
    common(p)
    p.add_argument("--precision", choices=("int8", "int4"), default="int4")
    p = sub.add_parser("eval", help="evaluate a checkpoint at one precision")
    common(p)
    p.add_argument("--precision", choices=ev.PRECISIONS, default="float")
    p = sub.add_parser("sensitivity", help="per-layer quantization sensitivity")
    common(p)
    p.add_argument("--bit", type=int, default=4)
    common(sub.add_parser("sweep", help="run a (config x seed) grid and write report.csv"))
    common(sub.add_parser("report", help="aggregate report.csv as mean ± std per cell"))
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0,) else 0
    global _explicit_keys
    _explicit_keys = {o.split("=", 1)[0].split(".")[-1] for o in args.overrides}
    try:
        cfg = resolve(args.config, args.overrides)
        _apply_seed_env(cfg)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "quantize":
            return cmd_quantize(cfg, args.precision)
        if args.command == "eval":
            return cmd_eval(cfg, args.precision)
        if args.command == "sensitivity":
            return cmd_sensitivity(cfg, args.bit)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "report":
            return cmd_report(cfg)
        parser.error(f"unknown command {args.command!r}")
    except (ConfigurationError, DivergenceError, FormatError, ValueError,
            OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
