"""Post-training quantization of checkpoints, per-layer sensitivity, greedy
mixed-precision assignment, sweep grids, and CSV reporting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict

import numpy as np

from .data import TaskSpec, generate_dataset, make_batch, sequence_error_rate
from .model import ModelConfig, Seq2SeqModel
from .qat import ConfigurationError, QatConfig
from .quant import PER_CHANNEL, QuantSpec, dequantize, quantize
from .train import (Checkpoint, DivergenceError, TrainConfig, load_model_weights,
                    train)

PRECISIONS = ("float", "int8", "int4")
_BITS = {"int8": 8, "int4": 4}


def _round9(x: float) -> float:
    """Round to the 9-significant-digit precision the CSV report stores, so
    rows round-trip through write_report/read_report exactly."""
    return float(f"{x:.9g}")


@dataclass
class ReportRow:
    outlier_method: str
    qat_method: str
    train_bit: int
    eval_precision: str
    granularity: str
    seed: int
    sequence_error_rate: float
    loss: float
    model_size_bytes: int
    status: str = "ok"

    FIELDS = ("outlier_method", "qat_method", "train_bit", "eval_precision",
              "granularity", "seed", "sequence_error_rate", "loss",
              "model_size_bytes", "status")


def _check_assignment(model: Seq2SeqModel, assignment: dict):
    layers = set(model.dense_layers())
    for name, prec in assignment.items():
        if name not in layers:
            raise ConfigurationError(f"unknown layer {name!r} in precision assignment")
        if prec not in PRECISIONS:
            raise ConfigurationError(f"unknown precision {prec!r} for layer {name!r}")
    missing = layers - set(assignment)
    if missing:
        raise ConfigurationError(f"assignment missing layers: {sorted(missing)}")


def uniform_assignment(model: Seq2SeqModel, precision: str,
                       scope_layers=None) -> dict:
    """All dense layers at `precision`; layers outside `scope_layers` (when
    given) stay float."""
    scope = set(scope_layers) if scope_layers is not None else None
    return {name: (precision if scope is None or name in scope else "float")
            for name in model.dense_layers()}


def layer_bytes(shape, precision: str, granularity: str = PER_CHANNEL) -> int:
    """Stored bytes for one weight matrix at a precision: packed integers
    plus float32 scales; float layers are 4 bytes per entry."""
    n = int(np.prod(shape))
    if precision == "float":
        return 4 * n
    rows = shape[0] if granularity == PER_CHANNEL and len(shape) > 1 else 1
    scale_bytes = 4 * rows
    if precision == "int8":
        return n + scale_bytes
    if precision == "int4":
        return math.ceil(n / 2) + scale_bytes
    raise ConfigurationError(f"unknown precision {precision!r}")


def model_size_bytes(model: Seq2SeqModel, assignment: dict,
                     granularity: str = PER_CHANNEL) -> int:
    total = 0
    for name, t in model.params.items():
        prec = assignment.get(name, "float")
        if t.data.ndim == 2 and prec != "float":
            total += layer_bytes(t.data.shape, prec, granularity)
        else:
            total += 4 * t.data.size
    return total


def ptq_apply(ckpt: Checkpoint, assignment: dict, model_config: ModelConfig,
              use_ema: bool = True, granularity: str = PER_CHANNEL) -> Seq2SeqModel:
    """Materialize a model from a checkpoint with each layer's weights
    replaced by dequantize(quantize(.)) at its assigned precision."""
    model = Seq2SeqModel(model_config, seed=0)
    load_model_weights(model, ckpt, use_ema=use_ema)
    _check_assignment(model, assignment)
    for name, prec in assignment.items():
        if prec == "float":
            continue
        spec = QuantSpec(_BITS[prec], granularity)
        w = model.params[name].data
        model.params[name].data = dequantize(quantize(w, spec))
    return model


def evaluate(model: Seq2SeqModel, eval_pairs, precision: str, *,
             assignment: dict | None = None, qat: QatConfig | None = None,
             seed: int = 0, granularity: str = PER_CHANNEL,
             max_eval: int | None = None) -> ReportRow:
    """Greedy-decode an eval set and assemble one report row. Evaluation is
    deterministic: no noise is ever injected here."""
    pairs = eval_pairs if max_eval is None else eval_pairs[:max_eval]
    batch = make_batch(pairs)
    loss = model.forward_loss(batch).item()
    preds = model.greedy_decode(batch.source, batch.source_mask)
    ser = sequence_error_rate(preds, [t for _, t in pairs])
    if assignment is None:
        assignment = uniform_assignment(model, precision, model.qat_layers())
    size = model_size_bytes(model, assignment, granularity)
    return ReportRow(
        outlier_method=qat.outlier_method if qat else "none",
        qat_method=qat.qat_method if qat else "none",
        train_bit=qat.bit if qat else 0,
        eval_precision=precision,
        granularity=granularity,
        seed=seed,
        sequence_error_rate=_round9(ser),
        loss=_round9(loss),
        model_size_bytes=size,
    )


def layer_sensitivity(ckpt: Checkpoint, eval_pairs, bit: int,
                      model_config: ModelConfig, *, use_ema: bool = True,
                      granularity: str = PER_CHANNEL,
                      max_eval: int | None = 200):
    """Per-layer metric degradation when quantizing that layer alone.

    Returns (per-layer deltas, whole-model delta); the two need not agree
    because layer interactions are not additive.
    """
    base_model = ptq_apply(ckpt, uniform_assignment(Seq2SeqModel(model_config), "float"),
                           model_config, use_ema=use_ema)
    pairs = eval_pairs if max_eval is None else eval_pairs[:max_eval]
    batch = make_batch(pairs)
    targets = [t for _, t in pairs]

    def ser_of(model):
        preds = model.greedy_decode(batch.source, batch.source_mask)
        return sequence_error_rate(preds, targets)

    base_ser = ser_of(base_model)
    prec = f"int{bit}"
    deltas = {}
    for name in base_model.dense_layers():
        assignment = uniform_assignment(base_model, "float")
        assignment[name] = prec
        model = ptq_apply(ckpt, assignment, model_config, use_ema=use_ema,
                          granularity=granularity)
        deltas[name] = ser_of(model) - base_ser
    whole = ptq_apply(ckpt, uniform_assignment(base_model, prec), model_config,
                      use_ema=use_ema, granularity=granularity)
    whole_delta = ser_of(whole) - base_ser
    return deltas, whole_delta


def assign_mixed_precision(sensitivities: dict, budget_bytes: int,
                           layer_shapes: dict,
                           granularity: str = PER_CHANNEL) -> dict:
    """Greedy assignment: start all-int4, promote layers to int8 in
    descending sensitivity while the byte budget allows."""
    if set(sensitivities) != set(layer_shapes):
        raise ConfigurationError("sensitivities and layer_shapes disagree on layers")
    assignment = {name: "int4" for name in layer_shapes}
    total = sum(layer_bytes(s, "int4", granularity) for s in layer_shapes.values())
    if budget_bytes < total:
        raise ConfigurationError(
            f"budget {budget_bytes} below all-int4 size {total}")
    order = sorted(sensitivities, key=lambda n: (-sensitivities[n], n))
    for name in order:
        extra = (layer_bytes(layer_shapes[name], "int8", granularity)
                 - layer_bytes(layer_shapes[name], "int4", granularity))
        if total + extra <= budget_bytes:
            assignment[name] = "int8"
            total += extra
    return assignment


def run_cell(qat: QatConfig, seed: int, task: TaskSpec, model_config: ModelConfig,
             train_cfg: TrainConfig, train_pairs, eval_pairs, *,
             precisions=PRECISIONS, max_eval: int | None = 500) -> list[ReportRow]:
    """Train one model and evaluate it at each precision."""
    cfg = TrainConfig(**{**asdict(train_cfg), "seed": seed})
    model = Seq2SeqModel(model_config, seed=seed)
    try:
        ckpt, _ = train(model, train_pairs, eval_pairs, cfg, qat, trace_eval=False)
    except DivergenceError:
        return [ReportRow(qat.outlier_method, qat.qat_method, qat.bit, prec,
                          qat.granularity, seed, 1.0,
                          _round9(float(np.finfo(np.float32).max)),
                          0, status="diverged")
                for prec in precisions]
    rows = []
    scope = model.qat_layers()
    for prec in precisions:
        assignment = uniform_assignment(model, prec, scope)
        quantized = ptq_apply(ckpt, assignment, model_config, use_ema=True,
                              granularity=qat.granularity)
        rows.append(evaluate(quantized, eval_pairs, prec, assignment=assignment,
                             qat=qat, seed=seed, granularity=qat.granularity,
                             max_eval=max_eval))
    return rows


def run_sweep(grid, task: TaskSpec, model_config: ModelConfig,
              train_cfg: TrainConfig, *, max_eval: int | None = 500) -> list[ReportRow]:
    """Train one model per (QatConfig, seed) and evaluate at each precision.

    `grid` is a list of (QatConfig, seeds) pairs; divergent cells become
    'diverged' rows and the sweep continues.
    """
    if not grid:
        raise ConfigurationError("run_sweep: empty grid")
    train_pairs, eval_pairs = generate_dataset(task)
    rows: list[ReportRow] = []
    for qat, seeds in grid:
        for seed in seeds:
            rows.extend(run_cell(qat, seed, task, model_config, train_cfg,
                                 train_pairs, eval_pairs, max_eval=max_eval))
    rows.sort(key=lambda r: (r.outlier_method, r.qat_method, r.eval_precision, r.seed))
    return rows


def write_report(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ReportRow.FIELDS)
        for r in rows:
            w.writerow([r.outlier_method, r.qat_method, r.train_bit,
                        r.eval_precision, r.granularity, r.seed,
                        f"{r.sequence_error_rate:.9g}", f"{r.loss:.9g}",
                        r.model_size_bytes, r.status])


def read_report(path) -> list[ReportRow]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for rec in reader:
            rows.append(ReportRow(
                rec["outlier_method"], rec["qat_method"], int(rec["train_bit"]),
                rec["eval_precision"], rec["granularity"], int(rec["seed"]),
                float(rec["sequence_error_rate"]), float(rec["loss"]),
                int(rec["model_size_bytes"]), rec["status"]))
    return rows
