"""Training loop: Adam with the transformer warmup schedule, EMA shadow
weights, deterministic batching, divergence detection, and a versioned
binary checkpoint format.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import iter_batches, make_batch, sequence_error_rate
from .model import Seq2SeqModel
from .qat import QatConfig


class DivergenceError(RuntimeError):
    """Training loss became NaN/Inf."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"loss diverged at step {step}: {loss}")
        self.step = step


class FormatError(ValueError):
    """Checkpoint file is malformed; message carries the byte offset."""


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 64
    base_lr: float = 1.0
    warmup_steps: int = 500
    ema_decay: float = 0.999
    seed: int = 0
    eval_every: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 0.0  # 0 disables the global-norm clip

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must be in [0, 1)")


def lr_schedule(step: int, base_lr: float, warmup: int, d_model: int) -> float:
    """base_lr * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError(f"lr_schedule: step={step} < 1")
    return base_lr * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
    """In-place Adam update with bias correction."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ad.DimensionError(f"adam_step: grad/param shape mismatch for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(np.float32)


def ema_update(shadow: dict, params: dict, decay: float):
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    for name, p in params.items():
        s = shadow[name]
        s += (1.0 - decay) * (p.data - s)


@dataclass
class Checkpoint:
    step: int
    params: dict  # name -> float32 ndarray
    ema: dict     # name -> float32 ndarray
    config_digest: str = ""
    version: int = 1


_MAGIC = b"RQCK"
_DTYPES = {0: np.float32}


def _write_tensor(f, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<BB", 0, arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(ckpt: Checkpoint, path):
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<H", ckpt.version))
        f.write(struct.pack("<Q", ckpt.step))
        digest = ckpt.config_digest.encode("utf-8")
        f.write(struct.pack("<H", len(digest)))
        f.write(digest)
        for group in (ckpt.params, ckpt.ema):
            f.write(struct.pack("<I", len(group)))
            for name in sorted(group):
                _write_tensor(f, name, group[name])


def _read(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint reading {what} at offset {f.tell() - len(buf)}")
    return buf


def _read_tensor(f) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", _read(f, 2, "name length"))
    name = _read(f, nlen, "name").decode("utf-8")
    dtype_tag, rank = struct.unpack("<BB", _read(f, 2, "dtype/rank"))
    if dtype_tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {dtype_tag} at offset {f.tell()}")
    dims = [struct.unpack("<I", _read(f, 4, "dim"))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    payload = _read(f, 4 * count, f"payload of {name}")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    return name, arr


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if _read(f, 4, "magic") != _MAGIC:
            raise FormatError("bad magic bytes at offset 0")
        (version,) = struct.unpack("<H", _read(f, 2, "version"))
        if version != 1:
            raise FormatError(f"unsupported checkpoint version {version}")
        (step,) = struct.unpack("<Q", _read(f, 8, "step"))
        (dlen,) = struct.unpack("<H", _read(f, 2, "digest length"))
        digest = _read(f, dlen, "digest").decode("utf-8")
        groups = []
        for _ in range(2):
            (count,) = struct.unpack("<I", _read(f, 4, "tensor count"))
            group = {}
            for _ in range(count):
                name, arr = _read_tensor(f)
                group[name] = arr
            groups.append(group)
    return Checkpoint(step=step, params=groups[0], ema=groups[1],
                      config_digest=digest, version=version)


def checkpoint_from_model(model: Seq2SeqModel, step: int, ema: dict,
                          digest: str = "") -> Checkpoint:
    params = {n: np.array(t.data, copy=True) for n, t in model.parameters().items()}
    return Checkpoint(step=step, params=params,
                      ema={n: np.array(a, copy=True) for n, a in ema.items()},
                      config_digest=digest)


def load_model_weights(model: Seq2SeqModel, ckpt: Checkpoint, use_ema: bool = True):
    source = ckpt.ema if use_ema else ckpt.params
    for name, t in model.parameters().items():
        if name not in source:
            raise FormatError(f"checkpoint missing parameter {name!r}")
        t.data = np.array(source[name], copy=True)


@dataclass
class TraceRow:
    step: int
    split: str
    loss: float
    sequence_error_rate: float
    precision: str = "float"


def write_trace(rows, path, append: bool = False):
    mode = "a" if append else "w"
    new_file = mode == "w"
    with open(path, mode, newline="") as f:
        w = csv.writer(f)
        if new_file:
            w.writerow(["step", "split", "loss", "sequence_error_rate", "precision"])
        for r in rows:
            w.writerow([r.step, r.split, f"{r.loss:.9g}", f"{r.sequence_error_rate:.9g}",
                        r.precision])


def evaluate_raw(model: Seq2SeqModel, eval_pairs, max_eval: int | None = None):
    """(loss, sequence error rate) of the model as-is on an eval set."""
    pairs = eval_pairs if max_eval is None else eval_pairs[:max_eval]
    batch = make_batch(pairs)
    loss = model.forward_loss(batch).item()
    preds = model.greedy_decode(batch.source, batch.source_mask)
    ser = sequence_error_rate(preds, [t for _, t in pairs])
    return loss, ser


def train(model: Seq2SeqModel, train_pairs, eval_pairs, cfg: TrainConfig,
          qat: QatConfig | None = None, *, digest: str = "",
          trace_eval: bool = True):
    """Run the optimization loop; returns (Checkpoint, list[TraceRow])."""
    plan = model.build_qat_plan(qat)
    if qat is not None and qat.outlier_method == "lsc" and not model.lsc:
        model.init_lsc(qat)
    params = model.parameters()
    ema = {n: np.array(t.data, copy=True) for n, t in params.items()}
    state = AdamState()
    trace: list[TraceRow] = []
    batches = iter_batches(train_pairs, cfg.batch_size, cfg.seed)
    d_model = model.config.d_model

    for step in range(1, cfg.steps + 1):
        batch = next(batches)
        loss = model.forward_loss(batch, plan, seed=cfg.seed, step=step)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise DivergenceError(step, loss_val)
        store = ad.backward(loss)
        grads = {n: store.get(t) for n, t in params.items()}
        if cfg.grad_clip > 0:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > cfg.grad_clip:
                scale = cfg.grad_clip / total
                grads = {n: g * scale for n, g in grads.items()}
        lr = lr_schedule(step, cfg.base_lr, cfg.warmup_steps, d_model)
        adam_step(params, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        for lsc in model.lsc.values():
            lsc.clamp()
        ema_update(ema, params, cfg.ema_decay)

        if step % cfg.eval_every == 0 or step == cfg.steps:
            trace.append(TraceRow(step, "train", loss_val, math.nan))
            if trace_eval and eval_pairs:
                eval_loss, ser = evaluate_raw(model, eval_pairs, max_eval=200)
                trace.append(TraceRow(step, "eval", eval_loss, ser))
                shadow = model.copy()
                for n, t in shadow.parameters().items():
                    t.data = np.array(ema[n], copy=True)
                ema_loss, ema_ser = evaluate_raw(shadow, eval_pairs, max_eval=200)
                trace.append(TraceRow(step, "eval_ema", ema_loss, ema_ser))

    return checkpoint_from_model(model, cfg.steps, ema, digest), trace


def config_digest(obj) -> str:
    """Stable short digest of any JSON-serializable config mapping."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
