"""Synthetic sequence tasks: copy, reverse, and digit addition.

Token layout: 0=pad, 1=bos, 2=eos, payload tokens start at 3. For the
addition task the payload is digits 0-9 (tokens 3..12) plus '+' (token 13).
Datasets serialize as newline-delimited JSON records of token id arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

PAD, BOS, EOS = 0, 1, 2
FIRST_TOKEN = 3
PLUS_TOKEN = 13  # addition task: digit d -> token 3 + d

TASKS = ("copy", "reverse", "addition")


@dataclass(frozen=True)
class TaskSpec:
    task: str = "reverse"
    vocab_size: int = 32
    seq_len: int = 12
    n_train: int = 8000
    n_eval: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must reserve pad/bos/eos plus payload")
        if self.task == "addition" and self.vocab_size < 14:
            raise ValueError("addition task needs vocab_size >= 14 (digits + '+')")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")


def _digits(n: int) -> list[int]:
    return [FIRST_TOKEN + int(ch) for ch in str(n)]


def _make_pair(spec: TaskSpec, gen: np.random.Generator) -> tuple[list[int], list[int]]:
    if spec.task == "addition":
        half = max(1, spec.seq_len // 2 - 1)
        a = int(gen.integers(0, 10 ** half))
        b = int(gen.integers(0, 10 ** half))
        src = _digits(a) + [PLUS_TOKEN] + _digits(b)
        tgt = _digits(a + b)
        return src, tgt
    length = int(gen.integers(1, spec.seq_len + 1))
    src = gen.integers(FIRST_TOKEN, spec.vocab_size, size=length).tolist()
    tgt = list(reversed(src)) if spec.task == "reverse" else list(src)
    return src, tgt


def generate_dataset(spec: TaskSpec) -> tuple[list, list]:
    """Deterministic (train, eval) lists of (source, target) token id lists."""
    gen = np.random.Generator(np.random.Philox(key=spec.seed))
    train = [_make_pair(spec, gen) for _ in range(spec.n_train)]
    evalset = [_make_pair(spec, gen) for _ in range(spec.n_eval)]
    return train, evalset


def save_dataset(pairs, path):
    with open(path, "w") as f:
        for src, tgt in pairs:
            f.write(json.dumps({"source": list(map(int, src)),
                                "target": list(map(int, tgt))}) + "\n")


def load_dataset(path) -> list:
    pairs = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                pairs.append((rec["source"], rec["target"]))
    return pairs


@dataclass
class Batch:
    source: np.ndarray       # [B, Ls] int64, pad-filled
    target_in: np.ndarray    # [B, Lt] decoder input (bos + target)
    target_out: np.ndarray   # [B, Lt] decoder labels (target + eos)
    source_mask: np.ndarray  # [B, Ls] 1.0 at real tokens
    target_mask: np.ndarray  # [B, Lt] 1.0 at real label positions


def make_batch(pairs) -> Batch:
    """Pad a list of (source, target) pairs into one batch."""
    b = len(pairs)
    ls = max(len(s) for s, _ in pairs)
    lt = max(len(t) for _, t in pairs) + 1  # room for bos/eos shift
    src = np.zeros((b, ls), dtype=np.int64)
    tin = np.zeros((b, lt), dtype=np.int64)
    tout = np.zeros((b, lt), dtype=np.int64)
    smask = np.zeros((b, ls), dtype=np.float32)
    tmask = np.zeros((b, lt), dtype=np.float32)
    for i, (s, t) in enumerate(pairs):
        src[i, :len(s)] = s
        smask[i, :len(s)] = 1.0
        tin[i, 0] = BOS
        tin[i, 1:len(t) + 1] = t
        tout[i, :len(t)] = t
        tout[i, len(t)] = EOS
        tmask[i, :len(t) + 1] = 1.0
    return Batch(src, tin, tout, smask, tmask)


def iter_batches(pairs, batch_size: int, seed: int, *, shuffle: bool = True):
    """Endless deterministic batch stream (one yield per training step)."""
    order = np.arange(len(pairs))
    epoch = 0
    while True:
        if shuffle:
            perm = np.random.Generator(np.random.Philox(key=[seed, epoch])).permutation(order)
        else:
            perm = order
        for start in range(0, len(perm) - batch_size + 1, batch_size):
            yield make_batch([pairs[i] for i in perm[start:start + batch_size]])
        epoch += 1


def sequence_error_rate(predictions, targets) -> float:
    """Fraction of sequences with any token mismatch after eos truncation."""
    if len(predictions) != len(targets):
        raise ValueError("sequence_error_rate: prediction/target count mismatch")
    if not targets:
        return 0.0

    def trim(seq):
        out = []
        for t in seq:
            if t == EOS:
                break
            out.append(int(t))
        return out

    wrong = sum(1 for p, t in zip(predictions, targets) if trim(p) != trim(t))
    return wrong / len(targets)
