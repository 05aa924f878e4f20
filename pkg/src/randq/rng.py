"""Counter-based random number generation.

Every noise draw in the toolkit is keyed by (global seed, stream tag, step)
so that results do not depend on execution order: two workers evaluating
different sweep cells, or the same cell re-run later, produce bit-identical
samples.
"""

import hashlib

import numpy as np


def _philox(seed: int, tag: str, step: int) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}|{tag}|{step}".encode("utf-8"),
                             digest_size=16).digest()
    key = np.frombuffer(digest, dtype="<u8")
    return np.random.Generator(np.random.Philox(key=key))


def sample_uniform(shape, lo: float, hi: float, seed: int, *, tag: str = "", step: int = 0) -> np.ndarray:
    """I.i.d. Unif[lo, hi] float32 samples, deterministic per (seed, tag, step)."""
    if lo > hi:
        raise ValueError(f"sample_uniform: lo={lo} > hi={hi}")
    if lo == hi:
        return np.full(shape, lo, dtype=np.float32)
    u = _philox(seed, tag, step).random(size=shape, dtype=np.float32)
    return (lo + (hi - lo) * u).astype(np.float32)


def sample_gaussian(shape, std: float, seed: int, *, tag: str = "", step: int = 0) -> np.ndarray:
    """I.i.d. zero-mean normal float32 samples with the given std."""
    if std < 0:
        raise ValueError(f"sample_gaussian: std={std} < 0")
    if std == 0:
        return np.zeros(shape, dtype=np.float32)
    z = _philox(seed, tag, step).standard_normal(size=shape, dtype=np.float32)
    return (std * z).astype(np.float32)
