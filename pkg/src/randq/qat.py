"""QAT operators for linear layers: STE, pseudo-quantization noise (PQN),
norm-decay scales (including mixed top-k), learnable scale+clip (LSC), and
constant Gaussian weight noise (VN).

All operators take the weight as [out_channels, in_features] and the input
as [..., in_features]; the result is input @ perturbed(W).T. Scales follow
the per-row (output channel) convention of the quant module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tensor
from .quant import PER_CHANNEL, PER_TENSOR, QuantSpec, compute_scale, round_half_away

QAT_METHODS = ("none", "ste", "pqn")
OUTLIER_METHODS = ("none", "norm", "mixed", "lsc", "vn")


class ConfigurationError(ValueError):
    """Inconsistent QAT configuration."""


@dataclass
class QatConfig:
    qat_method: str = "none"
    outlier_method: str = "none"
    bit: int = 4
    granularity: str = PER_CHANNEL
    p: float = math.inf
    c: float | None = None  # defaults to 1 / (2^{bit-1} - 1)
    k: int = 8  # mixed mode only
    stop_scale_gradient: bool | None = None  # default from outlier_method
    vn_std: float = 0.0

    def __post_init__(self):
        if self.qat_method not in QAT_METHODS:
            raise ConfigurationError(f"unknown qat_method {self.qat_method!r}")
        if self.outlier_method not in OUTLIER_METHODS:
            raise ConfigurationError(f"unknown outlier_method {self.outlier_method!r}")
        if self.granularity not in (PER_TENSOR, PER_CHANNEL):
            raise ConfigurationError(f"unknown granularity {self.granularity!r}")
        if self.c is None:
            self.c = 1.0 / (2 ** (self.bit - 1) - 1)
        if self.p < 1:
            raise ConfigurationError(f"p={self.p} < 1")
        if self.k < 1:
            raise ConfigurationError(f"k={self.k} < 1")
        if self.vn_std < 0:
            raise ConfigurationError(f"vn_std={self.vn_std} < 0")
        if self.stop_scale_gradient is None:
            # scale only sets the noise magnitude unless norm decay is on
            self.stop_scale_gradient = self.outlier_method not in ("norm", "mixed")
        if self.outlier_method == "vn" and self.qat_method != "none":
            raise ConfigurationError("vn is a standalone baseline; use qat_method='none'")
        if self.outlier_method == "mixed" and self.p == math.inf:
            raise ConfigurationError("mixed mode needs a finite p (the top-k L_p norm)")

    @property
    def spec(self) -> QuantSpec:
        return QuantSpec(self.bit, self.granularity)

    @property
    def active(self) -> bool:
        return self.qat_method != "none" or self.outlier_method != "none"


def qat_mode(bit: int = 4, granularity: str = PER_CHANNEL, qat_method: str = "pqn",
             outlier_method: str = "norm") -> QatConfig:
    """Preset: p = inf, c = 1/u, i.e. the scale is the per-channel max-abs
    divided by the integer bound."""
    return QatConfig(qat_method=qat_method, outlier_method=outlier_method,
                     bit=bit, granularity=granularity, p=math.inf)


def mixed_scale_mode(k: int, bit: int = 4, granularity: str = PER_TENSOR,
                     qat_method: str = "pqn", p: float = 8.0) -> QatConfig:
    """Preset: scale from the L_p (default p=8) norm of the k largest
    magnitudes, c = 1/u."""
    return QatConfig(qat_method=qat_method, outlier_method="mixed",
                     bit=bit, granularity=granularity, p=p, k=k)


def generalization_mode(c: float, qat_method: str = "pqn",
                        granularity: str = PER_CHANNEL) -> QatConfig:
    """Preset: p = 2, free noise level c."""
    return QatConfig(qat_method=qat_method, outlier_method="norm",
                     granularity=granularity, p=2.0, c=c)


@dataclass
class LscParams:
    """Learnable per-channel scales for the LSC baseline."""
    scale: Tensor  # shape [M], grad-tracked

    @classmethod
    def init_from(cls, w: np.ndarray, cfg: QatConfig) -> "LscParams":
        s = compute_scale(np.asarray(w), QuantSpec(cfg.bit, PER_CHANNEL)).scales
        return cls(Tensor(np.maximum(s, 1e-8), requires_grad=True))

    def clamp(self):
        np.maximum(self.scale.data, 1e-8, out=self.scale.data)


def _div_scalar(a: Tensor, divisor: float) -> Tensor:
    out = a.data / divisor

    def bw(g, store):
        store.accumulate(a, g / divisor)

    return ad._node(out, (a,), bw)


def rand_scale(w: Tensor, cfg: QatConfig) -> Tensor:
    """Noise/quantization scale c * ||W_i||_p per channel (or per tensor).

    outlier_method 'mixed' restricts the norm to the k largest magnitudes.
    stop_scale_gradient=True detaches the result from W.
    """
    axis = "row" if cfg.granularity == PER_CHANNEL else "all"
    if cfg.outlier_method == "mixed":
        norm = ad.topk_magnitude_lp_norm(w, cfg.p, cfg.k, axis)
    else:
        norm = ad.lp_norm(w, cfg.p, axis)
    u = 2 ** (cfg.bit - 1) - 1
    if cfg.c == 1.0 / u:
        # divide instead of multiplying by the reciprocal so the result is
        # bit-identical to compute_scale's max/u
        s = _div_scalar(norm, float(u))
    else:
        s = ad.mul(norm, cfg.c)
    if cfg.stop_scale_gradient:
        s = ad.stop_gradient(s)
    return s


def _scale_column(s: Tensor, rows: int) -> Tensor:
    """Reshape a scale tensor ([M] or scalar) to broadcast over weight rows."""
    if s.data.ndim == 0:
        return ad.reshape(s, (1, 1))
    return ad.reshape(s, (s.data.size, 1))


def _ste_fake_quant(w: Tensor, s: Tensor, l: int, u: int) -> Tensor:
    """Fake quantization with a straight-through backward.

    Forward: s * clip(round(w/s), l, u) rowwise. Backward: gradient passes
    to w unchanged; the scale path treats the rounded integers as constant,
    so dY/ds_i = round(W_i / s_i).
    """
    sd = s.data.reshape(-1, 1) if s.data.ndim else s.data.reshape(1, 1)
    safe = np.where(sd == 0, 1.0, sd).astype(np.float32)
    q = np.clip(round_half_away(w.data / safe), l, u).astype(np.float32)
    q = np.where(sd == 0, 0.0, q)
    out = sd * q

    def bw(g, store):
        store.accumulate(w, g)
        gs = (g * q).sum(axis=1) if s.data.ndim else np.float32((g * q).sum())
        store.accumulate(s, gs.reshape(s.shape))

    return ad._node(out, (w, s), bw)


def _lsq_fake_quant(w: Tensor, s: Tensor, l: int, u: int) -> Tensor:
    """Learned-step-size fake quantization.

    Weight gradient is masked to the in-range region; the scale gradient is
    (q - w/s) inside the range and l/u on the clipped branches, scaled by
    1/sqrt(N*u).
    """
    sd = s.data.reshape(-1, 1)
    safe = np.where(sd == 0, 1e-8, sd).astype(np.float32)
    v = w.data / safe
    q = np.clip(round_half_away(v), l, u).astype(np.float32)
    out = sd * q
    inside = (v >= l) & (v <= u)
    gscale = 1.0 / math.sqrt(w.data.shape[1] * u)

    def bw(g, store):
        store.accumulate(w, (g * inside).astype(np.float32))
        ds = np.where(inside, q - v, q)  # clipped entries sit at l or u
        store.accumulate(s, (gscale * (g * ds).sum(axis=1)).astype(np.float32))

    return ad._node(out, (w, s), bw)


def _clip_ste(w: Tensor, s: Tensor, l: int, u: int) -> Tensor:
    """clip(w, s*l, s*u) per row with pass-through gradient to w; the scale
    receives l/u gradients from the clipped entries."""
    sd = s.data.reshape(-1, 1)
    lo, hi = sd * l, sd * u
    out = np.clip(w.data, lo, hi).astype(np.float32)
    below = w.data < lo
    above = w.data > hi

    def bw(g, store):
        store.accumulate(w, g)
        gs = (g * below).sum(axis=1) * l + (g * above).sum(axis=1) * u
        store.accumulate(s, gs.astype(np.float32))

    return ad._node(out, (w, s), bw)


def _noise(w_shape, seed: int, step: int, tag: str) -> Tensor:
    return ad.constant(rng.sample_uniform(w_shape, -0.5, 0.5, seed, tag=tag, step=step))


def ste_weight(w: Tensor, cfg: QatConfig) -> Tensor:
    s = rand_scale(w, cfg)
    return _ste_fake_quant(w, s, cfg.spec.l, cfg.spec.u)


def pqn_weight(w: Tensor, cfg: QatConfig, seed: int, *, step: int = 0,
               tag: str = "", noise: Tensor | None = None) -> Tensor:
    z = noise if noise is not None else _noise(w.shape, seed, step, tag)
    s = rand_scale(w, cfg)
    return ad.add(w, ad.mul(_scale_column(s, w.shape[0]), z))


def ste_linear(w: Tensor, x: Tensor, cfg: QatConfig) -> Tensor:
    """Linear layer through fake quantization with an STE backward."""
    return ad.matmul(x, ad.transpose(ste_weight(w, cfg)))


def pqn_linear(w: Tensor, x: Tensor, cfg: QatConfig, seed: int, *, step: int = 0,
               tag: str = "", noise: Tensor | None = None) -> Tensor:
    """Linear layer with additive uniform noise in [-s_i/2, s_i/2] per entry.

    `noise` pins the Unif[-1/2, 1/2] draw (for gradient checks); otherwise it
    is resampled per (seed, tag, step)."""
    return ad.matmul(x, ad.transpose(pqn_weight(w, cfg, seed, step=step, tag=tag, noise=noise)))


def lsc_weight(w: Tensor, lsc: LscParams, cfg: QatConfig, mode: str, seed: int, *,
               step: int = 0, tag: str = "", noise: Tensor | None = None) -> Tensor:
    if mode == "ste":
        return _lsq_fake_quant(w, lsc.scale, cfg.spec.l, cfg.spec.u)
    if mode == "pqn":
        z = noise if noise is not None else _noise(w.shape, seed, step, tag)
        clipped = _clip_ste(w, lsc.scale, cfg.spec.l, cfg.spec.u)
        return ad.add(clipped, ad.mul(_scale_column(lsc.scale, w.shape[0]), z))
    raise ConfigurationError(f"lsc mode must be 'ste' or 'pqn', got {mode!r}")


def lsc_linear(w: Tensor, x: Tensor, lsc: LscParams, cfg: QatConfig, mode: str,
               seed: int = 0, *, step: int = 0, tag: str = "",
               noise: Tensor | None = None) -> Tensor:
    """Learnable scale and clip baseline (STE or PQN flavour)."""
    return ad.matmul(x, ad.transpose(lsc_weight(w, lsc, cfg, mode, seed,
                                                step=step, tag=tag, noise=noise)))


def vn_weight(w: Tensor, vn_std: float, seed: int, *, step: int = 0, tag: str = "") -> Tensor:
    if vn_std == 0:
        return w
    eps = ad.constant(rng.sample_gaussian(w.shape, vn_std, seed, tag=tag, step=step))
    return ad.add(w, eps)


def vn_linear(w: Tensor, x: Tensor, vn_std: float, seed: int, *, step: int = 0,
              tag: str = "") -> Tensor:
    """Variational-noise baseline: constant-std Gaussian noise on all weights."""
    return ad.matmul(x, ad.transpose(vn_weight(w, vn_std, seed, step=step, tag=tag)))


def qat_weight(w: Tensor, cfg: QatConfig, lsc: LscParams | None = None,
               seed: int = 0, *, step: int = 0, tag: str = "") -> Tensor:
    """The (possibly perturbed or fake-quantized) weight a layer should use
    this training step, per the config."""
    if cfg.outlier_method == "lsc":
        if lsc is None:
            raise ConfigurationError("outlier_method='lsc' requires LscParams")
        if cfg.qat_method == "none":
            raise ConfigurationError("lsc requires qat_method 'ste' or 'pqn'")
        return lsc_weight(w, lsc, cfg, cfg.qat_method, seed, step=step, tag=tag)
    if lsc is not None:
        raise ConfigurationError("LscParams given but outlier_method != 'lsc'")
    if cfg.outlier_method == "vn":
        return vn_weight(w, cfg.vn_std, seed, step=step, tag=tag)
    if cfg.qat_method == "ste":
        return ste_weight(w, cfg)
    if cfg.qat_method == "pqn":
        return pqn_weight(w, cfg, seed, step=step, tag=tag)
    if cfg.outlier_method != "none":
        raise ConfigurationError(
            f"outlier_method {cfg.outlier_method!r} requires qat_method 'ste' or 'pqn'")
    return w


def qat_linear(w: Tensor, x: Tensor, cfg: QatConfig, lsc: LscParams | None = None,
               seed: int = 0, *, step: int = 0, tag: str = "") -> Tensor:
    """Dispatching linear layer: plain matmul when no QAT is configured."""
    return ad.matmul(x, ad.transpose(qat_weight(w, cfg, lsc, seed, step=step, tag=tag)))
