"""Small encoder-decoder transformer whose dense layers route through the
QAT operators. Pre-norm residual blocks, learned positional embeddings,
greedy decoding. Weights are [out_features, in_features] so quantization
channels are output rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS, EOS, Batch
from .qat import LscParams, QatConfig, qat_weight

NEG_INF = -1e9

ENCODER_ONLY = "encoder_only"
ALL_DENSE = "all_dense"


@dataclass(frozen=True)
class ModelConfig:
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 32
    max_len: int = 64
    quantize_scope: str = ENCODER_ONLY

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.quantize_scope not in (ENCODER_ONLY, ALL_DENSE):
            raise ValueError(f"unknown quantize_scope {self.quantize_scope!r}")


def _init(gen: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (gen.standard_normal(shape) / math.sqrt(fan_in)).astype(np.float32)


class Seq2SeqModel:
    """Parameter container plus forward/decode logic."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.lsc: dict[str, LscParams] = {}
        gen = np.random.Generator(np.random.Philox(key=[seed, 0xA11]))
        d, dff, v = config.d_model, config.d_ff, config.vocab_size

        def par(name, shape, fan_in):
            self.params[name] = Tensor(_init(gen, shape, fan_in), requires_grad=True)

        def ln(name):
            self.params[f"{name}.g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
            self.params[f"{name}.b"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)

        def attn_block(prefix):
            for w in ("wq", "wk", "wv", "wo"):
                par(f"{prefix}.{w}", (d, d), d)

        def ff_block(prefix):
            par(f"{prefix}.w1", (dff, d), d)
            self.params[f"{prefix}.b1"] = Tensor(np.zeros(dff, dtype=np.float32), requires_grad=True)
            par(f"{prefix}.w2", (d, dff), dff)
            self.params[f"{prefix}.b2"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)

        par("src_embed", (v, d), d)
        par("tgt_embed", (v, d), d)
        par("pos_enc", (config.max_len, d), d)
        par("pos_dec", (config.max_len, d), d)
        for i in range(config.n_enc_layers):
            attn_block(f"enc{i}.attn")
            ln(f"enc{i}.ln1")
            ff_block(f"enc{i}.ff")
            ln(f"enc{i}.ln2")
        for i in range(config.n_dec_layers):
            attn_block(f"dec{i}.self")
            ln(f"dec{i}.ln1")
            attn_block(f"dec{i}.cross")
            ln(f"dec{i}.ln2")
            ff_block(f"dec{i}.ff")
            ln(f"dec{i}.ln3")
        ln("enc_final_ln")
        ln("dec_final_ln")
        par("out_proj", (v, d), d)

    # -- layer bookkeeping ---------------------------------------------------

    def dense_layers(self) -> list[str]:
        """All 2-D weight matrices eligible for quantization."""
        return [n for n, t in self.params.items()
                if t.data.ndim == 2 and not n.startswith("pos_")]

    def qat_layers(self) -> list[str]:
        """Dense layers covered by the configured quantize_scope."""
        if self.config.quantize_scope == ENCODER_ONLY:
            return [n for n in self.dense_layers() if n.startswith("enc")]
        return self.dense_layers()

    def build_qat_plan(self, cfg: QatConfig | None) -> dict[str, QatConfig]:
        """Map every in-scope layer to the given config."""
        if cfg is None or not cfg.active:
            return {}
        return {name: cfg for name in self.qat_layers()}

    def init_lsc(self, cfg: QatConfig):
        for name in self.qat_layers():
            self.lsc[name] = LscParams.init_from(self.params[name].data, cfg)

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for name, lsc in self.lsc.items():
            out[f"{name}.lsc_scale"] = lsc.scale
        return out

    def copy(self) -> "Seq2SeqModel":
        other = Seq2SeqModel.__new__(Seq2SeqModel)
        other.config = self.config
        other.params = {n: Tensor(np.array(t.data, copy=True), requires_grad=t.requires_grad)
                        for n, t in self.params.items()}
        other.lsc = {n: LscParams(Tensor(np.array(l.scale.data, copy=True), requires_grad=True))
                     for n, l in self.lsc.items()}
        return other

    # -- forward -------------------------------------------------------------

    def _weight(self, name: str, plan: dict, seed: int, step: int) -> Tensor:
        w = self.params[name]
        cfg = plan.get(name)
        if cfg is None:
            return w
        return qat_weight(w, cfg, self.lsc.get(name) if cfg.outlier_method == "lsc" else None,
                          seed, step=step, tag=name)

    def _linear(self, name: str, x: Tensor, plan, seed, step, bias: str | None = None) -> Tensor:
        y = ad.matmul(x, ad.transpose(self._weight(name, plan, seed, step)))
        if bias is not None:
            y = ad.add(y, self.params[bias])
        return y

    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor, mask: np.ndarray,
                   plan, seed, step) -> Tensor:
        cfg = self.config
        h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        bq, lq = xq.shape[0], xq.shape[1]
        lk = xkv.shape[1]

        def split(t, l):
            return ad.transpose(ad.reshape(t, (bq, l, h, dh)), (0, 2, 1, 3))

        q = split(self._linear(f"{prefix}.wq", xq, plan, seed, step), lq)
        k = split(self._linear(f"{prefix}.wk", xkv, plan, seed, step), lk)
        v = split(self._linear(f"{prefix}.wv", xkv, plan, seed, step), lk)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        scores = ad.add(scores, ad.constant(mask))
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (bq, lq, cfg.d_model))
        return self._linear(f"{prefix}.wo", merged, plan, seed, step)

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _ff(self, prefix: str, x: Tensor, plan, seed, step) -> Tensor:
        hidden = ad.relu(self._linear(f"{prefix}.w1", x, plan, seed, step, f"{prefix}.b1"))
        return self._linear(f"{prefix}.w2", hidden, plan, seed, step, f"{prefix}.b2")

    def _embed(self, name: str, pos_name: str, ids: np.ndarray, plan, seed, step) -> Tensor:
        if ids.shape[1] > self.config.max_len:
            raise ad.DimensionError(f"sequence length {ids.shape[1]} > max_len")
        w = self._weight(name, plan, seed, step)
        tok = ad.embedding(w, ids)
        pos = ad.embedding(self.params[pos_name], np.arange(ids.shape[1]))
        return ad.add(tok, pos)

    def encode(self, source: np.ndarray, source_mask: np.ndarray,
               plan=None, seed: int = 0, step: int = 0) -> Tensor:
        plan = plan or {}
        mask = np.where(source_mask[:, None, None, :] > 0, 0.0, NEG_INF).astype(np.float32)
        x = self._embed("src_embed", "pos_enc", source, plan, seed, step)
        for i in range(self.config.n_enc_layers):
            normed = self._ln(f"enc{i}.ln1", x)
            x = ad.add(x, self._attention(f"enc{i}.attn", normed, normed, mask,
                                          plan, seed, step))
            x = ad.add(x, self._ff(f"enc{i}.ff", self._ln(f"enc{i}.ln2", x), plan, seed, step))
        return self._ln("enc_final_ln", x)

    def decode(self, memory: Tensor, source_mask: np.ndarray, target_in: np.ndarray,
               plan=None, seed: int = 0, step: int = 0) -> Tensor:
        """Decoder logits [B, Lt, V] given encoder memory."""
        plan = plan or {}
        b, lt = target_in.shape
        causal = np.triu(np.full((lt, lt), NEG_INF, dtype=np.float32), k=1)
        self_mask = np.broadcast_to(causal, (b, 1, lt, lt)).astype(np.float32)
        cross_mask = np.where(source_mask[:, None, None, :] > 0, 0.0, NEG_INF).astype(np.float32)
        x = self._embed("tgt_embed", "pos_dec", target_in, plan, seed, step)
        for i in range(self.config.n_dec_layers):
            normed = self._ln(f"dec{i}.ln1", x)
            x = ad.add(x, self._attention(f"dec{i}.self", normed, normed, self_mask,
                                          plan, seed, step))
            x = ad.add(x, self._attention(f"dec{i}.cross", self._ln(f"dec{i}.ln2", x),
                                          memory, cross_mask, plan, seed, step))
            x = ad.add(x, self._ff(f"dec{i}.ff", self._ln(f"dec{i}.ln3", x), plan, seed, step))
        x = self._ln("dec_final_ln", x)
        return self._linear("out_proj", x, plan, seed, step)

    def forward_loss(self, batch: Batch, plan=None, seed: int = 0, step: int = 0) -> Tensor:
        """Teacher-forced cross-entropy, mean over non-pad target tokens."""
        memory = self.encode(batch.source, batch.source_mask, plan, seed, step)
        logits = self.decode(memory, batch.source_mask, batch.target_in, plan, seed, step)
        return ad.cross_entropy(logits, batch.target_out, batch.target_mask)

    def greedy_decode(self, source: np.ndarray, source_mask: np.ndarray,
                      max_len: int | None = None) -> list[list[int]]:
        """Argmax decoding until eos or max_len, batched."""
        max_len = max_len or self.config.max_len - 1
        b = source.shape[0]
        memory = self.encode(source, source_mask)
        tokens = np.full((b, 1), BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for _ in range(max_len):
            logits = self.decode(memory, source_mask, tokens)
            nxt = np.argmax(logits.data[:, -1, :], axis=-1)
            nxt = np.where(done, EOS, nxt)
            tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
        return [seq[1:].tolist() for seq in tokens]


def forward_loss(model: Seq2SeqModel, batch: Batch, qat: QatConfig | dict | None = None,
                 step_seed: int = 0, step: int = 0) -> Tensor:
    """Module-level convenience: accepts a single QatConfig (expanded over the
    model's quantize_scope) or an explicit layer->config map."""
    plan = qat if isinstance(qat, dict) else model.build_qat_plan(qat)
    return model.forward_loss(batch, plan, step_seed, step)
