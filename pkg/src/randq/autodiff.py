"""Minimal reverse-mode autodiff over dense float32 numpy arrays.

Each Tensor produced by an operation remembers its parents and a backward
closure; `backward(loss)` walks the implicit tape in reverse topological
order and returns a GradStore. Everything is float32 and row-major.
"""

from __future__ import annotations

import contextlib

import numpy as np

_WORKING_DTYPE = np.float32


@contextlib.contextmanager
def working_dtype(dtype):
    """Temporarily change the dtype tensors are stored in. Training always
    uses float32; float64 is useful when comparing against numerical
    derivatives, whose difference quotients would otherwise drown in
    float32 rounding noise."""
    global _WORKING_DTYPE
    old = _WORKING_DTYPE
    _WORKING_DTYPE = dtype
    try:
        yield
    finally:
        _WORKING_DTYPE = old


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GradStore:
    """Gradients produced by one backward pass, keyed by tensor identity."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}

    def accumulate(self, t: "Tensor", g: np.ndarray):
        g = np.asarray(g, dtype=np.float32)
        if t.shape != g.shape:
            raise DimensionError(f"grad shape {g.shape} != tensor shape {t.shape}")
        prev = self._grads.get(id(t))
        self._grads[id(t)] = g if prev is None else prev + g

    def get(self, t: "Tensor") -> np.ndarray:
        """Gradient of the loss wrt t; zeros if t was unreachable."""
        g = self._grads.get(id(t))
        return np.zeros(t.shape, dtype=np.float32) if g is None else g

    def __contains__(self, t: "Tensor") -> bool:
        return id(t) in self._grads


def _as_array(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=_WORKING_DTYPE))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *,
                 _parents: tuple = (), _backward=None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in ts)


def _node(data, parents, backward) -> Tensor:
    if _tracked(*parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def constant(data) -> Tensor:
    """A leaf tensor that never receives gradients."""
    return Tensor(data)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bw(g, store):
        store.accumulate(a, _unbroadcast(g, a.shape))
        store.accumulate(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bw(g, store):
        store.accumulate(a, _unbroadcast(g * b.data, a.shape))
        store.accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    out = a.data ** np.float32(exponent)

    def bw(g, store):
        store.accumulate(a, g * exponent * a.data ** np.float32(exponent - 1.0))

    return _node(out, (a,), bw)


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)

    def bw(g, store):
        store.accumulate(a, g * out)

    return _node(out, (a,), bw)


def log(a) -> Tensor:
    a = _wrap(a)
    out = np.log(a.data)

    def bw(g, store):
        store.accumulate(a, g / a.data)

    return _node(out, (a,), bw)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)

    def bw(g, store):
        store.accumulate(a, g * 0.5 / out)

    return _node(out, (a,), bw)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    out = a.data * mask

    def bw(g, store):
        store.accumulate(a, g * mask)

    return _node(out, (a,), bw)


def abs_(a) -> Tensor:
    a = _wrap(a)
    s = np.sign(a.data)
    out = np.abs(a.data)

    def bw(g, store):
        store.accumulate(a, g * s)

    return _node(out, (a,), bw)


def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity, zero gradient contribution to a."""
    return Tensor(np.array(a.data, copy=True))


# -- shape ------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    out = a.data.reshape(shape)

    def bw(g, store):
        store.accumulate(a, g.reshape(old))

    return _node(out, (a,), bw)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = None if axes is None else np.argsort(axes)

    def bw(g, store):
        store.accumulate(a, np.transpose(g, inv))

    return _node(out, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g, store):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            store.accumulate(t, piece)

    return _node(out, tuple(tensors), bw)


# -- reductions -------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, store):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        store.accumulate(a, np.broadcast_to(g, a.shape).astype(np.float32))

    return _node(out, (a,), bw)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / n)


def reduce_max_abs(a, axis: str = "row") -> Tensor:
    """Per-row (axis='row', 2-D input) or global (axis='all') max |a|.

    Backward routes the upstream gradient, times sign of the winning entry,
    to exactly one entry per reduction group; ties break to the lower
    flat index.
    """
    a = _wrap(a)
    if a.size == 0:
        raise DimensionError("reduce_max_abs: empty tensor")
    absd = np.abs(a.data)
    if axis == "all":
        flat = absd.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx]
        sign = np.sign(a.data.reshape(-1)[idx])
        if sign == 0:
            sign = 1.0

        def bw(g, store):
            ga = np.zeros(a.size, dtype=np.float32)
            ga[idx] = g * sign
            store.accumulate(a, ga.reshape(a.shape))

        return _node(out, (a,), bw)

    if axis != "row":
        raise ValueError(f"reduce_max_abs: unknown axis {axis!r}")
    if a.data.ndim != 2:
        raise DimensionError("reduce_max_abs(axis='row') expects a 2-D tensor")
    idx = np.argmax(absd, axis=1)
    rows = np.arange(a.shape[0])
    out = absd[rows, idx]
    signs = np.sign(a.data[rows, idx])
    signs[signs == 0] = 1.0

    def bw(g, store):
        ga = np.zeros(a.shape, dtype=np.float32)
        ga[rows, idx] = g * signs
        store.accumulate(a, ga)

    return _node(out, (a,), bw)


def lp_norm(a, p, axis: str = "row") -> Tensor:
    """Row-wise L_p norm of a 2-D tensor (axis='row') or of all entries
    (axis='all'). p=inf dispatches to reduce_max_abs."""
    a = _wrap(a)
    if p == np.inf or p == float("inf"):
        return reduce_max_abs(a, axis)
    if p < 1:
        raise ValueError(f"lp_norm: p={p} < 1")
    if axis == "all":
        flat = reshape(a, (1, a.size))
        return reshape(lp_norm(flat, p, "row"), ())
    if axis != "row":
        raise ValueError(f"lp_norm: unknown axis {axis!r}")
    if a.data.ndim != 2:
        raise DimensionError("lp_norm(axis='row') expects a 2-D tensor")
    absd = np.abs(a.data).astype(np.float64)
    # float64 accumulation: |w|^p underflows float32 for large p
    pow_sum = (absd ** p).sum(axis=1)
    out = (pow_sum ** (1.0 / p)).astype(_WORKING_DTYPE)

    def bw(g, store):
        # d||w||_p / dw_j = sign(w_j) |w_j|^{p-1} ||w||_p^{1-p}
        norm = out.astype(np.float64)
        safe = np.where(norm == 0, 1.0, norm)
        coef = (absd ** (p - 1)) / (safe ** (p - 1))[:, None]
        ga = np.sign(a.data) * coef * g[:, None]
        store.accumulate(a, ga.astype(np.float32))

    return _node(out, (a,), bw)


def topk_magnitude_lp_norm(a, p, k: int, axis: str = "row") -> Tensor:
    """L_p norm of the k largest-magnitude entries per row (or of the
    whole tensor for axis='all'). Gradient flows only through those k
    entries; ties break to lower index."""
    a = _wrap(a)
    if axis == "all":
        return reshape(topk_magnitude_lp_norm(reshape(a, (1, a.size)), p, k, "row"), ())
    if axis != "row":
        raise ValueError(f"topk_magnitude_lp_norm: unknown axis {axis!r}")
    if a.data.ndim != 2:
        raise DimensionError("topk_magnitude_lp_norm expects a 2-D tensor")
    m, n = a.shape
    if not 1 <= k <= n:
        raise ValueError(f"topk_magnitude_lp_norm: k={k} out of range [1, {n}]")
    absd = np.abs(a.data)
    # stable selection: sort by (-|w|, index) so ties pick lower indices
    order = np.lexsort((np.broadcast_to(np.arange(n), (m, n)), -absd), axis=1)
    top = order[:, :k]
    mask = np.zeros((m, n), dtype=bool)
    np.put_along_axis(mask, top, True, axis=1)
    masked = a.data * mask
    out = lp_norm(_node(masked, (a,), lambda g, store: store.accumulate(a, g * mask)), p, "row")
    return out


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; supports 2-D and batched (leading dims broadcast)."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise DimensionError("matmul expects at least 1-D @ 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g, store):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        store.accumulate(a, _unbroadcast(ga, a.shape))
        store.accumulate(b, _unbroadcast(gb, b.shape))

    return _node(out, (a, b), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup weight[ids]; backward scatter-adds into the rows."""
    ids = np.asarray(ids)
    out = weight.data[ids]

    def bw(g, store):
        gw = np.zeros(weight.shape, dtype=np.float32)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        store.accumulate(weight, gw)

    return _node(out, (weight,), bw)


# -- nonlinearities over an axis -------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, store):
        dot = (g * out).sum(axis=axis, keepdims=True)
        store.accumulate(a, out * (g - dot))

    return _node(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g, store):
        store.accumulate(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _node(out, (a,), bw)


def layer_norm(a, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a = _wrap(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gain.data + bias.data
    n = a.shape[-1]

    def bw(g, store):
        store.accumulate(gain, _unbroadcast(g * xhat, gain.shape))
        store.accumulate(bias, _unbroadcast(g, bias.shape))
        gx = g * gain.data
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        store.accumulate(a, ga.astype(np.float32))

    return _node(out, (a, gain, bias), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of `targets` under `logits`, over
    positions where mask is nonzero. logits: [..., V], targets/mask: [...]."""
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=np.float32)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise DimensionError("cross_entropy: target/mask shape mismatch")
    total = mask.sum()
    if total == 0:
        raise DimensionError("cross_entropy: empty mask")
    logp = log_softmax(logits, axis=-1)
    flat_logp = reshape(logp, (-1, logits.shape[-1]))
    rows = np.arange(flat_logp.shape[0])
    cols = targets.reshape(-1)
    picked_data = flat_logp.data[rows, cols]

    def bw(g, store):
        gl = np.zeros(flat_logp.shape, dtype=np.float32)
        gl[rows, cols] = g.reshape(-1)
        store.accumulate(flat_logp, gl)

    picked = _node(picked_data, (flat_logp,), bw)
    weighted = mul(picked, mask.reshape(-1))
    return mul(reduce_sum(weighted), -1.0 / float(total))


# -- backward ---------------------------------------------------------------

def backward(loss: Tensor) -> GradStore:
    """Reverse-accumulate gradients from a scalar loss."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    store = GradStore()
    store.accumulate(loss, np.ones(loss.shape, dtype=np.float32))
    for node in reversed(topo):
        if node._backward is None:
            continue
        if node not in store:
            continue
        node._backward(store.get(node), store)
    return store
