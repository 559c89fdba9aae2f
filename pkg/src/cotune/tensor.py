"""Dense float64 tensors with reverse-mode autodiff over a small, closed op set.

Every op records a node holding its inputs and a backward closure. Node ids
increase monotonically, so sorting reachable nodes by id gives a valid
topological order and ``backward`` walks it in reverse exactly once.

No general broadcasting: the only shape-mixing ops are ``add_row`` (row bias)
and ``matmul`` with a shared right-hand weight matrix.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()
_state = threading.local()

# Process-wide op counters; callers take differences around a region of interest.
COUNTERS = {"backward": 0}


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ContractError(ValueError):
    """Raised when a caller violates an op's precondition."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{_op}: non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._id = next(_ids)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(grads: dict, t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    prev = grads.get(t._id)
    grads[t._id] = g if prev is None else prev + g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bw(g, grads):
        _accum(grads, a, g)
        _accum(grads, b, g)

    return _result(a.data + b.data, (a, b), "add", bw)


def add_row(x: Tensor, bias: Tensor) -> Tensor:
    """x[..., n] + bias[n]."""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ContractError(f"add_row: shape mismatch {x.shape} vs {bias.shape}")

    def bw(g, grads):
        _accum(grads, x, g)
        _accum(grads, bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _result(x.data + bias.data, (x, bias), "add_row", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def bw(g, grads):
        _accum(grads, a, g * b.data)
        _accum(grads, b, g * a.data)

    return _result(a.data * b.data, (a, b), "mul", bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g, grads):
        _accum(grads, a, g * c)

    return _result(a.data * c, (a,), "scale", bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g, grads):
        _accum(grads, a, g * mask)

    return _result(a.data * mask, (a,), "relu", bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g, grads):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner
        _accum(grads, a, g * d)

    return _result(out, (a,), "gelu", bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g, grads):
        _accum(grads, a, np.full(a.shape, float(g)))

    return _result(np.asarray(a.data.sum()), (a,), "sum", bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g, grads):
        _accum(grads, a, np.full(a.shape, float(g) / n))

    return _result(np.asarray(a.data.mean()), (a,), "mean", bw)


def sq_norm_half(a: Tensor) -> Tensor:
    """0.5 * sum(a**2)."""

    def bw(g, grads):
        _accum(grads, a, float(g) * a.data)

    return _result(np.asarray(0.5 * np.sum(a.data * a.data)), (a,), "sq_norm_half", bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a[..., m, k] @ b[k, n], or batched a[B, m, k] @ b[B, k, n]."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ContractError(f"matmul: batch mismatch {a.shape} @ {b.shape}")
    shared_rhs = b.data.ndim == 2

    def bw(g, grads):
        if a.requires_grad:
            _accum(grads, a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if shared_rhs:
                k = a.shape[-1]
                _accum(grads, b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(grads, b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), "matmul", bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""

    def bw(g, grads):
        _accum(grads, a, np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(a.data, -1, -2).copy(), (a,), "transpose", bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def bw(g, grads):
        _accum(grads, a, g.reshape(a.shape))

    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ContractError(f"reshape: {a.shape} -> {shape}") from exc
    return _result(out, (a,), "reshape", bw)


# ---------------------------------------------------------------- indexing

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table {table.shape}")

    def bw(g, grads):
        if table.requires_grad:
            out = np.zeros_like(table.data)
            np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            _accum(grads, table, out)

    return _result(table.data[ids], (table,), "embedding", bw)


def concat(ts: Sequence[Tensor], axis: int) -> Tensor:
    ts = list(ts)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g, grads):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(grads, t, g[tuple(idx)])

    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ContractError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    return _result(out, ts, "concat", bw)


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g, grads):
        out = np.zeros_like(a.data)
        out[idx] = g
        _accum(grads, a, out)

    return _result(a.data[idx].copy(), (a,), "slice", bw)


def select_rows(x: Tensor, batch_idx: np.ndarray, pos_idx: np.ndarray) -> Tensor:
    """x[B, S, D] -> rows x[batch_idx[i], pos_idx[i], :] stacked to [M, D]."""

    def bw(g, grads):
        out = np.zeros_like(x.data)
        np.add.at(out, (batch_idx, pos_idx), g)
        _accum(grads, x, out)

    return _result(x.data[batch_idx, pos_idx], (x,), "select_rows", bw)


_MASK_FILL = -1e9


def causal_mask(scores: Tensor) -> Tensor:
    """Fill entries above the diagonal of the last two axes with a large negative value."""
    s = scores.shape[-1]
    upper = np.triu(np.ones((s, s), dtype=bool), k=1)

    def bw(g, grads):
        _accum(grads, scores, np.where(upper, 0.0, g))

    return _result(np.where(upper, _MASK_FILL, scores.data), (scores,), "causal_mask", bw)


# ---------------------------------------------------------------- probabilities

def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ContractError("softmax_rows: empty last axis")
    p = _softmax(x.data)

    def bw(g, grads):
        _accum(grads, x, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _result(p, (x,), "softmax", bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g, grads):
        p = np.exp(out)
        _accum(grads, x, g - p * g.sum(axis=-1, keepdims=True))

    return _result(out, (x,), "log_softmax", bw)


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    mask: np.ndarray | None = None,
    weights: np.ndarray | None = None,
) -> Tensor:
    """Cross-entropy of rows of ``logits`` [M, V] against integer ``targets``.

    With ``mask`` the result is the mean over unmasked rows. With ``weights``
    it is the weighted sum ``sum_i w_i * (-log p_i[target_i])``, which lets the
    caller express a nested per-example/per-token mean.
    """
    targets = np.asarray(targets, dtype=np.int64)
    m, v = logits.shape
    if mask is None:
        mask = np.ones(m, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    live = targets[mask]
    if live.size and (live.min() < 0 or live.max() >= v):
        raise IndexError(f"cross_entropy: target id out of range [0, {v})")
    if weights is None:
        n = int(mask.sum())
        if n == 0:
            raise ContractError("cross_entropy: no unmasked positions")
        w = mask / n
    else:
        w = np.where(mask, np.asarray(weights, dtype=np.float64), 0.0)
    safe_t = np.where(mask, targets, 0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(m), safe_t]
    loss = np.asarray(np.sum(w * nll))

    def bw(g, grads):
        p = np.exp(z - lse[:, None])
        p[np.arange(m), safe_t] -= 1.0
        _accum(grads, logits, float(g) * w[:, None] * p)

    return _result(loss, (logits,), "cross_entropy", bw)


def distance_to_fixed(
    fixed: np.ndarray, logits: Tensor, weights: np.ndarray, kind: str
) -> Tensor:
    """sum_i w_i * d(fixed_i, softmax(logits_i)), differentiable in the logits.

    ``fixed`` is treated as a constant. ``kind`` is "tv" (subgradient with
    sign(0)=0) or "sqrt_js" (base-2 logs; gradient defined as 0 where the
    divergence vanishes).
    """
    q = _softmax(logits.data)
    p = np.asarray(fixed, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if p.shape != q.shape:
        raise ContractError(f"distance_to_fixed: shape mismatch {p.shape} vs {q.shape}")
    if kind == "tv":
        diff = q - p
        d = 0.5 * np.abs(diff).sum(axis=-1)
        dq = 0.5 * np.sign(diff)
    elif kind == "sqrt_js":
        m = 0.5 * (p + q)
        with np.errstate(divide="ignore", invalid="ignore"):
            lp = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0) / m), 0.0)
            lq_ratio = np.where(q > 0, np.log2(np.where(q > 0, q, 1.0) / m), 0.0)
        js = np.maximum(0.5 * lp.sum(axis=-1) + 0.5 * (q * lq_ratio).sum(axis=-1), 0.0)
        d = np.sqrt(js)
        live = js > 1e-300
        coef = np.where(live, 0.25 / np.where(live, d, 1.0), 0.0)
        dq = coef[:, None] * lq_ratio
    else:
        raise ContractError(f"distance_to_fixed: unknown kind {kind!r}")
    out = np.asarray(np.sum(w * d))

    def bw(g, grads):
        gq = float(g) * w[:, None] * dq
        _accum(grads, logits, q * (gq - (gq * q).sum(axis=-1, keepdims=True)))

    return _result(out, (logits,), f"distance_{kind}", bw)


# ---------------------------------------------------------------- backward

def _backprop(loss: Tensor) -> list[tuple[Tensor, np.ndarray]]:
    """Return (leaf, gradient) pairs for every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    COUNTERS["backward"] += 1
    if not loss.requires_grad:
        return []
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad and p._id not in nodes)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    leaves = []
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t._backward is None:
            if not np.isfinite(g).all():
                raise NonFiniteError("backward: non-finite gradient")
            leaves.append((t, g))
        else:
            t._backward(g, grads)
    return leaves


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    for t, g in _backprop(loss):
        t.grad = g.copy() if t.grad is None else t.grad + g


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``wrt`` without touching ``.grad`` buffers."""
    found = {t._id: g for t, g in _backprop(loss)}
    return [found[t._id].copy() if t._id in found else np.zeros_like(t.data) for t in wrt]


def finite_diff_grad(f: Callable[[np.ndarray], float], theta: np.ndarray, eps: float) -> np.ndarray:
    """Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per coordinate."""
    if eps <= 0:
        raise ContractError("finite_diff_grad: eps must be positive")
    x = np.array(theta, dtype=np.float64, copy=True)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return out
