"""Minimal reverse-mode autodiff over numpy arrays.

Exactly the operations the Transformer needs, nothing else: matmul,
masked column-softmax, layernorm, cross-entropy, embedding lookup, GELU,
dropout, residual add, scalar scale, transpose, and feature-axis concat.
Tensors record their parents and a backward hook; ``Tensor.backward()``
runs one reverse topological pass.  No broadcasting beyond a 1-D bias
against the last axis.

Float32 is the default dtype; tests that compare against central finite
differences switch to float64 via ``set_default_dtype``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class TensorError(ValueError):
    pass


class ShapeMismatch(TensorError):
    pass


class AllMaskedColumn(TensorError):
    """A softmax column had every entry masked; nothing to normalize."""


class BadTarget(TensorError):
    pass


_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    global _default_dtype
    if dtype not in (np.float32, np.float64):
        raise TensorError(f"unsupported dtype: {dtype}")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


@contextmanager
def default_dtype(dtype):
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextmanager
def no_grad():
    """Disable graph construction (inference / dev-loss evaluation)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        keep = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
        self.data = data if keep else np.asarray(data, dtype=_default_dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    def _accumulate(self, g) -> None:
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self, seed=None) -> None:
        """Reverse pass from this tensor; accumulates into .grad buffers."""
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        if seed is None:
            seed = np.ones_like(self.data)
        self._accumulate(np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; ``b`` may be a 1-D bias against a's last axis."""
    bias = a.data.ndim == 2 and b.data.ndim == 1
    if not bias and a.data.shape != b.data.shape:
        raise ShapeMismatch(f"add {a.data.shape} + {b.data.shape}")
    if bias and a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"add {a.data.shape} + bias {b.data.shape}")
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0) if bias else g)

    return _result(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * c

    def backward(g):
        a._accumulate(g * c)

    return _result(data, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g.T)

    return _result(a.data.T.copy(), (a,), backward)


def concat_cols(tensors) -> Tensor:
    """Concatenate 2-D tensors along the feature (last) axis."""
    rows = {t.data.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ShapeMismatch(f"concat_cols row counts differ: {sorted(rows)}")
    widths = [t.data.shape[1] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accumulate(g[:, lo:hi])

    return _result(data, tuple(tensors), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeMismatch(f"ids must be 1-D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise BadTarget(f"id out of range for table of {table.data.shape[0]}")
    data = table.data[ids]

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _result(data, (table,), backward)


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Column-wise softmax of a 2-D score matrix under an additive mask.

    ``mask`` is a plain array of 0 (visible) and -inf (masked), same shape
    as ``scores``.  Masked entries come out exactly 0.0; every column must
    keep at least one visible entry.
    """
    mask = np.asarray(mask)
    if scores.data.ndim != 2 or mask.shape != scores.data.shape:
        raise ShapeMismatch(f"masked_softmax {scores.data.shape} mask {mask.shape}")
    if np.isneginf(mask).all(axis=0).any():
        raise AllMaskedColumn("a softmax column is fully masked")
    z = scores.data + mask
    zmax = z.max(axis=0, keepdims=True)
    with np.errstate(invalid="ignore"):  # diverged scores pass through as nan
        e = np.exp(z - zmax)  # exactly 0 where masked
        out = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        dz = out * (g - (out * g).sum(axis=0, keepdims=True))
        scores._accumulate(dz)

    return _result(out, (scores,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis of a 2-D tensor, then scale and shift."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"layernorm expects 2-D, got {x.data.shape}")
    h = x.data.shape[1]
    if gain.data.shape != (h,) or bias.data.shape != (h,):
        raise ShapeMismatch("layernorm gain/bias must match the last axis")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            x._accumulate(inv * term)

    return _result(data, (x, gain, bias), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU, as in GPT-2."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du
        x._accumulate(g * d)

    return _result(data, (x,), backward)


def dropout(x: Tensor, p: float, rng) -> Tensor:
    """Inverted dropout; identity when p == 0 or rng is None (inference)."""
    if p == 0.0 or rng is None:
        return x
    if not 0.0 <= p < 1.0:
        raise TensorError(f"bad dropout probability: {p}")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    data = x.data * keep

    def backward(g):
        x._accumulate(g * keep)

    return _result(data, (x,), backward)


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """−log softmax(logits)[target] for a 1-D logit vector, stably."""
    if logits.data.ndim != 1:
        raise ShapeMismatch(f"cross_entropy expects 1-D, got {logits.data.shape}")
    v = logits.data.shape[0]
    if not 0 <= target < v:
        raise BadTarget(f"target {target} out of range [0, {v})")
    m = logits.data.max()
    lse = m + np.log(np.exp(logits.data - m).sum())
    data = np.asarray(lse - logits.data[target])

    def backward(g):
        p = np.exp(logits.data - lse)
        p[target] -= 1.0
        logits._accumulate(g * p)

    return _result(data, (logits,), backward)


def cross_entropy_rows(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted sum of per-row cross-entropies for 2-D logits.

    Equivalent to summing ``cross_entropy(row, target) * weight`` over
    rows; vectorized.  ``weights`` default to 1; a zero weight drops the
    row from both loss and gradient (used for PAD targets).
    """
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"cross_entropy_rows expects 2-D, got {logits.data.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    t, v = logits.data.shape
    if targets.shape != (t,):
        raise ShapeMismatch(f"targets shape {targets.shape} for {t} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise BadTarget(f"target out of range [0, {v})")
    if weights is None:
        weights = np.ones(t, dtype=logits.data.dtype)
    else:
        weights = np.asarray(weights, dtype=logits.data.dtype)
    m = logits.data.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits.data - m).sum(axis=1))
    rows = lse - logits.data[np.arange(t), targets]
    data = np.asarray((rows * weights).sum())

    def backward(g):
        p = np.exp(logits.data - lse[:, None])
        p[np.arange(t), targets] -= 1.0
        logits._accumulate(g * weights[:, None] * p)

    return _result(data, (logits,), backward)


def add_n(tensors) -> Tensor:
    """Sum a non-empty list of same-shape tensors."""
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return total


def zero_grads(params) -> None:
    for t in params.values() if isinstance(params, dict) else params:
        t.grad = None


def finite_diff_grad(f, tensors, h: float = 1e-5) -> dict:
    """Central-difference gradients of scalar ``f()`` wrt named tensors.

    ``f`` is re-evaluated with entries perturbed in place; it must be
    deterministic.  Independent of the tape: only forward evaluations.
    """
    grads = {}
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads[name] = g.reshape(t.data.shape)
    return grads


def max_rel_err(a, b) -> float:
    """max |a−b| / max(1, |a|, |b|), elementwise, over all entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))
