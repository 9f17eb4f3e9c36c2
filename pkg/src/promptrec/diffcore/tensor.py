"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every operation records a backward closure that accumulates adjoints into its
differentiable inputs, so a tensor used in several places receives the sum of
all incoming gradients. Callers are responsible for zeroing gradients between
optimization steps.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class DiffcoreError(Exception):
    """Base class for errors raised by the autodiff layer."""


class ShapeError(DiffcoreError):
    def __init__(self, op: str, *shapes: tuple):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class ZeroNormError(DiffcoreError):
    """Cosine similarity requested for a vector with (near-)zero norm."""


_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (forward-only mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray, own: bool = False) -> None:
        """Add an incoming adjoint.

        ``own=True`` promises the caller built ``g`` fresh for this tensor
        (or from finalized gradient data no other tensor will adopt), so the
        first accumulation can adopt it without a copy.
        """
        if self.grad is None:
            self.grad = g if own else np.array(g)
        else:
            self.grad += g

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar tensor."""
        if self.data.size != 1:
            raise DiffcoreError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def constant(x) -> Tensor:
    return _wrap(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise --------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def backward(g):
        if a.requires_grad:
            r = _unbroadcast(g, a.shape)
            a.accumulate(r, own=r is not g)
        if b.requires_grad:
            r = _unbroadcast(g, b.shape)
            b.accumulate(r, own=r is not g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def backward(g):
        if a.requires_grad:
            r = _unbroadcast(g, a.shape)
            a.accumulate(r, own=r is not g)
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape), own=True)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape), own=True)
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape), own=True)

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        a.accumulate(s * g, own=True)

    return _make(a.data * s, (a,), backward)


def powc(a: Tensor, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    p = float(p)
    if p != int(p) or p < 0:
        if np.any(a.data <= 0.0):
            raise DiffcoreError(f"powc: non-positive base with exponent {p}")
    out_data = a.data ** p

    def backward(g):
        a.accumulate(g * p * a.data ** (p - 1.0), own=True)

    return _make(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a.accumulate(g * out_data, own=True)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DiffcoreError("log: non-positive input")

    def backward(g):
        a.accumulate(g / a.data, own=True)

    return _make(np.log(a.data), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        a.accumulate(g * (1.0 - out_data * out_data), own=True)

    return _make(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        a.accumulate(g * (a.data > 0.0), own=True)

    return _make(out_data, (a,), backward)


def absval(a: Tensor) -> Tensor:
    """Elementwise absolute value; the subgradient at zero is zero."""

    def backward(g):
        a.accumulate(g * np.sign(a.data), own=True)

    return _make(np.abs(a.data), (a,), backward)


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate(_unbroadcast(ga, a.shape), own=True)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate(_unbroadcast(gb, b.shape), own=True)

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        a.accumulate(g.reshape(a.shape), own=True)

    return _make(a.data.reshape(shape), (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def backward(g):
        a.accumulate(np.swapaxes(g, ax1, ax2), own=True)

    return _make(np.swapaxes(a.data, ax1, ax2), (a,), backward)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DiffcoreError("concat: empty input list")
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base) or any(
            i != (axis % len(base)) and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError("concat", parts[0].shape, p.shape)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                p.accumulate(g[tuple(index)], own=True)

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D table; output shape is ``idx.shape + (d,)``."""
    if table.ndim != 2:
        raise ShapeError("gather_rows", table.shape)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DiffcoreError(
            f"gather_rows: index out of range [0, {table.shape[0]}) "
            f"(got min={idx.min()}, max={idx.max()})"
        )

    def backward(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx.ravel(), g.reshape(-1, table.shape[1]))
        table.accumulate(acc, own=True)

    return _make(table.data[idx], (table,), backward)


def select_positions(x: Tensor, pos: np.ndarray) -> Tensor:
    """Pick one row per batch element: ``out[b] = x[b, pos[b]]``."""
    if x.ndim != 3:
        raise ShapeError("select_positions", x.shape)
    pos = np.asarray(pos, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def backward(g):
        acc = np.zeros_like(x.data)
        acc[rows, pos] = g
        x.accumulate(acc, own=True)

    return _make(x.data[rows, pos], (x,), backward)


# -- reductions and normalization ----------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.shape).copy(), own=True)

    return _make(out_data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a.accumulate(out_data * (g - dot), own=True)

    return _make(out_data, (a,), backward)


def log_sum_exp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_data = np.squeeze(m + np.log(s), axis=axis)

    def backward(g):
        a.accumulate(np.expand_dims(g, axis) * (e / s), own=True)

    return _make(out_data, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply an affine map."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gain.data * xhat + bias.data

    def backward(g):
        if gain.requires_grad:
            gain.accumulate((g * xhat).reshape(-1, d).sum(axis=0), own=True)
        if bias.requires_grad:
            bias.accumulate(g.reshape(-1, d).sum(axis=0), own=True)
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv * (dxhat - m1 - xhat * m2), own=True)

    return _make(out_data, (x, gain, bias), backward)


def stop_gradient(a: Tensor) -> Tensor:
    """Forward-identity tensor that propagates zero adjoint upstream."""
    return Tensor(a.data)


# -- composite helpers ----------------------------------------------------


def cosine_rows(x: Tensor, y: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Cosine similarity between every row of ``x`` and every row of ``y``.

    Raises ZeroNormError when any row has norm below ``min_norm``: silently
    returning zero would hide dead embeddings.
    """
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError("cosine_rows", x.shape, y.shape)
    for name, t in (("x", x), ("y", y)):
        norms = np.sqrt((t.data * t.data).sum(axis=1))
        if np.any(norms < min_norm):
            row = int(np.argmin(norms))
            raise ZeroNormError(f"cosine_rows: {name} row {row} has norm {norms[row]:.3e}")
    xs = powc(tsum(mul(x, x), axis=1, keepdims=True), -0.5)
    ys = powc(tsum(mul(y, y), axis=1, keepdims=True), -0.5)
    return mul(mul(matmul(x, swapaxes(y, 0, 1)), xs), swapaxes(ys, 0, 1))


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of all entries of ``x`` (as a 0-d tensor)."""
    return powc(tsum(mul(x, x)), 0.5)


def masked_softmax(scores: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to positions where ``mask`` is nonzero.

    Fully masked rows are an error: attention over zero keys is undefined.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all(mask.max(axis=axis) > 0.0):
        raise DiffcoreError("masked_softmax: a row has no valid key positions")
    bias = np.where(mask > 0.0, 0.0, -1e30)
    return softmax(add(scores, Tensor(np.broadcast_to(bias, scores.shape))), axis=axis)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise DiffcoreError("dropout: training mode requires an RNG")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


def assert_finite(t: Tensor, what: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise DiffcoreError(f"{what}: non-finite values encountered")
