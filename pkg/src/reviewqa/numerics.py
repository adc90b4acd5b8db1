"""Minimal dense-tensor kernel with reverse-mode gradients.

Every operation records a backward closure on the output tensor; `backward()`
replays them in reverse topological order. Tensors are never mutated by an
operation (the optimizer rewrites Parameter data between graphs). Float32 is
the working precision; build graphs in float64 for finite-difference checks.
"""

from __future__ import annotations

from collections import Counter
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(ValueError):
    """Non-finite or otherwise invalid numeric input."""


# Op-invocation counter. One conv/matmul call covers every sequence position,
# so counts per layer stay constant as sequences grow; tests assert this.
_op_counts: Counter = Counter()
_counting = False
_grad_enabled = True


def _bump(name: str) -> None:
    if _counting:
        _op_counts[name] += 1


@contextmanager
def count_ops():
    """Count op invocations inside the block; yields the live Counter."""
    global _counting
    _op_counts.clear()
    _counting = True
    try:
        yield _op_counts
    finally:
        _counting = False


@contextmanager
def no_grad():
    """Skip tape recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float array plus an optional gradient and tape hooks."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, mul_const(other, -1.0))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return mul_const(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Parameter:
    """Named model weight; non-trainable parameters never get optimizer updates."""

    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, name: str, tensor: Tensor, trainable: bool = True):
        self.name = name
        self.tensor = tensor
        tensor.requires_grad = trainable
        self.trainable = trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, trainable={self.trainable})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        out._parents = parents
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _bump("add")
    out = _result(a.data + b.data, (a, b))
    if out.requires_grad:
        def _back():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.data.shape))
        out._backward = _back
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _bump("mul")
    out = _result(a.data * b.data, (a, b))
    if out.requires_grad:
        def _back():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad * a.data, b.data.shape))
        out._backward = _back
    return out


def mul_const(a: Tensor, c: float) -> Tensor:
    out = _result(a.data * a.data.dtype.type(c), (a,))
    if out.requires_grad:
        def _back():
            a._accum(out.grad * a.data.dtype.type(c))
        out._backward = _back
    return out


def add_const(a: Tensor, c: float) -> Tensor:
    out = _result(a.data + a.data.dtype.type(c), (a,))
    if out.requires_grad:
        def _back():
            a._accum(out.grad)
        out._backward = _back
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    _bump("matmul")
    out = _result(a.data @ b.data, (a, b))
    if out.requires_grad:
        def _back():
            if a.requires_grad:
                a._accum(out.grad @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ out.grad)
        out._backward = _back
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    _bump("transpose")
    out = _result(a.data.T, (a,))
    if out.requires_grad:
        def _back():
            a._accum(out.grad.T)
        out._backward = _back
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    _bump("concat")
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        def _back():
            offsets = np.cumsum([0] + sizes)
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * out.grad.ndim
                    idx[axis] = slice(lo, hi)
                    t._accum(out.grad[tuple(idx)])
        out._backward = _back
    return out


def gather_rows(table: Tensor, ids) -> Tensor:
    """Rows table[ids]; gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.intp)
    _bump("gather_rows")
    out = _result(table.data[ids], (table,))
    if out.requires_grad:
        def _back():
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, out.grad)
        out._backward = _back
    return out


def pick(x: Tensor, col_ids) -> Tensor:
    """x[i, col_ids[i]] for each row i; used for per-step target log-probs."""
    col_ids = np.asarray(col_ids, dtype=np.intp)
    rows = np.arange(x.shape[0])
    _bump("pick")
    out = _result(x.data[rows, col_ids], (x,))
    if out.requires_grad:
        def _back():
            g = np.zeros_like(x.data)
            g[rows, col_ids] = out.grad
            x._accum(g)
        out._backward = _back
    return out


def tsum(a: Tensor) -> Tensor:
    _bump("sum")
    out = _result(a.data.sum(), (a,))
    if out.requires_grad:
        def _back():
            a._accum(np.full_like(a.data, out.grad))
        out._backward = _back
    return out


def tmean(a: Tensor) -> Tensor:
    _bump("mean")
    n = a.data.size
    out = _result(a.data.mean(), (a,))
    if out.requires_grad:
        def _back():
            a._accum(np.full_like(a.data, out.grad / n))
        out._backward = _back
    return out


def sigmoid(a: Tensor) -> Tensor:
    _bump("sigmoid")
    # evaluate on the non-overflowing branch of exp for each sign
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    s = s.astype(x.dtype)
    out = _result(s, (a,))
    if out.requires_grad:
        def _back():
            a._accum(out.grad * s * (1.0 - s))
        out._backward = _back
    return out


def tanh(a: Tensor) -> Tensor:
    _bump("tanh")
    t = np.tanh(a.data)
    out = _result(t, (a,))
    if out.requires_grad:
        def _back():
            a._accum(out.grad * (1.0 - t * t))
        out._backward = _back
    return out


def glu(a: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half * sigmoid(second half)."""
    n = a.shape[-1]
    if n % 2 != 0:
        raise ShapeError(f"glu needs an even last dimension, got {n}")
    _bump("glu")
    h = n // 2
    lin = a.data[..., :h]
    gate = a.data[..., h:]
    sg = np.where(gate >= 0, 1.0 / (1.0 + np.exp(-np.abs(gate))), np.exp(-np.abs(gate)) / (1.0 + np.exp(-np.abs(gate))))
    sg = sg.astype(a.data.dtype)
    out = _result(lin * sg, (a,))
    if out.requires_grad:
        def _back():
            g = np.concatenate([out.grad * sg, out.grad * lin * sg * (1.0 - sg)], axis=-1)
            a._accum(g)
        out._backward = _back
    return out


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, computed with max-subtraction."""
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains NaN or infinity")
    _bump("softmax")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _result(s, (a,))
    if out.requires_grad:
        def _back():
            g = out.grad
            a._accum(s * (g - (g * s).sum(axis=-1, keepdims=True)))
        out._backward = _back
    return out


def log_softmax(a: Tensor) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise NumericError("log_softmax input contains NaN or infinity")
    _bump("log_softmax")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = _result(ls, (a,))
    if out.requires_grad:
        def _back():
            g = out.grad
            a._accum(g - np.exp(ls) * g.sum(axis=-1, keepdims=True))
        out._backward = _back
    return out


def conv1d_window(seq: Tensor, kernel: Tensor, bias: Tensor, k: int,
                  pad_left: int, pad_right: int) -> Tensor:
    """Windowed 1-D convolution over a (L, d_in) sequence.

    The sequence is padded with zero vectors, then output position i is
    kernel @ concat(padded[i : i+k]) + bias. kernel is (d_out, k*d_in),
    output (L + pad_left + pad_right - k + 1, d_out). Positions are mutually
    independent: one call covers the whole sequence.
    """
    if k < 1 or pad_left < 0 or pad_right < 0:
        raise ShapeError(f"conv1d_window needs k >= 1 and pads >= 0, got k={k}, pads=({pad_left},{pad_right})")
    if seq.data.ndim != 2:
        raise ShapeError(f"conv1d_window expects a (L, d_in) sequence, got {seq.shape}")
    L, d_in = seq.shape
    d_out = kernel.shape[0]
    if kernel.shape != (d_out, k * d_in):
        raise ShapeError(f"kernel shape {kernel.shape} does not map k*d_in={k * d_in} -> d_out")
    L_out = L + pad_left + pad_right - k + 1
    if L_out < 1:
        raise ShapeError(f"window k={k} exceeds padded length {L + pad_left + pad_right}")
    _bump("conv1d_window")
    padded = np.zeros((L + pad_left + pad_right, d_in), dtype=seq.data.dtype)
    padded[pad_left:pad_left + L] = seq.data
    windows = np.stack([padded[t:t + L_out] for t in range(k)], axis=1).reshape(L_out, k * d_in)
    out = _result(windows @ kernel.data.T + bias.data, (seq, kernel, bias))
    if out.requires_grad:
        def _back():
            g = out.grad
            if kernel.requires_grad:
                kernel._accum(g.T @ windows)
            if bias.requires_grad:
                bias._accum(g.sum(axis=0))
            if seq.requires_grad:
                gw = (g @ kernel.data).reshape(L_out, k, d_in)
                gp = np.zeros_like(padded)
                for t in range(k):
                    gp[t:t + L_out] += gw[:, t, :]
                seq._accum(gp[pad_left:pad_left + L])
        out._backward = _back
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a finite scalar loss node."""
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise NumericError("backward called on a non-finite loss")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()


def gradient_check(build_loss: Callable[[], Tensor], params: Iterable[Parameter],
                   eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    build_loss must run a fresh forward pass each call. Parameters should be
    float64; finite differences are unreliable at float32.
    """
    params = [p for p in params if p.trainable]
    for p in params:
        p.tensor.zero_grad()
    loss = build_loss()
    backward(loss)
    analytic = {p.name: (np.zeros_like(p.data) if p.tensor.grad is None else p.tensor.grad.copy())
                for p in params}
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = build_loss().item()
            flat[i] = orig - eps
            f_minus = build_loss().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic[p.name].reshape(-1)[i]
            rel = abs(a - numeric) / max(1.0, abs(numeric))
            if rel > worst:
                worst = rel
    return worst
