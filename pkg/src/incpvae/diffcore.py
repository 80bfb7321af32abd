"""Dense tensors with define-by-run reverse-mode differentiation.

Every op builds its result eagerly and records a closure mapping the output
gradient to operand gradients. ``backward`` walks the graph reachable from a
scalar loss in reverse topological order.

Values are float32 unless a ``precision(np.float64)`` block is active; the
gradient checks run in float64 because central differences at step 1e-3 are
swamped by float32 rounding.
"""

from __future__ import annotations

import itertools
import threading
import zlib
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(ValueError):
    pass


_local = threading.local()
_node_ids = itertools.count()


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Create tensors in ``dtype`` inside the block (thread-local)."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "grad_fn", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 parents: tuple = (), grad_fn: Callable | None = None):
        self.data = np.ascontiguousarray(data, dtype=default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.grad_fn = grad_fn
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), grad_fn=grad_fn)
    return Tensor(data)


def detach(t: Tensor) -> Tensor:
    """Same values, cut from the graph."""
    return Tensor(t.data.copy())


stop_gradient = detach


# ---------------------------------------------------------------- graph


class Graph:
    """Nodes reachable from ``root`` in topological order (operands first)."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        self.nodes = order
        self.index = {n.node_id: i for i, n in enumerate(order)}

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.grad_fn is None]


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Calling twice without ``zero_grad`` adds the gradients together. With
    ``wrt`` the gradients of those tensors are also returned, zeros for any
    the loss does not depend on.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    wrt = list(wrt) if wrt is not None else None
    if loss.requires_grad:
        graph = Graph(loss)
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(graph.nodes):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node.grad_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise AssertionError(f"gradient shape {pg.shape} != operand shape {parent.shape}")
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg
    if wrt is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in wrt]


# ---------------------------------------------------------------- elementwise


def _scalar_like(t: Tensor) -> bool:
    return t.data.size == 1 and t.ndim <= 1


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or _scalar_like(a) or _scalar_like(b):
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: zero divisor")
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a), _unbroadcast(-g * out / b.data, b)))


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2 * a.data * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log: non-positive input (min {a.data.min()!r})")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a) -> Tensor:
    """log(1 + e^a), overflow-free."""
    a = as_tensor(a)
    return _result(np.logaddexp(0, a.data).astype(a.data.dtype), (a,),
                   lambda g: (g * _sigmoid(a.data),))


def leaky_relu(a, alpha: float = 0.01) -> Tensor:
    a = as_tensor(a)
    slope = np.where(a.data > 0, 1.0, alpha).astype(a.data.dtype)
    return _result(a.data * slope, (a,), lambda g: (g * slope,))


# ---------------------------------------------------------------- reductions & shape


def _check_axis(t: Tensor, axis: int | None) -> None:
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {t.shape}")


def sum(t, axis: int | None = None) -> Tensor:  # noqa: A001
    t = as_tensor(t)
    _check_axis(t, axis)
    out = np.asarray(t.data.sum(axis=axis, dtype=np.float64), dtype=t.data.dtype)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, t.shape).astype(t.data.dtype),)

    return _result(out, (t,), grad_fn)


def mean(t, axis: int | None = None) -> Tensor:
    t = as_tensor(t)
    _check_axis(t, axis)
    n = t.data.size if axis is None else t.shape[axis]
    out = np.asarray(t.data.mean(axis=axis, dtype=np.float64), dtype=t.data.dtype)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, t.shape).astype(t.data.dtype),)

    return _result(out, (t,), grad_fn)


def reshape(t, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    try:
        out = t.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {t.shape} to {tuple(shape)}") from exc
    return _result(out, (t,), lambda g: (g.reshape(t.shape),))


def transpose(t, axes: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    if sorted(axes) != list(range(t.ndim)):
        raise DimensionError(f"transpose: axes {tuple(axes)} invalid for shape {t.shape}")
    inverse = np.argsort(axes)
    return _result(np.ascontiguousarray(t.data.transpose(axes)), (t,), lambda g: (g.transpose(inverse),))


def slice_last(t, start: int, stop: int) -> Tensor:
    """``t[..., start:stop]``"""
    t = as_tensor(t)
    if not 0 <= start < stop <= t.shape[-1]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for last axis of {t.shape}")

    def grad_fn(g):
        full = np.zeros_like(t.data)
        full[..., start:stop] = g
        return (full,)

    return _result(t.data[..., start:stop], (t,), grad_fn)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` with ``b`` added to every row."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: shapes {x.shape} and {w.shape} do not align")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data + b.data
    return _result(out, (x, w, b),
                   lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0, dtype=np.float64).astype(g.dtype)))


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. x: N×C×H×W, w: F×C×k×k, b: F."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} and kernel {w.shape} do not align")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: output size {ho}x{wo} for input {x.shape}, kernel {kh}x{kw}, "
                             f"stride {stride}, padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    out = np.zeros((n, f, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + span_h:stride, j:j + span_w:stride]
            out += np.einsum("nchw,fc->nfhw", patch, w.data[:, :, i, j], optimize=True)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (f,):
            raise DimensionError(f"conv2d: bias shape {b.shape} != ({f},)")
        out += b.data[None, :, None, None]
        parents.append(b)

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + span_h:stride, j:j + span_w:stride]
                gw[:, :, i, j] = np.einsum("nfhw,nchw->fc", g, patch, optimize=True)
                gxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += np.einsum(
                    "nfhw,fc->nchw", g, w.data[:, :, i, j], optimize=True)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype))
        return tuple(grads)

    return _result(out, parents, grad_fn)


def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Transpose of ``conv2d``. x: N×C×H×W, w: C×F×k×k, b: F.

    Output side is (H−1)·stride − 2·padding + k + output_padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"conv_transpose2d: input {x.shape} and kernel {w.shape} do not align")
    if not 0 <= output_padding < stride:
        raise DimensionError("conv_transpose2d: output_padding must be smaller than stride")
    n, c, h, wd = x.shape
    _, f, kh, kw = w.shape
    full_h = (h - 1) * stride + kh + output_padding
    full_w = (wd - 1) * stride + kw + output_padding
    ho, wo = full_h - 2 * padding, full_w - 2 * padding
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv_transpose2d: output size {ho}x{wo} is not positive")
    span_h, span_w = stride * (h - 1) + 1, stride * (wd - 1) + 1
    full = np.zeros((n, f, full_h, full_w), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + span_h:stride, j:j + span_w:stride] += np.einsum(
                "nchw,cf->nfhw", x.data, w.data[:, :, i, j], optimize=True)
    out = full[:, :, padding:padding + ho, padding:padding + wo].copy()
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (f,):
            raise DimensionError(f"conv_transpose2d: bias shape {b.shape} != ({f},)")
        out += b.data[None, :, None, None]
        parents.append(b)

    def grad_fn(g):
        gfull = np.zeros((n, f, full_h, full_w), dtype=g.dtype)
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                window = gfull[:, :, i:i + span_h:stride, j:j + span_w:stride]
                gx += np.einsum("nfhw,cf->nchw", window, w.data[:, :, i, j], optimize=True)
                gw[:, :, i, j] = np.einsum("nchw,nfhw->cf", x.data, window, optimize=True)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype))
        return tuple(grads)

    return _result(out, parents, grad_fn)


# ---------------------------------------------------------------- randomness

# Streams are Philox-4x64 generators keyed by (seed, crc32(stream name)), so
# e.g. the "init" stream never shifts when "reparam" draws change.
STREAMS = ("init", "reparam", "noise", "shuffle", "eval", "data")


def generator(seed: int, stream: str = "default") -> np.random.Generator:
    key = zlib.crc32(stream.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(key,))))


def randn(shape: Sequence[int] | int, seed: int, stream: str = "default") -> Tensor:
    """Standard-normal tensor from the Philox stream ``(seed, stream)``."""
    if isinstance(shape, int):
        shape = (shape,)
    return Tensor(generator(seed, stream).standard_normal(tuple(shape)))
