"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Every primitive is registered as a ``(forward, backward)`` pair and reached
through :func:`apply_primitive`; the convenience functions below (``matmul``,
``relu``, ``conv1d`` ...) are thin wrappers around it.  Gradients accumulate
additively on every leaf that has ``requires_grad``; call :func:`zero_grad`
between optimizer steps.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class TensorError(Exception):
    """Base class for tensor-core failures."""


class ShapeError(TensorError, ValueError):
    pass


class UnsupportedPrimitiveError(TensorError, KeyError):
    pass


class GraphError(TensorError, RuntimeError):
    pass


class ContractError(TensorError, RuntimeError):
    pass


class NumericalError(TensorError, FloatingPointError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording the graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_op", "_ctx")
    __array_ufunc__ = None  # make ``ndarray * Tensor`` defer to Tensor.__rmul__

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._op: str | None = None
        self._ctx = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    backward: Callable
    masked: bool = False  # backward takes needs=(bool per input) and may skip work


_REGISTRY: dict[str, Primitive] = {}


def register(kind: str, masked: bool = False):
    def deco(pair):
        fwd, bwd = pair()
        _REGISTRY[kind] = Primitive(fwd, bwd, masked)
        return pair

    return deco


def primitive_kinds() -> list[str]:
    return sorted(_REGISTRY)


def apply_primitive(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Evaluate primitive ``kind`` on ``inputs`` and record it on the graph."""
    try:
        prim = _REGISTRY[kind]
    except KeyError:
        raise UnsupportedPrimitiveError(f"unsupported primitive: {kind!r}") from None
    ts = [as_tensor(x) for x in inputs]
    out_data, ctx = prim.forward(*[t.data for t in ts], **attrs)
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(t.requires_grad for t in ts):
        out.requires_grad = True
        out._parents = tuple(ts)
        out._op = kind
        out._ctx = (ctx, attrs)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: np.ndarray, b: np.ndarray, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}") from None


# elementwise binary ---------------------------------------------------------


@register("add")
def _add():
    def fwd(a, b):
        _broadcast_check(a, b, "add")
        return a + b, None

    def bwd(g, ctx, a, b, out):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return fwd, bwd


@register("sub")
def _sub():
    def fwd(a, b):
        _broadcast_check(a, b, "sub")
        return a - b, None

    def bwd(g, ctx, a, b, out):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return fwd, bwd


@register("mul", masked=True)
def _mul():
    def fwd(a, b):
        _broadcast_check(a, b, "mul")
        return a * b, None

    def bwd(g, ctx, a, b, out, needs):
        return (
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        )

    return fwd, bwd


@register("div")
def _div():
    def fwd(a, b):
        _broadcast_check(a, b, "div")
        return a / b, None

    def bwd(g, ctx, a, b, out):
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

    return fwd, bwd


@register("matmul", masked=True)
def _matmul():
    def fwd(a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        return a @ b, None

    def bwd(g, ctx, a, b, out, needs):
        return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)

    return fwd, bwd


# elementwise unary ----------------------------------------------------------


def _sigmoid_np(x):
    # exp of a non-positive argument only, so the lower tail stays positive down to x ~ -745
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@register("neg")
def _neg():
    return (lambda a: (-a, None)), (lambda g, ctx, a, out: (-g,))


@register("relu")
def _relu():
    def fwd(a):
        return np.maximum(a, 0.0), None

    def bwd(g, ctx, a, out):
        return (g * (a > 0),)

    return fwd, bwd


@register("sigmoid")
def _sigmoid():
    def fwd(a):
        return _sigmoid_np(a), None

    def bwd(g, ctx, a, out):
        return (g * out * (1.0 - out),)

    return fwd, bwd


@register("softplus")
def _softplus():
    def fwd(a):
        return np.logaddexp(0.0, a), None

    def bwd(g, ctx, a, out):
        return (g * _sigmoid_np(a),)

    return fwd, bwd


@register("exp")
def _exp():
    def fwd(a):
        return np.exp(a), None

    def bwd(g, ctx, a, out):
        return (g * out,)

    return fwd, bwd


@register("log")
def _log():
    def fwd(a):
        if np.any(a <= 0):
            raise NumericalError("log of non-positive value")
        return np.log(a), None

    def bwd(g, ctx, a, out):
        return (g / a,)

    return fwd, bwd


@register("square")
def _square():
    def fwd(a):
        return a * a, None

    def bwd(g, ctx, a, out):
        return (2.0 * a * g,)

    return fwd, bwd


@register("abs")
def _abs():
    def fwd(a):
        return np.abs(a), None

    def bwd(g, ctx, a, out):
        return (g * np.sign(a),)

    return fwd, bwd


# softmax family -------------------------------------------------------------


@register("softmax")
def _softmax():
    def fwd(a):
        z = a - a.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True), None

    def bwd(g, ctx, a, out):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return fwd, bwd


@register("log_softmax")
def _log_softmax():
    def fwd(a):
        z = a - a.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True)), None

    def bwd(g, ctx, a, out):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return fwd, bwd


# reductions and pooling -------------------------------------------------------


def _check_axis(a, axis, kind):
    if axis is None:
        return
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ShapeError(f"{kind}: axis {ax} out of range for ndim {a.ndim}")


def _expand_grad(g, a, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


@register("sum")
def _sum():
    def fwd(a, axis=None, keepdims=False):
        _check_axis(a, axis, "sum")
        return np.asarray(a.sum(axis=axis, keepdims=keepdims)), None

    def bwd(g, ctx, a, out, axis=None, keepdims=False):
        return (np.array(_expand_grad(g, a, axis, keepdims)),)

    return fwd, bwd


@register("mean")
def _mean():
    def fwd(a, axis=None, keepdims=False):
        _check_axis(a, axis, "mean")
        return np.asarray(a.mean(axis=axis, keepdims=keepdims)), None

    def bwd(g, ctx, a, out, axis=None, keepdims=False):
        n = a.size // max(out.size, 1) if axis is not None else a.size
        return (np.array(_expand_grad(g, a, axis, keepdims)) / n,)

    return fwd, bwd


@register("avg_pool")
def _avg_pool():
    # global average over one axis, dimension kept
    def fwd(a, axis=-1):
        _check_axis(a, axis, "avg_pool")
        return a.mean(axis=axis, keepdims=True), None

    def bwd(g, ctx, a, out, axis=-1):
        return (np.broadcast_to(g, a.shape) / a.shape[axis],)

    return fwd, bwd


@register("max_pool")
def _max_pool():
    # global max over one axis; ties route the gradient to the first index
    def fwd(a, axis=-1):
        _check_axis(a, axis, "max_pool")
        idx = np.expand_dims(a.argmax(axis=axis), axis)
        return np.take_along_axis(a, idx, axis=axis), idx

    def bwd(g, ctx, a, out, axis=-1):
        da = np.zeros_like(a)
        np.put_along_axis(da, ctx, g, axis=axis)
        return (da,)

    return fwd, bwd


@register("cumsum")
def _cumsum():
    def fwd(a, axis=-1):
        _check_axis(a, axis, "cumsum")
        return np.cumsum(a, axis=axis), None

    def bwd(g, ctx, a, out, axis=-1):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return fwd, bwd


# structural -------------------------------------------------------------------


@register("reshape")
def _reshape():
    def fwd(a, shape):
        try:
            return a.reshape(shape), None
        except ValueError:
            raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def bwd(g, ctx, a, out, shape):
        return (g.reshape(a.shape),)

    return fwd, bwd


@register("transpose")
def _transpose():
    def fwd(a, axes):
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"transpose: bad permutation {axes} for ndim {a.ndim}")
        return np.transpose(a, axes), None

    def bwd(g, ctx, a, out, axes):
        return (np.transpose(g, np.argsort(axes)),)

    return fwd, bwd


@register("concat")
def _concat():
    def fwd(*arrays, axis=0):
        ref = arrays[0]
        _check_axis(ref, axis, "concat")
        ax = axis % ref.ndim
        for x in arrays[1:]:
            if x.ndim != ref.ndim or any(
                x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
            ):
                raise ShapeError(f"concat: shapes {ref.shape} and {x.shape} differ off axis {axis}")
        bounds = np.cumsum([0] + [x.shape[ax] for x in arrays])
        return np.concatenate(arrays, axis=ax), (ax, bounds)

    def bwd(g, ctx, *rest, axis=0):
        ax, bounds = ctx
        return tuple(np.split(g, bounds[1:-1], axis=ax))

    return fwd, bwd


@register("conv1d", masked=True)
def _conv1d():
    """x: (B, C_in, L), w: (C_out, C_in, K), b: (C_out,)."""

    def fwd(x, w, b, stride=1, padding=0):
        if stride < 1 or padding < 0:
            raise ShapeError(f"conv1d: invalid stride={stride} padding={padding}")
        if x.ndim != 3 or w.ndim != 3 or b.shape != (w.shape[0],):
            raise ShapeError(f"conv1d: bad shapes x={x.shape} w={w.shape} b={b.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv1d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
        k = w.shape[2]
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
        if xp.shape[2] < k:
            raise ShapeError(f"conv1d: length {x.shape[2]} too short for kernel {k}")
        cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
        bsz, cin, lout, _ = cols.shape
        flat = cols.transpose(0, 2, 1, 3).reshape(bsz * lout, cin * k)
        out = flat @ w.reshape(w.shape[0], -1).T + b
        out = out.reshape(bsz, lout, -1).transpose(0, 2, 1)
        return np.ascontiguousarray(out), (flat, xp.shape, lout)

    def bwd(g, ctx, x, w, b, out, needs, stride=1, padding=0):
        flat, xp_shape, lout = ctx
        bsz, cout = g.shape[0], g.shape[1]
        k = w.shape[2]
        g2 = g.transpose(0, 2, 1).reshape(bsz * lout, cout)
        dw = (g2.T @ flat).reshape(w.shape)
        db = g2.sum(axis=0)
        if not needs[0]:
            return None, dw, db
        dcols = (g2 @ w.reshape(cout, -1)).reshape(bsz, lout, w.shape[1], k)
        dxp = np.zeros(xp_shape)
        for j in range(k):
            dxp[:, :, j : j + stride * (lout - 1) + 1 : stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        dx = dxp[:, :, padding : xp_shape[2] - padding] if padding else dxp
        return dx, dw, db

    return fwd, bwd


# ---------------------------------------------------------------------------
# wrappers


def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("sub", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def div(a, b):
    return apply_primitive("div", [a, b])


def neg(a):
    return apply_primitive("neg", [a])


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def relu(a):
    return apply_primitive("relu", [a])


def sigmoid(a):
    return apply_primitive("sigmoid", [a])


def softplus(a):
    return apply_primitive("softplus", [a])


def exp(a):
    return apply_primitive("exp", [a])


def log(a):
    return apply_primitive("log", [a])


def square(a):
    return apply_primitive("square", [a])


def tabs(a):
    return apply_primitive("abs", [a])


def softmax(a):
    return apply_primitive("softmax", [a])


def log_softmax(a):
    return apply_primitive("log_softmax", [a])


def tsum(a, axis=None, keepdims=False):
    return apply_primitive("sum", [a], axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return apply_primitive("mean", [a], axis=axis, keepdims=keepdims)


def avg_pool(a, axis=-1):
    return apply_primitive("avg_pool", [a], axis=axis)


def max_pool(a, axis=-1):
    return apply_primitive("max_pool", [a], axis=axis)


def cumsum(a, axis=-1):
    return apply_primitive("cumsum", [a], axis=axis)


def reshape(a, shape):
    return apply_primitive("reshape", [a], shape=tuple(shape))


def flatten(a):
    """Collapse every axis after the first."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def transpose(a, axes):
    return apply_primitive("transpose", [a], axes=tuple(axes))


def concat(tensors: Sequence, axis=0):
    return apply_primitive("concat", list(tensors), axis=axis)


def conv1d(x, w, b, stride=1, padding=0):
    return apply_primitive("conv1d", [x, w, b], stride=stride, padding=padding)


def clamp_min(a, floor: float):
    """max(a, floor) with gradient passing where a > floor."""
    return add(relu(sub(a, floor)), floor)


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf that requires it."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss was not produced by recorded primitives on tensors requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient reached {node.name or 'leaf'}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        ctx, attrs = node._ctx
        prim = _REGISTRY[node._op]
        args = [p.data for p in node._parents]
        if prim.masked:
            needs = tuple(p.requires_grad for p in node._parents)
            parent_grads = prim.backward(g, ctx, *args, node.data, needs, **attrs)
        else:
            parent_grads = prim.backward(g, ctx, *args, node.data, **attrs)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "OptimizerState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kw,
        )


def adam_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """One bias-corrected Adam update; clears the gradients afterwards."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError(f"optimizer tracks {len(state.m)} params, got {len(params)}")
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or '?'} has no gradient")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for i, p in enumerate(params):
        g = p.grad
        if state.m[i].shape != p.data.shape:
            raise ContractError(f"moment shape {state.m[i].shape} != param shape {p.data.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        # rebinding (not in-place) keeps arrays captured by older graphs intact
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"UCNV"
VERSION = 1


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    """Write ``{name: array}`` in the flat little-endian checkpoint format."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, arr in named.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(DTYPE)
        pos += 8 * n
    return out
