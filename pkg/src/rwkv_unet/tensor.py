"""Dense N-D tensors with a reverse-mode autodiff tape.

Every differentiable primitive builds its output through :func:`from_op`, which
records a node on the active :class:`Tape` whenever an input requires grad.
:func:`backward` walks that tape once, in reverse execution order.
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
DEBUG = os.environ.get("RWKV_UNET_DEBUG", "") not in ("", "0")

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class ShapeError(ValueError):
    pass


class DTypeError(TypeError):
    pass


class TapeError(RuntimeError):
    pass


class _Node:
    __slots__ = ("inputs", "out", "backward")

    def __init__(self, inputs, out, backward):
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of executed primitives. Single-threaded."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextmanager
def fresh_tape() -> Iterator[Tape]:
    """Run a block on its own tape, restoring the previous one afterwards."""
    prev = getattr(_local, "tape", None)
    tape = Tape()
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            if dtype is None and arr.dtype.kind in "biu":
                arr = arr.astype(np.float32)
            else:
                raise DTypeError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def from_op(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap a primitive's output and record it on the tape when needed.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor(data)
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError("non-finite output from finite inputs")
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        tape = current_tape()
        node = _Node(tuple(inputs), out, backward_fn)
        tape.nodes.append(node)
        out.requires_grad = True
        out._node = node
        out._tape = tape
    return out


def _release(node: _Node) -> None:
    # break the out -> node -> out cycle so activations are freed without the cyclic GC
    node.out = node.backward = None
    node.inputs = ()


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from scalar ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if loss._node is None or tape is None:
        raise TapeError("loss was not produced on a tape (no input requires grad)")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        for inp in node.inputs:
            if inp.requires_grad and inp._node is None:
                leaves.setdefault(id(inp), inp)
        if g is None:
            _release(node)
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(f"internal: gradient shape {gi.shape} for input {inp.shape}")
            if inp._node is None:
                gi = gi.astype(inp.dtype, copy=False)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        _release(node)
    for leaf in leaves.values():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    tape.nodes.clear()
    tape.consumed = True


def _check_dtypes(*ts: Tensor) -> None:
    dts = {t.dtype for t in ts}
    if len(dts) > 1:
        raise DTypeError(f"dtype mismatch: {' vs '.join(str(d) for d in dts)}")


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    _check_dtypes(a, b)
    return a, b


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "add")
    return from_op(a.data + b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "sub")
    return from_op(a.data - b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return from_op(
        ad * bd,
        (a, b),
        lambda g: (
            unbroadcast(g * bd, a.shape) if a.requires_grad else None,
            unbroadcast(g * ad, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return from_op(
        out,
        (a, b),
        lambda g: (
            unbroadcast(g / bd, a.shape) if a.requires_grad else None,
            unbroadcast(-g * out / bd, b.shape) if b.requires_grad else None,
        ),
    )


def neg(a: Tensor) -> Tensor:
    return from_op(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return from_op(x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return from_op(out, (a,), lambda g: (g / (2.0 * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return from_op(np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # exp of a non-positive argument only, so no overflow warnings
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)
    return from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    z = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)
    return from_op(out.astype(x.dtype, copy=False), (a,), lambda g: (g * sig,))


def relu(a: Tensor) -> Tensor:
    x = a.data
    mask = x > 0
    return from_op(np.where(mask, x, 0).astype(x.dtype, copy=False), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    out = (x * cdf).astype(x.dtype, copy=False)

    def _bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return from_op(out, (a,), _bw)


# -- contractions and reductions ----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def _bw(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return from_op(ad @ bd, (a, b), _bw)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return from_op(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), _bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / n)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return from_op(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return from_op(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# -- shape manipulation ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from None
    src = a.shape
    return from_op(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    _check_dtypes(*tensors)
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {ref.shape} and {t.shape} disagree off-axis")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return from_op(
        np.concatenate([t.data for t in tensors], axis=ax),
        tuple(tensors),
        lambda g: tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=ax)),
    )


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax] or any(s <= 0 for s in sizes):
        raise ShapeError(f"split sizes {list(sizes)} do not partition axis {axis} of shape {a.shape}")
    starts = np.concatenate([[0], np.cumsum(sizes)])
    outs = []
    for lo, hi in zip(starts[:-1], starts[1:]):
        outs.append(slice_axis(a, int(lo), int(hi), ax))
    return outs


def slice_axis(a: Tensor, lo: int, hi: int, axis: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(lo, hi)
    idx = tuple(idx)
    shape, dtype = a.shape, a.dtype

    def _bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return from_op(np.ascontiguousarray(a.data[idx]), (a,), _bw)


# -- gradient checking ------------------------------------------------------------


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between reverse-mode and central-difference grads.

    ``fn`` must return a scalar. Relative error per input is
    ``|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)``. When
    ``max_coords`` is set only that many coordinates per input are probed.
    """
    for t in inputs:
        t.grad = None
    with fresh_tape():
        loss = fn(*inputs)
        backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad.reshape(-1)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        with no_grad():
            for j, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + eps
                hi = fn(*inputs).item()
                flat[i] = orig - eps
                lo = fn(*inputs).item()
                flat[i] = orig
                numeric[j] = (hi - lo) / (2 * eps)
        a = analytic[coords]
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(a - numeric) / scale))
    return worst
