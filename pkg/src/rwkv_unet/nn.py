"""Layer primitives: convolution, layer norm, linear maps, resizing, unfold/fold."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import _kernels
from .tensor import DTypeError, ShapeError, Tensor, from_op

LN_EPS = 1e-5

# compiled depthwise kernels are used when available; tests flip this to compare paths
_use_compiled = True


@contextmanager
def reference_kernels() -> Iterator[None]:
    """Force the pure-numpy depthwise path inside the block."""
    global _use_compiled
    prev, _use_compiled = _use_compiled, False
    try:
        yield
    finally:
        _use_compiled = prev

# MAC tallies reported by the primitives while a counter is active
_mac_sinks: list[dict[str, int]] = []


@contextmanager
def count_macs() -> Iterator[dict[str, int]]:
    """Collect multiply-accumulate counts of executed primitives, keyed by op kind."""
    sink: dict[str, int] = {}
    _mac_sinks.append(sink)
    try:
        yield sink
    finally:
        _mac_sinks.remove(sink)


def record_macs(kind: str, n: int) -> None:
    for sink in _mac_sinks:
        sink[kind] = sink.get(kind, 0) + int(n)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


@dataclass
class Conv2dParams:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int
    padding: int
    groups: int
    weight: Tensor
    bias: Tensor | None = None

    @classmethod
    def create(
        cls,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 1,
        stride: int = 1,
        groups: int = 1,
        bias: bool = True,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
        std: float | None = None,
    ) -> "Conv2dParams":
        """Same-padded convolution; odd kernels only.

        Weights are truncated normal with ``std`` (default ``sqrt(2 / fan_in)``).
        """
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"same padding needs an odd kernel, got {kernel_size}")
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        if groups not in (1, in_channels) or (groups != 1 and in_channels != out_channels):
            raise ValueError(f"groups must be 1 or depthwise (== in == out channels), got {groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        std = float(np.sqrt(2.0 / fan_in)) if std is None else std
        w = trunc_normal(rng, (out_channels, in_channels // groups, kernel_size, kernel_size), std, dtype)
        b = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None
        return cls(
            in_channels, out_channels, kernel_size, stride, (kernel_size - 1) // 2, groups,
            Tensor(w, requires_grad=True), b,
        )

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels and self.groups > 1

    def out_extent(self, n: int) -> int:
        return (n + 2 * self.padding - self.kernel_size) // self.stride + 1


@dataclass
class LayerNormParams:
    normalized_dim: int
    gamma: Tensor
    beta: Tensor
    epsilon: float = LN_EPS

    @classmethod
    def create(cls, dim: int, dtype=np.float32) -> "LayerNormParams":
        return cls(
            dim,
            Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
        )


@dataclass
class LinearParams:
    """Bias-free ``out x in`` projection applied on the last axis."""

    weight: Tensor

    @classmethod
    def create(cls, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32) -> "LinearParams":
        return cls(Tensor(trunc_normal(rng, (out_dim, in_dim), dtype=dtype), requires_grad=True))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def linear(x: Tensor, p: LinearParams) -> Tensor:
    w = p.weight
    if x.dtype != w.dtype:
        raise DTypeError(f"linear: input {x.dtype} vs weight {w.dtype}")
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    record_macs("linear", x2.shape[0] * wd.shape[0] * wd.shape[1])

    def _bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if w.requires_grad else None
        return gx, gw

    return from_op((x2 @ wd.T).reshape(*lead, wd.shape[0]), (x, w), _bw)


# -- convolution --------------------------------------------------------------------


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"conv2d: input shape {x.shape} has {x.shape[1]} channels, params expect {p.in_channels}")
    if p.stride < 1:
        raise ValueError(f"stride must be >= 1, got {p.stride}")
    if x.dtype != p.weight.dtype:
        raise DTypeError(f"conv2d: input {x.dtype} vs weight {p.weight.dtype}")
    n, _, h, w = x.shape
    ho, wo = p.out_extent(h), p.out_extent(w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input extents {h}x{w} too small for kernel {p.kernel_size}")
    k2 = p.kernel_size * p.kernel_size
    record_macs("conv", n * ho * wo * p.out_channels * (p.in_channels // p.groups) * k2)
    if p.depthwise:
        return _conv_depthwise(x, p, ho, wo)
    if p.groups != 1:
        raise ValueError(f"unsupported group count {p.groups}")
    if p.kernel_size == 1 and p.padding == 0:
        return _conv_pointwise(x, p, ho, wo)
    return _conv_dense(x, p, ho, wo)


def _bias_parents(p: Conv2dParams):
    return (p.weight,) + ((p.bias,) if p.bias is not None else ())


def _conv_pointwise(x: Tensor, p: Conv2dParams, ho: int, wo: int) -> Tensor:
    s = p.stride
    xd = x.data
    xs = xd if s == 1 else np.ascontiguousarray(xd[:, :, ::s, ::s])
    n, ci = xs.shape[:2]
    x3 = xs.reshape(n, ci, ho * wo)
    w2 = p.weight.data.reshape(p.out_channels, ci)
    out = w2 @ x3
    if p.bias is not None:
        out += p.bias.data[:, None]

    def _bw(g):
        g3 = g.reshape(n, p.out_channels, ho * wo)
        gx = None
        if x.requires_grad:
            gxs = (w2.T @ g3).reshape(n, ci, ho, wo)
            if s == 1:
                gx = gxs
            else:
                gx = np.zeros_like(xd)
                gx[:, :, ::s, ::s] = gxs
        gw = np.tensordot(g3, x3, axes=([0, 2], [0, 2])).reshape(p.weight.shape)
        grads = [gx, gw]
        if p.bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return grads

    return from_op(out.reshape(n, p.out_channels, ho, wo), (x,) + _bias_parents(p), _bw)


def _pad(xd: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return xd
    return np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _conv_dense(x: Tensor, p: Conv2dParams, ho: int, wo: int) -> Tensor:
    k, s, pad = p.kernel_size, p.stride, p.padding
    xd = x.data
    n, ci, h, w = xd.shape
    xp = _pad(xd, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, ci * k * k)
    w2 = p.weight.data.reshape(p.out_channels, ci * k * k)
    out = cols @ w2.T
    if p.bias is not None:
        out += p.bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, p.out_channels).transpose(0, 3, 1, 2))

    def _bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, p.out_channels)
        gw = (g2.T @ cols).reshape(p.weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(n, ho, wo, ci, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
            gx = np.ascontiguousarray(gx)
        grads = [gx, gw]
        if p.bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return from_op(out, (x,) + _bias_parents(p), _bw)


def _conv_depthwise(x: Tensor, p: Conv2dParams, ho: int, wo: int) -> Tensor:
    k, s, pad = p.kernel_size, p.stride, p.padding
    xd = x.data
    n, c, h, w = xd.shape
    xp = _pad(xd, pad)
    wd = p.weight.data.reshape(c, k, k)
    out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
    he, we = s * (ho - 1) + 1, s * (wo - 1) + 1
    fast = _kernels.dw_forward is not None and _use_compiled
    if fast:
        _kernels.dw_forward(xp, np.ascontiguousarray(wd), s, ho, wo, out)
    else:
        for i in range(k):
            for j in range(k):
                out += wd[:, i, j][:, None, None] * xp[:, :, i : i + he : s, j : j + we : s]
    if p.bias is not None:
        out += p.bias.data[:, None, None]

    def _crop(gxp):
        return np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w]) if pad else gxp

    def _bw_compiled(g):
        g = np.ascontiguousarray(g)
        gw = np.zeros((c, k, k), dtype=xd.dtype)
        scatter = x.requires_grad and s != 1
        gxp = np.zeros_like(xp) if scatter else np.zeros((1, 1, 1, 1), dtype=xd.dtype)
        _kernels.dw_backward(xp, np.ascontiguousarray(wd), g, s, gxp, gw, scatter)
        if not x.requires_grad:
            return None, gw
        if scatter:
            return _crop(gxp), gw
        # stride 1: the input gradient is a same-padded correlation with the flipped kernel
        gx = np.zeros((n, c, h, w), dtype=xd.dtype)
        _kernels.dw_forward(_pad(g, pad), np.ascontiguousarray(wd[:, ::-1, ::-1]), 1, h, w, gx)
        return gx, gw

    def _bw_reference(g):
        gw = np.empty((c, k, k), dtype=xd.dtype)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(k):
            for j in range(k):
                win = xp[:, :, i : i + he : s, j : j + we : s]
                gw[:, i, j] = np.einsum("nchw,nchw->c", g, win)
                if gxp is not None:
                    gxp[:, :, i : i + he : s, j : j + we : s] += wd[:, i, j][:, None, None] * g
        return (_crop(gxp) if gxp is not None else None), gw

    def _bw(g):
        gx, gw = _bw_compiled(g) if fast else _bw_reference(g)
        grads = [gx, gw.reshape(p.weight.shape)]
        if p.bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return from_op(out, (x,) + _bias_parents(p), _bw)


# -- normalization -------------------------------------------------------------------


def layer_norm(x: Tensor, p: LayerNormParams, axis: int = -1) -> Tensor:
    """Normalize over the channel ``axis`` (last for tokens, 1 for NCHW)."""
    ax = axis % x.ndim
    if x.shape[ax] != p.normalized_dim:
        raise ShapeError(f"layer_norm: axis {axis} of shape {x.shape} != normalized_dim {p.normalized_dim}")
    xd = x.data
    bshape = [1] * x.ndim
    bshape[ax] = p.normalized_dim
    gamma = p.gamma.data.reshape(bshape)
    beta = p.beta.data.reshape(bshape)
    mu = xd.mean(axis=ax, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.epsilon)
    xhat = xc * inv
    out = xhat * gamma + beta
    red = tuple(i for i in range(x.ndim) if i != ax)

    def _bw(g):
        gxhat = g * gamma
        gx = None
        if x.requires_grad:
            m1 = gxhat.mean(axis=ax, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=ax, keepdims=True)
            gx = inv * (gxhat - m1 - xhat * m2)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return from_op(out.astype(xd.dtype, copy=False), (x, p.gamma, p.beta), _bw)


# -- unfold / fold ----------------------------------------------------------------------


def unfold(x: Tensor) -> Tensor:
    """NCHW map to N x C x (H*W) token sequence, row-major token order."""
    if x.ndim != 4:
        raise ShapeError(f"unfold expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w)


def fold(x: Tensor, h: int, w: int) -> Tensor:
    if x.ndim != 3 or x.shape[2] != h * w:
        raise ShapeError(f"fold: token shape {x.shape} does not hold a {h}x{w} map")
    return x.reshape(x.shape[0], x.shape[1], h, w)


# -- resizing -----------------------------------------------------------------------------


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """``n_out x n_in`` 1-D linear interpolation weights, half-pixel centers."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects NCHW input, got shape {x.shape}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return from_op(x.data.copy(), (x,), lambda g: (g,))
    rh = bilinear_matrix(h, out_h, x.dtype)
    rw = bilinear_matrix(w, out_w, x.dtype)
    out = rh @ (x.data @ rw.T)
    return from_op(out, (x,), lambda g: (rh.T @ (g @ rw),))


def resize_bilinear_array(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-array bilinear resize of an ``H x W`` or ``C x H x W`` image."""
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()
    return bilinear_matrix(h, out_h, img.dtype) @ img @ bilinear_matrix(w, out_w, img.dtype).T


def resize_nearest_array(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape[-2:]
    rows = np.minimum((np.arange(out_h) * (h / out_h)).astype(int), h - 1)
    cols = np.minimum((np.arange(out_w) * (w / out_w)).astype(int), w - 1)
    return mask[..., rows[:, None], cols[None, :]]
