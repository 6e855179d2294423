"""RWKV mixing: quarter-channel token shift, bidirectional WKV, spatial and channel mix.

Tokens are laid out ``N x T x C`` with ``T = H * W`` in row-major pixel order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import LayerNormParams, LinearParams, layer_norm, linear, record_macs
from .tensor import DTypeError, ShapeError, Tensor, from_op, mul, relu, sigmoid, square

# MAC-equivalents charged per token and channel for one bi_wkv evaluation
WKV_MACS_PER_ELEMENT = 8

_NEG = -1e38  # stands in for log(0); keeps exp() arguments finite


@dataclass
class WkvParams:
    w: Tensor  # spatial decay, scaled by 1/T inside the kernel
    u: Tensor  # bonus for the query token itself

    @classmethod
    def create(cls, dim: int, dtype=np.float32) -> "WkvParams":
        return cls(
            Tensor(np.linspace(-1.0, 0.0, dim).astype(dtype), requires_grad=True),
            Tensor(np.full(dim, 0.5, dtype=dtype), requires_grad=True),
        )

    @property
    def dim(self) -> int:
        return self.w.shape[0]


@dataclass
class SpatialMixParams:
    norm: LayerNormParams
    receptance: LinearParams
    key: LinearParams
    value: LinearParams
    output: LinearParams
    wkv: WkvParams

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, dtype=np.float32) -> "SpatialMixParams":
        return cls(
            LayerNormParams.create(dim, dtype),
            LinearParams.create(dim, dim, rng, dtype),
            LinearParams.create(dim, dim, rng, dtype),
            LinearParams.create(dim, dim, rng, dtype),
            LinearParams.create(dim, dim, rng, dtype),
            WkvParams.create(dim, dtype),
        )

    @property
    def dim(self) -> int:
        return self.norm.normalized_dim


@dataclass
class ChannelMixParams:
    norm: LayerNormParams
    key: LinearParams  # C -> hC
    value: LinearParams  # hC -> C
    receptance: LinearParams

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, hidden_ratio: float = 4.0, dtype=np.float32) -> "ChannelMixParams":
        if hidden_ratio <= 0:
            raise ValueError(f"hidden ratio must be positive, got {hidden_ratio}")
        hidden = int(round(dim * hidden_ratio))
        return cls(
            LayerNormParams.create(dim, dtype),
            LinearParams.create(dim, hidden, rng, dtype),
            LinearParams.create(hidden, dim, rng, dtype),
            LinearParams.create(dim, dim, rng, dtype),
        )

    @property
    def dim(self) -> int:
        return self.norm.normalized_dim


# -- Q-Shift ------------------------------------------------------------------------


def _shift(xd: np.ndarray, c_ax: int, h_ax: int, w_ax: int, reverse: bool) -> np.ndarray:
    """Shift channel quarters right/left/down/up by one pixel with zero fill.

    ``reverse`` applies the adjoint (opposite directions), used for gradients.
    """
    c = xd.shape[c_ax]
    q = c // 4
    out = np.zeros_like(xd)

    def ix(ch: slice, h: slice = slice(None), w: slice = slice(None)):
        idx = [slice(None)] * xd.ndim
        idx[c_ax], idx[h_ax], idx[w_ax] = ch, h, w
        return tuple(idx)

    lo, hi = slice(1, None), slice(None, -1)
    quarters = [slice(0, q), slice(q, 2 * q), slice(2 * q, 3 * q), slice(3 * q, 4 * q)]
    # (destination, source) slices along (h, w) for each quarter
    moves = [
        ((slice(None), lo), (slice(None), hi)),  # right
        ((slice(None), hi), (slice(None), lo)),  # left
        ((lo, slice(None)), (hi, slice(None))),  # down
        ((hi, slice(None)), (lo, slice(None))),  # up
    ]
    for ch, (dst, src) in zip(quarters, moves):
        if reverse:
            dst, src = src, dst
        out[ix(ch, *dst)] = xd[ix(ch, *src)]
    return out


def q_shift(x: Tensor) -> Tensor:
    """Quarter-channel one-pixel shift of an NCHW map."""
    if x.ndim != 4:
        raise ShapeError(f"q_shift expects NCHW input, got shape {x.shape}")
    if x.shape[1] % 4:
        raise ShapeError(f"q_shift needs channels divisible by 4, got {x.shape[1]}")
    return from_op(_shift(x.data, 1, 2, 3, False), (x,), lambda g: (_shift(g, 1, 2, 3, True),))


def q_shift_tokens(x: Tensor, h: int, w: int) -> Tensor:
    """Same shift applied to ``N x T x C`` tokens of an ``h x w`` grid."""
    n, t, c = x.shape
    if t != h * w:
        raise ShapeError(f"token count {t} does not match grid {h}x{w}")
    if c % 4:
        raise ShapeError(f"q_shift needs channels divisible by 4, got {c}")
    shape = x.shape
    grid = x.data.reshape(n, h, w, c)

    def _bw(g):
        return (_shift(g.reshape(n, h, w, c), 3, 1, 2, True).reshape(shape),)

    return from_op(_shift(grid, 3, 1, 2, False).reshape(shape), (x,), _bw)


# -- bidirectional WKV -----------------------------------------------------------------


def _scan(k: np.ndarray, v: np.ndarray, decay: np.ndarray, reverse: bool, with_moments: bool):
    """One-directional decayed sums over tokens strictly before t (or after, if reverse).

    Returns per-token (num, den, exponent[, dnum, dden]) with the true sums equal to
    ``num * exp(exponent)``; ``dnum``/``dden`` carry the distance-weighted sums
    needed for the decay gradient.
    """
    b, t_len, c = k.shape
    dt = k.dtype
    a = np.zeros((b, c), dt)
    bb = np.zeros((b, c), dt)
    p = np.full((b, c), _NEG, dt)
    da = np.zeros((b, c), dt)
    db = np.zeros((b, c), dt)
    num = np.empty_like(k)
    den = np.empty_like(k)
    exps = np.empty_like(k)
    dnum = np.empty_like(k) if with_moments else None
    dden = np.empty_like(k) if with_moments else None
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for t in order:
        num[:, t] = a
        den[:, t] = bb
        exps[:, t] = p
        if with_moments:
            dnum[:, t] = da
            dden[:, t] = db
        kt = k[:, t]
        pd = p - decay
        pn = np.maximum(pd, kt)
        e1 = np.exp(pd - pn)
        e2 = np.exp(kt - pn)
        if with_moments:
            da = (da + a) * e1
            db = (db + bb) * e1
        a = a * e1 + e2 * v[:, t]
        bb = bb * e1 + e2
        p = pn
    return num, den, exps, dnum, dden


def _adjoint_scan(kq: np.ndarray, gt: np.ndarray, ht: np.ndarray, decay: np.ndarray, reverse: bool):
    """Decayed sums of ``gt``/``ht`` over tokens strictly before (or after) each i.

    Each token t enters with log-weight ``kq[:, t]`` (= -q_t); results are returned
    as (sum_g, sum_h, exponent) with true value ``sum * exp(exponent)``.
    """
    b, t_len, c = gt.shape
    dt = gt.dtype
    sg = np.zeros((b, c), dt)
    sh = np.zeros((b, c), dt)
    r = np.full((b, c), _NEG, dt)
    out_g = np.empty_like(gt)
    out_h = np.empty_like(gt)
    out_r = np.empty_like(gt)
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for t in order:
        out_g[:, t] = sg
        out_h[:, t] = sh
        out_r[:, t] = r
        lt = kq[:, t]
        rd = r - decay
        rn = np.maximum(rd, lt)
        f1 = np.exp(rd - rn)
        f2 = np.exp(lt - rn)
        sg = sg * f1 + gt[:, t] * f2
        sh = sh * f1 + ht[:, t] * f2
        r = rn
    return out_g, out_h, out_r


def bi_wkv(k: Tensor, v: Tensor, p: WkvParams) -> Tensor:
    """Bidirectional WKV over ``(..., T, C)`` keys/values.

    For token t and channel c the output is the weighted mean of ``v[i, c]`` with
    weights ``exp(-(|t-i|-1)/T * w_c + k[i, c])`` for i != t and
    ``exp(u_c + k[t, c])`` for i == t. Evaluated by two linear scans that keep a
    running maximum exponent, so no intermediate exp overflows.
    """
    if k.shape != v.shape:
        raise ShapeError(f"bi_wkv: key shape {k.shape} != value shape {v.shape}")
    if k.ndim < 2:
        raise ShapeError(f"bi_wkv expects (..., T, C) inputs, got {k.shape}")
    t_len, c = k.shape[-2:]
    if t_len == 0:
        raise ShapeError("bi_wkv needs at least one token")
    if p.w.shape != (c,) or p.u.shape != (c,):
        raise ShapeError(f"bi_wkv: decay/bonus shapes {p.w.shape}/{p.u.shape} do not match C={c}")
    if len({k.dtype, v.dtype, p.w.dtype, p.u.dtype}) > 1:
        raise DTypeError("bi_wkv: all inputs must share one dtype")
    if not (np.isfinite(k.data).all() and np.isfinite(v.data).all()):
        raise FloatingPointError("bi_wkv: non-finite key or value input")

    shape = k.shape
    kd = k.data.reshape(-1, t_len, c)
    vd = v.data.reshape(-1, t_len, c)
    decay = p.w.data / t_len
    u = p.u.data
    record_macs("wkv", kd.shape[0] * t_len * c * WKV_MACS_PER_ELEMENT)

    need_grad = any(x.requires_grad for x in (k, v, p.w, p.u))
    nf, df, pf, dnf, ddf = _scan(kd, vd, decay, False, need_grad)
    nr, dr, pr, dnr, ddr = _scan(kd, vd, decay, True, need_grad)
    uk = u + kd
    q = np.maximum(np.maximum(pf, pr), uk)
    ef = np.exp(pf - q)
    er = np.exp(pr - q)
    es = np.exp(uk - q)
    num = nf * ef + nr * er + es * vd
    den = df * ef + dr * er + es
    y = num / den

    def _bw(g):
        g = g.reshape(kd.shape)
        gt = g / den  # gradient wrt num, scaled by exp(q)
        ht = gt * y
        gu = (es * gt * (vd - y)).sum(axis=(0, 1))
        gdecay = -((gt * (dnf * ef + dnr * er)) - (ht * (ddf * ef + ddr * er))).sum(axis=(0, 1))
        gw = gdecay / t_len
        lq = -q
        lg, lh, lr = _adjoint_scan(lq, gt, ht, decay, False)
        rg, rh, rr = _adjoint_scan(lq, gt, ht, decay, True)
        el = np.exp(lr + kd)
        erv = np.exp(rr + kd)
        pg = lg * el + rg * erv + es * gt
        ph = lh * el + rh * erv + es * ht
        gk = vd * pg - ph
        return gk.reshape(shape), pg.reshape(shape), gw, gu

    return from_op(y.reshape(shape), (k, v, p.w, p.u), _bw)


# -- mixing sublayers -------------------------------------------------------------------


def _check_tokens(x: Tensor, dim: int, h: int, w: int, who: str) -> None:
    if x.ndim != 3:
        raise ShapeError(f"{who} expects N x T x C tokens, got shape {x.shape}")
    if x.shape[2] != dim:
        raise ShapeError(f"{who}: token shape {x.shape} does not match mixing dim {dim}")
    if x.shape[1] != h * w:
        raise ShapeError(f"{who}: {x.shape[1]} tokens for a {h}x{w} grid")


def spatial_mix(x: Tensor, h: int, w: int, p: SpatialMixParams) -> Tensor:
    """LayerNorm, Q-Shift, R/K/V projections, bi_wkv, receptance gate, output projection.

    The caller adds the residual.
    """
    _check_tokens(x, p.dim, h, w, "spatial_mix")
    xs = q_shift_tokens(layer_norm(x, p.norm), h, w)
    r = linear(xs, p.receptance)
    k = linear(xs, p.key)
    v = linear(xs, p.value)
    return linear(mul(sigmoid(r), bi_wkv(k, v, p.wkv)), p.output)


def channel_mix(x: Tensor, h: int, w: int, p: ChannelMixParams) -> Tensor:
    """LayerNorm, Q-Shift, squared-ReLU keyed expansion gated by sigmoid receptance.

    The caller adds the residual.
    """
    _check_tokens(x, p.dim, h, w, "channel_mix")
    xs = q_shift_tokens(layer_norm(x, p.norm), h, w)
    hidden = square(relu(linear(xs, p.key)))
    return mul(sigmoid(linear(xs, p.receptance)), linear(hidden, p.value))
