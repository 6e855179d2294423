import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rwkv_unet.nn import count_macs
from rwkv_unet.rwkv import (
    WKV_MACS_PER_ELEMENT,
    ChannelMixParams,
    SpatialMixParams,
    WkvParams,
    bi_wkv,
    channel_mix,
    q_shift,
    q_shift_tokens,
    spatial_mix,
)
from rwkv_unet.tensor import DTypeError, ShapeError, Tensor, gradcheck, sum_


def wkv_oracle(k, v, w, u):
    """O(T^2) evaluation of the bidirectional weighted mean, stabilised per query."""
    t_len, c = k.shape
    out = np.empty_like(v)
    idx = np.arange(t_len)
    for t in range(t_len):
        dist = np.abs(idx - t)
        logits = -(dist[:, None] - 1) / t_len * w[None, :] + k
        logits[t] = u + k[t]
        logits -= logits.max(axis=0)
        wt = np.exp(logits)
        out[t] = (wt * v).sum(axis=0) / wt.sum(axis=0)
    return out


def wkv_params(rng, c, scale=1.0):
    p = WkvParams.create(c, np.float64)
    p.w.data[:] = rng.standard_normal(c) * scale
    p.u.data[:] = rng.standard_normal(c) * scale
    return p


@given(t_len=st.integers(1, 40), c=st.integers(1, 5), scale=st.sampled_from([0.1, 1.0, 5.0]))
def test_bi_wkv_matches_quadratic_oracle(t_len, c, scale):
    rng = np.random.default_rng(t_len * 10 + c)
    p = wkv_params(rng, c, scale)
    k = rng.standard_normal((t_len, c)) * scale
    v = rng.standard_normal((t_len, c))
    got = bi_wkv(Tensor(k[None]), Tensor(v[None]), p).data[0]
    np.testing.assert_allclose(got, wkv_oracle(k, v, p.w.data, p.u.data), rtol=1e-9, atol=1e-12)


def test_bi_wkv_survives_huge_keys(rng):
    p = wkv_params(rng, 3)
    k = rng.standard_normal((1, 50, 3)) * 800.0  # exp(800) overflows float64
    v = rng.standard_normal((1, 50, 3))
    y = bi_wkv(Tensor(k), Tensor(v), p).data
    assert np.isfinite(y).all()
    np.testing.assert_allclose(y[0], wkv_oracle(k[0], v[0], p.w.data, p.u.data), rtol=1e-9, atol=1e-12)


@given(t_len=st.integers(1, 30), seed=st.integers(0, 1000))
def test_bi_wkv_is_a_convex_combination(t_len, seed):
    rng = np.random.default_rng(seed)
    p = wkv_params(rng, 4, 3.0)
    k = rng.standard_normal((2, t_len, 4)) * 3
    v = rng.standard_normal((2, t_len, 4))
    y = bi_wkv(Tensor(k), Tensor(v), p).data
    assert (y <= v.max(axis=1, keepdims=True) + 1e-12).all()
    assert (y >= v.min(axis=1, keepdims=True) - 1e-12).all()


def test_bi_wkv_invariant_to_key_offset(rng):
    p = wkv_params(rng, 4)
    k = rng.standard_normal((2, 12, 4))
    v = rng.standard_normal((2, 12, 4))
    offset = rng.standard_normal(4) * 50
    a = bi_wkv(Tensor(k), Tensor(v), p).data
    b = bi_wkv(Tensor(k + offset), Tensor(v), p).data
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_bi_wkv_single_token_returns_value(rng):
    p = wkv_params(rng, 3)
    v = rng.standard_normal((2, 1, 3))
    np.testing.assert_allclose(bi_wkv(Tensor(rng.standard_normal((2, 1, 3))), Tensor(v), p).data, v)


def test_bi_wkv_constant_value_is_fixed_point(rng):
    p = wkv_params(rng, 3)
    v = np.full((1, 9, 3), 2.5)
    np.testing.assert_allclose(bi_wkv(Tensor(rng.standard_normal((1, 9, 3))), Tensor(v), p).data, v)


def test_bi_wkv_symmetric_under_token_reversal(rng):
    p = wkv_params(rng, 3)
    k = rng.standard_normal((1, 10, 3))
    v = rng.standard_normal((1, 10, 3))
    fwd = bi_wkv(Tensor(k), Tensor(v), p).data
    rev = bi_wkv(Tensor(k[:, ::-1].copy()), Tensor(v[:, ::-1].copy()), p).data
    np.testing.assert_allclose(fwd, rev[:, ::-1], atol=1e-12)


@pytest.mark.parametrize("t_len,scale", [(1, 1.0), (2, 1.0), (7, 1.0), (16, 3.0)])
def test_bi_wkv_gradients(t_len, scale, rng):
    p = wkv_params(rng, 3, scale)
    k = Tensor(rng.standard_normal((2, t_len, 3)) * scale, requires_grad=True)
    v = Tensor(rng.standard_normal((2, t_len, 3)), requires_grad=True)
    probe = rng.standard_normal((2, t_len, 3))
    err = gradcheck(lambda a, b, w, u: sum_(bi_wkv(a, b, p) * probe), [k, v, p.w, p.u], eps=1e-6)
    assert err < 1e-6


def test_bi_wkv_mac_count(rng):
    p = wkv_params(rng, 5)
    with count_macs() as sink:
        bi_wkv(Tensor(np.zeros((3, 7, 5))), Tensor(np.zeros((3, 7, 5))), p)
    assert sink == {"wkv": 3 * 7 * 5 * WKV_MACS_PER_ELEMENT}


def test_bi_wkv_input_errors(rng):
    p = wkv_params(rng, 3)
    with pytest.raises(ShapeError):
        bi_wkv(Tensor(np.zeros((1, 4, 3))), Tensor(np.zeros((1, 5, 3))), p)
    with pytest.raises(ShapeError):
        bi_wkv(Tensor(np.zeros((1, 4, 2))), Tensor(np.zeros((1, 4, 2))), p)
    with pytest.raises(ShapeError):
        bi_wkv(Tensor(np.zeros((1, 0, 3))), Tensor(np.zeros((1, 0, 3))), p)
    with pytest.raises(DTypeError):
        bi_wkv(Tensor(np.zeros((1, 4, 3), np.float32)), Tensor(np.zeros((1, 4, 3), np.float32)), p)
    bad = np.zeros((1, 4, 3))
    bad[0, 1, 1] = np.nan
    with pytest.raises(FloatingPointError):
        bi_wkv(Tensor(bad), Tensor(np.zeros((1, 4, 3))), p)


def q_shift_oracle(x):
    n, c, h, w = x.shape
    q = c // 4
    out = np.zeros_like(x)
    for ch in range(c):
        quarter = ch // q
        for i in range(h):
            for j in range(w):
                si, sj = {0: (i, j - 1), 1: (i, j + 1), 2: (i - 1, j), 3: (i + 1, j)}[quarter]
                if 0 <= si < h and 0 <= sj < w:
                    out[:, ch, i, j] = x[:, ch, si, sj]
    return out


@given(c4=st.integers(1, 3), h=st.integers(1, 6), w=st.integers(1, 6))
def test_q_shift_matches_pixel_oracle(c4, h, w):
    x = np.random.default_rng(h * w).standard_normal((2, 4 * c4, h, w))
    np.testing.assert_array_equal(q_shift(Tensor(x)).data, q_shift_oracle(x))
    tokens = x.transpose(0, 2, 3, 1).reshape(2, h * w, 4 * c4)
    shifted = q_shift_tokens(Tensor(tokens), h, w).data
    np.testing.assert_array_equal(shifted, q_shift_oracle(x).transpose(0, 2, 3, 1).reshape(2, h * w, 4 * c4))


def test_q_shift_gradient_is_adjoint(rng):
    x = Tensor(rng.standard_normal((1, 8, 4, 5)), requires_grad=True)
    probe = rng.standard_normal((1, 8, 4, 5))
    assert gradcheck(lambda a: sum_(q_shift(a) * probe), [x], eps=1e-6) < 1e-8
    tok = Tensor(rng.standard_normal((2, 20, 8)), requires_grad=True)
    probe_t = rng.standard_normal((2, 20, 8))
    assert gradcheck(lambda a: sum_(q_shift_tokens(a, 4, 5) * probe_t), [tok], eps=1e-6) < 1e-8


def test_q_shift_rejects_bad_channels():
    with pytest.raises(ShapeError):
        q_shift(Tensor(np.zeros((1, 6, 3, 3))))
    with pytest.raises(ShapeError):
        q_shift_tokens(Tensor(np.zeros((1, 9, 8))), 3, 4)


def test_spatial_mix_gradients(rng):
    p = SpatialMixParams.create(8, rng, np.float64)
    x = Tensor(rng.standard_normal((2, 12, 8)), requires_grad=True)
    probe = rng.standard_normal((2, 12, 8))
    leaves = [x, p.key.weight, p.value.weight, p.receptance.weight, p.output.weight, p.wkv.w, p.wkv.u, p.norm.gamma]
    assert gradcheck(lambda *a: sum_(spatial_mix(x, 3, 4, p) * probe), leaves, eps=1e-6) < 1e-5


def test_channel_mix_gradients(rng):
    p = ChannelMixParams.create(4, rng, hidden_ratio=2.0, dtype=np.float64)
    for lin in (p.key, p.value, p.receptance):
        lin.weight.data[:] = rng.standard_normal(lin.weight.shape) * 0.5
    x = Tensor(rng.standard_normal((1, 6, 4)), requires_grad=True)
    probe = rng.standard_normal((1, 6, 4))
    leaves = [x, p.key.weight, p.value.weight, p.receptance.weight, p.norm.beta]
    assert gradcheck(lambda *a: sum_(channel_mix(x, 2, 3, p) * probe), leaves, eps=1e-6) < 1e-5


def test_channel_mix_hidden_width(rng):
    p = ChannelMixParams.create(12, rng, hidden_ratio=4)
    assert p.key.weight.shape == (48, 12)
    assert p.value.weight.shape == (12, 48)
    with pytest.raises(ValueError):
        ChannelMixParams.create(12, rng, hidden_ratio=0)


def test_mixers_reject_mismatched_grids(rng):
    sp = SpatialMixParams.create(8, rng)
    with pytest.raises(ShapeError):
        spatial_mix(Tensor(np.zeros((1, 12, 8), np.float32)), 3, 5, sp)
    with pytest.raises(ShapeError):
        spatial_mix(Tensor(np.zeros((1, 12, 4), np.float32)), 3, 4, sp)
    cm = ChannelMixParams.create(8, rng)
    with pytest.raises(ShapeError):
        channel_mix(Tensor(np.zeros((12, 8), np.float32)), 3, 4, cm)
