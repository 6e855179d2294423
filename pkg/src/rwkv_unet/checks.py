"""Finite-difference gradient checks over every differentiable building block (float64, toy shapes)."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .blocks import (
    CcmParams,
    DecoderBlockParams,
    IrRwkvBlockParams,
    ccm_forward,
    decoder_forward,
    ir_forward,
    ir_rwkv_forward,
)
from .losses import LossConfig, mixed_loss
from .model import named_tensors
from .rwkv import ChannelMixParams, SpatialMixParams, WkvParams, bi_wkv, channel_mix, spatial_mix
from .tensor import Tensor, gradcheck, sum_

F64 = np.float64
TOLERANCE = 1e-4


def _x(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _proj(out: Tensor, probe: np.ndarray) -> Tensor:
    return sum_(out * probe)


def _case(fn: Callable[..., Tensor], inputs: list[Tensor], probe_shape, rng) -> Callable[[], float]:
    probe = rng.standard_normal(probe_shape)
    return lambda max_coords=24, seed=0: gradcheck(
        lambda *a: _proj(fn(*a), probe), inputs, eps=1e-5, max_coords=max_coords, seed=seed
    )


def _block_case(p, fwd, x_shape, out_shape, rng):
    params = [t for _, t in named_tensors(p)]
    return _case(lambda x, *_: fwd(x, p), [_x(rng, *x_shape)] + params, out_shape, rng)


def gradient_cases(seed: int = 0) -> dict[str, Callable[..., float]]:
    """Name -> zero-arg callable returning the worst relative error of that case."""
    rng = np.random.default_rng(seed)
    cases: dict[str, Callable[..., float]] = {}

    p = IrRwkvBlockParams.create(8, 16, 8, 1, False, rng=rng, dtype=F64)
    cases["ir_block_residual"] = _block_case(p, ir_forward, (1, 8, 6, 6), (1, 8, 6, 6), rng)
    p = IrRwkvBlockParams.create(8, 16, 12, 2, False, rng=rng, dtype=F64)
    cases["ir_block_stride2"] = _block_case(p, ir_forward, (1, 8, 6, 6), (1, 12, 3, 3), rng)
    p = IrRwkvBlockParams.create(8, 16, 8, 1, False, rng=rng, dtype=F64)
    cases["ir_rwkv_block_without_mix"] = _block_case(p, ir_rwkv_forward, (1, 8, 6, 6), (1, 8, 6, 6), rng)
    p = IrRwkvBlockParams.create(8, 16, 8, 1, True, rng=rng, dtype=F64)
    cases["ir_rwkv_block_with_mix"] = _block_case(p, ir_rwkv_forward, (1, 8, 6, 6), (1, 8, 6, 6), rng)

    p = DecoderBlockParams.create(8, 4, rng=rng, dtype=F64)
    cases["decoder_block"] = _block_case(p, decoder_forward, (1, 8, 5, 5), (1, 4, 10, 10), rng)

    ccm = CcmParams.create((4, 6, 8), rng, dtype=F64)
    feats = [_x(rng, 1, 4, 8, 8), _x(rng, 1, 6, 4, 4), _x(rng, 1, 8, 2, 2)]
    probes = [rng.standard_normal(f.shape) for f in feats]

    def ccm_loss(f1, f2, f3, *_):
        outs = ccm_forward(f1, f2, f3, ccm)
        return sum_(outs[0] * probes[0]) + sum_(outs[1] * probes[1]) + sum_(outs[2] * probes[2])

    ccm_inputs = feats + [t for _, t in named_tensors(ccm)]
    cases["ccm"] = lambda max_coords=24, seed=0: gradcheck(ccm_loss, ccm_inputs, 1e-5, max_coords, seed)

    sm = SpatialMixParams.create(8, rng, F64)
    sm.wkv.w.data[:] = rng.uniform(-1.0, 1.0, 8)
    cases["spatial_mix"] = _case(
        lambda x, *_: spatial_mix(x, 3, 4, sm), [_x(rng, 2, 12, 8)] + [t for _, t in named_tensors(sm)], (2, 12, 8), rng
    )
    cm = ChannelMixParams.create(8, rng, dtype=F64)
    cases["channel_mix"] = _case(
        lambda x, *_: channel_mix(x, 3, 4, cm), [_x(rng, 2, 12, 8)] + [t for _, t in named_tensors(cm)], (2, 12, 8), rng
    )
    wkv = WkvParams(Tensor(rng.uniform(-1, 1, 5), requires_grad=True), Tensor(rng.uniform(-1, 1, 5), requires_grad=True))
    cases["bi_wkv"] = _case(
        lambda k, v, *_: bi_wkv(k, v, wkv), [_x(rng, 2, 9, 5), _x(rng, 2, 9, 5), wkv.w, wkv.u], (2, 9, 5), rng
    )

    masks3 = rng.integers(0, 3, size=(2, 6, 6))
    cfg3 = LossConfig(0.5, 0.5, 3)
    cases["mixed_loss_multiclass"] = lambda max_coords=24, seed=0: gradcheck(
        lambda z: mixed_loss(z, masks3, cfg3), [_x(rng, 2, 3, 6, 6)], 1e-5, max_coords, seed
    )
    masks1 = rng.integers(0, 2, size=(2, 6, 6))
    cfg1 = LossConfig(0.5, 1.0, 1)
    cases["mixed_loss_binary"] = lambda max_coords=24, seed=0: gradcheck(
        lambda z: mixed_loss(z, masks1, cfg1), [_x(rng, 2, 1, 6, 6)], 1e-5, max_coords, seed
    )
    return cases


def run_gradient_suite(seed: int = 0, max_coords: int | None = 24) -> dict[str, float]:
    return {name: fn(max_coords=max_coords, seed=seed) for name, fn in gradient_cases(seed).items()}
