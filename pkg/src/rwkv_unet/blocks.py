"""IR / IR-RWKV encoder blocks, the decoder block and Cross-Channel Mix skip fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    Conv2dParams,
    LayerNormParams,
    bilinear_resize,
    conv2d,
    fold,
    layer_norm,
    unfold,
)
from .rwkv import ChannelMixParams, SpatialMixParams, channel_mix, spatial_mix
from .tensor import ShapeError, Tensor, concat, gelu, split, transpose

ENCODER_DW_KERNEL = 5
DECODER_DW_KERNEL = 9


@dataclass
class IrRwkvBlockParams:
    c_in: int
    c_mid: int
    c_out: int
    stride: int
    use_spatial_mix: bool
    residual: bool
    expand: Conv2dParams
    expand_norm: LayerNormParams
    spatial_mix: SpatialMixParams | None
    dw: Conv2dParams
    project: Conv2dParams

    @classmethod
    def create(
        cls,
        c_in: int,
        c_mid: int,
        c_out: int,
        stride: int = 1,
        use_spatial_mix: bool = False,
        residual: bool | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ) -> "IrRwkvBlockParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        if residual is None:
            residual = stride == 1 and c_in == c_out
        if c_mid <= c_in:
            raise ValueError(f"expanded width {c_mid} must exceed input width {c_in}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        if residual and (stride != 1 or c_in != c_out):
            raise ValueError("a residual block needs stride 1 and c_in == c_out")
        if use_spatial_mix and c_mid % 4:
            raise ValueError(f"spatial mix needs c_mid divisible by 4, got {c_mid}")
        return cls(
            c_in, c_mid, c_out, stride, use_spatial_mix, residual,
            expand=Conv2dParams.create(c_in, c_mid, 1, bias=False, rng=rng, dtype=dtype),
            expand_norm=LayerNormParams.create(c_mid, dtype),
            spatial_mix=SpatialMixParams.create(c_mid, rng, dtype) if use_spatial_mix else None,
            dw=Conv2dParams.create(c_mid, c_mid, ENCODER_DW_KERNEL, stride, groups=c_mid, rng=rng, dtype=dtype),
            project=Conv2dParams.create(c_mid, c_out, 1, rng=rng, dtype=dtype),
        )


def _check_block_input(x: Tensor, p: IrRwkvBlockParams) -> None:
    if x.ndim != 4 or x.shape[1] != p.c_in:
        raise ShapeError(f"block expects N x {p.c_in} x H x W input, got shape {x.shape}")
    if p.residual and p.stride != 1:
        raise ValueError("residual blocks cannot downsample")


def _expand(x: Tensor, p: IrRwkvBlockParams) -> Tensor:
    return gelu(layer_norm(conv2d(x, p.expand), p.expand_norm, axis=1))


def _aggregate_and_project(i4: Tensor, x: Tensor, p: IrRwkvBlockParams) -> Tensor:
    local = conv2d(i4, p.dw)
    i5 = local + i4 if p.stride == 1 else local
    f = conv2d(i5, p.project)
    return f + x if p.residual else f


def ir_rwkv_forward(x: Tensor, p: IrRwkvBlockParams) -> Tensor:
    """Expand + norm, optional token-space SpatialMix with residual, DW-Conv, project."""
    _check_block_input(x, p)
    i1 = _expand(x, p)
    if p.use_spatial_mix:
        n, c, h, w = i1.shape
        i2 = transpose(unfold(i1), (0, 2, 1))
        i3 = i2 + spatial_mix(i2, h, w, p.spatial_mix)
        i4 = fold(transpose(i3, (0, 2, 1)), h, w)
    else:
        i4 = i1
    return _aggregate_and_project(i4, x, p)


def ir_forward(x: Tensor, p: IrRwkvBlockParams) -> Tensor:
    """Plain inverted residual block: no SpatialMix, no token round trip."""
    if p.use_spatial_mix:
        raise ValueError("ir_forward called with a spatial-mix block; use ir_rwkv_forward")
    _check_block_input(x, p)
    return _aggregate_and_project(_expand(x, p), x, p)


@dataclass
class DecoderBlockParams:
    c_in: int
    c_mid: int
    c_out: int
    expand: Conv2dParams
    dw: Conv2dParams
    project: Conv2dParams
    scale: int = 2

    @classmethod
    def create(
        cls,
        c_in: int,
        c_out: int,
        c_mid: int | None = None,
        kernel_size: int = DECODER_DW_KERNEL,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ) -> "DecoderBlockParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        c_mid = c_in if c_mid is None else c_mid
        return cls(
            c_in, c_mid, c_out,
            expand=Conv2dParams.create(c_in, c_mid, 1, rng=rng, dtype=dtype),
            dw=Conv2dParams.create(c_mid, c_mid, kernel_size, groups=c_mid, rng=rng, dtype=dtype),
            project=Conv2dParams.create(c_mid, c_out, 1, rng=rng, dtype=dtype),
        )


def decoder_forward(x: Tensor, p: DecoderBlockParams) -> Tensor:
    """1x1 conv + GELU, large-kernel DW-Conv, 1x1 conv, then 2x bilinear upsampling."""
    if x.ndim != 4 or x.shape[1] != p.c_in:
        raise ShapeError(f"decoder block expects N x {p.c_in} x H x W input, got shape {x.shape}")
    y = gelu(conv2d(x, p.expand))
    y = conv2d(conv2d(y, p.dw), p.project)
    h, w = x.shape[2:]
    return bilinear_resize(y, h * p.scale, w * p.scale)


@dataclass
class CcmParams:
    dims: tuple[int, int, int]
    inbound: list[Conv2dParams]  # C_i -> C_1
    mix: ChannelMixParams  # over 3 * C_1
    outbound: list[Conv2dParams]  # C_1 -> C_i

    @classmethod
    def create(
        cls,
        dims: tuple[int, int, int],
        rng: np.random.Generator | None = None,
        hidden_ratio: float = 4.0,
        dtype=np.float32,
    ) -> "CcmParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        c1 = dims[0]
        if not dims[0] < dims[1] < dims[2]:
            raise ValueError(f"branch widths must increase with depth, got {dims}")
        return cls(
            tuple(dims),
            [Conv2dParams.create(c, c1, 1, rng=rng, dtype=dtype) for c in dims],
            ChannelMixParams.create(3 * c1, rng, hidden_ratio, dtype),
            [Conv2dParams.create(c1, c, 1, rng=rng, dtype=dtype) for c in dims],
        )


def ccm_forward(f1: Tensor, f2: Tensor, f3: Tensor, p: CcmParams) -> tuple[Tensor, Tensor, Tensor]:
    """Fuse three encoder scales with a channel mix at the largest one, then redistribute."""
    feats = (f1, f2, f3)
    for f, c in zip(feats, p.dims):
        if f.ndim != 4 or f.shape[1] != c:
            raise ShapeError(f"ccm branch expects {c} channels, got shape {f.shape}")
    hs = [f.shape[2] for f in feats]
    ws = [f.shape[3] for f in feats]
    if not (hs[0] > hs[1] > hs[2] and ws[0] > ws[1] > ws[2]):
        raise ShapeError(f"ccm branch extents must strictly decrease, got {list(zip(hs, ws))}")
    if len({f.shape[0] for f in feats}) != 1:
        raise ShapeError("ccm branches disagree on batch size")
    h1, w1 = hs[0], ws[0]
    c1 = p.dims[0]

    aligned = [conv2d(bilinear_resize(f, h1, w1), conv) for f, conv in zip(feats, p.inbound)]
    cat = concat(aligned, axis=1)
    tokens = transpose(unfold(cat), (0, 2, 1))
    mixed = tokens + channel_mix(tokens, h1, w1, p.mix)
    folded = fold(transpose(mixed, (0, 2, 1)), h1, w1)
    parts = split(folded, [c1, c1, c1], axis=1)
    return tuple(
        conv2d(bilinear_resize(part, h, w), conv)
        for part, h, w, conv in zip(parts, hs, ws, p.outbound)
    )
