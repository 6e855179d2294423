"""Encoder schedules for the three variants and the assembled U-shaped segmentation network."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Iterator

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
from .nn import Conv2dParams, LayerNormParams, conv2d, layer_norm
from .tensor import ShapeError, Tensor, concat, gelu

STEM_DIM = 24
STEM_KERNEL = 3
CONFIG_VERSION = 1


@dataclass(frozen=True)
class StageConfig:
    depth: int
    dim: int
    expansion: float
    spatial_mix: bool

    @property
    def c_mid(self) -> int:
        return int(round(self.dim * self.expansion))


@dataclass(frozen=True)
class EncoderConfig:
    stages: tuple[StageConfig, ...]
    stem_dim: int = STEM_DIM
    stem_stride: int = 1
    ccm_hidden_ratio: float = 4.0

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ValueError("the encoder has exactly four stages")
        dims = [s.dim for s in self.stages]
        if any(a >= b for a, b in zip(dims, dims[1:])):
            raise ValueError(f"stage dims must strictly increase, got {dims}")
        if self.stem_dim >= dims[0]:
            raise ValueError("stem width must be below the stage-I width")

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(s.dim for s in self.stages)

    @property
    def stride(self) -> int:
        """Total downsampling factor at the deepest stage."""
        return self.stem_stride * 2 ** len(self.stages)


def _stages(depths, dims, expansions) -> tuple[StageConfig, ...]:
    return tuple(
        StageConfig(d, c, e, i >= 2) for i, (d, c, e) in enumerate(zip(depths, dims, expansions))
    )


class ModelVariant(enum.Enum):
    TINY = "tiny"
    SMALL = "small"
    BASE = "base"

    @property
    def encoder(self) -> EncoderConfig:
        return ENCODER_CONFIGS[self]

    @property
    def code(self) -> int:
        return list(ModelVariant).index(self)

    @classmethod
    def parse(cls, name: "str | ModelVariant") -> "ModelVariant":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(f"unknown variant {name!r}; choose from tiny, small, base") from None


ENCODER_CONFIGS = {
    ModelVariant.TINY: EncoderConfig(_stages((2, 2, 4, 2), (32, 48, 96, 160), (2.0, 2.5, 3.0, 3.5))),
    ModelVariant.SMALL: EncoderConfig(_stages((3, 3, 6, 3), (32, 64, 128, 192), (2.0, 2.5, 3.0, 4.0))),
    ModelVariant.BASE: EncoderConfig(_stages((3, 3, 6, 3), (48, 72, 144, 240), (2.0, 2.5, 4.0, 4.0))),
}


def decoder_schedule(cfg: EncoderConfig) -> list[tuple[int, int]]:
    """(c_in, c_out) per decoder block, deepest first.

    The first block consumes the stage-IV output alone; each later one consumes the
    previous decoder output concatenated with the fused skip of the mirrored stage.
    The last block lands on the stem width at the input resolution.
    """
    d = cfg.dims
    return [(d[3], d[2]), (2 * d[2], d[1]), (2 * d[1], d[0]), (2 * d[0], cfg.stem_dim)]


@dataclass
class SegmentationModel:
    variant: ModelVariant
    in_channels: int
    num_classes: int
    stem: Conv2dParams
    stem_norm: LayerNormParams
    stages: list[list[IrRwkvBlockParams]]
    ccm: CcmParams
    decoders: list[DecoderBlockParams]
    head: Conv2dParams
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> EncoderConfig:
        return self.variant.encoder

    @property
    def stride(self) -> int:
        return self.config.stride

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Trainable tensors in a fixed, build-order-independent naming."""
        yield from named_tensors(self, "")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Tensors reachable through dataclass fields and lists, with dotted names."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)


def build(
    variant: "ModelVariant | str",
    in_channels: int = 3,
    num_classes: int = 9,
    seed: int = 0,
    dtype=np.float32,
) -> SegmentationModel:
    variant = ModelVariant.parse(variant)
    if in_channels < 1:
        raise ValueError(f"in_channels must be >= 1, got {in_channels}")
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    cfg = variant.encoder
    rng = np.random.default_rng(seed)

    stem = Conv2dParams.create(
        in_channels, cfg.stem_dim, STEM_KERNEL, cfg.stem_stride, bias=False, rng=rng, dtype=dtype
    )
    stem_norm = LayerNormParams.create(cfg.stem_dim, dtype)

    stages = []
    c_in = cfg.stem_dim
    for st in cfg.stages:
        blocks = []
        for i in range(st.depth):
            first = i == 0
            blocks.append(IrRwkvBlockParams.create(
                c_in, st.c_mid, st.dim,
                stride=2 if first else 1,
                use_spatial_mix=st.spatial_mix and not first,
                residual=not first,
                rng=rng, dtype=dtype,
            ))
            c_in = st.dim
        stages.append(blocks)

    ccm = CcmParams.create(cfg.dims[:3], rng, cfg.ccm_hidden_ratio, dtype)
    decoders = [DecoderBlockParams.create(ci, co, rng=rng, dtype=dtype) for ci, co in decoder_schedule(cfg)]
    head = Conv2dParams.create(cfg.stem_dim, num_classes, 1, rng=rng, dtype=dtype)
    return SegmentationModel(
        variant, in_channels, num_classes, stem, stem_norm, stages, ccm, decoders, head,
        meta={"seed": seed, "config_version": CONFIG_VERSION},
    )


def _block(x: Tensor, p: IrRwkvBlockParams) -> Tensor:
    return ir_rwkv_forward(x, p) if p.use_spatial_mix else ir_forward(x, p)


def check_input(model: SegmentationModel, x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected N x C x H x W input, got shape {x.shape}")
    if x.shape[1] != model.in_channels:
        raise ShapeError(f"model takes {model.in_channels} input channels, got {x.shape[1]}")
    h, w = x.shape[2:]
    s = model.stride
    if h % s or w % s or h == 0 or w == 0:
        raise ShapeError(f"input extents must be positive multiples of {s}, got {h}x{w}")


def encode(model: SegmentationModel, x: Tensor) -> list[Tensor]:
    """Stem output followed by the four stage outputs."""
    check_input(model, x)
    y = gelu(layer_norm(conv2d(x, model.stem), model.stem_norm, axis=1))
    feats = [y]
    for blocks in model.stages:
        for p in blocks:
            y = _block(y, p)
        feats.append(y)
    return feats


def forward(model: SegmentationModel, x: Tensor) -> Tensor:
    """Logits of shape N x num_classes x H x W."""
    _, f1, f2, f3, f4 = encode(model, x)
    skips = ccm_forward(f1, f2, f3, model.ccm)
    y = decoder_forward(f4, model.decoders[0])
    for dec, skip in zip(model.decoders[1:], reversed(skips)):
        y = decoder_forward(concat([y, skip], axis=1), dec)
    return conv2d(y, model.head)
