"""Static parameter and MAC accounting.

Two independent routes produce the same :class:`CostReport` tree: one walks a built
model and reads tensor sizes, the other evaluates closed-form counts from the variant
configuration alone. Rules: convolution ``Ho*Wo*Cout*(Cin/groups)*K^2``; linear map
over T tokens ``T*Cin*Cout``; bidirectional WKV ``8*T*C``; normalization, activations,
resizing and elementwise ops count zero.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

from .model import (
    STEM_KERNEL,
    EncoderConfig,
    ModelVariant,
    SegmentationModel,
    decoder_schedule,
)
from .nn import Conv2dParams, LayerNormParams, LinearParams
from .rwkv import WKV_MACS_PER_ELEMENT, ChannelMixParams, SpatialMixParams

CONVENTION = "MACs"


@dataclass
class CostNode:
    name: str
    own_params: int = 0
    own_macs: int = 0
    children: list["CostNode"] = field(default_factory=list)

    @property
    def params(self) -> int:
        return self.own_params + sum(c.params for c in self.children)

    @property
    def macs(self) -> int:
        return self.own_macs + sum(c.macs for c in self.children)

    def add(self, child: "CostNode") -> "CostNode":
        self.children.append(child)
        return child

    def find(self, path: str) -> "CostNode":
        node = self
        for part in path.split("."):
            try:
                node = next(c for c in node.children if c.name == part)
            except StopIteration:
                raise KeyError(path) from None
        return node

    def walk(self, prefix: str = "") -> Iterator[tuple[str, "CostNode", int]]:
        path = f"{prefix}.{self.name}" if prefix else self.name
        yield path, self, path.count(".")
        for c in self.children:
            yield from c.walk(path)


@dataclass
class CostReport:
    root: CostNode
    resolution: tuple[int, int]
    in_channels: int
    num_classes: int
    convention: str = CONVENTION

    @property
    def params(self) -> int:
        return self.root.params

    @property
    def macs(self) -> int:
        return self.root.macs

    def part(self, path: str) -> CostNode:
        return self.root.find(path)

    def flat(self) -> dict[str, tuple[int, int]]:
        return {p: (n.params, n.macs) for p, n, _ in self.root.walk()}


# -- route 1: walk a built model ---------------------------------------------------------


def _conv(name: str, p: Conv2dParams, h: int, w: int) -> tuple[CostNode, int, int]:
    ho, wo = p.out_extent(h), p.out_extent(w)
    params = p.weight.size + (p.bias.size if p.bias is not None else 0)
    k2 = p.kernel_size ** 2
    return CostNode(name, params, ho * wo * p.out_channels * (p.in_channels // p.groups) * k2), ho, wo


def _norm(name: str, p: LayerNormParams) -> CostNode:
    return CostNode(name, p.gamma.size + p.beta.size, 0)


def _lin(name: str, p: LinearParams, tokens: int) -> CostNode:
    return CostNode(name, p.weight.size, tokens * p.in_dim * p.out_dim)


def _spatial_mix(p: SpatialMixParams, tokens: int) -> CostNode:
    node = CostNode("spatial_mix")
    node.add(_norm("norm", p.norm))
    for nm in ("receptance", "key", "value"):
        node.add(_lin(nm, getattr(p, nm), tokens))
    node.add(CostNode("wkv", p.wkv.w.size + p.wkv.u.size, WKV_MACS_PER_ELEMENT * tokens * p.dim))
    node.add(_lin("output", p.output, tokens))
    return node


def _channel_mix(p: ChannelMixParams, tokens: int) -> CostNode:
    node = CostNode("channel_mix")
    node.add(_norm("norm", p.norm))
    for nm in ("key", "value", "receptance"):
        node.add(_lin(nm, getattr(p, nm), tokens))
    return node


def count_model(model: SegmentationModel, resolution: int | tuple[int, int]) -> CostReport:
    h, w = _check_resolution(resolution, model.stride)
    root = CostNode("model")
    enc = root.add(CostNode("encoder"))
    stem = enc.add(CostNode("stem"))
    node, h, w = _conv("conv", model.stem, h, w)
    stem.add(node)
    stem.add(_norm("norm", model.stem_norm))
    extents = []
    for si, blocks in enumerate(model.stages, 1):
        stage = enc.add(CostNode(f"stage{si}"))
        for bi, p in enumerate(blocks):
            blk = stage.add(CostNode(f"block{bi}"))
            node, h, w = _conv("expand", p.expand, h, w)
            blk.add(node)
            blk.add(_norm("expand_norm", p.expand_norm))
            if p.spatial_mix is not None:
                blk.add(_spatial_mix(p.spatial_mix, h * w))
            node, h, w = _conv("dw", p.dw, h, w)
            blk.add(node)
            node, h, w = _conv("project", p.project, h, w)
            blk.add(node)
        extents.append((h, w))

    ccm = root.add(CostNode("ccm"))
    h1, w1 = extents[0]
    for i, conv in enumerate(model.ccm.inbound):
        ccm.add(_conv(f"inbound{i}", conv, h1, w1)[0])
    ccm.add(_channel_mix(model.ccm.mix, h1 * w1))
    for i, conv in enumerate(model.ccm.outbound):
        ccm.add(_conv(f"outbound{i}", conv, *extents[i])[0])

    dec_root = root.add(CostNode("decoder"))
    h, w = extents[3]
    for di, p in enumerate(model.decoders):
        d = dec_root.add(CostNode(f"block{di}"))
        for nm in ("expand", "dw", "project"):
            node, h, w = _conv(nm, getattr(p, nm), h, w)
            d.add(node)
        h, w = h * p.scale, w * p.scale
    root.add(_conv("head", model.head, h, w)[0])
    return CostReport(root, _pair(resolution), model.in_channels, model.num_classes)


# -- route 2: closed form from the configuration ------------------------------------------


def _pair(resolution) -> tuple[int, int]:
    return (resolution, resolution) if isinstance(resolution, int) else tuple(resolution)


def _check_resolution(resolution, stride: int) -> tuple[int, int]:
    h, w = _pair(resolution)
    if h < 1 or w < 1 or h % stride or w % stride:
        raise ValueError(f"resolution must be a positive multiple of {stride}, got {h}x{w}")
    return h, w


def _conv_formula(name, cin, cout, k, hw_out, groups=1, bias=True) -> CostNode:
    params = cout * (cin // groups) * k * k + (cout if bias else 0)
    return CostNode(name, params, hw_out * cout * (cin // groups) * k * k)


def _mix_formula(name: str, c: int, tokens: int, hidden: int | None) -> CostNode:
    node = CostNode(name)
    node.add(CostNode("norm", 2 * c, 0))
    if hidden is None:  # spatial mix
        for nm in ("receptance", "key", "value"):
            node.add(CostNode(nm, c * c, tokens * c * c))
        node.add(CostNode("wkv", 2 * c, WKV_MACS_PER_ELEMENT * tokens * c))
        node.add(CostNode("output", c * c, tokens * c * c))
    else:
        node.add(CostNode("key", c * hidden, tokens * c * hidden))
        node.add(CostNode("value", hidden * c, tokens * hidden * c))
        node.add(CostNode("receptance", c * c, tokens * c * c))
    return node


def decoder_block_formula(name: str, cin: int, cout: int, hw: int, kernel: int = 9, order: str = "cdc") -> CostNode:
    """Decoder block cost at input area ``hw``; orders 'cdc', 'ccd' or 'conv' (single KxK conv)."""
    d = CostNode(name)
    if order == "cdc":
        d.add(_conv_formula("expand", cin, cin, 1, hw))
        d.add(_conv_formula("dw", cin, cin, kernel, hw, groups=cin))
        d.add(_conv_formula("project", cin, cout, 1, hw))
    elif order == "ccd":
        d.add(_conv_formula("expand", cin, cin, 1, hw))
        d.add(_conv_formula("project", cin, cout, 1, hw))
        d.add(_conv_formula("dw", cout, cout, kernel, hw, groups=cout))
    elif order == "conv":
        d.add(_conv_formula("conv", cin, cout, kernel, hw))
    else:
        raise ValueError(f"unknown decoder order {order!r}")
    return d


def count_config(
    variant: "ModelVariant | str",
    in_channels: int,
    resolution: int | tuple[int, int],
    num_classes: int,
    decoder_kernel: int = 9,
    decoder_order: str = "cdc",
) -> CostReport:
    cfg: EncoderConfig = ModelVariant.parse(variant).encoder
    h, w = _check_resolution(resolution, cfg.stride)
    root = CostNode("model")
    enc = root.add(CostNode("encoder"))
    stem = enc.add(CostNode("stem"))
    h, w = h // cfg.stem_stride, w // cfg.stem_stride
    stem.add(_conv_formula("conv", in_channels, cfg.stem_dim, STEM_KERNEL, h * w, bias=False))
    stem.add(CostNode("norm", 2 * cfg.stem_dim, 0))
    cin = cfg.stem_dim
    areas = []
    for si, st in enumerate(cfg.stages, 1):
        stage = enc.add(CostNode(f"stage{si}"))
        cm = st.c_mid
        for bi in range(st.depth):
            blk = stage.add(CostNode(f"block{bi}"))
            blk.add(_conv_formula("expand", cin, cm, 1, h * w, bias=False))
            blk.add(CostNode("expand_norm", 2 * cm, 0))
            if st.spatial_mix and bi > 0:
                blk.add(_mix_formula("spatial_mix", cm, h * w, None))
            if bi == 0:
                h, w = h // 2, w // 2
            blk.add(_conv_formula("dw", cm, cm, 5, h * w, groups=cm))
            blk.add(_conv_formula("project", cm, st.dim, 1, h * w))
            cin = st.dim
        areas.append(h * w)

    ccm = root.add(CostNode("ccm"))
    c1 = cfg.dims[0]
    for i, c in enumerate(cfg.dims[:3]):
        ccm.add(_conv_formula(f"inbound{i}", c, c1, 1, areas[0]))
    ccm.add(_mix_formula("channel_mix", 3 * c1, areas[0], int(round(3 * c1 * cfg.ccm_hidden_ratio))))
    for i, c in enumerate(cfg.dims[:3]):
        ccm.add(_conv_formula(f"outbound{i}", c1, c, 1, areas[i]))

    dec = root.add(CostNode("decoder"))
    hw = areas[3]
    for di, (ci, co) in enumerate(decoder_schedule(cfg)):
        dec.add(decoder_block_formula(f"block{di}", ci, co, hw, decoder_kernel, decoder_order))
        hw *= 4
    root.add(_conv_formula("head", cfg.stem_dim, num_classes, 1, hw))
    return CostReport(root, _pair(resolution), in_channels, num_classes)


def count(
    target: "SegmentationModel | ModelVariant | str",
    in_channels: int | None = None,
    resolution: int | tuple[int, int] = 224,
    num_classes: int | None = None,
) -> CostReport:
    """Cost report for a built model or, symbolically, for a variant."""
    if isinstance(target, SegmentationModel):
        return count_model(target, resolution)
    return count_config(target, 3 if in_channels is None else in_channels, resolution,
                        9 if num_classes is None else num_classes)


# -- decoder complexity formulas ------------------------------------------------------------


def decoder_trio_macs(h: int, w: int, c_in: int, c_out: int, k: int) -> tuple[int, int]:
    """(standard KxK conv, pointwise-depthwise-pointwise trio) MACs, both exact integers.

    The trio keeps ``c_in`` channels through the depthwise stage, so its cost is
    ``H*W*C_in*(C_in + K^2 + C_out)``.
    """
    for v in (h, w, c_in, c_out, k):
        if int(v) != v or v < 1:
            raise ValueError("all arguments must be positive integers")
    standard = h * w * c_in * c_out * k * k
    trio = h * w * c_in * (c_in + k * k + c_out)
    return standard, trio


def trio_ratio(c_in: int, c_out: int, k: int) -> Fraction:
    standard, trio = decoder_trio_macs(1, 1, c_in, c_out, k)
    return Fraction(trio, standard)


def decoder_variant_grid(
    variant: "ModelVariant | str" = ModelVariant.BASE,
    in_channels: int = 1,
    resolution: int = 224,
    num_classes: int = 9,
) -> list[tuple[str, int, int]]:
    """Whole-model MACs for each (decoder order, kernel) combination."""
    rows = [("conv", 3, count_config(variant, in_channels, resolution, num_classes, 3, "conv").macs)]
    for order in ("ccd", "cdc"):
        for k in (3, 5, 7, 9):
            rows.append((order, k, count_config(variant, in_channels, resolution, num_classes, k, order).macs))
    return rows


# -- formatting ----------------------------------------------------------------------------


def _scaled(report: CostReport, flops_x2: bool) -> tuple[int, str]:
    return (2, "FLOPs") if flops_x2 else (1, report.convention)


def format_table(report: CostReport, max_depth: int = 3, flops_x2: bool = False) -> str:
    mul, unit = _scaled(report, flops_x2)
    rows = [(("  " * d) + n.name, f"{n.params / 1e6:.3f}M", f"{n.macs * mul / 1e9:.3f}G")
            for _, n, d in report.root.walk() if d <= max_depth]
    w0 = max(len(r[0]) for r in rows)
    head = f"{'component':<{w0}}  {'params':>10}  {unit:>10}"
    lines = [f"# resolution={report.resolution[0]}x{report.resolution[1]} in_channels={report.in_channels} "
             f"classes={report.num_classes}", head, "-" * len(head)]
    lines += [f"{a:<{w0}}  {b:>10}  {c:>10}" for a, b, c in rows]
    return "\n".join(lines)


def format_kv(report: CostReport, flops_x2: bool = False) -> str:
    mul, unit = _scaled(report, flops_x2)
    lines = [
        f"resolution={report.resolution[0]}x{report.resolution[1]}",
        f"in_channels={report.in_channels}",
        f"num_classes={report.num_classes}",
        f"convention={unit}",
        f"params={report.params}",
        f"macs={report.macs * mul}",
        f"encoder_params={report.part('encoder').params}",
        f"encoder_macs={report.part('encoder').macs * mul}",
    ]
    return "\n".join(lines)


def format_csv(report: CostReport, flops_x2: bool = False) -> str:
    mul, unit = _scaled(report, flops_x2)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["component", "depth", "params", unit.lower()])
    for path, n, d in report.root.walk():
        wr.writerow([path, d, n.params, n.macs * mul])
    return buf.getvalue()
