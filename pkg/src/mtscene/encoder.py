"""Four-stage RGB-D fusion encoder built from partial-convolution blocks."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from . import nn
from .tensor import Tensor, concat, relu, split

IN_CHANNELS = 4  # R, G, B, depth


@dataclass
class EncoderConfig:
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    depths: Tuple[int, ...] = (1, 1, 2, 1)
    split_ratio: float = 0.25
    expansion: int = 2

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.depths = tuple(int(d) for d in self.depths)
        if len(self.widths) != 4 or len(self.depths) != 4:
            raise ValueError("encoder needs exactly 4 stage widths and 4 depths")
        if min(self.depths) < 0 or min(self.widths) < 1:
            raise ValueError("encoder depths must be >= 0 and widths >= 1")
        if not 0.0 < self.split_ratio <= 1.0:
            raise ValueError("split_ratio must lie in (0, 1]")
        for w in self.widths:
            if partial_channels(w, self.split_ratio) < 1:
                raise ValueError(f"split_ratio {self.split_ratio} leaves no convolved channels at width {w}")
            if Fraction(self.split_ratio).limit_denominator(1000) * w != partial_channels(w, self.split_ratio):
                raise ValueError(f"width {w} is not divisible by the split_ratio denominator")
        if self.expansion < 1:
            raise ValueError("expansion must be >= 1")


def partial_channels(c: int, split_ratio: float) -> int:
    return int(round(split_ratio * c))


def stage_strides() -> Tuple[int, ...]:
    # stage 1 is a 4x4/4 patchify, the rest halve with 2x2/2
    return (4, 2, 2, 2)


def seed_depth_weights(rgb_weight):
    """Extend an (F, 3, k, k) RGB kernel with a depth channel D = (R+G+B)/2."""
    w = np.asarray(rgb_weight.data if isinstance(rgb_weight, Tensor) else rgb_weight)
    if w.ndim != 4 or w.shape[1] != 3:
        raise ValueError(f"expected (F, 3, k, k) weights, got {w.shape}")
    depth = (w[:, 0] + w[:, 1] + w[:, 2]) / 2
    return np.concatenate([w, depth[:, None]], axis=1)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_encoder(init: nn.Initializer, cfg: EncoderConfig, prefix: str = "encoder") -> None:
    cin = IN_CHANNELS
    for s, (width, depth, stride) in enumerate(zip(cfg.widths, cfg.depths, stage_strides()), start=1):
        name = f"{prefix}.stage{s}"
        init.conv(f"{name}.merge.conv", cin, width, stride, bias=False)
        if s == 1:
            # depth filters are seeded from the colour filters
            w = init.params[f"{name}.merge.conv.weight"]
            w.data[...] = seed_depth_weights(w.data[:, :3])
        init.bn(f"{name}.merge.bn", width)
        for b in range(depth):
            init_fusion_block(init, f"{name}.block{b}", width, cfg)
        cin = width


def init_fusion_block(init: nn.Initializer, name: str, c: int, cfg: EncoderConfig) -> None:
    cp = partial_channels(c, cfg.split_ratio)
    hidden = cfg.expansion * c
    init.conv(f"{name}.pconv", cp, cp, 3, bias=False)
    init.conv(f"{name}.pw1", c, hidden, 1, bias=False)
    init.bn(f"{name}.bn", hidden)
    init.conv(f"{name}.pw2", hidden, c, 1, bias=False, gain=0.5)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def partial_conv(x: Tensor, p: F.ConvParams, split_ratio: float) -> Tensor:
    """Convolve the leading C' channels and pass the rest through untouched."""
    c = x.shape[1]
    cp = partial_channels(c, split_ratio)
    if cp < 1:
        raise ValueError(f"split_ratio {split_ratio} selects no channels out of {c}")
    if cp == c:
        return F.conv(x, p)
    head, tail = split(x, [cp, c - cp], axis=1)
    return concat([F.conv(head, p), tail], axis=1)


def fusion_block(x: Tensor, params: nn.Params, name: str, cfg: EncoderConfig, training: bool) -> Tensor:
    """Residual block: partial conv, pointwise expand, BN, ReLU, pointwise restore."""
    pconv = nn.conv_params(params, f"{name}.pconv", padding=1)
    if pconv.weight.shape[0] != partial_channels(x.shape[1], cfg.split_ratio):
        raise ValueError(f"{name}: block width does not match input with {x.shape[1]} channels")
    y = partial_conv(x, pconv, cfg.split_ratio)
    y = nn.conv(params, f"{name}.pw1", y)
    y = relu(nn.bn(params, f"{name}.bn", y, training))
    y = nn.conv(params, f"{name}.pw2", y)
    return x + y


def merging_layer(x: Tensor, params: nn.Params, name: str, stride: int, training: bool) -> Tensor:
    h, w = x.shape[-2:]
    if h % stride or w % stride:
        raise ValueError(f"{name}: extents {h}x{w} not divisible by stride {stride}")
    y = nn.conv(params, f"{name}.conv", x, stride=stride)
    return nn.bn(params, f"{name}.bn", y, training)


def encoder_forward(rgbd: Tensor, cfg: EncoderConfig, params: nn.Params, training: bool = False,
                    prefix: str = "encoder", trace: Optional[Dict[str, Tensor]] = None) -> List[Tensor]:
    """Run the four stages; returns features at 1/4, 1/8, 1/16 and 1/32 scale."""
    if rgbd.ndim != 4 or rgbd.shape[1] != IN_CHANNELS:
        raise ValueError(f"encoder expects N x 4 x H x W input, got {rgbd.shape}")
    h, w = rgbd.shape[-2:]
    if h % 32 or w % 32:
        raise ValueError(f"input extents {h}x{w} must be divisible by 32")
    feats = []
    x = rgbd
    for s, (depth, stride) in enumerate(zip(cfg.depths, stage_strides()), start=1):
        name = f"{prefix}.stage{s}"
        x = merging_layer(x, params, f"{name}.merge", stride, training)
        for b in range(depth):
            x = fusion_block(x, params, f"{name}.block{b}", cfg, training)
        if trace is not None:
            trace[f"encoder.stage{s}"] = x
        feats.append(x)
    return feats


# ---------------------------------------------------------------------------
# analytic cost accounting
# ---------------------------------------------------------------------------


@dataclass
class FlopRow:
    layer: str
    kind: str
    h: int
    w: int
    k: int
    cin: int
    cout: int
    macs: int
    full_macs: int  # cost of the same layer as a dense conv over all channels


def flops_report(cfg: EncoderConfig, input_extents: Tuple[int, int]) -> List[FlopRow]:
    """Per-layer multiply-accumulate counts of the encoder.

    Partial convolutions are charged H*W*k^2*C'^2; ``full_macs`` carries the
    dense H*W*k^2*C^2 alternative so the saving can be read off directly.
    """
    h, w = input_extents
    rows: List[FlopRow] = []
    cin = IN_CHANNELS
    for s, (width, depth, stride) in enumerate(zip(cfg.widths, cfg.depths, stage_strides()), start=1):
        h, w = h // stride, w // stride
        m = h * w * stride * stride * cin * width
        rows.append(FlopRow(f"stage{s}.merge", "merge", h, w, stride, cin, width, m, m))
        cp = partial_channels(width, cfg.split_ratio)
        hidden = cfg.expansion * width
        for b in range(depth):
            base = f"stage{s}.block{b}"
            rows.append(FlopRow(f"{base}.pconv", "partial", h, w, 3, cp, cp,
                                partial_conv_flops(h, w, 3, cp), partial_conv_flops(h, w, 3, width)))
            pw1 = h * w * width * hidden
            pw2 = h * w * hidden * width
            rows.append(FlopRow(f"{base}.pw1", "pointwise", h, w, 1, width, hidden, pw1, pw1))
            rows.append(FlopRow(f"{base}.pw2", "pointwise", h, w, 1, hidden, width, pw2, pw2))
        cin = width
    return rows


def partial_conv_flops(h: int, w: int, k: int, c: int) -> int:
    return h * w * k * k * c * c


def partial_full_ratio(rows: Sequence[FlopRow]) -> Fraction:
    part = sum(r.macs for r in rows if r.kind == "partial")
    full = sum(r.full_macs for r in rows if r.kind == "partial")
    if full == 0:
        raise ValueError("no partial-convolution layers in report")
    return Fraction(part, full)
