"""MLP-style semantic decoder with channel gating (NFCL) and context pooling (CFIL)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence

import numpy as np

from . import functional as F
from . import nn
from .tensor import Tensor, concat, relu, sigmoid, tabs, tsum

CFIL_POSITIONS = ("none", "encoder", "instance", "both-decoders", "encoder+semantic", "semantic")

CFIL_SCALES = (1, 5)


@dataclass
class SemanticDecoderConfig:
    embed_dim: int = 64
    num_classes: int = 6
    nfcl_layers: FrozenSet[int] = frozenset({1, 2, 3})
    cfil_position: str = "semantic"
    cfil_kernel: int = 3

    def __post_init__(self):
        self.nfcl_layers = frozenset(int(i) for i in self.nfcl_layers)
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not self.nfcl_layers <= {1, 2, 3, 4}:
            raise ValueError(f"nfcl_layers {sorted(self.nfcl_layers)} reference stages outside 1..4")
        if self.cfil_position not in CFIL_POSITIONS:
            raise ValueError(f"cfil_position must be one of {CFIL_POSITIONS}")
        if self.cfil_kernel < 1 or self.cfil_kernel % 2 == 0:
            raise ValueError("cfil_kernel must be a positive odd integer")

    def cfil_in(self, where: str) -> bool:
        pos = self.cfil_position
        return {
            "encoder": pos in ("encoder", "encoder+semantic"),
            "semantic": pos in ("semantic", "both-decoders", "encoder+semantic"),
            "instance": pos in ("instance", "both-decoders"),
        }[where]


# ---------------------------------------------------------------------------
# NFCL
# ---------------------------------------------------------------------------


def init_nfcl(init: nn.Initializer, name: str, c: int) -> None:
    init.conv(f"{name}.pre_conv", c, c, 1, bias=False)
    init.bn(f"{name}.bn", c)


def nfcl_weights(gamma: Tensor) -> Tensor:
    """Channel weights |gamma_i| / sum_j |gamma_j|."""
    if not np.any(gamma.data):
        raise ValueError("NFCL channel weights undefined for an all-zero gamma")
    a = tabs(gamma)
    return a / tsum(a)


def nfcl(x: Tensor, params: nn.Params, name: str, training: bool) -> Tensor:
    y = nn.conv(params, f"{name}.pre_conv", x)
    if y.shape[1] != x.shape[1]:
        raise ValueError(f"{name}: gate width {y.shape[1]} does not match input width {x.shape[1]}")
    y = nn.bn(params, f"{name}.bn", y, training)
    w = nfcl_weights(params[f"{name}.bn.gamma"])
    # channel-last weighting is a broadcast over (1, C, 1, 1)
    gate = sigmoid(y * w.reshape(1, -1, 1, 1))
    return x * gate


# ---------------------------------------------------------------------------
# CFIL
# ---------------------------------------------------------------------------


def init_cfil(init: nn.Initializer, name: str, c: int, kernel: int = 3) -> None:
    if c % 2:
        raise ValueError(f"CFIL needs an even channel count, got {c}")
    for s in CFIL_SCALES:
        init.conv(f"{name}.pool{s}", c, c // 2, 1, bias=False)
    init.conv(f"{name}.proj", 2 * c, c, kernel, bias=False)
    init.bn(f"{name}.proj_bn", c)


def cfil(x: Tensor, params: nn.Params, name: str, training: bool,
         trace: Optional[Dict[str, Tensor]] = None) -> Tensor:
    n, c, h, w = x.shape
    if c % 2:
        raise ValueError(f"CFIL needs an even channel count, got {c}")
    if h < max(CFIL_SCALES) or w < max(CFIL_SCALES):
        raise ValueError(f"CFIL needs spatial extent >= {max(CFIL_SCALES)}, got {h}x{w}")
    branches = [x]
    for s in CFIL_SCALES:
        pooled = F.adaptive_avg_pool(x, s, s)
        if trace is not None:
            trace[f"{name}.pooled{s}"] = pooled
        squeezed = nn.conv(params, f"{name}.pool{s}", pooled)
        branches.append(F.bilinear_upsample(squeezed, h, w))
    cat = concat(branches, axis=1)
    if trace is not None:
        trace[f"{name}.concat"] = cat
    k = params[f"{name}.proj.weight"].shape[-1]
    y = nn.conv(params, f"{name}.proj", cat, padding=k // 2)
    return relu(nn.bn(params, f"{name}.proj_bn", y, training))


def cfil_site(extents: Sequence[int]) -> bool:
    return min(extents) >= max(CFIL_SCALES)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


def init_semantic(init: nn.Initializer, cfg: SemanticDecoderConfig, widths: Sequence[int],
                  prefix: str = "semantic") -> None:
    e = cfg.embed_dim
    for s, c in enumerate(widths, start=1):
        if s in cfg.nfcl_layers:
            init_nfcl(init, f"{prefix}.nfcl{s}", c)
        init.conv(f"{prefix}.proj{s}", c, e, 1, bias=False)
    init.conv(f"{prefix}.fuse", len(widths) * e, e, 1, bias=False)
    init.bn(f"{prefix}.fuse_bn", e)
    if cfg.cfil_in("semantic"):
        init_cfil(init, f"{prefix}.cfil", e, cfg.cfil_kernel)
    init.conv(f"{prefix}.classifier", e, cfg.num_classes, 1)


def semantic_decode(feats: Sequence[Tensor], cfg: SemanticDecoderConfig, params: nn.Params,
                    training: bool = False, out_size: Optional[Sequence[int]] = None,
                    prefix: str = "semantic", trace: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """Per-pixel class logits from the four encoder stages.

    Stages listed in ``cfg.nfcl_layers`` are gated by NFCL, every stage is
    projected to ``embed_dim`` and resized to the stage-1 grid, the stack is
    fused by a 1x1 conv, optionally refined by CFIL, classified, and finally
    upsampled to ``out_size`` (4x the stage-1 grid by default).
    """
    if len(feats) != 4:
        raise ValueError(f"semantic decoder needs 4 encoder stages, got {len(feats)}")
    missing = [s for s in cfg.nfcl_layers if s > len(feats)]
    if missing:
        raise ValueError(f"nfcl_layers reference missing stages {missing}")
    base = feats[0].shape
    projected: List[Tensor] = []
    for s, f in enumerate(feats, start=1):
        if s in cfg.nfcl_layers:
            f = nfcl(f, params, f"{prefix}.nfcl{s}", training)
        if trace is not None:
            trace[f"semantic.stage{s}.guided"] = f
        p = nn.conv(params, f"{prefix}.proj{s}", f)
        projected.append(F.upsample_like(p, base))
    fused = relu(nn.bn(params, f"{prefix}.fuse_bn", nn.conv(params, f"{prefix}.fuse", concat(projected, axis=1)), training))
    if trace is not None:
        trace["semantic.fused"] = fused
    if cfg.cfil_in("semantic"):
        fused = cfil(fused, params, f"{prefix}.cfil", training, trace)
    if trace is not None:
        trace["semantic.context"] = fused
    logits = nn.conv(params, f"{prefix}.classifier", fused)
    if out_size is None:
        out_size = (4 * base[2], 4 * base[3])
    logits = F.bilinear_upsample(logits, out_size[0], out_size[1])
    if trace is not None:
        trace["semantic.logits"] = logits
    return logits
