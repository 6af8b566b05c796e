"""Three-layer instance decoder with factorized (non-bottleneck 1D) blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from . import functional as F
from . import nn
from .semantic import cfil, cfil_site, init_cfil
from .tensor import Tensor, relu, sigmoid

NUM_LAYERS = 3


@dataclass
class InstanceDecoderConfig:
    width: Tuple[int, ...] = (64, 32, 16)
    blocks_per_layer: int = 3
    pyramid_supervision: bool = True

    def __post_init__(self):
        if isinstance(self.width, int):
            self.width = (self.width,) * NUM_LAYERS
        self.width = tuple(int(w) for w in self.width)
        if len(self.width) != NUM_LAYERS or min(self.width) < 1:
            raise ValueError(f"instance.width needs {NUM_LAYERS} positive entries")
        if self.blocks_per_layer < 0:
            raise ValueError("blocks_per_layer must be >= 0")


@dataclass
class LevelOutputs:
    center: Tensor       # N x 1 x h x w, sigmoid heatmap
    offset: Tensor       # N x 2 x h x w, (d_row, d_col) in level pixels
    orientation: Tensor  # N x 2 x h x w, raw (cos, sin)
    scale: int           # input pixels per level pixel


def param_savings(c: int, k: int, f: int) -> float:
    """Parameter ratio of a k x 1 + 1 x k pair to one k x k conv: 2/k."""
    if k <= 0 or c <= 0 or f <= 0:
        raise ValueError("param_savings needs positive C, k, F")
    return (2 * c * k * f) / (c * k * k * f)


def init_non_bottleneck_1d(init: nn.Initializer, name: str, c: int) -> None:
    # first conv of each factorized pair carries a bias, the second is followed by BN
    init.conv(f"{name}.conv3x1_1", c, c, 3, 1, bias=True)
    init.conv(f"{name}.conv1x3_1", c, c, 1, 3, bias=False)
    init.bn(f"{name}.bn1", c)
    init.conv(f"{name}.conv3x1_2", c, c, 3, 1, bias=True)
    init.conv(f"{name}.conv1x3_2", c, c, 1, 3, bias=False, gain=0.5)
    init.bn(f"{name}.bn2", c)


def non_bottleneck_1d(x: Tensor, params: nn.Params, name: str, training: bool) -> Tensor:
    if params[f"{name}.conv3x1_1.weight"].shape[1] != x.shape[1]:
        raise ValueError(f"{name}: block width does not match {x.shape[1]} input channels")
    y = relu(nn.conv(params, f"{name}.conv3x1_1", x, padding=(1, 0)))
    y = nn.conv(params, f"{name}.conv1x3_1", y, padding=(0, 1))
    y = relu(nn.bn(params, f"{name}.bn1", y, training))
    y = relu(nn.conv(params, f"{name}.conv3x1_2", y, padding=(1, 0)))
    y = nn.conv(params, f"{name}.conv1x3_2", y, padding=(0, 1))
    y = nn.bn(params, f"{name}.bn2", y, training)
    return relu(x + y)


def init_instance(init: nn.Initializer, cfg: InstanceDecoderConfig, enc_widths: Sequence[int],
                  cfil_after: Optional[int] = None, cfil_kernel: int = 3, prefix: str = "instance") -> None:
    cin = enc_widths[-1]
    for layer, width in enumerate(cfg.width):
        name = f"{prefix}.layer{layer}"
        init.conv(f"{name}.conv", cin, width, 3, bias=False)
        init.bn(f"{name}.bn", width)
        for b in range(cfg.blocks_per_layer):
            init_non_bottleneck_1d(init, f"{name}.nb{b}", width)
        skip_c = enc_widths[len(enc_widths) - 2 - layer]
        init.conv(f"{name}.skip", skip_c, width, 1, bias=False)
        init.bn(f"{name}.skip_bn", width)
        if cfil_after == layer:
            init_cfil(init, f"{name}.cfil", width, cfil_kernel)
        init.conv(f"{name}.head_center", width, 1, 1, gain=0.5)
        init.conv(f"{name}.head_offset", width, 2, 1, gain=0.5)
        init.conv(f"{name}.head_orientation", width, 2, 1, gain=0.5)
        cin = width


def cfil_layer(extents: Sequence[int]) -> Optional[int]:
    """Index of the first decoder layer whose output is large enough for CFIL.

    ``extents`` holds the input (H, W). Layer l outputs at 1/2^(4-l).
    """
    for layer in range(NUM_LAYERS):
        f = 2 ** (4 - layer)
        if cfil_site((extents[0] // f, extents[1] // f)):
            return layer
    return None


def instance_decode(feats: Sequence[Tensor], cfg: InstanceDecoderConfig, params: nn.Params,
                    training: bool = False, prefix: str = "instance",
                    trace: Optional[Dict[str, Tensor]] = None) -> List[LevelOutputs]:
    """Decode centers, offsets and orientations at three pyramid levels.

    Level 0 is the coarsest (1/16 of the input), level 2 the finest (1/4).
    """
    if len(feats) != 4:
        raise ValueError(f"instance decoder needs 4 encoder stages, got {len(feats)}")
    input_h = feats[0].shape[2] * 4
    x = feats[-1]
    outputs: List[LevelOutputs] = []
    for layer in range(NUM_LAYERS):
        name = f"{prefix}.layer{layer}"
        x = relu(nn.bn(params, f"{name}.bn", nn.conv(params, f"{name}.conv", x, padding=1), training))
        b = 0
        while f"{name}.nb{b}.conv3x1_1.weight" in params:
            x = non_bottleneck_1d(x, params, f"{name}.nb{b}", training)
            b += 1
        skip_feat = feats[len(feats) - 2 - layer]
        x = F.bilinear_upsample(x, skip_feat.shape[2], skip_feat.shape[3])
        skip = nn.bn(params, f"{name}.skip_bn", nn.conv(params, f"{name}.skip", skip_feat), training)
        if skip.shape != x.shape:
            raise ValueError(f"{name}: skip shape {skip.shape} does not match decoder shape {x.shape}")
        x = x + skip
        if f"{name}.cfil.proj.weight" in params:
            x = cfil(x, params, f"{name}.cfil", training, trace)
        if trace is not None:
            trace[f"instance.layer{layer}"] = x
        outputs.append(LevelOutputs(
            center=sigmoid(nn.conv(params, f"{name}.head_center", x)),
            offset=nn.conv(params, f"{name}.head_offset", x),
            orientation=nn.conv(params, f"{name}.head_orientation", x),
            scale=input_h // x.shape[2],
        ))
    return outputs
