"""Full network: fusion encoder, semantic and instance decoders, scene head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import functional as F
from . import nn
from .encoder import EncoderConfig, encoder_forward, init_encoder
from .fusion import FusionConfig, PanopticMap, find_centers, group_pixels, instance_orientation, merge_panoptic
from .instance import InstanceDecoderConfig, LevelOutputs, cfil_layer, init_instance, instance_decode
from .losses import init_scene_head, scene_head
from .semantic import SemanticDecoderConfig, cfil, cfil_site, init_cfil, init_semantic, semantic_decode
from .tensor import Tensor, no_grad


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    semantic: SemanticDecoderConfig = field(default_factory=SemanticDecoderConfig)
    instance: InstanceDecoderConfig = field(default_factory=InstanceDecoderConfig)
    num_scene_classes: int = 4
    input_size: Sequence[int] = (64, 64)

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.num_scene_classes < 2:
            raise ValueError("need at least 2 scene classes")
        if any(v % 32 for v in self.input_size):
            raise ValueError(f"input extents {self.input_size} must be divisible by 32")

    def stage_extents(self) -> List[tuple]:
        h, w = self.input_size
        return [(h // f, w // f) for f in (4, 8, 16, 32)]

    def encoder_cfil_stage(self) -> Optional[int]:
        """Deepest encoder stage (1-based) large enough for CFIL, if enabled."""
        if not self.semantic.cfil_in("encoder"):
            return None
        for s in range(4, 0, -1):
            if cfil_site(self.stage_extents()[s - 1]) and self.encoder.widths[s - 1] % 2 == 0:
                return s
        raise ValueError("no encoder stage is large enough for CFIL")

    def instance_cfil_layer(self) -> Optional[int]:
        if not self.semantic.cfil_in("instance"):
            return None
        layer = cfil_layer(self.input_size)
        if layer is None:
            raise ValueError("no instance decoder layer is large enough for CFIL")
        return layer


@dataclass
class ModelOutputs:
    semantic_logits: Tensor      # N x K x H x W
    levels: List[LevelOutputs]   # coarse to fine
    scene_logits: Tensor         # N x S


def init_model(cfg: ModelConfig, seed: int) -> nn.Params:
    init = nn.Initializer(seed)
    init_encoder(init, cfg.encoder)
    s = cfg.encoder_cfil_stage()
    if s is not None:
        init_cfil(init, f"encoder.stage{s}.cfil", cfg.encoder.widths[s - 1], cfg.semantic.cfil_kernel)
    init_semantic(init, cfg.semantic, cfg.encoder.widths)
    init_instance(init, cfg.instance, cfg.encoder.widths, cfg.instance_cfil_layer(), cfg.semantic.cfil_kernel)
    init_scene_head(init, cfg.encoder.widths[-1], cfg.num_scene_classes)
    return init.params


def forward(params: nn.Params, rgbd, cfg: ModelConfig, training: bool = False,
            trace: Optional[Dict[str, Tensor]] = None) -> ModelOutputs:
    x = rgbd if isinstance(rgbd, Tensor) else Tensor(np.asarray(rgbd))
    if tuple(x.shape[2:]) != cfg.input_size:
        raise ValueError(f"input extents {x.shape[2:]} differ from configured {cfg.input_size}")
    feats = encoder_forward(x, cfg.encoder, params, training, trace=trace)
    s = cfg.encoder_cfil_stage()
    if s is not None:
        feats[s - 1] = cfil(feats[s - 1], params, f"encoder.stage{s}.cfil", training, trace)
        if trace is not None:
            trace[f"encoder.stage{s}.context"] = feats[s - 1]
    logits = semantic_decode(feats, cfg.semantic, params, training, out_size=cfg.input_size, trace=trace)
    levels = instance_decode(feats, cfg.instance, params, training, trace=trace)
    scene = scene_head(feats[-1], params)
    if trace is not None:
        trace["scene.logits"] = scene
    return ModelOutputs(logits, levels, scene)


@dataclass
class Prediction:
    semantic_logits: np.ndarray  # K x H x W
    heatmap: np.ndarray          # h x w at the finest level
    offsets: np.ndarray          # 2 x H x W, full-resolution pixels
    orientation: np.ndarray      # 2 x H x W
    scene_logits: np.ndarray     # S
    level_scale: int


def predict(params: nn.Params, rgbd: np.ndarray, cfg: ModelConfig) -> List[Prediction]:
    """Eval-mode inference with the instance outputs brought to full resolution."""
    with no_grad():
        out = forward(params, Tensor(np.asarray(rgbd, dtype=np.float32)), cfg, training=False)
        fine = out.levels[-1]
        h, w = cfg.input_size
        offsets = F.bilinear_upsample(fine.offset, h, w).data * fine.scale
        orient = F.bilinear_upsample(fine.orientation, h, w).data
    return [
        Prediction(
            semantic_logits=out.semantic_logits.data[i],
            heatmap=fine.center.data[i, 0],
            offsets=offsets[i],
            orientation=orient[i],
            scene_logits=out.scene_logits.data[i],
            level_scale=fine.scale,
        )
        for i in range(out.scene_logits.shape[0])
    ]


def panoptic_from_prediction(p: Prediction, fcfg: FusionConfig) -> PanopticMap:
    """Peaks are found on the level heatmap and mapped to full-resolution coordinates."""
    semantic = np.argmax(p.semantic_logits, axis=0)
    s = p.level_scale
    centers = [(r * s + (s - 1) / 2.0, c * s + (s - 1) / 2.0, score) for r, c, score in find_centers(p.heatmap, fcfg)]
    fg = np.isin(semantic, list(fcfg.thing_classes))
    grid = group_pixels(centers, p.offsets, fg)
    pan = merge_panoptic(semantic, grid, fcfg)
    pan.orientations = instance_orientation(p.orientation, pan.instance)
    return pan
