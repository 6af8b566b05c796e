"""``key = value`` configuration files and the typed configs built from them."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Tuple

from .data import DataConfig
from .encoder import EncoderConfig
from .fusion import FusionConfig
from .instance import InstanceDecoderConfig
from .losses import LossConfig
from .model import ModelConfig
from .scheduler import SchedulerConfig
from .semantic import SemanticDecoderConfig


class ConfigError(ValueError):
    """Unknown key, malformed line or out-of-range value."""


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> Tuple[int, ...]:
    s = s.strip()
    if s.lower() in ("", "none"):
        return ()
    return tuple(int(p) for p in s.split(","))


def _floats(s: str) -> Tuple[float, ...]:
    return tuple(float(p) for p in s.split(","))


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v) if v else "none"
    return str(v)


@dataclass(frozen=True)
class Key:
    name: str
    default: Any
    parse: Callable[[str], Any]
    help: str


KEYS: List[Key] = [
    Key("encoder.widths", (16, 32, 64, 128), _ints, "channel width of each of the 4 stages"),
    Key("encoder.depths", (1, 1, 2, 1), _ints, "fusion blocks per stage"),
    Key("encoder.split_ratio", 0.25, float, "fraction of channels seen by the partial conv"),
    Key("encoder.expansion", 2, int, "pointwise expansion factor in a fusion block"),
    Key("semantic.embed_dim", 64, int, "shared embedding width of the semantic decoder"),
    Key("semantic.num_classes", 6, int, "semantic classes (stuff + things)"),
    Key("semantic.nfcl_layers", (1, 2, 3), _ints, "encoder stages gated by NFCL ('none' for no gating)"),
    Key("semantic.cfil_position", "semantic", str,
        "none | encoder | instance | both-decoders | encoder+semantic | semantic"),
    Key("semantic.cfil_kernel", 3, int, "kernel of the CFIL fusion conv"),
    Key("instance.width", (64, 32, 16), _ints, "channel width of the 3 instance decoder layers"),
    Key("instance.blocks_per_layer", 3, int, "non-bottleneck-1D blocks per decoder layer"),
    Key("instance.pyramid_supervision", True, _bool, "supervise every decoder level, not only the finest"),
    Key("losses.kappa", 1.0, float, "concentration of the orientation loss"),
    Key("losses.center_sigma", 8.0, float, "center heatmap std in full-resolution pixels"),
    Key("losses.ignore_id", 255, int, "semantic label excluded from the loss"),
    Key("scheduler.mode", "adaptive", str, "fixed | adaptive"),
    Key("scheduler.alpha", 0.01, float, "exponent on the average relative loss"),
    Key("scheduler.w_min", 0.1, float, "lower bound on every task weight"),
    Key("scheduler.window", 1000, int, "relative-loss history length"),
    Key("scheduler.base_weights", (1.0, 1.0, 1.0, 1.0, 1.0), _floats, "base weights for se,ce,of,or,sc"),
    Key("fusion.center_threshold", 0.1, float, "minimum heatmap score for a center"),
    Key("fusion.nms_kernel", 3, int, "max-filter window for center NMS"),
    Key("fusion.top_k", 200, int, "maximum centers per image"),
    Key("fusion.min_area", 0, int, "instances smaller than this many pixels become void"),
    Key("train.lr", 0.03, float, "SGD learning rate"),
    Key("train.momentum", 0.9, float, "SGD momentum"),
    Key("train.weight_decay", 1e-4, float, "L2 weight decay"),
    Key("train.batch_size", 8, int, "samples per batch"),
    Key("train.iterations", 500, int, "optimizer steps"),
    Key("train.epochs", 0, int, "if > 0, train this many passes over the data instead"),
    Key("train.seed", 0, int, "seed for init and batch order"),
    Key("train.cosine", False, _bool, "cosine learning-rate decay to zero"),
    Key("train.shuffle", True, _bool, "reshuffle samples every epoch"),
    Key("data.height", 64, int, "scene height in pixels"),
    Key("data.width", 64, int, "scene width in pixels"),
    Key("data.num_stuff", 2, int, "stuff classes (horizontal bands)"),
    Key("data.num_things", 4, int, "thing classes"),
    Key("data.min_objects", 1, int, "minimum instances per scene"),
    Key("data.max_objects", 4, int, "maximum instances per scene"),
    Key("data.min_size", 10, int, "minimum object extent in pixels"),
    Key("data.max_size", 18, int, "maximum object extent in pixels"),
    Key("data.min_center_distance", 16.0, float, "minimum pixel distance between instance centroids"),
    Key("data.depth_noise", False, _bool, "add Gaussian sensor noise to depth"),
    Key("scene.num_classes", 4, int, "scene classes"),
    Key("bench.epochs", 60, int, "epochs of the synthetic loss-stream benchmark"),
    Key("bench.batches_per_epoch", 20, int, "batches per benchmark epoch"),
    Key("gradcheck.seeds", 20, int, "random seeds per gradient check"),
    Key("gradcheck.eps", 1e-4, float, "finite-difference step (cases may override)"),
    Key("gradcheck.tolerance", 1e-5, float, "maximum relative error"),
    Key("gradcheck.coords", 24, int, "sampled coordinates per tensor and seed"),
]

KEY_INDEX: Dict[str, Key] = {k.name: k for k in KEYS}


def defaults() -> Dict[str, Any]:
    return {k.name: k.default for k in KEYS}


def help_text() -> str:
    width = max(len(k.name) for k in KEYS)
    lines = ["configuration keys (key = default  # meaning):"]
    for k in KEYS:
        lines.append(f"  {k.name:<{width}} = {_fmt(k.default):<20} # {k.help}")
    return "\n".join(lines)


class Config:
    """Validated mapping from every known key to its value."""

    def __init__(self, values: Dict[str, Any] = None):
        self.values = defaults()
        for name, v in (values or {}).items():
            if name not in KEY_INDEX:
                raise ConfigError(f"unknown config key: {name}")
            self.values[name] = v
        self.validate()

    def __getitem__(self, name: str) -> Any:
        return self.values[name]

    def replace(self, **overrides) -> "Config":
        vals = dict(self.values)
        for k, v in overrides.items():
            vals[k.replace("__", ".")] = v
        return Config(vals)

    def with_values(self, mapping: Dict[str, Any]) -> "Config":
        vals = dict(self.values)
        vals.update(mapping)
        return Config(vals)

    def to_text(self) -> str:
        return "".join(f"{k.name} = {_fmt(self.values[k.name])}\n" for k in KEYS)

    # typed views ---------------------------------------------------------

    def thing_classes(self) -> frozenset:
        s = self["data.num_stuff"]
        return frozenset(range(s, s + self["data.num_things"]))

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self["encoder.widths"], self["encoder.depths"],
                             self["encoder.split_ratio"], self["encoder.expansion"])

    def semantic(self) -> SemanticDecoderConfig:
        return SemanticDecoderConfig(self["semantic.embed_dim"], self["semantic.num_classes"],
                                     frozenset(self["semantic.nfcl_layers"]), self["semantic.cfil_position"],
                                     self["semantic.cfil_kernel"])

    def instance(self) -> InstanceDecoderConfig:
        return InstanceDecoderConfig(self["instance.width"], self["instance.blocks_per_layer"],
                                     self["instance.pyramid_supervision"])

    def model(self) -> ModelConfig:
        return ModelConfig(self.encoder(), self.semantic(), self.instance(), self["scene.num_classes"],
                           (self["data.height"], self["data.width"]))

    def losses(self) -> LossConfig:
        return LossConfig(self["losses.kappa"], self["losses.center_sigma"], self["losses.ignore_id"])

    def scheduler(self) -> SchedulerConfig:
        return SchedulerConfig(self["scheduler.mode"], self["scheduler.alpha"], self["scheduler.w_min"],
                               self["scheduler.window"], self["scheduler.base_weights"])

    def fusion(self) -> FusionConfig:
        return FusionConfig(self["fusion.center_threshold"], self["fusion.nms_kernel"], self["fusion.top_k"],
                            self["fusion.min_area"], self.thing_classes(), 255)

    def data(self) -> DataConfig:
        return DataConfig(self["data.height"], self["data.width"], self["data.num_stuff"],
                          self["data.min_objects"], self["data.max_objects"], self["data.min_size"],
                          self["data.max_size"], self["data.min_center_distance"],
                          self["data.depth_noise"])

    def validate(self) -> None:
        try:
            self.model()
            self.losses()
            self.scheduler()
            self.fusion()
            self.data()
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None
        v = self.values
        if v["semantic.num_classes"] != v["data.num_stuff"] + v["data.num_things"]:
            raise ConfigError("semantic.num_classes must equal data.num_stuff + data.num_things")
        for k in ("train.lr", "train.batch_size"):
            if not v[k] > 0:
                raise ConfigError(f"{k} must be positive")
        for k in ("train.momentum", "train.weight_decay", "train.iterations", "train.epochs"):
            if v[k] < 0:
                raise ConfigError(f"{k} must be nonnegative")
        if v["train.iterations"] == 0 and v["train.epochs"] == 0:
            raise ConfigError("set train.iterations or train.epochs")
        for k in ("bench.epochs", "bench.batches_per_epoch", "gradcheck.seeds", "gradcheck.coords"):
            if v[k] < 1:
                raise ConfigError(f"{k} must be >= 1")


def parse_config(text: str, source: str = "<config>") -> Config:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        name, value = (p.strip() for p in line.split("=", 1))
        if name not in KEY_INDEX:
            raise ConfigError(f"{source}:{lineno}: unknown config key: {name}")
        if name in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {name}")
        try:
            values[name] = KEY_INDEX[name].parse(value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {name}: {e}") from None
    try:
        return Config(values)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None


def load_config(path) -> Config:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))
