"""PP-LCNet architecture: block table, variant config, model assembly and forward pass.

The network is a straight chain with no shortcuts::

    stem conv3x3/s2 -> BN -> act
    13 x [ DW conv -> BN -> act -> (SE) -> PW conv -> BN -> act ]
    GAP -> 1x1 conv (bias, no BN) -> act -> dropout -> FC -> (softmax)

Each primitive layer is a small object that knows its parameter shapes, its
output shape and its MAC count, and can run forward while optionally caching
what the hand-written backward pass needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Optional, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, ShapeMismatchError
from .ops import ConvDesc

NUM_BLOCKS = 13
DEFAULT_SE_MASK = "0000000000011"
DEFAULT_KERNEL_MASK = "0000001111111"
PUBLISHED_SCALES = (0.25, 0.35, 0.5, 0.75, 1.0, 1.5, 2.0, 2.5)
STEM_CHANNELS = 16
INPUT_CHANNELS = 3


def make_divisible(v: float, divisor: int = 8) -> int:
    """Round ``v`` to a multiple of ``divisor``, never shrinking it by more than 10%."""
    if v <= 0 or divisor <= 0:
        raise ValueError(f"make_divisible needs positive arguments, got v={v}, divisor={divisor}")
    new_v = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


@dataclass(frozen=True)
class BlockSpec:
    kernel: int
    stride: int
    in_c_base: int
    out_c_base: int
    use_se: bool


_BLOCKS = (
    BlockSpec(3, 1, 16, 32, False),
    BlockSpec(3, 2, 32, 64, False),
    BlockSpec(3, 1, 64, 64, False),
    BlockSpec(3, 2, 64, 128, False),
    BlockSpec(3, 1, 128, 128, False),
    BlockSpec(3, 2, 128, 256, False),
    *[BlockSpec(5, 1, 256, 256, False)] * 5,
    BlockSpec(5, 2, 256, 512, True),
    BlockSpec(5, 1, 512, 512, True),
)


def base_block_table() -> list[BlockSpec]:
    """The 13 DepthSepConv rows at base width (stem excluded)."""
    return list(_BLOCKS)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class LCNetConfig:
    scale: float = 1.0
    se_mask: str = DEFAULT_SE_MASK
    kernel_mask: str = DEFAULT_KERNEL_MASK
    num_classes: int = 1000
    last_conv_dim: int = 1280
    dropout_rate: float = 0.2
    divisor: int = 8
    enable_hswish: bool = True
    enable_last_conv: bool = True

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"scale must be > 0, got {self.scale}")
        for name in ("se_mask", "kernel_mask"):
            mask = getattr(self, name)
            if not isinstance(mask, str) or len(mask) != NUM_BLOCKS or set(mask) - {"0", "1"}:
                raise ConfigError(f"{name} must be a string of {NUM_BLOCKS} '0'/'1' characters, got {mask!r}")
        if self.num_classes < 1 or self.last_conv_dim < 1 or self.divisor < 1:
            raise ConfigError("num_classes, last_conv_dim and divisor must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def channels(self, base: int) -> int:
        return make_divisible(base * self.scale, self.divisor)

    def blocks(self) -> list[BlockSpec]:
        """Block table with the kernel and SE masks applied."""
        return [
            replace(spec, kernel=5 if k == "1" else 3, use_se=se == "1")
            for spec, k, se in zip(_BLOCKS, self.kernel_mask, self.se_mask)
        ]

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "LCNetConfig":
        """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
        kinds = {f.name: f.type for f in fields(cls)}
        values: dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in kinds:
                raise ConfigError(f"line {lineno}: expected 'key = value' with a known key, got {raw!r}")
            kind = kinds[key]
            try:
                if kind == "float":
                    values[key] = float(value)
                elif kind == "int":
                    values[key] = int(value)
                elif kind == "bool":
                    values[key] = _parse_bool(value)
                else:
                    values[key] = value
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        return cls(**values)


# -- layers ------------------------------------------------------------------

@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    # conv | linear | bias | bn_gamma | bn_beta | bn_mean | bn_var
    role: str
    fan_out: int = 0

    @property
    def trainable(self) -> bool:
        return self.role not in ("bn_mean", "bn_var")

    @property
    def size(self) -> int:
        return math.prod(self.shape)


class Trace:
    """Per-call record of a forward pass: layer caches and BN running-stat updates."""

    def __init__(self):
        self.caches: list[tuple["Layer", dict]] = []
        self.stat_updates: dict[str, np.ndarray] = {}


@dataclass
class RunContext:
    mode: str
    seed: Any
    workers: int
    trace: Optional[Trace] = None
    use_dropout: bool = True


class Layer:
    kind = "layer"

    def param_specs(self) -> list[ParamSpec]:
        return []

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def macs(self, in_shape: tuple[int, ...]) -> int:
        return 0

    def forward(self, x: np.ndarray, P: dict, ctx: RunContext, cache: Optional[dict]) -> np.ndarray:
        raise NotImplementedError


@dataclass
class Conv(Layer):
    name: str
    group: str
    desc: ConvDesc
    kind = "conv"

    def param_specs(self):
        d = self.desc
        groups = d.in_channels if d.depthwise else 1
        specs = [ParamSpec(f"{self.name}.weight", d.weight_shape, "conv", d.out_channels * d.kernel ** 2 // groups)]
        if d.has_bias:
            specs.append(ParamSpec(f"{self.name}.bias", (d.out_channels,), "bias"))
        return specs

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.desc.in_channels:
            raise ShapeMismatchError(f"{self.name}: got {c} input channels, expected {self.desc.in_channels}")
        return (self.desc.out_channels, *self.desc.output_hw(h, w))

    def macs(self, in_shape):
        d = self.desc
        _, ho, wo = self.out_shape(in_shape)
        cin_per_group = 1 if d.depthwise else d.in_channels
        return ho * wo * d.out_channels * cin_per_group * d.kernel ** 2

    def forward(self, x, P, ctx, cache):
        if cache is not None:
            cache["x"] = x
        return ops.conv2d_fast(x, P[f"{self.name}.weight"], P.get(f"{self.name}.bias"), self.desc, ctx.workers)


@dataclass
class BatchNorm(Layer):
    name: str
    group: str
    channels: int
    kind = "bn"

    def param_specs(self):
        c = (self.channels,)
        return [
            ParamSpec(f"{self.name}.gamma", c, "bn_gamma"),
            ParamSpec(f"{self.name}.beta", c, "bn_beta"),
            ParamSpec(f"{self.name}.running_mean", c, "bn_mean"),
            ParamSpec(f"{self.name}.running_var", c, "bn_var"),
        ]

    def forward(self, x, P, ctx, cache):
        n = self.name
        if ctx.mode == "infer":
            if cache is not None:
                cache["x"] = x
            bn = ops.BatchNormParams(P[f"{n}.gamma"], P[f"{n}.beta"], P[f"{n}.running_mean"], P[f"{n}.running_var"])
            return ops.batchnorm_infer(x, bn)
        res = ops.batchnorm_train(
            x, P[f"{n}.gamma"], P[f"{n}.beta"],
            running_mean=P[f"{n}.running_mean"], running_var=P[f"{n}.running_var"],
        )
        if cache is not None:
            cache.update(x=x, mean=res.mean, var=res.var)
        if ctx.trace is not None:
            ctx.trace.stat_updates[f"{n}.running_mean"] = res.running_mean
            ctx.trace.stat_updates[f"{n}.running_var"] = res.running_var
        return res.out


@dataclass
class Activation(Layer):
    group: str
    fn: str  # hswish | relu
    kind = "act"

    def forward(self, x, P, ctx, cache):
        if cache is not None:
            cache["x"] = x
        return ops.hswish(x) if self.fn == "hswish" else ops.relu(x)


@dataclass
class SqueezeExcite(Layer):
    name: str
    group: str
    channels: int
    reduction: int = ops.SE_REDUCTION
    kind = "se"

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction

    def param_specs(self):
        c, h = self.channels, self.hidden
        return [
            ParamSpec(f"{self.name}.fc1.weight", (h, c), "conv", h),
            ParamSpec(f"{self.name}.fc1.bias", (h,), "bias"),
            ParamSpec(f"{self.name}.fc2.weight", (c, h), "conv", c),
            ParamSpec(f"{self.name}.fc2.bias", (c,), "bias"),
        ]

    def macs(self, in_shape):
        return 2 * self.channels * self.hidden

    def params(self, P) -> ops.SEParams:
        n = self.name
        return ops.SEParams(P[f"{n}.fc1.weight"], P[f"{n}.fc1.bias"], P[f"{n}.fc2.weight"], P[f"{n}.fc2.bias"])

    def forward(self, x, P, ctx, cache):
        parts = ops.se_forward(x, self.params(P))
        if cache is not None:
            cache.update(x=x, parts=parts)
        return parts.out


@dataclass
class GlobalAvgPool(Layer):
    group: str
    kind = "gap"

    def out_shape(self, in_shape):
        return (in_shape[0], 1, 1)

    def forward(self, x, P, ctx, cache):
        if cache is not None:
            cache["shape"] = x.shape
        return ops.global_avg_pool(x)


@dataclass
class Flatten(Layer):
    group: str
    kind = "flatten"

    def out_shape(self, in_shape):
        return (math.prod(in_shape),)

    def forward(self, x, P, ctx, cache):
        if cache is not None:
            cache["shape"] = x.shape
        return x.reshape(x.shape[0], -1)


@dataclass
class Dropout(Layer):
    group: str
    rate: float
    index: int = 0
    kind = "dropout"

    def forward(self, x, P, ctx, cache):
        if ctx.mode == "infer" or self.rate == 0 or not ctx.use_dropout:
            if cache is not None:
                cache["mask"] = None
            return x
        mask = ops.dropout_mask(x.shape, self.rate, [ctx.seed, self.index], x.dtype)
        if cache is not None:
            cache["mask"] = mask
        return x * mask


@dataclass
class Linear(Layer):
    name: str
    group: str
    in_features: int
    out_features: int
    kind = "linear"

    def param_specs(self):
        return [
            ParamSpec(f"{self.name}.weight", (self.out_features, self.in_features), "linear"),
            ParamSpec(f"{self.name}.bias", (self.out_features,), "bias"),
        ]

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeMismatchError(f"{self.name}: got input {in_shape}, expected ({self.in_features},)")
        return (self.out_features,)

    def macs(self, in_shape):
        return self.in_features * self.out_features

    def forward(self, x, P, ctx, cache):
        if cache is not None:
            cache["x"] = x
        return ops.fully_connected(x, P[f"{self.name}.weight"], P[f"{self.name}.bias"])


# -- model -------------------------------------------------------------------

@dataclass
class Model:
    config: LCNetConfig
    layers: tuple[Layer, ...]
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def param_specs(self) -> list[ParamSpec]:
        return [spec for layer in self.layers for spec in layer.param_specs()]

    def trainable_names(self) -> list[str]:
        return [s.name for s in self.param_specs() if s.trainable]

    def layer_shapes(self, input_hw: tuple[int, int]) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """Per-sample (input, output) shape of every layer for a given input size."""
        shape: tuple[int, ...] = (INPUT_CHANNELS, *input_hw)
        shapes = []
        for layer in self.layers:
            out = layer.out_shape(shape)
            shapes.append((shape, out))
            shape = out
        return shapes

    def count(self, kind: str) -> int:
        return sum(1 for layer in self.layers if layer.kind == kind)


def _conv_bn_act(layers: list, name: str, group: str, desc: ConvDesc, act: str) -> None:
    layers.append(Conv(f"{name}.conv", group, desc))
    layers.append(BatchNorm(f"{name}.bn", group, desc.out_channels))
    layers.append(Activation(group, act))


def build_layers(config: LCNetConfig) -> tuple[Layer, ...]:
    act = "hswish" if config.enable_hswish else "relu"
    layers: list[Layer] = []
    c = config.channels(STEM_CHANNELS)
    _conv_bn_act(layers, "stem", "stem", ConvDesc(INPUT_CHANNELS, c, 3, 2), act)
    for i, spec in enumerate(config.blocks()):
        group = f"blocks.{i}"
        cin, cout = config.channels(spec.in_c_base), config.channels(spec.out_c_base)
        assert cin == c, "block channel chain broken"
        _conv_bn_act(layers, f"{group}.dw", group, ConvDesc(cin, cin, spec.kernel, spec.stride, depthwise=True), act)
        if spec.use_se:
            layers.append(SqueezeExcite(f"{group}.se", group, cin))
        _conv_bn_act(layers, f"{group}.pw", group, ConvDesc(cin, cout, 1, 1), act)
        c = cout
    layers.append(GlobalAvgPool("gap"))
    if config.enable_last_conv:
        layers.append(Conv("last_conv", "last_conv", ConvDesc(c, config.last_conv_dim, 1, 1, has_bias=True)))
        layers.append(Activation("last_conv", act))
        c = config.last_conv_dim
    layers.append(Flatten("fc"))
    if config.enable_last_conv and config.dropout_rate > 0:
        layers.append(Dropout("fc", config.dropout_rate))
    layers.append(Linear("fc", "fc", c, config.num_classes))
    return tuple(layers)


def build_model(config: LCNetConfig | None = None, seed: int = 0) -> Model:
    """Assemble the layer chain for ``config`` and initialise its parameters."""
    from .weights import init_params

    config = config or LCNetConfig()
    model = Model(config, build_layers(config))
    init_params(model, seed)
    return model


def check_input(model: Model, x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1] != INPUT_CHANNELS:
        raise ShapeMismatchError(f"input must be [N, {INPUT_CHANNELS}, H, W], got {x.shape}")
    h, w = x.shape[2:]
    if h < 32 or w < 32 or h % 32 or w % 32:
        raise ShapeMismatchError(f"input spatial size must be >= 32 and divisible by 32, got {h}x{w}")


def run_layers(
    model: Model,
    x: np.ndarray,
    mode: str,
    params: Optional[dict] = None,
    seed: Any = 0,
    workers: int = 1,
    trace: Optional[Trace] = None,
    use_dropout: bool = True,
) -> np.ndarray:
    """Run the layer chain and return logits (no softmax)."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    P = model.params if params is None else params
    check_input(model, x)
    ctx = RunContext(mode, seed, workers, trace, use_dropout)
    for layer in model.layers:
        cache = None
        if trace is not None:
            cache = {}
            trace.caches.append((layer, cache))
        x = layer.forward(x, P, ctx, cache)
    return x


def forward(
    model: Model,
    x,
    mode: str = "infer",
    *,
    params: Optional[dict] = None,
    seed: Any = 0,
    workers: int = 1,
) -> np.ndarray:
    """Class probabilities in infer mode, logits in train mode.

    Train mode uses batch statistics and applies dropout; running statistics
    are left untouched (see :func:`lcnet.autodiff.model_backward`).
    """
    P = model.params if params is None else params
    dtype = next(iter(P.values())).dtype
    x = np.ascontiguousarray(x, dtype=dtype)
    logits = run_layers(model, x, mode, P, seed, workers)
    return ops.softmax(logits) if mode == "infer" else logits


def block_output_shapes(model: Model, input_hw: Sequence[int] = (224, 224)) -> dict[str, tuple[int, ...]]:
    """Output shape of each layer group (stem, blocks.i, gap, last_conv, fc)."""
    out: dict[str, tuple[int, ...]] = {}
    for layer, (_, shape) in zip(model.layers, model.layer_shapes(tuple(input_hw))):
        out[layer.group] = shape
    return out
