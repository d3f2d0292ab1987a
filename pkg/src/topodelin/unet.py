"""Small shared-weight U-Net predictor over (image ⊕ previous prediction).

Padded 3x3 convolutions keep the output aligned with the input; every conv
is followed by batch normalization (current-batch statistics in both
training and inference) and ReLU.  The head is a 1x1 conv + sigmoid, so
outputs are per-pixel probabilities.  One parameter set serves every
refinement iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine, weights_io
from .engine import Tensor


class ConfigError(ValueError):
    """Invalid model/training configuration."""


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    convs_per_level: int = 2
    input_channels: int = 2  # image + previous prediction
    input_size: int = 64

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.convs_per_level < 1:
            raise ConfigError(f"invalid U-Net config: {self}")
        if self.input_size % (1 << self.depth):
            raise ConfigError(
                f"input size {self.input_size} not divisible by 2^depth="
                f"{1 << self.depth}")

    def encoder_channels(self):
        return [self.base_channels << i for i in range(self.depth)]

    def to_dict(self):
        return {"depth": self.depth, "base_channels": self.base_channels,
                "convs_per_level": self.convs_per_level,
                "input_channels": self.input_channels,
                "input_size": self.input_size}


@dataclass
class ModelParams:
    tensors: dict[str, Tensor] = field(default_factory=dict)
    scheme: str = "he-fan-in"
    seed: int = 0

    def __iter__(self):
        return iter(self.tensors.items())


def _layer_plan(config):
    """Yield (name, kind, shape) for every parameter, in a fixed order."""
    enc = config.encoder_channels()
    mid = config.base_channels << config.depth
    plan = []

    def conv_block(prefix, cin, cout):
        for j in range(config.convs_per_level):
            ci = cin if j == 0 else cout
            plan.append((f"{prefix}.conv{j}.weight", "conv", (cout, ci, 3, 3)))
            plan.append((f"{prefix}.conv{j}.bias", "bias", (cout,)))
            plan.append((f"{prefix}.bn{j}.scale", "scale", (cout,)))
            plan.append((f"{prefix}.bn{j}.shift", "shift", (cout,)))

    prev = config.input_channels
    for i, ch in enumerate(enc):
        conv_block(f"enc{i}", prev, ch)
        prev = ch
    conv_block("mid", prev, mid)
    above = mid
    for i in reversed(range(config.depth)):
        plan.append((f"dec{i}.up.weight", "upconv", (above, enc[i], 2, 2)))
        plan.append((f"dec{i}.up.bias", "bias", (enc[i],)))
        conv_block(f"dec{i}", 2 * enc[i], enc[i])
        above = enc[i]
    plan.append(("head.weight", "conv", (1, enc[0], 1, 1)))
    plan.append(("head.bias", "bias", (1,)))
    return plan


def init_params(config, seed=0, dtype=np.float64):
    """He fan-in initialization from a seeded generator; BN scale 1, shift 0."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, kind, shape in _layer_plan(config):
        if kind in ("conv", "upconv"):
            fan_in = shape[1] * shape[2] * shape[3] if kind == "conv" \
                else shape[0] * shape[2] * shape[3]
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif kind == "scale":
            data = np.ones(shape)
        else:  # bias, shift
            data = np.zeros(shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return ModelParams(tensors=tensors, scheme="he-fan-in", seed=seed)


def param_count(config):
    return sum(int(np.prod(shape)) for _, _, shape in _layer_plan(config))


def empty_prediction(shape, dtype=np.float64):
    """The all-zero map used to start the refinement iteration."""
    if len(shape) == 2:
        shape = (1, 1) + tuple(shape)
    if len(shape) != 4 or shape[1] != 1:
        raise ConfigError(f"prediction shape must be (N,1,H,W) or (H,W), got {shape}")
    return Tensor(np.zeros(shape, dtype=dtype), _check=False)


def _conv_unit(x, params, prefix, j):
    t = params.tensors
    x = engine.conv2d(x, t[f"{prefix}.conv{j}.weight"], stride=1,
                      padding=t[f"{prefix}.conv{j}.weight"].shape[-1] // 2)
    x = engine.add_bias(x, t[f"{prefix}.conv{j}.bias"])
    x = engine.batchnorm(x, t[f"{prefix}.bn{j}.scale"], t[f"{prefix}.bn{j}.shift"])
    return engine.relu(x)


def forward(config, params, image, previous):
    """One network application: probability map for (image ⊕ previous)."""
    if image.shape != previous.shape:
        raise engine.ShapeError(
            f"image shape {image.shape} != previous prediction shape "
            f"{previous.shape}")
    if image.data.ndim != 4 or image.shape[1] != 1:
        raise engine.ShapeError(f"expected (N,1,H,W) inputs, got {image.shape}")
    if previous.data.min() < 0 or previous.data.max() > 1:
        raise ValueError("previous prediction values must lie in [0, 1]")
    h, w = image.shape[2], image.shape[3]
    if h % (1 << config.depth) or w % (1 << config.depth):
        raise engine.ShapeError(
            f"spatial extents {h}x{w} not divisible by 2^depth={1 << config.depth}")

    t = params.tensors
    x = engine.concat_channels(image, previous)
    skips = []
    for i in range(config.depth):
        for j in range(config.convs_per_level):
            x = _conv_unit(x, params, f"enc{i}", j)
        skips.append(x)
        x = engine.maxpool2x2(x)
    for j in range(config.convs_per_level):
        x = _conv_unit(x, params, "mid", j)
    for i in reversed(range(config.depth)):
        x = engine.transpose_conv2d(x, t[f"dec{i}.up.weight"], stride=2)
        x = engine.add_bias(x, t[f"dec{i}.up.bias"])
        x = engine.concat_channels(skips[i], x)
        for j in range(config.convs_per_level):
            x = _conv_unit(x, params, f"dec{i}", j)
    x = engine.conv2d(x, t["head.weight"], stride=1, padding=0)
    x = engine.add_bias(x, t["head.bias"])
    out = engine.sigmoid(x)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0
    return out


# ---------------------------------------------------------------------------
# checkpointing: portable weight format + plain-text config sidecar

def save_checkpoint(path, config, params, extra_tensors=None, meta=None):
    tensors = {name: t.data for name, t in params.tensors.items()}
    for name, arr in (extra_tensors or {}).items():
        tensors[f"opt.{name}"] = arr
    weights_io.save_weights(path, tensors)
    sidecar = {f"unet.{k}": v for k, v in config.to_dict().items()}
    sidecar["scheme"] = params.scheme
    sidecar["seed"] = params.seed
    sidecar.update(meta or {})
    weights_io.write_sidecar(str(path) + ".meta", sidecar)


def load_checkpoint(path, dtype=np.float64):
    """Returns (config, params, extra_tensors, meta); the file stores
    float32, parameters come back in the requested compute dtype."""
    raw = weights_io.load_weights(path)
    sidecar = weights_io.read_sidecar(str(path) + ".meta")
    cfg_kwargs = {}
    meta = {}
    for key, value in sidecar.items():
        if key.startswith("unet."):
            cfg_kwargs[key[5:]] = int(value)
        elif key not in ("scheme", "seed"):
            meta[key] = value
    config = UNetConfig(**cfg_kwargs)
    tensors = {}
    extra = {}
    for name, arr in raw.items():
        if name.startswith("opt."):
            extra[name[4:]] = arr.astype(dtype)
        else:
            tensors[name] = Tensor(arr.astype(dtype), requires_grad=True,
                                   name=name)
    expected = {name for name, _, _ in _layer_plan(config)}
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        extra_names = sorted(set(tensors) - expected)
        raise weights_io.WeightFormatError(
            f"checkpoint does not match config: missing={missing} "
            f"extra={extra_names}")
    params = ModelParams(tensors=tensors, scheme=sidecar.get("scheme", "he-fan-in"),
                         seed=int(sidecar.get("seed", 0)))
    return config, params, extra, meta
