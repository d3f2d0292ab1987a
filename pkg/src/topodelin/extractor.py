"""Frozen convolutional descriptors of curvilinear structure.

Two backends produce the multi-channel feature maps compared by the
topology loss: a deterministic analytic filter bank (oriented elongated
filters plus center-surround filters, applied over a 3-level pyramid), and
a loaded stack of pretrained conv weights in the portable format.  Kernels
are frozen: describe() is differentiable w.r.t. the image only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor
from .weights_io import WeightFormatError, load_weights

# per-channel normalization applied by the replicate adapter (the standard
# ImageNet preprocessing the pretrained weights were trained with)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

VGG_BLOCKS = ((1, 2, 64), (2, 2, 128), (3, 4, 256))  # (block, convs, channels)
DEFAULT_VGG_LAYERS = ("conv1_2", "conv2_2", "conv3_4")


class TopologyMismatchError(WeightFormatError):
    """Weight file contents disagree with the declared layer topology."""


@dataclass(frozen=True)
class ExtractorConfig:
    backend: str = "analytic-bank"  # or "loaded-weights"
    selected_layers: tuple[str, ...] = ()  # empty -> backend default
    input_adapter: str = ""  # "pass-through" | "replicate3-normalize"

    def resolved_layers(self, available):
        layers = self.selected_layers or tuple(available)
        if not layers:
            raise ValueError("selected_layers must be non-empty")
        for name in layers:
            if name not in available:
                raise ValueError(
                    f"selected layer {name!r} not in backend layers {available}")
        return layers

    def resolved_adapter(self):
        if self.input_adapter:
            return self.input_adapter
        return ("pass-through" if self.backend == "analytic-bank"
                else "replicate3-normalize")


@dataclass
class LayerFeatures:
    name: str
    map: Tensor
    downsample: int


@dataclass
class FeatureStack:
    layers: list[LayerFeatures] = field(default_factory=list)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


def vgg_topology():
    """Declared {tensor name: shape} for the truncated pretrained stack."""
    shapes = {}
    in_ch = 3
    for block, convs, ch in VGG_BLOCKS:
        for layer in range(1, convs + 1):
            shapes[f"conv{block}_{layer}.weight"] = (ch, in_ch, 3, 3)
            shapes[f"conv{block}_{layer}.bias"] = (ch,)
            in_ch = ch
    return shapes


def _gaussian(size, sigma):
    r = size // 2
    v, u = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    g = np.exp(-(u * u + v * v) / (2.0 * sigma * sigma))
    return g / g.sum()


def _oriented_kernel(theta, size=9, sigma_along=2.5, sigma_across=1.0):
    """Elongated ridge filter: second derivative of a Gaussian across the
    line direction, Gaussian envelope along it.  Zero mean, unit L2 norm."""
    r = size // 2
    v, u = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    c, s = np.cos(theta), np.sin(theta)
    along = u * c + v * s
    across = -u * s + v * c
    k = (1.0 - (across / sigma_across) ** 2) * np.exp(
        -(along ** 2) / (2 * sigma_along ** 2)
        - (across ** 2) / (2 * sigma_across ** 2))
    k -= k.mean()
    return k / np.linalg.norm(k)


def _center_surround_kernel(size=9, sigma=1.0, ratio=1.6):
    """Difference-of-Gaussians blob detector.  Zero mean, unit L2 norm."""
    k = _gaussian(size, sigma) - _gaussian(size, sigma * ratio)
    k -= k.mean()
    return k / np.linalg.norm(k)


SMOOTH_3X3 = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 16.0


class Extractor:
    """Frozen descriptor stack; immutable after construction."""

    def __init__(self, config, weights, layer_names):
        self.config = config
        self.weights = weights  # {name: frozen Tensor}
        self.layer_names = tuple(layer_names)  # available taps, in order
        self.selected = config.resolved_layers(self.layer_names)
        self.adapter = config.resolved_adapter()
        self._deepest = max(self.layer_names.index(n) for n in self.selected)

    def channel_count(self, layer_name):
        if self.config.backend == "analytic-bank":
            return self.weights[f"{layer_name}.weight"].shape[0]
        return dict((f"conv{b}_{l}", ch)
                    for b, n, ch in VGG_BLOCKS
                    for l in range(1, n + 1))[layer_name]

    def _adapt(self, image):
        if self.adapter == "pass-through":
            return image
        rgb = engine.concat_channels(engine.concat_channels(image, image), image)
        scale = Tensor(1.0 / np.asarray(IMAGENET_STD, dtype=image.dtype))
        shift = Tensor(-np.asarray(IMAGENET_MEAN, dtype=image.dtype)
                       / np.asarray(IMAGENET_STD, dtype=image.dtype))
        return engine.channel_affine(rgb, scale, shift)

    def describe(self, image):
        """Feature stack of a single-channel image with values in [0, 1]."""
        if not isinstance(image, Tensor):
            raise TypeError("describe expects an engine Tensor")
        if image.data.ndim != 4 or image.shape[1] != 1:
            raise ValueError(
                f"describe expects a (N,1,H,W) single-channel map, got {image.shape}")
        lo, hi = float(image.data.min()), float(image.data.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(
                f"describe input out of range [0,1]: min={lo:.4g} max={hi:.4g}")
        if self.config.backend == "analytic-bank":
            return self._describe_analytic(image)
        return self._describe_loaded(image)

    def _describe_analytic(self, image):
        # edge-replicating padding keeps the zero-mean filters silent on
        # constant inputs all the way to the borders
        stack = FeatureStack()
        carrier = image
        factor = 1
        pad = self.weights["level1.weight"].shape[-1] // 2
        for idx, name in enumerate(self.layer_names):
            resp = engine.conv2d(engine.replicate_pad(carrier, pad),
                                 self.weights[f"{name}.weight"],
                                 stride=1, padding=0)
            if name in self.selected:
                stack.layers.append(LayerFeatures(name, resp, factor))
            if idx == self._deepest:
                break
            carrier = engine.conv2d(engine.replicate_pad(carrier, 1),
                                    self.weights["smooth.weight"],
                                    stride=2, padding=0)
            factor *= 2
        return stack

    def _describe_loaded(self, image):
        stack = FeatureStack()
        x = self._adapt(image)
        factor = 1
        done = False
        for block, convs, _ in VGG_BLOCKS:
            for layer in range(1, convs + 1):
                name = f"conv{block}_{layer}"
                x = engine.conv2d(x, self.weights[f"{name}.weight"], 1, 1)
                x = engine.add_bias(x, self.weights[f"{name}.bias"])
                x = engine.relu(x)
                if name in self.selected:
                    stack.layers.append(LayerFeatures(name, x, factor))
                if name == self.layer_names[self._deepest]:
                    done = True
                    break
            if done:
                break
            x = engine.maxpool2x2(x)
            factor *= 2
        return stack


DEFAULT_BANK_GAIN = 10.0


def analytic_extractor(orientations=4, scales=3, config=None, dtype=np.float64,
                       gain=DEFAULT_BANK_GAIN):
    """Deterministic, seed-free filter bank over a `scales`-level pyramid.

    Each level holds `orientations` elongated ridge filters (angles k*pi/n)
    plus one center-surround filter; levels are linked by a smoothing
    stride-2 downsampling, so deeper levels respond to coarser structure.
    The gain scales all band-pass kernels; the default is calibrated so
    the squared descriptor distance of a typical imperfect prediction has
    the same order of magnitude as its pixel-wise loss at the default
    term weight of 0.1.
    """
    if orientations < 4:
        raise ValueError(f"orientations must be >= 4, got {orientations}")
    if scales < 1:
        raise ValueError(f"scales must be >= 1, got {scales}")
    if gain <= 0:
        raise ValueError(f"gain must be > 0, got {gain}")
    names = tuple(f"level{i}" for i in range(1, scales + 1))
    if config is None:
        config = ExtractorConfig(backend="analytic-bank", selected_layers=names)
    elif config.backend != "analytic-bank":
        raise ValueError(f"config backend {config.backend!r} is not analytic-bank")

    kernels = [gain * _oriented_kernel(i * np.pi / orientations)
               for i in range(orientations)]
    kernels.append(gain * _center_surround_kernel())
    bank = np.stack(kernels)[:, None, :, :].astype(dtype)  # (M, 1, k, k)

    weights = {}
    for name in names:
        weights[f"{name}.weight"] = Tensor(bank.copy(), frozen=True,
                                           name=f"{name}.weight")
    weights["smooth.weight"] = Tensor(SMOOTH_3X3[None, None].astype(dtype),
                                      frozen=True, name="smooth.weight")
    return Extractor(config, weights, names)


def load_extractor(weight_file, config=None):
    """Build the loaded-weights backend from a portable weight file,
    validating names and shapes against the declared topology."""
    if config is None:
        config = ExtractorConfig(backend="loaded-weights",
                                 selected_layers=DEFAULT_VGG_LAYERS)
    elif config.backend != "loaded-weights":
        raise ValueError(f"config backend {config.backend!r} is not loaded-weights")

    raw = load_weights(weight_file)
    expected = vgg_topology()
    missing = sorted(set(expected) - set(raw))
    extra = sorted(set(raw) - set(expected))
    if missing or extra:
        raise TopologyMismatchError(
            f"weight file topology mismatch: missing={missing} extra={extra}")
    for name, shape in expected.items():
        if raw[name].shape != shape:
            raise TopologyMismatchError(
                f"tensor {name!r}: shape {raw[name].shape} != declared {shape}")

    weights = {name: Tensor(arr.astype(np.float64), frozen=True, name=name)
               for name, arr in raw.items()}
    layer_names = tuple(f"conv{b}_{l}" for b, n, _ in VGG_BLOCKS
                        for l in range(1, n + 1))
    return Extractor(config, weights, layer_names)
