"""Plain-text run configuration: one `key = value` per line, `#` comments.

Every tunable of every module has a registered dotted key; unknown keys are
rejected so typos fail fast.  CLI flags override file values, and every run
can echo its fully resolved configuration.
"""

from __future__ import annotations

import os

from .losses import LossConfig
from .data import SynthConfig
from .trainer import RefinementConfig, TrainConfig
from .unet import ConfigError, UNetConfig


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_int_range(text):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"expected 'lo,hi', got {text!r}")
    return (int(parts[0]), int(parts[1]))


def _parse_float_range(text):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"expected 'lo,hi', got {text!r}")
    return (float(parts[0]), float(parts[1]))


def _parse_schedule(text):
    """'1:2,2:2,3:4' -> ((1,2),(2,2),(3,4))"""
    phases = []
    for chunk in text.split(","):
        k, _, e = chunk.strip().partition(":")
        phases.append((int(k), int(e)))
    return tuple(phases)


# key -> (target section, field name, parser)
KEYS = {
    "synth.canvas_size": ("synth", "canvas_size", int),
    "synth.stroke_count": ("synth", "stroke_count", _parse_int_range),
    "synth.stroke_width": ("synth", "stroke_width", _parse_float_range),
    "synth.stroke_length": ("synth", "stroke_length", _parse_float_range),
    "synth.gap_probability": ("synth", "gap_probability", float),
    "synth.gap_length": ("synth", "gap_length", _parse_float_range),
    "synth.distractor_count": ("synth", "distractor_count", _parse_int_range),
    "synth.distractor_radius": ("synth", "distractor_radius", _parse_float_range),
    "synth.background_amplitude": ("synth", "background_amplitude", float),
    "synth.noise_std": ("synth", "noise_std", float),
    "synth.stroke_intensity": ("synth", "stroke_intensity", _parse_float_range),
    "synth.seed": ("synth", "seed", int),
    "unet.depth": ("unet", "depth", int),
    "unet.base_channels": ("unet", "base_channels", int),
    "unet.convs_per_level": ("unet", "convs_per_level", int),
    "unet.input_channels": ("unet", "input_channels", int),
    "unet.input_size": ("unet", "input_size", int),
    "train.learning_rate": ("train", "learning_rate", float),
    "train.beta1": ("train", "beta1", float),
    "train.beta2": ("train", "beta2", float),
    "train.adam_eps": ("train", "adam_eps", float),
    "train.batch_size": ("train", "batch_size", int),
    "train.epochs": ("train", "epochs", int),
    "train.patch_size": ("train", "patch_size", int),
    "train.seed": ("train", "seed", int),
    "train.augment": ("train", "augment_mirror_rotate", _parse_bool),
    "train.elastic_std": ("train", "elastic_std", float),
    "train.elastic_spacing": ("train", "elastic_spacing", int),
    "train.val_fraction": ("train", "val_fraction", float),
    "train.precision": ("train", "precision", str),
    "loss.mu": ("loss", "mu", float),
    "loss.reduction": ("loss", "reduction", str),
    "loss.clamp_eps": ("loss", "clamp_eps", float),
    "refine.k": ("refine", "k_final", int),
    "refine.schedule": ("refine", "schedule", _parse_schedule),
    "metrics.rho": ("metrics", "rho", float),
    "metrics.rho_match": ("metrics", "rho_match", float),
    "metrics.path_samples": ("metrics", "path_samples", int),
    "metrics.seed": ("metrics", "seed", int),
    "metrics.threshold": ("metrics", "threshold", str),  # number or "auto"
}

METRIC_DEFAULTS = {"rho": 2.0, "rho_match": None, "path_samples": 200,
                   "seed": 0, "threshold": "auto"}


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return values


class RunConfig:
    """Merged file + override values, resolved into typed config objects."""

    def __init__(self, raw=None):
        self.raw = dict(raw or {})
        for key in self.raw:
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")

    @classmethod
    def from_file(cls, path):
        if path is None:
            return cls({})
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            return cls(parse_config_text(fh.read(), source=path))

    def override(self, key, value):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        self.raw[key] = str(value)

    def _section(self, name):
        out = {}
        for key, text in self.raw.items():
            section, field, parser = KEYS[key]
            if section == name:
                try:
                    out[field] = parser(text)
                except (ValueError, ConfigError) as exc:
                    raise ConfigError(f"bad value for {key}: {exc}")
        return out

    def synth_config(self):
        return SynthConfig(**self._section("synth"))

    def unet_config(self):
        return UNetConfig(**self._section("unet"))

    def train_config(self):
        kwargs = self._section("train")
        kwargs["loss"] = self.loss_config()
        return TrainConfig(**kwargs)

    def loss_config(self):
        return LossConfig(**self._section("loss"))

    def refine_config(self):
        kwargs = self._section("refine")
        if "schedule" in kwargs and "k_final" not in kwargs:
            kwargs["k_final"] = kwargs["schedule"][-1][0]
        return RefinementConfig(**kwargs)

    def metrics_options(self):
        opts = dict(METRIC_DEFAULTS)
        opts.update(self._section("metrics"))
        return opts

    def resolved_text(self):
        """Echo of every known key with its effective value."""
        lines = ["# resolved configuration"]
        objs = {"synth": self.synth_config(), "unet": self.unet_config(),
                "train": self.train_config(), "loss": self.loss_config(),
                "refine": self.refine_config()}
        mopts = self.metrics_options()
        for key in sorted(KEYS):
            section, field, _ = KEYS[key]
            if section == "metrics":
                value = mopts[field]
            elif section == "train" and field == "loss":
                continue
            else:
                value = getattr(objs[section], field)
            if isinstance(value, tuple):
                if key == "refine.schedule":
                    value = ",".join(f"{k}:{e}" for k, e in value)
                else:
                    value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"
