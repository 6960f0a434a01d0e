"""Plain-text run configuration: ``key=value`` lines, ``#`` starts a comment."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from ecovnet.augment import AugmentRanges
from ecovnet.data import DEFAULT_CLASSES
from ecovnet.errors import ArgumentError
from ecovnet.model import (ArchSpec, PRESET_RESOLUTIONS, ScalingCoefficients, b0_arch,
                           micro_arch, preset_arch, scale_arch)
from ecovnet.train import TrainConfig


@dataclass
class RunConfig:
    arch: str = "micro"          # micro | b0..b5
    phi: float | None = None     # overrides the preset's compound coefficient
    resolution: int | None = None
    epochs: int = 25
    batch_size: int = 8
    lr: float = 1e-4
    cycles: int = 5
    seed: int = 0
    class_weights: str = "none"
    augment: bool = False
    rotation_deg: tuple[float, float] = (-10.0, 10.0)
    shear_deg: tuple[float, float] = (-10.0, 10.0)
    zoom: tuple[float, float] = (0.9, 1.1)
    flip_prob: float = 0.5
    val_fraction: float = 0.1
    dtype: str = "float32"
    classes: tuple[str, ...] = field(default=DEFAULT_CLASSES)

    def arch_spec(self) -> ArchSpec:
        name = self.arch.lower()
        n = len(self.classes)
        if name == "micro":
            spec = micro_arch(num_classes=n)
            if self.phi:
                spec = scale_arch(spec, ScalingCoefficients(phi=self.phi))
        elif name in PRESET_RESOLUTIONS:
            spec = preset_arch(name, n) if self.phi is None else scale_arch(b0_arch(n), ScalingCoefficients(phi=self.phi))
        else:
            raise ArgumentError(f"unknown arch {self.arch!r}")
        if self.resolution:
            spec = replace(spec, resolution=self.resolution)
        return spec

    def train_config(self) -> TrainConfig:
        ranges = AugmentRanges(self.rotation_deg, self.shear_deg, self.zoom, self.flip_prob)
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.cycles, self.seed,
                           self.class_weights, self.augment, ranges)

    @property
    def np_dtype(self) -> np.dtype:
        if self.dtype not in ("float32", "float64"):
            raise ArgumentError("dtype must be float32 or float64")
        return np.dtype(self.dtype)


_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _parse_range(text: str) -> tuple[float, float]:
    parts = [p for p in text.replace(":", ",").split(",") if p.strip()]
    if len(parts) == 1:
        v = abs(float(parts[0]))
        return (-v, v)
    if len(parts) == 2:
        return (float(parts[0]), float(parts[1]))
    raise ValueError(f"expected 'lo,hi' or a single magnitude, got {text!r}")


def _coerce(name: str, text: str):
    text = text.strip()
    if name in ("rotation_deg", "shear_deg"):
        return _parse_range(text)
    if name == "zoom":
        parts = [float(p) for p in text.split(",")]
        return (parts[0], parts[-1]) if len(parts) <= 2 else _parse_range(text)
    if name == "classes":
        return tuple(c.strip() for c in text.split(",") if c.strip())
    if name == "augment":
        if text.lower() not in _BOOL:
            raise ValueError(f"not a boolean: {text!r}")
        return _BOOL[text.lower()]
    if name == "phi":
        return None if text.lower() in ("", "none") else float(text)
    if name == "resolution":
        return None if text.lower() in ("", "none") else int(text)
    if name in ("epochs", "batch_size", "cycles", "seed"):
        return int(text)
    if name in ("lr", "flip_prob", "val_fraction"):
        return float(text)
    return text


KEYS = tuple(f.name for f in fields(RunConfig))


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    values = {}
    for key, text in pairs.items():
        key = key.strip().replace("-", "_")
        if key not in KEYS:
            raise ArgumentError(f"unknown config key {key!r}")
        try:
            values[key] = _coerce(key, text)
        except ValueError as exc:
            raise ArgumentError(f"bad value for {key}: {exc}") from exc
    return replace(cfg, **values)


def parse_config_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArgumentError(f"config line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        with open(path) as fh:
            cfg = apply_overrides(cfg, parse_config_text(fh.read()))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg
