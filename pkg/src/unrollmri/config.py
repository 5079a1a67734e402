"""Experiment configuration: a flat key=value text format.

Exactly these keys are accepted (anything else is rejected so typos fail
loudly). Command-line flags override file values; ``--dump-config`` prints
the effective configuration in the same format, and parsing that dump gives
the identical config back.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ParameterError


@dataclass
class Config:
    K: int = 5
    layers: int = 3
    filters: int = 16
    dc_mode: str = "cg"
    sharing: str = "ws"
    training: str = "et"
    accel: float = 4.0
    coils: int = 4
    noise_sigma: float = 0.01
    epochs: int = 10
    batch: int = 10
    lr: float = 1e-3
    seed: int = 0
    precision: str = "f32"
    cg_tol: float = 1e-8
    cg_iters: int = 50

    def __post_init__(self):
        if self.K < 1:
            raise ParameterError(f"K must be >= 1, got {self.K}")
        if self.layers < 1:
            raise ParameterError(f"layers must be >= 1, got {self.layers}")
        if self.filters < 1:
            raise ParameterError(f"filters must be >= 1, got {self.filters}")
        if self.dc_mode not in ("cg", "sd"):
            raise ParameterError(f"dc_mode must be cg|sd, got {self.dc_mode!r}")
        if self.sharing not in ("ws", "ns"):
            raise ParameterError(f"sharing must be ws|ns, got {self.sharing!r}")
        if self.training not in ("et", "pd"):
            raise ParameterError(f"training must be et|pd, got {self.training!r}")
        if self.precision not in ("f32", "f64"):
            raise ParameterError(f"precision must be f32|f64, got {self.precision!r}")
        if self.accel < 1:
            raise ParameterError(f"accel must be >= 1, got {self.accel}")
        if self.coils < 0:
            raise ParameterError(f"coils must be >= 0, got {self.coils}")
        if self.noise_sigma < 0:
            raise ParameterError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.epochs < 0 or self.batch < 1:
            raise ParameterError("epochs must be >= 0 and batch >= 1")
        if self.cg_tol <= 0 or self.cg_iters < 1:
            raise ParameterError("cg_tol must be > 0 and cg_iters >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={v}" if isinstance(v, str) else f"{f.name}={v!r}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(Config)}
_INT_KEYS = {"K", "layers", "filters", "coils", "epochs", "batch", "seed", "cg_iters"}
_FLOAT_KEYS = {"accel", "noise_sigma", "lr", "cg_tol"}


def _convert(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ParameterError(f"bad value for config key {key!r}: {raw!r}") from exc


def parse_config_text(text: str, base: Config | None = None) -> Config:
    """Parse key=value lines ('#' starts a comment). Unknown keys raise
    :class:`ParameterError` naming the key."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParameterError(f"malformed config line {lineno}: {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ParameterError(f"unknown config key {key!r}")
        values[key] = _convert(key, val)
    if base is not None:
        merged = {f.name: getattr(base, f.name) for f in fields(Config)}
        merged.update(values)
        values = merged
    return Config(**values)


def load_config(path, base: Config | None = None) -> Config:
    with open(path) as f:
        return parse_config_text(f.read(), base=base)


def apply_overrides(cfg: Config, overrides: dict) -> Config:
    """New config with non-None override values applied (flags beat file)."""
    values = {f.name: getattr(cfg, f.name) for f in fields(Config)}
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in values:
            raise ParameterError(f"unknown config key {key!r}")
        values[key] = _convert(key, str(val))
    return Config(**values)
