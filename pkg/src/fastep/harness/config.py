"""Experiment configuration: plain key=value files plus command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

EXPERIMENTS = ("deconvolution", "cartesian_mri", "custom")
SOLVERS = ("fast", "parallel", "sequential", "vb")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = "deconvolution"
    height: int = 16
    width: int = 16
    image: str | None = None
    kernel: str | None = None
    kernel_height: int = 5
    kernel_width: int = 5
    kernel_spread: float = 1.0
    columns: int = 16
    column_pattern: str = "lowpass"
    noise_var: float = 1e-3
    tau_a: str = "0.04/sigma"
    tau_r: str = "0.08/sigma"
    wavelet_levels: int | None = None
    eta: float = 0.9
    solver: str = "fast"
    epsilon: float = 1e-12
    damping: float = 0.9
    max_outer: int = 200
    tol_fixed_point: float = 1e-5
    tol_inner: float = 1e-8
    time_limit: float | None = None
    seed: int = 0
    output: str = "ep_output"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}")
        for name in ("height", "width", "kernel_height", "kernel_width", "columns", "max_outer"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("kernel_spread", "noise_var", "epsilon", "tol_fixed_point", "tol_inner"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.eta <= 1:
            raise ConfigError("eta must lie in (0, 1]")
        if not 0 < self.damping <= 1:
            raise ConfigError("damping must lie in (0, 1]")
        if self.column_pattern not in ("lowpass", "random"):
            raise ConfigError("column_pattern must be lowpass or random")
        for name in ("tau_a", "tau_r"):
            if not self.tau(name) > 0:
                raise ConfigError(f"{name} must be positive")

    def tau(self, name) -> float:
        """Resolve a scale given either as a number or as '<number>/sigma'."""
        raw = str(getattr(self, name)).strip().replace(" ", "")
        try:
            if raw.endswith("/sigma"):
                return float(raw[: -len("/sigma")]) / self.noise_var ** 0.5
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {name}={raw!r}") from exc

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"


def _field_types():
    hints = {}
    for f in fields(ExperimentConfig):
        t = str(f.type)
        if t.startswith("int"):
            hints[f.name] = int
        elif t.startswith("float"):
            hints[f.name] = float
        else:
            hints[f.name] = str
    return hints


FIELD_TYPES = _field_types()


def coerce(key: str, value: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown configuration key {key!r}")
    if value.strip().lower() in ("", "none"):
        return None
    try:
        return FIELD_TYPES[key](value.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Config file values, then overrides (already typed or raw strings)."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_config_text(text))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        values[key] = coerce(key, value) if isinstance(value, str) else value
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
