"""Plain-text ``key = value`` configuration files.

Lines starting with ``#`` are comments; list values are comma-separated.
"""

from __future__ import annotations

import dataclasses
import math
import typing
from pathlib import Path

from .model import Family, ParameterVector
from .simulation import SimConfig


class ConfigError(ValueError):
    """A configuration file could not be parsed."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def parse_pairs(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", key)
        pairs[key] = value
    return pairs


def split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _parse_float(text: str) -> float:
    text = text.strip()
    if text.lower().startswith("sqrt(") and text.endswith(")"):
        return math.sqrt(float(text[5:-1]))
    return float(text)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def convert(value: str, annotation) -> object:
    """Convert ``value`` to the type named by a dataclass field annotation."""
    origin = typing.get_origin(annotation)
    if origin is tuple:
        (inner, *_rest) = typing.get_args(annotation)
        return tuple(convert(v, inner) for v in split_list(value))
    if annotation is bool:
        return _parse_bool(value)
    if annotation is int:
        return int(value)
    if annotation is float:
        return _parse_float(value)
    if annotation is Family:
        return Family.parse(value)
    return value.strip()


def build_dataclass(cls, pairs: dict[str, str], *, extra: typing.Iterable[str] = ()):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in pairs.items():
        if key in extra:
            continue
        if key not in names:
            raise ConfigError(f"unknown configuration key {key!r}", key)
        try:
            kwargs[key] = convert(value, hints[key])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", key) from None
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


_SIM_KEYS = {
    "family": Family,
    "n": int,
    "n_clusters": int,
    "p_success": float,
    "score_sd": float,
    "a": float,
    "b": float,
    "beta_scale": tuple[float, ...],
    "beta_shape": tuple[float, ...],
    "sigma2": float,
    "p_cens": float,
    "seed": int,
    "mc_n": int,
}
_SIM_REQUIRED = ("family", "n", "n_clusters", "a", "b")


def load_sim_config(path) -> SimConfig:
    """Read a simulation config file.

    Keys: family, n, n_clusters, p_success (0.5), score_sd (sqrt(0.2)), a, b,
    beta_scale, beta_shape, sigma2 (0), p_cens (0), seed (0), mc_n (1e6).
    """
    return sim_config_from_text(Path(path).read_text())


def sim_config_from_text(text: str) -> SimConfig:
    pairs = parse_pairs(text)
    values = {}
    for key, value in pairs.items():
        if key not in _SIM_KEYS:
            raise ConfigError(f"unknown configuration key {key!r}", key)
        try:
            values[key] = convert(value, _SIM_KEYS[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", key) from None
    for key in _SIM_REQUIRED:
        if key not in values:
            raise ConfigError(f"missing required key {key!r}", key)
    try:
        params = ParameterVector(
            values["a"],
            values["b"],
            values.get("beta_scale", ()),
            values.get("beta_shape", ()),
            values.get("sigma2", 0.0),
        )
        return SimConfig(
            family=values["family"],
            n=values["n"],
            n_clusters=values["n_clusters"],
            p_success=values.get("p_success", 0.5),
            score_sd=values.get("score_sd", math.sqrt(0.2)),
            true_params=params,
            p_cens=values.get("p_cens", 0.0),
            seed=values.get("seed", 0),
            mc_n=values.get("mc_n", 1_000_000),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
