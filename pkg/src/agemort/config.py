"""Flat ``key = value`` run configuration.

Every key is a field of :class:`RunConfig`; values are converted to the
field's type. Blank lines and ``#`` comments are ignored. Fields left at
``None`` take a command-specific default (see ``COMMAND_DEFAULTS``).
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from typing import Optional

from .errors import ConfigurationError

COMMANDS = ("simulate", "twin", "fit", "forecast")


@dataclass(frozen=True)
class RunConfig:
    # shared
    seed: int = 0
    ensemble_size: Optional[int] = None
    delta_t: Optional[float] = None
    update_interval: Optional[int] = None
    chunk_size: int = 1000
    n_a: int = 1000
    delta_a: float = 0.12
    format: str = "json"
    out_dir: str = "."
    data_dir: str = ""
    q_scale: float = 1e-4
    q_structure: str = "diag"
    r_var: float = 1e-4

    # simulate / twin: constant death rate and influx scale
    mu: float = 0.08
    lam: float = 0.2
    times: tuple = (0.1, 2.0, 4.5)
    peak_times: tuple = tuple(round(0.5 * k, 1) for k in range(1, 21))

    # twin
    horizon: float = 10.0
    truth: str = "analytic"
    init_mu: float = 0.1
    init_lam: float = 0.1
    init_n: float = 1e-5
    p0_n: float = 0.5
    p0_param: float = 1.0

    # fit / forecast
    od_mu: float = 7e-4
    od_r0: float = 0.04
    od_alpha1: float = 15.0
    od_beta1: float = 1 / 3
    od_alpha2: float = 15.0
    od_beta2: float = 1 / 3
    n0: float = 274.9e6
    delta_n: float = 2.3e6
    sud_fraction: float = 0.04
    sud_alpha: float = 15.0
    sud_beta: float = 1 / 3
    p0_base: float = 1e-4
    p0_param_var: float = 1e-2
    p0_structure: str = "dense"
    start_year: int = 1998
    first_year: int = 1999
    last_year: int = 2020
    forecast_years: int = 3

    def resolved(self, command: str) -> "RunConfig":
        """Copy with the command defaults filled into every ``None`` field."""
        if command not in COMMANDS:
            raise ConfigurationError(f"unknown command {command!r}")
        fill = {k: v for k, v in COMMAND_DEFAULTS[command].items() if getattr(self, k) is None}
        if command in ("fit", "forecast") and self.update_interval is None:
            dt = fill.get("delta_t", self.delta_t)
            steps = round(1.0 / dt)
            if abs(steps * dt - 1.0) > 1e-9:
                raise ConfigurationError(f"delta_t={dt} does not divide one year")
            fill["update_interval"] = steps
        out = dataclasses.replace(self, **fill)
        out.validate()
        return out

    def validate(self):
        positive = ("delta_a", "n_a", "chunk_size", "q_scale", "r_var", "mu", "lam", "horizon", "init_mu",
                    "init_lam", "p0_n", "p0_param", "od_mu", "od_r0", "od_alpha1", "od_beta1", "od_alpha2",
                    "od_beta2", "n0", "sud_alpha", "sud_beta", "p0_param_var")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("ensemble_size", "delta_t", "update_interval"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.ensemble_size is not None and self.ensemble_size < 2:
            raise ConfigurationError("ensemble_size must be at least 2")
        if self.format not in ("csv", "json"):
            raise ConfigurationError("format must be csv or json")
        if self.q_structure not in ("diag", "ones"):
            raise ConfigurationError("q_structure must be diag or ones")
        if self.p0_structure not in ("diag", "dense"):
            raise ConfigurationError("p0_structure must be diag or dense")
        if self.truth not in ("analytic", "euler"):
            raise ConfigurationError("truth must be analytic or euler")
        if not 0 < self.sud_fraction < 1:
            raise ConfigurationError("sud_fraction must lie in (0, 1)")
        if self.p0_base < 0:
            raise ConfigurationError("p0_base must be nonnegative")
        if not self.start_year < self.first_year <= self.last_year:
            raise ConfigurationError("need start_year < first_year <= last_year")
        if self.forecast_years < 0:
            raise ConfigurationError("forecast_years must be nonnegative")
        if any(t < 0 for t in self.times) or any(t <= 0 for t in self.peak_times):
            raise ConfigurationError("times must be nonnegative and peak_times positive")

    def canonical_text(self) -> str:
        """One ``key = value`` line per field in declaration order.

        ``out_dir`` is left out: where results are written does not change
        them, so reruns into another directory keep the same hash.
        """
        keys = [f.name for f in fields(self) if f.name != "out_dir"]
        return "".join(f"{k} = {_format(getattr(self, k))}\n" for k in keys)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


COMMAND_DEFAULTS = {
    "simulate": {"delta_t": 0.1},
    "twin": {"ensemble_size": 500, "delta_t": 0.1, "update_interval": 5},
    "fit": {"ensemble_size": 10_000, "delta_t": 0.1},
    "forecast": {"ensemble_size": 10_000, "delta_t": 0.1},
}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _field_kind(f) -> str:
    ann = str(f.type)
    for kind in ("int", "float", "str", "tuple"):
        if kind in ann:
            return kind
    raise TypeError(f"unsupported field type {ann}")


def _convert(name: str, kind: str, optional: bool, text: str):
    if optional and text.lower() == "none":
        return None
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple":
            return tuple(float(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigurationError(f"{name}: cannot read {text!r} as {kind}") from None


_FIELDS = {f.name: f for f in fields(RunConfig)}


def coerce(key: str, text: str):
    f = _FIELDS.get(key)
    if f is None:
        raise ConfigurationError(f"unknown config key {key!r}")
    return _convert(key, _field_kind(f), "Optional" in str(f.type), text.strip())


def parse_config(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    """Apply the ``key = value`` lines of ``text`` on top of ``base``."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigurationError(f"config line {lineno}: {key} given twice")
        try:
            values[key] = coerce(key, value)
        except ConfigurationError as exc:
            raise ConfigurationError(f"config line {lineno}: {exc}") from None
    return dataclasses.replace(base, **values)
