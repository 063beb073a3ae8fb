"""Flat ``key = value`` experiment configuration files.

Blank lines and ``#`` comments are ignored. Every key is optional; missing
keys take the defaults of :class:`SimConfig` and :class:`ExperimentPlan`.
Unknown keys, malformed values and constraint violations raise
:class:`ConfigurationError` naming the offending key.

List values are comma separated. ``budget_sweep`` additionally accepts
``start:stop:step`` (inclusive of ``stop``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .errors import ConfigurationError
from .sim import STRATEGIES, SimConfig


def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    value = float(text)
    if math.isnan(value):
        raise ValueError("NaN is not allowed")
    return value


def _optional(parse: Callable[[str], object]) -> Callable[[str], object]:
    def inner(text: str) -> object:
        return None if text.lower() in ("", "none") else parse(text)

    return inner


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def parse_sweep(text: str) -> tuple[float, ...]:
    """``"0:1:0.1"`` -> (0.0, 0.1, ..., 1.0); ``"0,0.5,1"`` -> (0.0, 0.5, 1.0)."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError("range sweeps need start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ValueError("need step > 0 and stop >= start")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(round(start + i * step, 10) for i in range(count))
    return tuple(_float(p) for p in text.split(",") if p.strip())


SIM_KEYS: dict[str, Callable[[str], object]] = {
    "rounds": _int,
    "num_clients": _int,
    "clients_per_round": _int,
    "local_epochs": _int,
    "batch_size": _int,
    "lr": _float,
    "threshold_c": _float,
    "budget_fraction": _float,
    "budget_g": _optional(_float),
    "strategy": str,
    "dirichlet_alpha": _float,
    "noisy_client_ids": _int_list,
    "noise_sigma": _float,
    "seed": _int,
    "trace_path": _optional(str),
    "trace_regions": _optional(_int),
    "trace_curtail_prob": _float,
    "n_samples": _int,
    "n_features": _int,
    "n_classes": _int,
    "hidden_units": _int,
    "separation": _float,
    "brightness": _float,
    "test_fraction": _float,
    "min_samples_per_client": _int,
    "oort_epsilon": _float,
    "oort_epsilon_decay": _float,
}

PLAN_KEYS: dict[str, Callable[[str], object]] = {
    "seeds": _int_list,
    "budget_sweep": parse_sweep,
    "strategies": _str_list,
    "output_dir": str,
}


@dataclass
class ExperimentPlan:
    base_config: SimConfig = field(default_factory=SimConfig)
    seeds: tuple[int, ...] = (0,)
    budget_sweep: tuple[float, ...] = parse_sweep("0:1:0.1")
    strategies: tuple[str, ...] = STRATEGIES
    output_dir: str = "results"

    def __post_init__(self) -> None:
        self.seeds = tuple(int(s) for s in self.seeds)
        self.budget_sweep = tuple(float(b) for b in self.budget_sweep)
        self.strategies = tuple(self.strategies)
        self.validate()

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigurationError("seeds: at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("seeds: duplicates are not allowed")
        if not self.strategies:
            raise ConfigurationError("strategies: at least one strategy is required")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigurationError(f"strategies: unknown {bad}; choose from {', '.join(STRATEGIES)}")
        if any(b < 0 for b in self.budget_sweep):
            raise ConfigurationError("budget_sweep: fractions must be >= 0")
        if list(self.budget_sweep) != sorted(self.budget_sweep):
            raise ConfigurationError("budget_sweep: fractions must be sorted ascending")
        if not self.budget_sweep and any(s.startswith("oort_ca") for s in self.strategies):
            raise ConfigurationError("budget_sweep: budgeted strategies need at least one fraction")


def parse_config_text(text: str, source: str = "<config>") -> ExperimentPlan:
    sim_values: dict[str, object] = {}
    plan_values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in SIM_KEYS:
            target, parser = sim_values, SIM_KEYS[key]
        elif key in PLAN_KEYS:
            target, parser = plan_values, PLAN_KEYS[key]
        else:
            raise ConfigurationError(f"{key}: unknown configuration key ({source}:{lineno})")
        if key in sim_values or key in plan_values:
            raise ConfigurationError(f"{key}: given more than once ({source}:{lineno})")
        try:
            target[key] = parser(value)
        except ValueError as exc:
            raise ConfigurationError(f"{key}: invalid value {value!r} ({source}:{lineno}): {exc}") from None
    base = SimConfig(**sim_values)
    return ExperimentPlan(base_config=base, **plan_values)


def parse_config(path: str | Path) -> ExperimentPlan:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def _fmt(value: object) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def serialize_plan(plan: ExperimentPlan) -> str:
    lines = ["# experiment plan"]
    for key in PLAN_KEYS:
        lines.append(f"{key} = {_fmt(getattr(plan, key))}")
    lines.append("# simulation settings")
    cfg = plan.base_config
    for key in SIM_KEYS:
        lines.append(f"{key} = {_fmt(getattr(cfg, key))}")
    return "\n".join(lines) + "\n"
