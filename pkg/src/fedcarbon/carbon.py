"""Hourly carbon-intensity traces, client-to-region assignment and emissions accounting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigurationError, IngestionError

TRACE_HEADER = ["timestamp", "region", "intensity_g_per_kwh", "curtailed"]
ENERGY_KWH_PER_ROUND = 1.0
HOUR = timedelta(hours=1)


@dataclass(frozen=True)
class CarbonTrace:
    regions: tuple[str, ...]
    start: datetime
    intensity: np.ndarray  # (regions, hours) gCO2eq/kWh
    curtailed: np.ndarray  # (regions, hours) bool

    def __post_init__(self) -> None:
        intensity = np.asarray(self.intensity, dtype=np.float64)
        curtailed = np.asarray(self.curtailed, dtype=bool)
        if intensity.ndim != 2 or intensity.shape != curtailed.shape:
            raise ConfigurationError("intensity and curtailment matrices must match")
        if intensity.shape[0] != len(self.regions) or len(set(self.regions)) != len(self.regions):
            raise ConfigurationError("one unique region id per matrix row required")
        if not np.all(np.isfinite(intensity)) or np.any(intensity < 0):
            raise ConfigurationError("intensities must be finite and non-negative")
        intensity.flags.writeable = False
        curtailed.flags.writeable = False
        object.__setattr__(self, "intensity", intensity)
        object.__setattr__(self, "curtailed", curtailed)
        object.__setattr__(self, "regions", tuple(self.regions))

    @property
    def hours(self) -> int:
        return int(self.intensity.shape[1])

    def row(self, region: str) -> int:
        try:
            return self.regions.index(region)
        except ValueError:
            raise ConfigurationError(f"unknown region {region!r}") from None

    def timestamp(self, t: int) -> datetime:
        return self.start + t * HOUR


@dataclass
class EmissionsLedger:
    per_round: list[float] = field(default_factory=list)
    probing_round_emissions: float = 0.0

    def record(self, grams: float) -> None:
        if grams < 0 or not math.isfinite(grams):
            raise ConfigurationError(f"round emissions must be finite and >= 0, got {grams}")
        self.per_round.append(float(grams))

    @property
    def training_emissions(self) -> float:
        return math.fsum(self.per_round)

    @property
    def cumulative(self) -> float:
        return math.fsum(self.per_round) + self.probing_round_emissions


def parse_utc_hour(text: str) -> datetime:
    s = text.strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    ts = datetime.fromisoformat(s)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    ts = ts.astimezone(timezone.utc)
    if ts.minute or ts.second or ts.microsecond:
        raise ValueError(f"{text!r} is not on the hour")
    return ts


def format_utc_hour(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def load_trace(path: str | Path) -> CarbonTrace:
    """Read a ``timestamp,region,intensity_g_per_kwh,curtailed`` CSV.

    Rows may come in any order but every (region, hour) cell between the
    earliest and latest timestamp must appear exactly once.
    """
    cells: dict[tuple[str, datetime], tuple[float, bool]] = {}
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestionError(f"{path}: cannot open trace: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRACE_HEADER:
            raise IngestionError(f"{path}:1: header must be {','.join(TRACE_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise IngestionError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                ts = parse_utc_hour(row[0])
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: bad timestamp {row[0]!r}: {exc}") from exc
            region = row[1].strip()
            if not region:
                raise IngestionError(f"{path}:{lineno}: empty region id")
            try:
                value = float(row[2])
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: intensity {row[2]!r} is not a number") from None
            if not math.isfinite(value) or value < 0:
                raise IngestionError(f"{path}:{lineno}: intensity must be finite and >= 0, got {row[2]}")
            flag = row[3].strip()
            if flag not in ("0", "1"):
                raise IngestionError(f"{path}:{lineno}: curtailed must be 0 or 1, got {row[3]!r}")
            key = (region, ts)
            if key in cells:
                raise IngestionError(f"{path}:{lineno}: duplicate cell for region {region} at {format_utc_hour(ts)}")
            cells[key] = (value, flag == "1")
    if not cells:
        raise IngestionError(f"{path}: trace has no data rows")

    regions = sorted({r for r, _ in cells})
    stamps = [ts for _, ts in cells]
    start, end = min(stamps), max(stamps)
    hours = int((end - start) / HOUR) + 1
    intensity = np.zeros((len(regions), hours))
    curtailed = np.zeros((len(regions), hours), dtype=bool)
    for i, region in enumerate(regions):
        for t in range(hours):
            cell = cells.get((region, start + t * HOUR))
            if cell is None:
                raise IngestionError(
                    f"{path}: missing cell for region {region} at {format_utc_hour(start + t * HOUR)}"
                )
            intensity[i, t], curtailed[i, t] = cell
    return CarbonTrace(tuple(regions), start, intensity, curtailed)


def write_trace(trace: CarbonTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for t in range(trace.hours):
            stamp = format_utc_hour(trace.timestamp(t))
            for i, region in enumerate(trace.regions):
                writer.writerow([stamp, region, repr(float(trace.intensity[i, t])), int(trace.curtailed[i, t])])


def synth_trace(
    regions: int,
    hours: int,
    seed: int,
    curtail_prob: float = 0.1,
    start: datetime = datetime(2023, 1, 15, tzinfo=timezone.utc),
) -> CarbonTrace:
    """Diurnal sinusoid per region with random base, amplitude and phase."""
    if regions < 1 or hours < 1:
        raise ConfigurationError("regions and hours must be >= 1")
    if not 0.0 <= curtail_prob <= 1.0:
        raise ConfigurationError("curtail_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    base = rng.uniform(100.0, 600.0, size=(regions, 1))
    amplitude = base * rng.uniform(0.1, 0.5, size=(regions, 1))
    phase = rng.uniform(0.0, 2 * np.pi, size=(regions, 1))
    t = np.arange(hours)[None, :]
    jitter = rng.normal(0.0, 0.05, size=(regions, hours)) * base
    intensity = np.maximum(base + amplitude * np.sin(2 * np.pi * t / 24.0 + phase) + jitter, 0.0)
    curtailed = rng.random((regions, hours)) < curtail_prob
    names = tuple(f"R{i:02d}" for i in range(regions))
    return CarbonTrace(names, start, intensity, curtailed)


def assign_regions(num_clients: int, trace: CarbonTrace, seed: int) -> dict[int, str]:
    """Round-robin clients over a seed-shuffled region list."""
    if num_clients < 1:
        raise ConfigurationError("num_clients must be >= 1")
    rng = np.random.default_rng(seed)
    order = [trace.regions[i] for i in rng.permutation(len(trace.regions))]
    return {c: order[c % len(order)] for c in range(num_clients)}


def effective_intensity(trace: CarbonTrace, region: str, t: int) -> float:
    """Recorded intensity, or 0 when the region runs on curtailed energy that hour."""
    if not 0 <= t < trace.hours:
        raise IndexError(f"hour {t} outside trace of {trace.hours} hours")
    i = trace.row(region)
    return 0.0 if trace.curtailed[i, t] else float(trace.intensity[i, t])


def client_costs(assignment: Mapping[int, str], trace: CarbonTrace, t: int, clients: Iterable[int] | None = None) -> dict[int, float]:
    """Emissions (g) each client would cause by training in round ``t``."""
    ids = sorted(assignment) if clients is None else sorted(set(clients))
    out = {}
    for c in ids:
        if c not in assignment:
            raise ConfigurationError(f"client {c} has no region assignment")
        out[c] = effective_intensity(trace, assignment[c], t) * ENERGY_KWH_PER_ROUND
    return out


def round_emissions(selected: Iterable[int], assignment: Mapping[int, str], trace: CarbonTrace, t: int) -> float:
    costs = client_costs(assignment, trace, t, clients=selected)
    return math.fsum(costs.values())
