"""Experiment orchestration: seeds x budgets x strategies, metrics CSVs and summaries."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .config import ExperimentPlan
from .errors import ConfigurationError
from .sim import RoundMetrics, Simulation, replace_config

log = logging.getLogger(__name__)

METRICS_HEADER = [
    "round",
    "test_accuracy",
    "test_loss",
    "emissions_g",
    "cumulative_emissions_g",
    "budget_available_g",
    "num_selected",
    "selected_ids",
    "fallback_fill_count",
]
UNBUDGETED_TOKEN = "inf"
_METRICS_NAME = re.compile(r"^metrics_(?P<strategy>.+)_(?P<budget>[^_]+)_(?P<seed>-?\d+)\.csv$")


@dataclass
class RunSummary:
    strategy: str
    seed: int
    budget_fraction: float | None
    budget_g: float | None
    baseline_g: float
    max_accuracy: float
    round_of_max_accuracy: int
    emissions_at_max_accuracy_g: float
    final_accuracy: float
    total_emissions_g: float
    training_emissions_g: float
    probing_emissions_g: float
    filtered_clients: list[int]
    per_client_selection_counts: dict[int, int]
    metrics_file: str = ""

    def to_json(self) -> dict:
        out = asdict(self)
        out["per_client_selection_counts"] = {str(k): v for k, v in sorted(self.per_client_selection_counts.items())}
        for key in ("budget_fraction", "budget_g"):
            if out[key] is not None and math.isinf(out[key]):
                out[key] = "inf"
        return out


def summarize(sim: Simulation, baseline_g: float, budget_fraction: float | None) -> RunSummary:
    history = sim.history
    if not history:
        raise ConfigurationError("cannot summarise a run without rounds")
    best = max(history, key=lambda m: (m.test_accuracy, -m.round))
    counts = Counter(c for m in history for c in m.selected)
    return RunSummary(
        strategy=sim.config.strategy,
        seed=sim.config.seed,
        budget_fraction=budget_fraction,
        budget_g=sim.budget_g,
        baseline_g=baseline_g,
        max_accuracy=best.test_accuracy,
        round_of_max_accuracy=best.round,
        emissions_at_max_accuracy_g=best.cumulative_emissions_g,
        final_accuracy=history[-1].test_accuracy,
        total_emissions_g=sim.ledger.cumulative,
        training_emissions_g=sim.ledger.training_emissions,
        probing_emissions_g=sim.ledger.probing_round_emissions,
        filtered_clients=sorted(sim.filtered),
        per_client_selection_counts={cid: counts.get(cid, 0) for cid in sorted(sim.sizes)},
    )


def _fmt_float(value: float) -> str:
    return repr(float(value))


def write_metrics_csv(history: Sequence[RoundMetrics], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for m in history:
            writer.writerow(
                [
                    m.round,
                    _fmt_float(m.test_accuracy),
                    _fmt_float(m.test_loss),
                    _fmt_float(m.emissions_g),
                    _fmt_float(m.cumulative_emissions_g),
                    _fmt_float(m.budget_available_g),
                    len(m.selected),
                    ";".join(str(c) for c in m.selected),
                    m.fallback_fill_count,
                ]
            )


def read_metrics_csv(path: str | Path) -> list[RoundMetrics]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise ConfigurationError(f"{path}: unexpected metrics header {header}")
        for row in reader:
            selected = [int(c) for c in row[7].split(";") if c]
            if len(selected) != int(row[6]):
                raise ConfigurationError(f"{path}: num_selected disagrees with selected_ids in round {row[0]}")
            rows.append(
                RoundMetrics(
                    round=int(row[0]),
                    test_accuracy=float(row[1]),
                    test_loss=float(row[2]),
                    emissions_g=float(row[3]),
                    cumulative_emissions_g=float(row[4]),
                    budget_available_g=float(row[5]),
                    selected=selected,
                    fallback_fill_count=int(row[8]),
                )
            )
    return rows


def budget_token(fraction: float | None) -> str:
    return UNBUDGETED_TOKEN if fraction is None else f"{fraction:g}"


def metrics_filename(strategy: str, fraction: float | None, seed: int) -> str:
    return f"metrics_{strategy}_{budget_token(fraction)}_{seed}.csv"


def parse_metrics_filename(name: str) -> tuple[str, str, int]:
    match = _METRICS_NAME.match(Path(name).name)
    if not match:
        raise ConfigurationError(f"{name}: not a metrics file name")
    return match["strategy"], match["budget"], int(match["seed"])


def run_plan(plan: ExperimentPlan) -> list[RunSummary]:
    """Run every (seed, budget fraction, strategy) cell and write its outputs.

    Budget fractions are resolved per seed against the emissions of the
    unconstrained Oort run before any budgeted run of that seed starts.
    Non-budgeted strategies run once per seed.
    """
    out_dir = Path(plan.output_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create output directory {out_dir}: {exc}") from exc

    summaries: list[RunSummary] = []
    metrics_files: list[Path] = []
    baselines: dict[int, float] = {}
    for seed in plan.seeds:
        base = replace_config(plan.base_config, seed=seed, budget_g=None)
        oort_sim = Simulation(replace_config(base, strategy="oort"))
        oort_sim.run()
        baselines[seed] = oort_sim.ledger.cumulative
        log.info("seed %d: emission baseline %.3f g", seed, baselines[seed])

        for strategy in plan.strategies:
            if strategy.startswith("oort_ca"):
                cells = [(f, f * baselines[seed]) for f in plan.budget_sweep]
            else:
                cells = [(None, None)]
            for fraction, budget_g in cells:
                if strategy == "oort":
                    sim = oort_sim
                else:
                    cfg = replace_config(base, strategy=strategy, budget_g=budget_g, budget_fraction=fraction if fraction is not None else 1.0)
                    sim = Simulation(cfg)
                    sim.run()
                path = out_dir / metrics_filename(strategy, fraction, seed)
                try:
                    write_metrics_csv(sim.history, path)
                except OSError as exc:
                    raise ConfigurationError(f"cannot write {path}: {exc}") from exc
                summary = summarize(sim, baselines[seed], fraction)
                summary.metrics_file = path.name
                summaries.append(summary)
                metrics_files.append(path)
                log.info(
                    "%s seed=%d budget=%s final_acc=%.4f emissions=%.1f g",
                    strategy, seed, budget_token(fraction), summary.final_accuracy, summary.total_emissions_g,
                )

    corrupted = set(plan.base_config.noisy_client_ids)
    table = selection_count_report(metrics_files, plan.base_config.num_clients, corrupted)
    write_selection_counts(table, out_dir / "selection_counts.csv")
    payload = {
        "baselines_g": {str(s): v for s, v in baselines.items()},
        "runs": [s.to_json() for s in summaries],
    }
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summaries


@dataclass
class SelectionCountTable:
    strategies: list[str]
    rows: list[dict] = field(default_factory=list)


def selection_count_report(
    metrics_files: Iterable[str | Path], num_clients: int, corrupted_ids: Iterable[int]
) -> SelectionCountTable:
    """Training-round selection counts per client and strategy, summed over files."""
    counts: dict[str, Counter] = {}
    for path in metrics_files:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"metrics file not found: {path}")
        strategy, _, _ = parse_metrics_filename(path.name)
        tally = counts.setdefault(strategy, Counter())
        for m in read_metrics_csv(path):
            tally.update(m.selected)
    corrupted = set(corrupted_ids)
    strategies = sorted(counts)
    rows = []
    for cid in range(num_clients):
        row = {"client_id": cid, "corrupted": int(cid in corrupted)}
        for s in strategies:
            row[s] = counts[s].get(cid, 0)
        rows.append(row)
    return SelectionCountTable(strategies, rows)


def write_selection_counts(table: SelectionCountTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["client_id", "corrupted", *table.strategies], lineterminator="\n")
        writer.writeheader()
        writer.writerows(table.rows)
