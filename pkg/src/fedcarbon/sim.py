"""Round-based federated training driver with carbon accounting."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from .carbon import (
    CarbonTrace,
    EmissionsLedger,
    assign_regions,
    client_costs,
    load_trace,
    round_emissions,
    synth_trace,
)
from .data import ClientDataset, PartitionSpec, corrupt_clients, dirichlet_partition, make_dataset, split_test
from .errors import ConfigurationError, ShapeError
from .model import AdamConfig, ModelParams, PerSampleGradStats, batch_losses, evaluate, grad_stats, init_params, local_train
from .selection import (
    BudgetState,
    ClientUtility,
    SelectionDecision,
    budget_update,
    loss_utility,
    probing_utility,
    select_budgeted,
    select_random,
    select_topk_utility,
    statistical_utility,
    threshold_filter,
)

log = logging.getLogger(__name__)

STRATEGIES = ("random", "random_wt", "oort", "oort_wt", "oort_ca", "oort_ca_wt")

# sub-seed tags; every random stream is derived from (seed, tag, ...)
_DATA, _SPLIT, _PARTITION, _CORRUPT, _TRACE, _ASSIGN, _INIT, _SELECT, _TRAIN = range(1, 10)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class SimConfig:
    rounds: int = 100
    num_clients: int = 30
    clients_per_round: int = 10
    local_epochs: int = 2
    batch_size: int = 32
    lr: float = 0.001
    threshold_c: float = 0.5
    budget_fraction: float = 1.0
    budget_g: float | None = None
    strategy: str = "oort"
    dirichlet_alpha: float = 10.0
    noisy_client_ids: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    noise_sigma: float = 1.0
    seed: int = 0
    trace_path: str | None = None
    trace_regions: int | None = None
    trace_curtail_prob: float = 0.1
    n_samples: int = 6000
    n_features: int = 16
    n_classes: int = 10
    hidden_units: int = 32
    separation: float = 3.0
    brightness: float = 0.5
    test_fraction: float = 0.2
    min_samples_per_client: int = 20
    oort_epsilon: float = 0.1
    oort_epsilon_decay: float = 0.98

    def __post_init__(self) -> None:
        self.noisy_client_ids = tuple(sorted({int(i) for i in self.noisy_client_ids}))
        self.validate()

    def validate(self) -> None:
        def need(ok: bool, key: str, msg: str) -> None:
            if not ok:
                raise ConfigurationError(f"{key}: {msg}")

        need(self.strategy in STRATEGIES, "strategy", f"must be one of {', '.join(STRATEGIES)}")
        need(self.rounds >= 1, "rounds", "must be >= 1")
        need(self.num_clients >= 1, "num_clients", "must be >= 1")
        need(1 <= self.clients_per_round <= self.num_clients, "clients_per_round", "must lie in [1, num_clients]")
        need(self.local_epochs >= 0, "local_epochs", "must be >= 0")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.lr > 0, "lr", "must be > 0")
        need(0.0 <= self.threshold_c <= 1.0, "threshold_c", "must lie in [0, 1]")
        need(self.budget_fraction >= 0, "budget_fraction", "must be >= 0")
        need(self.budget_g is None or self.budget_g >= 0, "budget_g", "must be >= 0")
        need(self.dirichlet_alpha > 0, "dirichlet_alpha", "must be > 0")
        need(all(0 <= i < self.num_clients for i in self.noisy_client_ids), "noisy_client_ids", "ids must lie in [0, num_clients)")
        need(self.noise_sigma >= 0, "noise_sigma", "must be >= 0")
        need(self.trace_regions is None or self.trace_regions >= 1, "trace_regions", "must be >= 1")
        need(0.0 <= self.trace_curtail_prob <= 1.0, "trace_curtail_prob", "must lie in [0, 1]")
        need(self.n_classes >= 2, "n_classes", "must be >= 2")
        need(self.n_features >= 2, "n_features", "must be >= 2")
        need(self.n_samples >= self.n_classes, "n_samples", "must be >= n_classes")
        need(self.hidden_units >= 1, "hidden_units", "must be >= 1")
        need(self.separation > 0, "separation", "must be > 0")
        need(0.0 < self.brightness < 1.0, "brightness", "must lie in (0, 1)")
        need(0.0 < self.test_fraction < 1.0, "test_fraction", "must lie in (0, 1)")
        need(self.min_samples_per_client >= 1, "min_samples_per_client", "must be >= 1")
        need(0.0 <= self.oort_epsilon <= 1.0, "oort_epsilon", "must lie in [0, 1]")
        need(0.0 <= self.oort_epsilon_decay <= 1.0, "oort_epsilon_decay", "must lie in [0, 1]")

    @property
    def thresholded(self) -> bool:
        return self.strategy.endswith("_wt")

    @property
    def budgeted(self) -> bool:
        return self.strategy.startswith("oort_ca")

    @property
    def probes(self) -> bool:
        return self.thresholded or self.budgeted

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    test_accuracy: float
    test_loss: float
    emissions_g: float
    cumulative_emissions_g: float
    budget_available_g: float
    selected: list[int]
    fallback_fill_count: int = 0


def fedavg(updates: Sequence[tuple[ModelParams, float]]) -> ModelParams:
    """Coordinate-wise mean of client parameters weighted by ``weight``."""
    if not updates:
        raise ConfigurationError("fedavg needs at least one update")
    shapes = updates[0][0].shapes
    for params, weight in updates:
        if params.shapes != shapes:
            raise ShapeError(f"update shapes {params.shapes} differ from {shapes}")
        if not (weight > 0 and math.isfinite(weight)):
            raise ConfigurationError(f"fedavg weights must be finite and > 0, got {weight}")
    if len(updates) == 1:
        return updates[0][0].copy()
    w = np.array([wt for _, wt in updates], dtype=np.float64)
    stacked = np.stack([p.values for p, _ in updates])
    return ModelParams(w @ stacked / w.sum(), list(shapes))


def run_probing_round(
    clients: Sequence[ClientDataset],
    params: ModelParams,
    trace: CarbonTrace,
    assignment: Mapping[int, str],
) -> tuple[dict[int, PerSampleGradStats], float]:
    """Per-sample gradient norms of ``params`` over every client's data, plus its emissions.

    Every client does one hour of work at trace hour 0; the model is not updated.
    """
    stats = {}
    for client in clients:
        try:
            stats[client.client_id] = grad_stats(params, client)
        except ArithmeticError as exc:
            raise type(exc)(f"client {client.client_id}: {exc}") from exc
    emissions = round_emissions([c.client_id for c in clients], assignment, trace, 0)
    return stats, emissions


class Simulation:
    """One federated run for a single strategy and seed.

    Construction builds data, partitions, corruption, region assignment and
    the initial model. ``run`` executes the probing round when the strategy
    needs one and then every training round.
    """

    def __init__(self, config: SimConfig, trace: CarbonTrace | None = None):
        config.validate()
        self.config = config
        seed = config.seed
        full = make_dataset(
            config.n_samples,
            config.n_features,
            config.n_classes,
            derive_seed(seed, _DATA),
            separation=config.separation,
            brightness=config.brightness,
        )
        train, self.test = split_test(full, config.test_fraction, derive_seed(seed, _SPLIT))
        spec = PartitionSpec(config.num_clients, config.dirichlet_alpha, derive_seed(seed, _PARTITION), config.min_samples_per_client)
        clients = dirichlet_partition(train, spec)
        self.clients = corrupt_clients(clients, config.noisy_client_ids, config.noise_sigma, derive_seed(seed, _CORRUPT))
        self.sizes = {c.client_id: c.size for c in self.clients}

        if trace is None:
            if config.trace_path:
                trace = load_trace(config.trace_path)
            else:
                regions = config.trace_regions or config.num_clients
                trace = synth_trace(regions, config.rounds, derive_seed(seed, _TRACE), config.trace_curtail_prob)
        if trace.hours < config.rounds:
            raise ConfigurationError(f"trace covers {trace.hours} hours but {config.rounds} rounds were requested")
        self.trace = trace
        self.assignment = assign_regions(config.num_clients, trace, derive_seed(seed, _ASSIGN))

        dims = [config.n_features, config.hidden_units, config.n_classes]
        self.params = init_params(dims, derive_seed(seed, _INIT))
        self.opt = AdamConfig(lr=config.lr)

        self.pool: set[int] = set(self.sizes)
        self.ledger = EmissionsLedger()
        self.probing_utilities: list[ClientUtility] = []
        self.filtered: set[int] = set()
        self.loss_utilities: dict[int, float] = {}
        self.budget: BudgetState | None = None
        self.budget_g: float | None = None
        self.history: list[RoundMetrics] = []
        self._prepared = False

    # -- setup -------------------------------------------------------------

    def resolve_budget(self) -> float:
        cfg = self.config
        if cfg.budget_g is not None:
            return float(cfg.budget_g)
        if math.isinf(cfg.budget_fraction):
            return math.inf
        baseline = emission_baseline(cfg, self.trace)
        return cfg.budget_fraction * baseline

    def prepare(self) -> None:
        if self._prepared:
            return
        cfg = self.config
        if cfg.probes:
            stats, emissions = run_probing_round(self.clients, self.params, self.trace, self.assignment)
            self.ledger.probing_round_emissions = emissions
            self.probing_utilities = probing_utility(self.sizes, stats)
            losses = {c.client_id: batch_losses(self.params, c.features, c.labels) for c in self.clients}
            self.loss_utilities = {u.client_id: u.utility for u in loss_utility(self.sizes, losses)}
            if cfg.thresholded:
                retained = threshold_filter(self.probing_utilities, cfg.threshold_c)
                self.filtered = self.pool - retained
                self.pool = retained
                log.info("probing kept %d of %d clients; filtered %s", len(retained), len(self.sizes), sorted(self.filtered))
        if cfg.budgeted:
            self.budget_g = self.resolve_budget()
            self.budget = BudgetState.start(self.budget_g, cfg.rounds)
        self._prepared = True

    # -- rounds ------------------------------------------------------------

    def select(self, t: int) -> SelectionDecision:
        cfg = self.config
        k = cfg.clients_per_round
        sel_seed = derive_seed(cfg.seed, _SELECT)
        if cfg.strategy in ("random", "random_wt"):
            return select_random(self.pool, k, sel_seed, t)
        if cfg.strategy in ("oort", "oort_wt"):
            eps = cfg.oort_epsilon * cfg.oort_epsilon_decay**t if cfg.strategy == "oort" else 0.0
            return select_topk_utility(self.pool, self.loss_utilities, k, eps, sel_seed, t)
        assert self.budget is not None
        costs = client_costs(self.assignment, self.trace, t, self.pool)
        return select_budgeted(self.pool, self.loss_utilities, costs, self.budget.available, k, t)

    def run_round(self, t: int) -> RoundMetrics:
        cfg = self.config
        if not 0 <= t < cfg.rounds:
            raise ConfigurationError(f"round {t} outside [0, {cfg.rounds})")
        self.prepare()
        decision = self.select(t)
        if set(decision.selected) - self.pool:
            raise AssertionError(f"selection left the eligible pool: {decision.selected}")
        budget_available = self.budget.available if self.budget is not None else math.inf

        updates = []
        for cid in decision.selected:
            client = self.clients[cid]
            trained, _, losses = local_train(
                self.params, client, cfg.local_epochs, cfg.batch_size, self.opt, derive_seed(cfg.seed, _TRAIN, t, cid)
            )
            updates.append((trained, float(client.size)))
            if cfg.strategy in ("oort", "oort_wt"):
                self.loss_utilities[cid] = statistical_utility(client.size, losses)
        if updates:
            self.params = fedavg(updates)

        emissions = round_emissions(decision.selected, self.assignment, self.trace, t)
        self.ledger.record(emissions)
        if self.budget is not None:
            self.budget = budget_update(self.budget, decision.budget_spent)

        acc, test_loss = evaluate(self.params, self.test)
        metrics = RoundMetrics(
            round=t,
            test_accuracy=acc,
            test_loss=test_loss,
            emissions_g=emissions,
            cumulative_emissions_g=self.ledger.cumulative,
            budget_available_g=budget_available,
            selected=list(decision.selected),
            fallback_fill_count=decision.fallback_fill_count,
        )
        self.history.append(metrics)
        return metrics

    def run(self) -> list[RoundMetrics]:
        self.prepare()
        for t in range(len(self.history), self.config.rounds):
            self.run_round(t)
        return list(self.history)


def emission_baseline(config: SimConfig, trace: CarbonTrace | None = None) -> float:
    """Total emissions of the unconstrained Oort run with the same settings."""
    ref = replace_config(config, strategy="oort", budget_g=None, budget_fraction=1.0)
    sim = Simulation(ref, trace)
    sim.run()
    return sim.ledger.cumulative


def replace_config(config: SimConfig, **changes) -> SimConfig:
    values = config.as_dict()
    values.update(changes)
    return SimConfig(**values)


def run_simulation(config: SimConfig, trace: CarbonTrace | None = None) -> list[RoundMetrics]:
    return Simulation(config, trace).run()
