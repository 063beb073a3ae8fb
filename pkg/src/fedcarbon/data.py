"""Synthetic classification data, Dirichlet client partitions and feature corruption."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError
from .model import Sample


@dataclass
class SampleSet:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.size:
            raise ConfigurationError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree"
            )

    def __len__(self) -> int:
        return int(self.labels.size)

    def __iter__(self) -> Iterator[Sample]:
        for x, y in zip(self.features, self.labels):
            yield Sample(x, int(y))

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx: np.ndarray) -> SampleSet:
        return SampleSet(self.features[idx], self.labels[idx])

    @classmethod
    def from_samples(cls, samples: Iterable[Sample]) -> SampleSet:
        samples = list(samples)
        if not samples:
            raise ConfigurationError("no samples given")
        return cls(np.stack([s.features for s in samples]), np.array([s.label for s in samples]))


@dataclass
class ClientDataset(SampleSet):
    """A client's local data.

    ``corrupted`` is ground truth for evaluation only; selection code never reads it.
    """

    client_id: int = 0
    corrupted: bool = False

    def __post_init__(self) -> None:
        super().__post_init__()
        if len(self) == 0:
            raise ConfigurationError(f"client {self.client_id} has no samples")

    @property
    def size(self) -> int:
        return len(self)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    alpha: float
    seed: int
    min_samples_per_client: int = 20

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ConfigurationError("num_clients must be >= 1")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be > 0")
        if self.min_samples_per_client < 0:
            raise ConfigurationError("min_samples_per_client must be >= 0")


def make_dataset(
    n: int,
    d: int,
    num_classes: int,
    seed: int,
    separation: float = 3.0,
    brightness: float = 0.5,
) -> SampleSet:
    """Gaussian class clusters mapped into the unit cube.

    Class means are placed at pairwise distance ``separation`` (in units of
    the within-class standard deviation), exactly when ``num_classes <= d``.
    The latent points are scaled into a box centred on ``brightness`` and
    clipped to [0, 1].
    """
    if d < 2:
        raise ConfigurationError("d must be >= 2")
    if num_classes < 2 or n < num_classes:
        raise ConfigurationError(f"need n >= num_classes >= 2, got n={n}, C={num_classes}")
    if not 0.0 < brightness < 1.0:
        raise ConfigurationError("brightness must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    radius = separation / np.sqrt(2.0)
    if num_classes <= d:
        q, _ = np.linalg.qr(rng.standard_normal((d, num_classes)))
        means = radius * q.T
    else:
        raw = rng.standard_normal((num_classes, d))
        means = radius * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    labels = np.arange(n) % num_classes
    labels = labels[rng.permutation(n)]
    latent = means[labels] + rng.standard_normal((n, d))
    half_width = min(brightness, 1.0 - brightness)
    scale = half_width / (radius + 2.0)
    features = np.clip(brightness + scale * latent, 0.0, 1.0)
    return SampleSet(features, labels)


def dirichlet_partition(data: SampleSet, spec: PartitionSpec) -> list[ClientDataset]:
    """Split ``data`` across clients with per-class Dirichlet(alpha) proportions."""
    n = len(data)
    if n == 0:
        raise ConfigurationError("cannot partition an empty dataset")
    if spec.num_clients * spec.min_samples_per_client > n:
        raise ConfigurationError(
            f"{n} samples cannot give {spec.num_clients} clients {spec.min_samples_per_client} each"
        )
    rng = np.random.default_rng(spec.seed)
    owner = np.empty(n, dtype=np.int64)
    for cls in np.unique(data.labels):
        idx = np.flatnonzero(data.labels == cls)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(spec.num_clients, spec.alpha))
        cuts = (np.cumsum(props) * idx.size).astype(np.int64)[:-1]
        for client, chunk in enumerate(np.split(idx, cuts)):
            owner[chunk] = client

    members = [sorted(np.flatnonzero(owner == c).tolist()) for c in range(spec.num_clients)]
    # top up starving clients from the currently largest one (lowest id on ties)
    while True:
        sizes = [len(m) for m in members]
        short = [c for c in range(spec.num_clients) if sizes[c] < spec.min_samples_per_client]
        if not short:
            break
        donor = max(range(spec.num_clients), key=lambda c: (sizes[c], -c))
        members[short[0]].append(members[donor].pop())
        members[short[0]].sort()

    return [
        ClientDataset(data.features[m], data.labels[m], client_id=c)
        for c, m in enumerate(members)
    ]


def corrupt_clients(
    clients: Sequence[ClientDataset],
    noisy_ids: Iterable[int],
    sigma: float,
    seed: int,
) -> list[ClientDataset]:
    """Add clipped N(0, sigma^2) feature noise to the designated clients."""
    noisy = set(int(i) for i in noisy_ids)
    known = {c.client_id for c in clients}
    unknown = noisy - known
    if unknown:
        raise ConfigurationError(f"unknown client ids for corruption: {sorted(unknown)}")
    if sigma < 0:
        raise ConfigurationError("sigma must be >= 0")
    out = []
    for client in clients:
        if client.client_id not in noisy:
            out.append(client)
            continue
        rng = np.random.default_rng([seed, client.client_id])
        noise = rng.normal(0.0, sigma, size=client.features.shape) if sigma > 0 else 0.0
        feats = np.clip(client.features + noise, 0.0, 1.0)
        out.append(replace(client, features=feats, labels=client.labels.copy(), corrupted=True))
    return out


def split_test(data: SampleSet, frac: float, seed: int) -> tuple[SampleSet, SampleSet]:
    """Stratified train/test split; ``round(frac * n_class)`` of each class goes to test."""
    if not 0.0 < frac < 1.0:
        raise ConfigurationError(f"test fraction must lie in (0, 1), got {frac}")
    rng = np.random.default_rng(seed)
    test_idx = []
    for cls in np.unique(data.labels):
        idx = np.flatnonzero(data.labels == cls)
        rng.shuffle(idx)
        test_idx.append(idx[: int(round(frac * idx.size))])
    test_mask = np.zeros(len(data), dtype=bool)
    test_mask[np.concatenate(test_idx)] = True
    return data.subset(np.flatnonzero(~test_mask)), data.subset(np.flatnonzero(test_mask))


def export_clients_csv(clients: Sequence[ClientDataset], path: str | Path) -> None:
    """One row per sample: ``client_id,label,f0..f{d-1}``. The corruption flag is not exported."""
    d = clients[0].dim if clients else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "label"] + [f"f{j}" for j in range(d)])
        for client in clients:
            for x, y in zip(client.features, client.labels):
                writer.writerow([client.client_id, int(y)] + [repr(float(v)) for v in x])


def import_clients_csv(path: str | Path) -> list[ClientDataset]:
    rows: dict[int, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["client_id", "label"]:
            raise ConfigurationError(f"{path}: expected header starting with client_id,label")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ConfigurationError(f"{path}:{lineno}: expected {len(header)} fields")
            feats, labels = rows.setdefault(int(row[0]), ([], []))
            labels.append(int(row[1]))
            feats.append([float(v) for v in row[2:]])
    return [
        ClientDataset(np.array(f), np.array(y), client_id=cid)
        for cid, (f, y) in sorted(rows.items())
    ]
