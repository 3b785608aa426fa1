"""Synthetic datasets and client partitioning (iid plus five non-iid schemes)."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .nn import Batch

KINDS = ("iid", "dir", "prob", "qty", "noise", "qs")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError("features/labels shape mismatch")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def batch(self, idx=None) -> Batch:
        if idx is None:
            return Batch(self.features, self.labels)
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(self.features[idx], self.labels[idx])


def generate_synthetic(
    num_classes: int, dims: int, per_class: int, separation: float, seed: int
) -> Dataset:
    """Isotropic unit-variance Gaussian blobs, one per class.

    Class means are random directions rescaled so the closest pair sits
    exactly ``separation`` apart.
    """
    if min(num_classes, dims, per_class) < 1 or separation <= 0:
        raise ValueError("all arguments must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dims))
    if num_classes > 1:
        diff = means[:, None, :] - means[None, :, :]
        d = np.sqrt((diff**2).sum(-1))
        d[np.diag_indices(num_classes)] = np.inf
        means *= separation / d.min()
    x = np.concatenate([means[c] + rng.standard_normal((per_class, dims)) for c in range(num_classes)])
    y = np.repeat(np.arange(num_classes), per_class)
    order = rng.permutation(len(y))
    return Dataset(x[order], y[order], num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "iid"
    degree: float = 0.0

    def validate(self, num_classes: int, n_clients: int) -> None:
        k, g = self.kind, self.degree
        if k not in KINDS:
            raise ValueError(f"unknown partition kind {k!r}; expected one of {KINDS}")
        if k in ("dir", "qs") and not g > 0:
            raise ValueError(f"{k} requires beta > 0")
        if k == "prob":
            groups = min(n_clients, num_classes)
            lo = 1.0 / groups if groups > 1 else 0.0
            if not lo < g <= 1:
                raise ValueError(f"prob requires q in ({lo}, 1], got {g}")
            if n_clients % groups:
                raise ValueError(f"prob requires n_clients divisible by {groups}")
        if k == "qty":
            if int(g) != g or not 1 <= g <= num_classes:
                raise ValueError(f"qty requires an integer c in [1, {num_classes}]")
            if g * n_clients < num_classes:
                raise ValueError("qty requires c * n_clients >= num_classes")
        if k == "noise" and g < 0:
            raise ValueError("noise requires sigma >= 0")


def spec_from_degree(kind: str, degree: float, num_classes: int) -> PartitionSpec:
    """Map a unified non-iid degree in [0.1, 0.9] onto each scheme's own parameter."""
    if not 0 < degree < 1:
        raise ValueError("unified non-iid degree must lie in (0, 1)")
    if kind in ("dir", "qs"):
        return PartitionSpec(kind, 1.0 / degree - 1.0)
    if kind == "prob":
        return PartitionSpec(kind, degree)
    if kind == "qty":
        return PartitionSpec(kind, float(max(1, round(num_classes * (1 - degree)))))
    if kind == "noise":
        return PartitionSpec(kind, degree)
    raise ValueError(f"kind {kind!r} has no degree mapping")


@dataclass(frozen=True)
class Partition:
    assignments: tuple[np.ndarray, ...]
    noise_stds: tuple[float, ...] | None = None
    seed: int = 0
    spec: PartitionSpec = field(default_factory=PartitionSpec)

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def client_batch(self, dataset: Dataset, client: int) -> Batch:
        """Client's local data, with its feature-noise transform applied if any."""
        idx = self.assignments[client]
        x = dataset.features[idx]
        std = self.noise_stds[client] if self.noise_stds else 0.0
        if std > 0:
            noise = np.stack(
                [np.random.default_rng([self.seed, client, int(i)]).standard_normal(x.shape[1]) for i in idx]
            ) if len(idx) else np.zeros_like(x)
            x = x + std * noise
        return Batch(x, dataset.labels[idx])


def _freeze(groups) -> tuple[np.ndarray, ...]:
    return tuple(np.asarray(g, dtype=np.int64) for g in groups)


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts proportional to ``weights`` summing exactly to ``total``."""
    w = np.asarray(weights, dtype=np.float64)
    raw = w / w.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        # stable sort: equal remainders go to the lower index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _dirichlet(rng: np.random.Generator, beta: float, n: int) -> np.ndarray:
    g = rng.gamma(beta, 1.0, size=n)
    s = g.sum()
    if not np.isfinite(s) or s <= 0:
        # every gamma draw underflowed; all mass on one coordinate
        p = np.zeros(n)
        p[rng.integers(n)] = 1.0
        return p
    return g / s


def _by_class(labels: np.ndarray, num_classes: int, rng: np.random.Generator) -> list[np.ndarray]:
    return [rng.permutation(np.flatnonzero(labels == c)) for c in range(num_classes)]


def _stratified_order(dataset: Dataset, rng: np.random.Generator) -> np.ndarray:
    """Pool order in which every contiguous block roughly mirrors global label proportions."""
    keys = np.empty(len(dataset))
    for idx in _by_class(dataset.labels, dataset.num_classes, rng):
        if len(idx):
            keys[idx] = (np.arange(len(idx)) + rng.random(len(idx))) / len(idx)
    return np.argsort(keys, kind="stable")


def partition_iid(dataset: Dataset, n_clients: int, seed: int) -> Partition:
    """Stratified equal split: sizes differ by at most one, class counts by at most one."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    rng = np.random.default_rng(seed)
    pool = np.concatenate(_by_class(dataset.labels, dataset.num_classes, rng))
    groups = [pool[c::n_clients] for c in range(n_clients)]
    return Partition(_freeze(groups), None, seed, PartitionSpec("iid", 0.0))


def _ensure_nonempty(groups: list[list[int]]) -> None:
    for i in range(len(groups)):
        if not groups[i]:
            donor = max(range(len(groups)), key=lambda j: (len(groups[j]), -j))
            if len(groups[donor]) < 2:
                raise ValueError("not enough samples to give every client one")
            groups[i].append(groups[donor].pop())


def partition_dir(dataset: Dataset, n_clients: int, beta: float, seed: int) -> Partition:
    PartitionSpec("dir", beta).validate(dataset.num_classes, n_clients)
    rng = np.random.default_rng(seed)
    groups: list[list[int]] = [[] for _ in range(n_clients)]
    for idx in _by_class(dataset.labels, dataset.num_classes, rng):
        p = _dirichlet(rng, beta, n_clients)
        counts = largest_remainder(p, len(idx))
        for client, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            groups[client].extend(chunk.tolist())
    _ensure_nonempty(groups)
    return Partition(_freeze(groups), None, seed, PartitionSpec("dir", beta))


def partition_prob(dataset: Dataset, n_clients: int, q: float, seed: int) -> Partition:
    """Clients in G = min(N, C) groups (client i in group i mod G); class k's home group is k mod G."""
    C = dataset.num_classes
    PartitionSpec("prob", q).validate(C, n_clients)
    G = min(n_clients, C)
    members = [list(range(g, n_clients, G)) for g in range(G)]
    rng = np.random.default_rng(seed)
    groups: list[list[int]] = [[] for _ in range(n_clients)]
    cursor = [0] * G
    for i in rng.permutation(len(dataset)):
        home = int(dataset.labels[i]) % G
        if G > 1 and rng.random() >= q:
            other = int(rng.integers(G - 1))
            g = other if other < home else other + 1
        else:
            g = home
        client = members[g][cursor[g] % len(members[g])]
        cursor[g] += 1
        groups[client].append(int(i))
    _ensure_nonempty(groups)
    return Partition(_freeze(groups), None, seed, PartitionSpec("prob", q))


def qty_labels(num_classes: int, n_clients: int, c: int, rng: np.random.Generator) -> list[list[int]]:
    """Exactly ``c`` distinct labels per client, every label owned by someone."""
    perm = rng.permutation(num_classes)
    slots = rng.permutation(n_clients)
    return [sorted(int(perm[(s * c + j) % num_classes]) for j in range(c)) for s in slots]


def partition_qty(dataset: Dataset, n_clients: int, c: int, seed: int) -> Partition:
    C = dataset.num_classes
    PartitionSpec("qty", float(c)).validate(C, n_clients)
    c = int(c)
    rng = np.random.default_rng(seed)
    owned = qty_labels(C, n_clients, c, rng)
    owners = [[i for i in range(n_clients) if k in owned[i]] for k in range(C)]
    groups: list[list[int]] = [[] for _ in range(n_clients)]
    for k, idx in enumerate(_by_class(dataset.labels, C, rng)):
        if len(idx) < len(owners[k]):
            raise ValueError(f"class {k} has fewer samples than the {len(owners[k])} clients owning it")
        for chunk, client in zip(np.array_split(idx, len(owners[k])), owners[k]):
            groups[client].extend(chunk.tolist())
    return Partition(_freeze(groups), None, seed, PartitionSpec("qty", float(c)))


def partition_noise(dataset: Dataset, n_clients: int, sigma: float, seed: int) -> Partition:
    """iid split; client i (1-based) gets additive N(0, sigma*i/N) feature noise on access."""
    PartitionSpec("noise", sigma).validate(dataset.num_classes, n_clients)
    base = partition_iid(dataset, n_clients, seed)
    stds = tuple(sigma * (i + 1) / n_clients for i in range(n_clients))
    return Partition(base.assignments, stds, seed, PartitionSpec("noise", sigma))


def partition_qs(
    dataset: Dataset, n_clients: int, beta: float, seed: int, max_redraws: int = 100
) -> Partition:
    """Quantity skew: one Dirichlet draw sets client sizes; labels mirror the pool."""
    PartitionSpec("qs", beta).validate(dataset.num_classes, n_clients)
    n = len(dataset)
    if n < n_clients:
        raise ValueError("fewer samples than clients")
    rng = np.random.default_rng(seed)
    for _ in range(max_redraws):
        sizes = largest_remainder(_dirichlet(rng, beta, n_clients), n)
        if sizes.min() >= 1:
            break
    else:
        for i in np.flatnonzero(sizes == 0):
            sizes[int(np.argmax(sizes))] -= 1
            sizes[i] = 1
    order = _stratified_order(dataset, rng)
    groups = np.split(order, np.cumsum(sizes)[:-1])
    return Partition(_freeze(groups), None, seed, PartitionSpec("qs", beta))


def partition(dataset: Dataset, spec: PartitionSpec, n_clients: int, seed: int) -> Partition:
    spec.validate(dataset.num_classes, n_clients)
    if spec.kind == "iid":
        return partition_iid(dataset, n_clients, seed)
    if spec.kind == "dir":
        return partition_dir(dataset, n_clients, spec.degree, seed)
    if spec.kind == "prob":
        return partition_prob(dataset, n_clients, spec.degree, seed)
    if spec.kind == "qty":
        return partition_qty(dataset, n_clients, int(spec.degree), seed)
    if spec.kind == "noise":
        return partition_noise(dataset, n_clients, spec.degree, seed)
    return partition_qs(dataset, n_clients, spec.degree, seed)


# Text format, one client per line after the header:
#   # flguard-partition v1
#   # kind=<kind> degree=<degree> seed=<seed> clients=<N>
#   # noise_stds=<s1>,<s2>,...        (only for noise partitions)
#   <client_id> <idx> <idx> ...
def write_partition(part: Partition, fh: TextIO) -> None:
    fh.write("# flguard-partition v1\n")
    fh.write(f"# kind={part.spec.kind} degree={part.spec.degree!r} seed={part.seed} clients={part.n_clients}\n")
    if part.noise_stds is not None:
        fh.write("# noise_stds=" + ",".join(repr(float(s)) for s in part.noise_stds) + "\n")
    for i, idx in enumerate(part.assignments):
        fh.write(" ".join([str(i), *map(str, idx.tolist())]) + "\n")


def read_partition(fh: TextIO) -> Partition:
    header: dict[str, str] = {}
    rows: dict[int, np.ndarray] = {}
    for line in fh:
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    header[k] = v
            continue
        parts = line.split()
        rows[int(parts[0])] = np.array([int(t) for t in parts[1:]], dtype=np.int64)
    n = int(header.get("clients", len(rows)))
    if sorted(rows) != list(range(n)):
        raise ValueError("partition file does not list clients 0..N-1 exactly once")
    stds = None
    if "noise_stds" in header:
        stds = tuple(float(s) for s in header["noise_stds"].split(","))
    spec = PartitionSpec(header.get("kind", "iid"), float(header.get("degree", 0.0)))
    return Partition(tuple(rows[i] for i in range(n)), stds, int(header.get("seed", 0)), spec)


def partition_to_text(part: Partition) -> str:
    buf = io.StringIO()
    write_partition(part, buf)
    return buf.getvalue()
