"""Malicious-client behaviours: backdoor poisoning and update-level attacks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import Batch, ModelSpec, cross_entropy, forward_with_activations, grad_activation_distance, grad_cross_entropy, sgd_momentum, train_local

ATTACK_KINDS = (
    "none",
    "backdoor",
    "backdoor_distributed",
    "scaling_backdoor",
    "signflip",
    "minmax",
    "minsum",
    "adaptive",
)
BACKDOOR_KINDS = ("backdoor", "backdoor_distributed", "scaling_backdoor", "adaptive")
PERTURBATIONS = ("inverse_unit", "inverse_std", "sign")
# what min-max/min-sum attackers see: their own honest updates, or every honest update of the round
KNOWLEDGE = ("partial", "full")


@dataclass(frozen=True)
class TriggerSpec:
    feature_indices: tuple[int, ...]
    trigger_values: tuple[float, ...]
    target_label: int
    shard: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        idx = tuple(int(i) for i in self.feature_indices)
        vals = tuple(float(v) for v in self.trigger_values)
        if len(vals) == 1 and len(idx) > 1:
            vals = vals * len(idx)
        if len(idx) != len(vals):
            raise ValueError("trigger needs one value per feature index")
        if len(set(idx)) != len(idx) or any(i < 0 for i in idx):
            raise ValueError("trigger feature indices must be distinct and non-negative")
        if self.shard is not None:
            part, parts = self.shard
            if not 0 <= part < parts:
                raise ValueError("shard part_index must lie in [0, num_parts)")
        object.__setattr__(self, "feature_indices", idx)
        object.__setattr__(self, "trigger_values", vals)

    def active(self) -> tuple[tuple[int, ...], tuple[float, ...]]:
        """Coordinates and values this trigger actually stamps (its shard, if sharded)."""
        if self.shard is None:
            return self.feature_indices, self.trigger_values
        part, parts = self.shard
        size = math.ceil(len(self.feature_indices) / parts)
        sl = slice(part * size, (part + 1) * size)
        return self.feature_indices[sl], self.trigger_values[sl]

    def sharded(self, part: int, parts: int) -> TriggerSpec:
        return TriggerSpec(self.feature_indices, self.trigger_values, self.target_label, (part, parts))

    def full(self) -> TriggerSpec:
        return TriggerSpec(self.feature_indices, self.trigger_values, self.target_label)


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    poison_rate: float = 0.5
    trigger: TriggerSpec | None = None
    scale_gamma: float = 10.0
    signflip_gamma: float = 1.0
    perturbation: str = "inverse_std"
    knowledge: str = "partial"
    adaptive_lambda: float = 1.0
    adaptive_rho: float = 1.0
    adaptive_eta: float = 1.0
    adaptive_benign_k: int = 5
    adaptive_lr: float = 0.01

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ValueError("poison_rate must lie in [0, 1]")
        if self.kind in BACKDOOR_KINDS and self.trigger is None:
            raise ValueError(f"attack kind {self.kind!r} requires a trigger")
        if self.scale_gamma <= 0 or self.signflip_gamma <= 0:
            raise ValueError("attack gammas must be positive")
        if self.perturbation not in PERTURBATIONS:
            raise ValueError(f"perturbation must be one of {PERTURBATIONS}")
        if self.knowledge not in KNOWLEDGE:
            raise ValueError(f"knowledge must be one of {KNOWLEDGE}")
        if min(self.adaptive_lambda, self.adaptive_rho, self.adaptive_eta) < 0:
            raise ValueError("adaptive coefficients must be >= 0")
        if self.adaptive_benign_k < 1:
            raise ValueError("adaptive_benign_k must be >= 1")
        if self.adaptive_lr <= 0:
            raise ValueError("adaptive_lr must be > 0")


def _stamp(x: np.ndarray, trigger: TriggerSpec) -> None:
    idx, vals = trigger.active()
    if idx and max(idx) >= x.shape[1]:
        raise ValueError(f"trigger index {max(idx)} outside input width {x.shape[1]}")
    if idx:
        x[:, list(idx)] = np.asarray(vals)


def poison_backdoor(data: Batch, trigger: TriggerSpec, poison_rate: float, seed: int) -> Batch:
    """Stamp the trigger on floor(rate * n) random rows and relabel them to the target."""
    if not 0.0 <= poison_rate <= 1.0:
        raise ValueError("poison_rate must lie in [0, 1]")
    x = data.features.copy()
    y = data.labels.copy()
    n_poison = int(math.floor(poison_rate * len(data)))
    rows = np.random.default_rng(seed).choice(len(data), size=n_poison, replace=False)
    sub = x[rows]
    _stamp(sub, trigger)
    x[rows] = sub
    y[rows] = trigger.target_label
    return Batch(x, y)


def poison_backdoor_distributed(
    data: Batch,
    trigger: TriggerSpec,
    poison_rate: float,
    attacker_index: int,
    num_attackers: int,
    seed: int,
) -> Batch:
    if not 0 <= attacker_index < num_attackers:
        raise ValueError("attacker_index must lie in [0, num_attackers)")
    return poison_backdoor(data, trigger.sharded(attacker_index, num_attackers), poison_rate, seed)


def make_trigger_testset(clean_test: Batch, trigger: TriggerSpec) -> Batch:
    """Full-trigger copies of the non-target test rows, labelled with the target."""
    keep = clean_test.labels != trigger.target_label
    if not keep.any():
        raise ValueError("no test rows outside the target class")
    x = clean_test.features[keep].copy()
    _stamp(x, trigger.full())
    return Batch(x, np.full(x.shape[0], trigger.target_label, dtype=np.int64))


def attack_signflip(honest_update: np.ndarray, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return -gamma * np.asarray(honest_update, dtype=np.float64)


def attack_scale(update: np.ndarray, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return gamma * np.asarray(update, dtype=np.float64)


def perturbation_direction(benign: np.ndarray, kind: str) -> np.ndarray:
    mu = benign.mean(axis=0)
    if kind == "inverse_unit":
        n = np.linalg.norm(mu)
        return -mu / n if n > 0 else np.zeros_like(mu)
    if kind == "inverse_std":
        return -benign.std(axis=0)
    if kind == "sign":
        return -np.sign(mu)
    raise ValueError(f"perturbation must be one of {PERTURBATIONS}")


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def minmax_bound(benign: np.ndarray) -> float:
    return float(np.sqrt(_pairwise_sq(benign, benign).max()))


def minmax_value(candidate: np.ndarray, benign: np.ndarray) -> float:
    return float(np.sqrt(((benign - candidate) ** 2).sum(-1).max()))


def minsum_bound(benign: np.ndarray) -> float:
    return float(_pairwise_sq(benign, benign).sum(1).max())


def minsum_value(candidate: np.ndarray, benign: np.ndarray) -> float:
    return float(((benign - candidate) ** 2).sum())


def search_gamma(feasible, gamma_init: float = 1.0, iters: int = 30, max_doublings: int = 64) -> float:
    """Largest feasible gamma >= 0, assuming feasibility is an interval containing 0.

    Doubles ``gamma_init`` until infeasible, then bisects; the returned value
    is always a feasible endpoint.
    """
    lo, hi = 0.0, gamma_init
    for _ in range(max_doublings):
        if not feasible(hi):
            break
        lo, hi = hi, 2 * hi
    else:
        return lo
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _agr_agnostic(benign_updates: Sequence[np.ndarray], perturbation: str, value, bound) -> tuple[np.ndarray, float]:
    if len(benign_updates) < 2:
        raise ValueError("need at least two benign updates")
    benign = np.stack([np.asarray(u, dtype=np.float64) for u in benign_updates])
    mu = benign.mean(axis=0)
    p = perturbation_direction(benign, perturbation)
    limit = bound(benign)
    if not np.any(p):
        return mu, 0.0
    gamma = search_gamma(lambda g: value(mu + g * p, benign) <= limit)
    return mu + gamma * p, gamma


def attack_minmax(benign_updates: Sequence[np.ndarray], perturbation: str = "inverse_std") -> np.ndarray:
    """Mean plus the largest perturbation whose max distance to any benign update stays in the benign diameter."""
    return _agr_agnostic(benign_updates, perturbation, minmax_value, minmax_bound)[0]


def attack_minsum(benign_updates: Sequence[np.ndarray], perturbation: str = "inverse_std") -> np.ndarray:
    """As min-max, but bounding the sum of squared distances to the benign set."""
    return _agr_agnostic(benign_updates, perturbation, minsum_value, minsum_bound)[0]


def estimate_benign_stats(
    spec: ModelSpec,
    global_params: np.ndarray,
    clean: Batch,
    aux: Batch,
    layer_selector: Sequence[int],
    k: int,
    epochs: int,
    batch_size: int,
    lr: float,
    momentum: float,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Attacker-side estimate of the mean benign update and mean activation sequence.

    Simulates ``k`` benign clients by training on bootstrap resamples of the
    attacker's own clean data.
    """
    rng = np.random.default_rng(seed)
    deltas, lseqs = [], []
    for j in range(k):
        sample = clean.take(rng.integers(len(clean), size=len(clean)))
        theta = train_local(spec, global_params, sample, epochs, batch_size, lr, momentum, seed + 7919 * (j + 1))
        deltas.append(theta - global_params)
        lseqs.append(forward_with_activations(spec, theta, aux.features, layer_selector)[1])
    return np.mean(deltas, axis=0), np.mean(lseqs, axis=0)


@dataclass(frozen=True)
class AdaptiveObjective:
    """The adaptive attacker's combined loss with step-0 normalisers."""

    spec: ModelSpec
    global_params: np.ndarray
    poisoned: Batch
    clean: Batch
    benign_mean_update: np.ndarray
    benign_mean_lseq: np.ndarray
    aux: Batch
    layer_selector: tuple[int, ...]
    lam: float
    rho: float
    eta: float

    @property
    def update_norm0(self) -> float:
        return max(float(np.linalg.norm(self.benign_mean_update)), 1e-12)

    @property
    def lseq_norm0(self) -> float:
        acts = forward_with_activations(self.spec, self.global_params, self.aux.features, self.layer_selector)[1]
        return max(float(np.linalg.norm(acts - self.benign_mean_lseq)), 1e-12)

    def __call__(self, theta: np.ndarray) -> float:
        total = cross_entropy(self.spec, theta, self.poisoned)
        if self.lam:
            total += self.lam * cross_entropy(self.spec, theta, self.clean)
        if self.rho:
            gap = theta - self.global_params - self.benign_mean_update
            total += self.rho * float(np.linalg.norm(gap)) / self.update_norm0
        if self.eta:
            acts = forward_with_activations(self.spec, theta, self.aux.features, self.layer_selector)[1]
            total += self.eta * float(np.linalg.norm(acts - self.benign_mean_lseq)) / self.lseq_norm0
        return total


def attack_adaptive(
    spec: ModelSpec,
    global_params: np.ndarray,
    poisoned: Batch,
    clean: Batch,
    benign_mean_update: np.ndarray,
    benign_mean_lseq: np.ndarray,
    aux: Batch,
    lam: float,
    rho: float,
    eta: float,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    momentum: float = 0.9,
    layer_selector: Sequence[int] | None = None,
) -> np.ndarray:
    """Backdoor training that also pulls the update and its activations toward benign statistics.

    Runs the same mini-batch momentum loop as local training over the
    poisoned data for ``steps`` epochs. The clean-loss and activation-distance
    terms enter each step's gradient; the update-distance term is applied as
    its proximal map after each step, which keeps it stable for any ``rho``.
    Returns the malicious update theta - global.
    """
    if min(lam, rho, eta) < 0:
        raise ValueError("adaptive coefficients must be >= 0")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    global_params = np.asarray(global_params, dtype=np.float64)
    benign_mean_update = np.asarray(benign_mean_update, dtype=np.float64)
    if benign_mean_update.shape != global_params.shape:
        raise ValueError("benign mean update does not match the model")
    sel = tuple(layer_selector) if layer_selector is not None else spec.last_hidden(3)
    obj = AdaptiveObjective(
        spec, global_params, poisoned, clean, benign_mean_update,
        np.asarray(benign_mean_lseq, dtype=np.float64), aux, sel, lam, rho, eta,
    )

    extra = None
    if lam or eta:
        lseq_norm0 = obj.lseq_norm0 if eta else 1.0

        def extra(theta: np.ndarray, step: int) -> np.ndarray:
            g = np.zeros_like(theta)
            if lam:
                g += lam * grad_cross_entropy(spec, theta, clean)[1]
            if eta:
                g += eta / lseq_norm0 * grad_activation_distance(spec, theta, aux.features, sel, obj.benign_mean_lseq)[1]
            return g

    prox = None
    if rho:
        anchor = global_params + benign_mean_update
        shrink = lr * rho / obj.update_norm0

        def prox(theta: np.ndarray, step: int) -> np.ndarray:
            gap = theta - anchor
            norm = float(np.linalg.norm(gap))
            if norm <= shrink:
                return anchor.copy()
            return anchor + gap * (1.0 - shrink / norm)

    theta = sgd_momentum(spec, global_params, poisoned, steps, batch_size, lr, momentum, seed, extra, prox)
    return theta - global_params
