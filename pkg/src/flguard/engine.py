"""Round-by-round FL orchestration with pluggable attacks and aggregators."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import aggregators as agg
from .attacks import (
    AttackConfig,
    attack_adaptive,
    attack_minmax,
    attack_minsum,
    attack_scale,
    attack_signflip,
    estimate_benign_stats,
    poison_backdoor,
    poison_backdoor_distributed,
)
from .data import Dataset, Partition
from .defense import GuardParams, RoundDiagnostics, geminiguard_round
from .nn import Batch, ModelSpec, predict, train_local
from .seeding import derive_seeds

DEFENSES = ("geminiguard", "fedavg", "krum", "trimmed_mean", "median")


@dataclass(frozen=True)
class Hyper:
    local_epochs: int = 2
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9


@dataclass(frozen=True)
class DefenseConfig:
    name: str = "geminiguard"
    guard: GuardParams = field(default_factory=GuardParams)
    trim_k: int = 2
    # None: use the true number of malicious clients in the round's selection
    krum_f: int | None = None

    def __post_init__(self) -> None:
        if self.name not in DEFENSES:
            raise ValueError(f"unknown defense {self.name!r}; expected one of {DEFENSES}")


@dataclass(frozen=True)
class ClientRoster:
    n_total: int
    malicious: frozenset[int]
    partition: Partition
    master_seed: int

    def __post_init__(self) -> None:
        if self.partition.n_clients != self.n_total:
            raise ValueError("partition and roster disagree on the client count")
        if not all(0 <= m < self.n_total for m in self.malicious):
            raise ValueError("malicious ids out of range")
        if 2 * len(self.malicious) >= self.n_total:
            raise ValueError("malicious clients must be fewer than half of all clients")

    def seed(self, round_index: int, client: int, tag: str) -> int:
        return derive_seeds(self.master_seed, round_index, client, tag)


def make_roster(partition: Partition, n_malicious: int, master_seed: int) -> ClientRoster:
    rng = np.random.default_rng(derive_seeds(master_seed, -1, -1, "roster"))
    bad = rng.choice(partition.n_clients, size=n_malicious, replace=False) if n_malicious else []
    return ClientRoster(partition.n_clients, frozenset(int(b) for b in bad), partition, master_seed)


def select_clients(roster: ClientRoster, k: int, round_index: int, seed: int) -> list[int]:
    """Uniform sample without replacement, sorted by id."""
    if not 1 <= k <= roster.n_total:
        raise ValueError(f"cannot select {k} of {roster.n_total} clients")
    rng = np.random.default_rng(derive_seeds(seed, round_index, -1, "select"))
    return sorted(int(c) for c in rng.choice(roster.n_total, size=k, replace=False))


def eval_acc(spec: ModelSpec, params: np.ndarray, test: Batch) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict(spec, params, test.features) == test.labels))


def eval_asr(spec: ModelSpec, params: np.ndarray, triggered_test: Batch) -> float:
    """Fraction of triggered samples predicted as the target (carried in the labels)."""
    if len(triggered_test) == 0:
        raise ValueError("empty triggered test set")
    return float(np.mean(predict(spec, params, triggered_test.features) == triggered_test.labels))


@dataclass
class RoundReport:
    round: int
    selected: list[int]
    malicious_selected: list[int]
    survivors: list[int]
    scores: dict[int, float]
    acc: float
    asr: float | None
    update_norm: float
    diagnostics: dict | None = None
    elapsed_s: float = 0.0

    def record(self) -> dict:
        """Stream record; wall-clock time is left out so streams stay reproducible.

        The record is returned in its JSON form (string map keys), so a
        record read back from disk compares equal to the original.
        """
        return json.loads(json.dumps({
            "type": "round",
            "round": self.round,
            "selected": self.selected,
            "malicious_selected": self.malicious_selected,
            "survivors": self.survivors,
            "scores": {str(k): v for k, v in self.scores.items()},
            "acc": self.acc,
            "asr": self.asr,
            "update_norm": self.update_norm,
            "diagnostics": self.diagnostics,
        }))


@dataclass(frozen=True)
class FLContext:
    """Everything fixed for the duration of a run."""

    spec: ModelSpec
    pool: Dataset
    roster: ClientRoster
    aux: Batch
    test: Batch
    triggered_test: Batch | None
    attack: AttackConfig
    defense: DefenseConfig
    hyper: Hyper
    per_round: int
    master_seed: int


def _train(ctx: FLContext, global_params: np.ndarray, data: Batch, seed: int) -> np.ndarray:
    h = ctx.hyper
    return train_local(ctx.spec, global_params, data, h.local_epochs, h.batch_size, h.lr, h.momentum, seed)


def _honest_update(ctx: FLContext, global_params: np.ndarray, client: int, r: int) -> np.ndarray:
    data = ctx.roster.partition.client_batch(ctx.pool, client)
    return _train(ctx, global_params, data, ctx.roster.seed(r, client, "train")) - global_params


def _malicious_update(
    ctx: FLContext,
    global_params: np.ndarray,
    client: int,
    r: int,
    honest_refs: Mapping[int, np.ndarray],
) -> np.ndarray:
    cfg = ctx.attack
    roster = ctx.roster
    clean = roster.partition.client_batch(ctx.pool, client)
    seed = roster.seed(r, client, "attack")
    kind = cfg.kind
    if kind == "none":
        return _honest_update(ctx, global_params, client, r)
    if kind in ("backdoor", "scaling_backdoor", "adaptive"):
        poisoned = poison_backdoor(clean, cfg.trigger, cfg.poison_rate, roster.seed(r, client, "poison"))
    if kind == "backdoor_distributed":
        ranked = sorted(roster.malicious)
        parts = max(1, min(len(ranked), len(cfg.trigger.feature_indices)))
        poisoned = poison_backdoor_distributed(
            clean, cfg.trigger, cfg.poison_rate, ranked.index(client) % parts, parts, roster.seed(r, client, "poison")
        )
    if kind in ("backdoor", "backdoor_distributed"):
        return _train(ctx, global_params, poisoned, seed) - global_params
    if kind == "scaling_backdoor":
        return attack_scale(_train(ctx, global_params, poisoned, seed) - global_params, cfg.scale_gamma)
    if kind == "signflip":
        return attack_signflip(honest_refs[client], cfg.signflip_gamma)
    if kind in ("minmax", "minsum"):
        refs = [honest_refs[c] for c in sorted(honest_refs)]
        if len(refs) < 2:
            rng = np.random.default_rng(roster.seed(r, client, "bootstrap"))
            for j in range(cfg.adaptive_benign_k):
                sample = clean.take(rng.integers(len(clean), size=len(clean)))
                refs.append(_train(ctx, global_params, sample, seed + j + 1) - global_params)
        fn = attack_minmax if kind == "minmax" else attack_minsum
        return fn(refs, cfg.perturbation)
    # adaptive
    h = ctx.hyper
    layers = ctx.defense.guard.layers(ctx.spec)
    probe = clean.take(np.arange(min(len(clean), ctx.aux.features.shape[0])))
    if len(probe) < 2:
        probe = clean.take(np.arange(len(clean)).repeat(2)[:2])
    mean_update, mean_lseq = estimate_benign_stats(
        ctx.spec, global_params, clean, probe, layers, cfg.adaptive_benign_k,
        h.local_epochs, h.batch_size, h.lr, h.momentum, roster.seed(r, client, "benign-sim"),
    )
    return attack_adaptive(
        ctx.spec, global_params, poisoned, clean, mean_update, mean_lseq, probe,
        cfg.adaptive_lambda, cfg.adaptive_rho, cfg.adaptive_eta,
        h.local_epochs, cfg.adaptive_lr, seed, h.batch_size, h.momentum, layers,
    )


def compute_updates(ctx: FLContext, global_params: np.ndarray, selection: list[int], r: int) -> dict[int, np.ndarray]:
    bad = [c for c in selection if c in ctx.roster.malicious]
    kind = ctx.attack.kind
    refs: dict[int, np.ndarray] = {}
    if kind in ("signflip", "minmax", "minsum"):
        # untargeted attackers start from what they would honestly have sent
        refs = {c: _honest_update(ctx, global_params, c, r) for c in bad}
    updates = {c: _honest_update(ctx, global_params, c, r) for c in selection if c not in bad or kind == "none"}
    if kind in ("minmax", "minsum") and ctx.attack.knowledge == "full":
        refs = {**refs, **updates}
    for c in bad:
        if kind != "none":
            updates[c] = _malicious_update(ctx, global_params, c, r, refs)
    return {c: updates[c] for c in selection}


def aggregate(
    ctx: FLContext, global_params: np.ndarray, updates: dict[int, np.ndarray], r: int
) -> tuple[np.ndarray, list[int], dict[int, float], RoundDiagnostics | None]:
    d = ctx.defense
    ids = sorted(updates)
    uniform = {c: 1.0 / len(ids) for c in ids}
    if d.name == "geminiguard":
        new, diag = geminiguard_round(
            ctx.spec, global_params, updates, ctx.aux, d.guard, ctx.roster.seed(r, -1, "defense")
        )
        return new, diag.survivors, diag.scores, diag
    if d.name == "fedavg":
        return agg.aggregate_fedavg(global_params, updates), ids, uniform, None
    if d.name == "krum":
        f = d.krum_f if d.krum_f is not None else sum(c in ctx.roster.malicious for c in ids)
        f = min(f, len(ids) - 3)
        chosen = agg.krum_select(updates, f)
        return global_params + updates[chosen], [chosen], {chosen: 1.0}, None
    if d.name == "trimmed_mean":
        return agg.aggregate_trimmed_mean(global_params, updates, d.trim_k), ids, uniform, None
    return agg.aggregate_median(global_params, updates), ids, uniform, None


def run_round(
    ctx: FLContext, global_params: np.ndarray, r: int, selection: list[int] | None = None
) -> tuple[np.ndarray, RoundReport]:
    t0 = time.perf_counter()
    if selection is None:
        selection = select_clients(ctx.roster, ctx.per_round, r, ctx.master_seed)
    updates = compute_updates(ctx, global_params, selection, r)
    new, survivors, scores, diag = aggregate(ctx, global_params, updates, r)
    asr = eval_asr(ctx.spec, new, ctx.triggered_test) if ctx.triggered_test is not None else None
    report = RoundReport(
        round=r,
        selected=list(selection),
        malicious_selected=[c for c in selection if c in ctx.roster.malicious],
        survivors=list(survivors),
        scores=dict(scores),
        acc=eval_acc(ctx.spec, new, ctx.test),
        asr=asr,
        update_norm=float(np.linalg.norm(new - global_params)),
        diagnostics=diag.to_dict() if diag is not None else None,
        elapsed_s=time.perf_counter() - t0,
    )
    return new, report
