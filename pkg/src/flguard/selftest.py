"""Fast invariant checks that need nothing beyond the package itself.

``run_selftest`` backs the ``flguard selftest`` command. Each check returns
a short detail string and raises ``AssertionError`` on violation.
"""

from __future__ import annotations

import io
from typing import Callable

import numpy as np

from . import aggregators as agg
from .config import ExperimentConfig, parse_config, serialize_config
from .data import KINDS, PartitionSpec, generate_synthetic, partition, read_partition, write_partition
from .defense import kmeans_silhouette, mmd_gaussian, trust_scores
from .harness import run_experiment
from .nn import Batch, ModelSpec, grad_cross_entropy, cross_entropy, init_params
from .seeding import derive_seeds


def check_mmd_identity() -> str:
    rng = np.random.default_rng(0)
    for m in (2, 5, 50):
        x = rng.standard_normal((m, 7))
        y = rng.standard_normal((m, 7))
        v = mmd_gaussian(x, x, 1.3)
        assert abs(v + 2.0 / (m - 1)) <= 1e-9, f"MMD(X, X) = {v} for m={m}"
        assert abs(mmd_gaussian(x, y, 1.3) - mmd_gaussian(y, x, 1.3)) <= 1e-12
    return "MMD(X,X) = -2/(m-1) for m in 2, 5, 50"


def check_trust_scores() -> str:
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 12))
        s = trust_scores(dict(enumerate(rng.uniform(1e-3, 3.0, n))), float(rng.uniform(0.1, 2.0))).score
        assert abs(sum(s.values()) - 1.0) <= 1e-12
        assert min(s.values()) > 0
    two = trust_scores({0: 1.0, 1: 2.0}, 1.0).score
    assert abs(two[0] - 0.6225) <= 1e-4 and abs(two[1] - 0.3775) <= 1e-4
    return "scores sum to 1; two-client example matches"


def check_gradients() -> str:
    rng = np.random.default_rng(2)
    worst = 0.0
    for trial in range(10):
        spec = ModelSpec((4, 5, 3, 3), "tanh" if trial % 2 else "relu")
        p = init_params(spec, trial)
        b = Batch(rng.standard_normal((6, 4)), rng.integers(0, 3, 6))
        _, g = grad_cross_entropy(spec, p, b)
        h = 1e-6
        for j in rng.choice(spec.n_params, size=10, replace=False):
            e = np.zeros_like(p)
            e[j] = h
            fd = (cross_entropy(spec, p + e, b) - cross_entropy(spec, p - e, b)) / (2 * h)
            worst = max(worst, abs(fd - g[j]) / max(abs(fd), abs(g[j]), 1e-8))
    assert worst < 1e-5, f"max relative error {worst:.2e}"
    return f"max relative error {worst:.1e}"


def check_partitions() -> str:
    ds = generate_synthetic(10, 5, 40, 3.0, 3)
    params = {"iid": 0.0, "dir": 0.5, "prob": 0.5, "qty": 2.0, "noise": 0.4, "qs": 0.5}
    for kind in KINDS:
        part = partition(ds, PartitionSpec(kind, params[kind]), 20, 4)
        allidx = np.concatenate(part.assignments)
        assert len(allidx) == len(ds) and len(np.unique(allidx)) == len(ds), kind
        buf = io.StringIO()
        write_partition(part, buf)
        buf.seek(0)
        back = read_partition(buf)
        assert all(np.array_equal(a, b) for a, b in zip(part.assignments, back.assignments)), kind
    return f"{len(KINDS)} schemes conserve samples and round-trip"


def check_clustering() -> str:
    rng = np.random.default_rng(5)
    x = np.concatenate([rng.standard_normal((6, 3)), 10 + rng.standard_normal((6, 3))])
    res = kmeans_silhouette(x, (2, 5), seed=0)
    assert res.k_star == 2
    assert len(set(res.assignments[:6])) == 1 and len(set(res.assignments[6:])) == 1
    u = rng.standard_normal((5, 4))
    brute = min(range(5), key=lambda i: (agg.krum_scores(u, 1)[i], i))
    assert agg.krum_select(list(u), 1) == brute
    return "two blobs recovered; Krum matches brute force"


def check_seeding() -> str:
    seen = {derive_seeds(7, r, c, t) for r in range(20) for c in range(50) for t in ("a", "b")}
    assert len(seen) == 2000
    assert derive_seeds(1, 2, 3, "x") == derive_seeds(1, 2, 3, "x")
    return "2000 distinct tuples, 2000 distinct seeds"


def check_config_roundtrip() -> str:
    cfg = parse_config("poison_rate = 0.25\nlayers = [0, 1]\ntau_temp = 2.0\n")
    assert parse_config(serialize_config(cfg)) == cfg
    assert parse_config("") == ExperimentConfig()
    return "serialize/parse is lossless"


def check_determinism() -> str:
    cfg = ExperimentConfig(n_clients=20, n_malicious=4, per_round=5, rounds=3, train_per_class=40,
                           test_per_class=20, aux_size=10, attack="backdoor")
    a = run_experiment(cfg).stream_text()
    b = run_experiment(cfg).stream_text()
    assert a == b, "report streams differ"
    return f"two runs, identical {len(a)}-byte streams"


CHECKS: dict[str, Callable[[], str]] = {
    "mmd_identity": check_mmd_identity,
    "trust_scores": check_trust_scores,
    "gradients": check_gradients,
    "partitions": check_partitions,
    "clustering": check_clustering,
    "seeding": check_seeding,
    "config_roundtrip": check_config_roundtrip,
    "determinism": check_determinism,
}


def run_selftest() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS.items():
        try:
            results.append((name, True, fn()))
        except AssertionError as exc:
            results.append((name, False, str(exc) or "assertion failed"))
    return results
