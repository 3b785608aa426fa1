import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flguard.aggregators import aggregate_fedavg, aggregate_median, aggregate_trimmed_mean
from flguard.attacks import TriggerSpec, attack_minmax, attack_minsum, minmax_bound, minmax_value, minsum_bound, minsum_value, poison_backdoor
from flguard.config import ExperimentConfig, parse_config, serialize_config
from flguard.data import generate_synthetic, largest_remainder, partition_dir, partition_iid, partition_qs
from flguard.defense import aggregate_weighted, mmd_gaussian, silhouette_samples, trust_scores
from flguard.nn import Batch
from flguard.seeding import derive_seeds

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
SETTINGS = settings(max_examples=60, deadline=None)


@SETTINGS
@given(st.lists(st.floats(1e-8, 1e3), min_size=1, max_size=12), st.floats(0.05, 5.0))
def test_scores_normalised_and_positive(dists, temp):
    s = trust_scores(dict(enumerate(dists)), temp).score
    assert abs(sum(s.values()) - 1.0) <= 1e-12
    assert min(s.values()) > 0


@SETTINGS
@given(st.integers(2, 8), st.integers(1, 4), st.integers(0, 2**32 - 1), st.floats(0.1, 5.0))
def test_mmd_symmetric_and_bounded(m, d, seed, bw):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, d)), rng.standard_normal((m, d))
    v = mmd_gaussian(a, b, bw)
    assert abs(v - mmd_gaussian(b, a, bw)) <= 1e-12
    assert -2 / (m - 1) - 1e-12 <= v <= 2 * m / (m - 1) + 1e-12
    assert abs(mmd_gaussian(a, a, bw) + 2 / (m - 1)) <= 1e-9


@SETTINGS
@given(st.integers(1, 30), st.integers(0, 2**32 - 1), st.sampled_from(["iid", "dir", "qs"]))
def test_partitions_conserve(n_clients, seed, kind):
    ds = generate_synthetic(4, 2, 25, 3.0, 0)
    if kind == "iid":
        part = partition_iid(ds, n_clients, seed)
    elif kind == "dir":
        part = partition_dir(ds, n_clients, 0.5, seed)
    else:
        part = partition_qs(ds, n_clients, 0.5, seed)
    allidx = np.sort(np.concatenate(part.assignments))
    assert np.array_equal(allidx, np.arange(len(ds)))


@SETTINGS
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(0, 100)), st.integers(0, 500))
def test_largest_remainder_total(weights, total):
    if weights.sum() <= 0:
        weights = weights + 1.0
    out = largest_remainder(weights, total)
    assert out.sum() == total and np.all(out >= 0)


@SETTINGS
@given(st.integers(1, 60), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_poison_count(n, rate, seed):
    rng = np.random.default_rng(seed)
    b = Batch(rng.standard_normal((n, 5)) + 50, np.ones(n, dtype=int))
    out = poison_backdoor(b, TriggerSpec((0, 2), (0.0, 0.0), 0), rate, seed)
    assert int(np.sum(out.labels == 0)) == int(np.floor(rate * n))
    assert np.array_equal(out.features[:, [1, 3, 4]], b.features[:, [1, 3, 4]])


@SETTINGS
@given(st.integers(2, 7), st.integers(1, 6), st.integers(0, 2**32 - 1), st.sampled_from(["inverse_unit", "inverse_std", "sign"]))
def test_agr_constraints(n, d, seed, pert):
    b = np.random.default_rng(seed).standard_normal((n, d))
    mm, ms = attack_minmax(list(b), pert), attack_minsum(list(b), pert)
    assert minmax_value(mm, b) <= minmax_bound(b) * (1 + 1e-6) + 1e-12
    assert minsum_value(ms, b) <= minsum_bound(b) * (1 + 1e-6) + 1e-12
    assert np.all(np.isfinite(mm)) and np.all(np.isfinite(ms))


@SETTINGS
@given(st.integers(3, 9), st.integers(1, 5), st.integers(0, 2**32 - 1), st.randoms(use_true_random=False))
def test_aggregators_permutation_invariant(n, d, seed, rnd):
    u = list(np.random.default_rng(seed).standard_normal((n, d)))
    perm = u[:]
    rnd.shuffle(perm)
    g = np.zeros(d)
    assert np.array_equal(aggregate_median(g, u), aggregate_median(g, perm))
    assert np.allclose(aggregate_trimmed_mean(g, u, 1), aggregate_trimmed_mean(g, perm, 1), atol=1e-14)
    ids = {i: u[i] for i in range(n)}
    shuffled = dict(rnd.sample(list(ids.items()), n))
    assert np.array_equal(aggregate_fedavg(g, ids), aggregate_fedavg(g, shuffled))
    w = {i: 1.0 + i for i in range(n)}
    assert np.array_equal(aggregate_weighted(g, ids, w), aggregate_weighted(g, shuffled, w))


@SETTINGS
@given(st.integers(2, 15), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_silhouette_in_range(n, k, seed):
    rng = np.random.default_rng(seed)
    s = silhouette_samples(rng.standard_normal((n, 2)), rng.integers(0, k, n))
    assert np.all((-1 <= s) & (s <= 1))


@SETTINGS
@given(
    st.floats(0, 1), st.integers(0, 9), st.floats(0.01, 10), st.sampled_from(["none", "backdoor", "minmax", "adaptive"]),
    st.lists(st.integers(0, 1), max_size=2, unique=True), st.integers(0, 2**40),
)
def test_config_round_trip(rate, target, temp, attack, layers, seed):
    cfg = ExperimentConfig(poison_rate=rate, target_label=target, tau_temp=temp, attack=attack, layers=layers, seed=seed)
    assert parse_config(serialize_config(cfg)) == cfg


@SETTINGS
@given(st.integers(0, 2**63), st.integers(-1, 10**6), st.integers(-1, 10**6), st.text(max_size=10))
def test_seed_deterministic_in_range(m, r, c, tag):
    s = derive_seeds(m, r, c, tag)
    assert s == derive_seeds(m, r, c, tag) and 0 <= s < 2**63
