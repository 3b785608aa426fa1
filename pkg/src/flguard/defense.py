"""Two-stage robust aggregation: weight-space clustering, then activation-space trust scoring.

Stage one clusters clients on their full weight vectors (plus summed cosine
similarity and euclidean distance to everyone else) and drops those that sit
too far from the benign cluster. Stage two probes each surviving model with server-held
auxiliary data, measures pairwise Gaussian-kernel MMD between the resulting
activation sequences, and turns each client's average discrepancy into a
softmax trust weight.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .nn import Batch, ModelSpec, forward_with_activations

AVG_DIST_FLOOR = 1e-6
BANDWIDTH_FLOOR = 1e-6
INLIER_REFERENCES = ("benign", "median", "nearest")
FEATURE_SCALINGS = ("block", "coordinate")


def build_weight_vectors(global_params: np.ndarray, updates: Sequence[np.ndarray]) -> list[np.ndarray]:
    g = np.asarray(global_params, dtype=np.float64)
    out = []
    for u in updates:
        u = np.asarray(u, dtype=np.float64)
        if u.shape != g.shape:
            raise ValueError(f"update shape {u.shape} does not match global {g.shape}")
        out.append(g + u)
    return out


@dataclass(frozen=True)
class FeatureVector:
    raw: np.ndarray
    standardized: np.ndarray
    block_scaled: np.ndarray


def cosine_matrix(w: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(w, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = w / safe[:, None]
    cos = unit @ unit.T
    # CosSim(0, .) = 0
    cos[norms == 0, :] = 0.0
    cos[:, norms == 0] = 0.0
    return cos


def standardize(x: np.ndarray) -> np.ndarray:
    """Per-column z-score across rows; constant columns become 0."""
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    out = np.zeros_like(x)
    ok = sd > 0
    out[:, ok] = (x[:, ok] - mu[ok]) / sd[ok]
    return out


def block_scale(x: np.ndarray, n_scalar: int = 2) -> np.ndarray:
    """Center every column, divide the weight block by one shared scale (its RMS column
    std) and z-score the trailing scalar columns individually.

    Unlike per-column z-scoring this keeps relative magnitudes inside the
    weight block, so a handful of coordinates that moved a lot still stand out.
    """
    centered = x - x.mean(axis=0)
    sd = x.std(axis=0)
    out = np.zeros_like(x)
    w_scale = float(np.sqrt(np.mean(sd[:-n_scalar] ** 2)))
    if w_scale > 0:
        out[:, :-n_scalar] = centered[:, :-n_scalar] / w_scale
    tail = sd[-n_scalar:]
    ok = tail > 0
    out[:, -n_scalar:][:, ok] = centered[:, -n_scalar:][:, ok] / tail[ok]
    return out


def build_feature_vectors(weights: Sequence[np.ndarray]) -> list[FeatureVector]:
    if len(weights) < 2:
        raise ValueError("feature vectors need at least two clients")
    w = np.stack([np.asarray(v, dtype=np.float64) for v in weights])
    n = len(w)
    off = ~np.eye(n, dtype=bool)
    cos_sum = np.where(off, cosine_matrix(w), 0.0).sum(axis=1)
    euc_sum = np.where(off, cdist(w, w), 0.0).sum(axis=1)
    raw = np.hstack([w, cos_sum[:, None], euc_sum[:, None]])
    std = standardize(raw)
    blk = block_scale(raw)
    return [FeatureVector(raw[i], std[i], blk[i]) for i in range(n)]


@dataclass(frozen=True)
class ClusterResult:
    k_star: int
    assignments: np.ndarray
    centroids: np.ndarray
    silhouette_by_k: dict[int, float]


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(1))
    return np.array(centers)


def kmeans(
    x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100, tol: float = 1e-8
) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd's algorithm from k-means++ seeds. Returns labels, centroids, inertia."""
    c = _kmeans_pp(x, k, rng)
    for _ in range(max_iter):
        labels = np.argmin(cdist(x, c, "sqeuclidean"), axis=1)
        new = c.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
        shift = np.sqrt(((new - c) ** 2).sum(1)).max()
        c = new
        if shift <= tol:
            break
    d = cdist(x, c, "sqeuclidean")
    labels = np.argmin(d, axis=1)
    return labels, c, float(d[np.arange(len(x)), labels].sum())


def silhouette_samples(x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-point silhouette; singletons and single-cluster data score 0."""
    d = cdist(x, x)
    clusters = np.unique(labels)
    s = np.zeros(len(x))
    if len(clusters) < 2:
        return s
    for i in range(len(x)):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = d[i, own].sum() / (own.sum() - 1)
        b = min(d[i, labels == c].mean() for c in clusters if c != labels[i])
        denom = max(a, b)
        s[i] = (b - a) / denom if denom > 0 else 0.0
    return s


def kmeans_silhouette(
    features: np.ndarray, k_range: tuple[int, int], seed: int, n_init: int = 3
) -> ClusterResult:
    """K-means for each k in the inclusive range; keep the k with the best mean silhouette.

    Ties on the silhouette go to the smaller k.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ValueError("clustering needs at least two points")
    k_lo, k_hi = max(2, k_range[0]), min(k_range[1], n)
    if k_hi < k_lo:
        raise ValueError("empty k range")
    rng = np.random.default_rng(seed)
    best = None
    scores: dict[int, float] = {}
    for k in range(k_lo, k_hi + 1):
        fit = None
        for _ in range(n_init):
            cand = kmeans(x, k, rng)
            if fit is None or cand[2] < fit[2]:
                fit = cand
        labels, centroids, _ = fit
        scores[k] = float(silhouette_samples(x, labels).mean())
        if best is None or scores[k] > scores[best[0]]:
            best = (k, labels, centroids)
    k_star, labels, centroids = best
    return ClusterResult(k_star, labels, centroids, scores)


def _loo_distance(x: np.ndarray, i: int, labels: np.ndarray, counts: np.ndarray, centroids: np.ndarray, j: int) -> float:
    """Distance from point i to centroid j, recomputing j without i when i belongs to it."""
    c = centroids[j]
    if labels[i] == j:
        if counts[j] == 1:
            return np.inf
        c = (counts[j] * c - x[i]) / (counts[j] - 1)
    return float(np.linalg.norm(x[i] - c))


def benign_cluster(result: ClusterResult, features: np.ndarray, magnitudes: np.ndarray | None = None) -> int:
    """The largest cluster. Among equally large ones, the one whose members have
    the smallest mean magnitude (e.g. update norm) or, without magnitudes, the
    smallest mean summed distance to every point.

    A tie is a coin flip between camps; the camp that moves the model least
    (or sits closest to everyone) is the safer one to trust.
    """
    x = np.asarray(features, dtype=np.float64)
    k = len(result.centroids)
    counts = np.bincount(result.assignments, minlength=k)
    key = cdist(x, x).sum(axis=1) if magnitudes is None else np.asarray(magnitudes, dtype=np.float64)
    mean_key = np.full(k, np.inf)
    for j in np.flatnonzero(counts > 0):
        mean_key[j] = key[result.assignments == j].mean()
    return min(np.flatnonzero(counts > 0), key=lambda j: (-counts[j], mean_key[j], j))


def centroid_distances(
    result: ClusterResult, features: np.ndarray, reference: str = "nearest", magnitudes: np.ndarray | None = None
) -> np.ndarray:
    """Per-point distance used by the inlier test.

    ``nearest``: distance to the closest centroid. ``benign``: distance to the
    benign cluster's centroid. Either way a point's own cluster centroid is
    recomputed without the point, so a singleton cannot vouch for itself.
    ``median``: distance to the coordinate-wise median of the other points.
    """
    x = np.asarray(features, dtype=np.float64)
    if reference == "median":
        if len(x) < 2:
            return np.zeros(len(x))
        return np.array([np.linalg.norm(x[i] - np.median(np.delete(x, i, axis=0), axis=0)) for i in range(len(x))])
    labels = result.assignments
    counts = np.bincount(labels, minlength=len(result.centroids))
    if reference == "benign":
        targets = [benign_cluster(result, x, magnitudes)]
    elif reference == "nearest":
        targets = list(np.flatnonzero(counts > 0))
    else:
        raise ValueError(f"unknown inlier reference {reference!r}")
    out = np.array([
        min(_loo_distance(x, i, labels, counts, result.centroids, j) for j in targets)
        for i in range(len(x))
    ])
    if not np.isfinite(out).any():
        # nothing left to compare against (e.g. a lone point)
        out[:] = 0.0
    return out


def inlier_threshold(dist: np.ndarray, tau_mode: str | float = "mad") -> float:
    if not isinstance(tau_mode, str):
        return float(tau_mode)
    finite = dist[np.isfinite(dist)]
    med = float(np.median(finite))
    mad = float(np.median(np.abs(finite - med)))
    if tau_mode == "mad":
        return med + 3.0 * mad
    raise ValueError(f"unknown tau_inlier mode {tau_mode!r}")


def filter_inliers(
    result: ClusterResult,
    features: np.ndarray,
    tau_mode: str | float = "mad",
    reference: str = "benign",
    magnitudes: np.ndarray | None = None,
) -> tuple[list[int], np.ndarray, float]:
    """Indices of points whose centroid distance is within the threshold; never empty.

    The threshold statistics pool every point's distance, except when the
    benign cluster holds exactly half the points: the pooled distances are
    then bimodal and the median sits between the camps, so only the benign
    cluster's own distances are used.

    Returns (kept indices, per-point centroid distances, threshold).
    """
    dist = centroid_distances(result, features, reference, magnitudes)
    pool = dist
    if reference == "benign" and len(dist) >= 4:
        members = result.assignments == benign_cluster(result, features, magnitudes)
        if 2 * members.sum() == len(dist):
            pool = dist[members]
    finite = pool[np.isfinite(pool)]
    tau = inlier_threshold(finite if len(finite) else np.zeros(1), tau_mode)
    kept = [i for i in range(len(dist)) if dist[i] <= tau]
    if not kept:
        kept = [int(np.argmin(dist))]
    return kept, dist, tau


@dataclass(frozen=True)
class ActivationSequence:
    rows: np.ndarray
    layer_selector: tuple[int, ...]

    @property
    def m(self) -> int:
        return self.rows.shape[0]


def _rows(a) -> np.ndarray:
    return np.asarray(a.rows if isinstance(a, ActivationSequence) else a, dtype=np.float64)


def extract_lseq(
    spec: ModelSpec,
    global_params: np.ndarray,
    update: np.ndarray,
    aux: Batch,
    layer_selector: Sequence[int],
) -> ActivationSequence:
    if len(aux) < 2:
        raise ValueError("activation sequences need at least two auxiliary samples")
    theta = np.asarray(global_params, dtype=np.float64) + np.asarray(update, dtype=np.float64)
    sel = tuple(sorted(set(layer_selector)))
    _, acts = forward_with_activations(spec, theta, aux.features, sel)
    return ActivationSequence(acts, sel)


def mmd_gaussian(a, b, bandwidth: float) -> float:
    """Kernel discrepancy with every term divided by m(m-1), cross term included.

    Identical inputs give -2/(m-1), not 0.
    """
    x, y = _rows(a), _rows(b)
    m = x.shape[0]
    if y.shape[0] != m:
        raise ValueError("activation sequences must have the same number of rows")
    if m < 2:
        raise ValueError("need at least two rows")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    g = 1.0 / (2.0 * bandwidth * bandwidth)
    kxx = np.exp(-g * cdist(x, x, "sqeuclidean"))
    kyy = np.exp(-g * cdist(y, y, "sqeuclidean"))
    kxy = np.exp(-g * cdist(x, y, "sqeuclidean"))
    s_x = kxx.sum() - np.trace(kxx)
    s_y = kyy.sum() - np.trace(kyy)
    return float((s_x + s_y - 2.0 * kxy.sum()) / (m * (m - 1)))


def median_bandwidth(sequences: Sequence) -> float:
    pooled = np.vstack([_rows(s) for s in sequences])
    if len(pooled) < 2:
        return 1.0
    return max(float(np.median(pdist(pooled))), BANDWIDTH_FLOOR)


def avg_distances(sequences: Mapping[int, object], bandwidth: float) -> dict[int, float]:
    """Mean MMD from each client's sequence to every other client's (raw, unclamped)."""
    ids = sorted(sequences)
    if len(ids) < 2:
        raise ValueError("average distances need at least two clients")
    n = len(ids)
    mmd = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            mmd[a, b] = mmd[b, a] = mmd_gaussian(sequences[ids[a]], sequences[ids[b]], bandwidth)
    return {cid: float(mmd[i].sum() / (n - 1)) for i, cid in enumerate(ids)}


@dataclass(frozen=True)
class TrustScores:
    avg_dist: dict[int, float]
    clamped: dict[int, float]
    score: dict[int, float]


def trust_scores(avg_dist: Mapping[int, float], temperature: float, floor: float = AVG_DIST_FLOOR) -> TrustScores:
    """softmax over clients of 1 / (AvgDist * temperature), distances clamped below at ``floor``.

    Scores that underflow are lifted to the smallest positive double so every
    client keeps a strictly positive weight.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    ids = sorted(avg_dist)
    if not ids:
        raise ValueError("no clients to score")
    clamped = np.array([max(float(avg_dist[i]), floor) for i in ids])
    logits = 1.0 / clamped / temperature
    e = np.exp(logits - logits.max())
    p = e / e.sum()
    if (p <= 0).any():
        p = np.maximum(p, np.finfo(np.float64).tiny)
        p = p / p.sum()
    return TrustScores(
        {i: float(avg_dist[i]) for i in ids},
        dict(zip(ids, clamped.tolist())),
        dict(zip(ids, p.tolist())),
    )


def aggregate_weighted(
    global_params: np.ndarray, updates: Mapping[int, np.ndarray], scores: Mapping[int, float] | TrustScores
) -> np.ndarray:
    """Global plus the score-weighted sum of updates, scores renormalised over ``updates``.

    Summation runs in ascending client id so the result does not depend on
    mapping order. Equal weights reduce to the plain mean.
    """
    weights = scores.score if isinstance(scores, TrustScores) else scores
    ids = sorted(updates)
    if not ids:
        raise ValueError("no surviving updates to aggregate")
    if set(ids) != set(weights):
        raise ValueError("scores must cover exactly the aggregated clients")
    g = np.asarray(global_params, dtype=np.float64)
    stack = np.stack([np.asarray(updates[i], dtype=np.float64) for i in ids])
    w = np.array([weights[i] for i in ids], dtype=np.float64)
    if np.all(w == w[0]):
        return g + stack.mean(axis=0)
    w = w / w.sum()
    return g + w @ stack


@dataclass(frozen=True)
class GuardParams:
    tau_temp: float = 0.5
    layer_selector: tuple[int, ...] | None = None
    n_layers: int = 3
    k_max: int | None = None
    bandwidth: str | float = "median"
    tau_inlier: str | float = "mad"
    inlier_reference: str = "benign"
    feature_scaling: str = "block"
    n_init: int = 3

    def __post_init__(self) -> None:
        if self.tau_temp <= 0:
            raise ValueError("tau_temp must be positive")
        if self.inlier_reference not in INLIER_REFERENCES:
            raise ValueError(f"inlier_reference must be one of {INLIER_REFERENCES}")
        if self.feature_scaling not in FEATURE_SCALINGS:
            raise ValueError(f"feature_scaling must be one of {FEATURE_SCALINGS}")

    def layers(self, spec: ModelSpec) -> tuple[int, ...]:
        if self.layer_selector is not None:
            return tuple(self.layer_selector)
        return spec.last_hidden(self.n_layers)


@dataclass
class RoundDiagnostics:
    clients: list[int]
    k_star: int
    silhouette_by_k: dict[int, float]
    cluster_of: dict[int, int]
    centroid_dist: dict[int, float]
    tau_inlier: float
    survivors: list[int]
    bandwidth: float | None = None
    avg_dist: dict[int, float] = field(default_factory=dict)
    scores: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def weight_stage(
    global_params: np.ndarray, updates: Mapping[int, np.ndarray], params: GuardParams, seed: int
) -> tuple[list[int], ClusterResult, np.ndarray, float]:
    """Model-weight analysis. Returns surviving client ids plus clustering internals."""
    ids = sorted(updates)
    weights = build_weight_vectors(global_params, [updates[i] for i in ids])
    fvs = build_feature_vectors(weights)
    if params.feature_scaling == "block":
        feats = np.stack([f.block_scaled for f in fvs])
    else:
        feats = np.stack([f.standardized for f in fvs])
    n = len(ids)
    k_max = params.k_max if params.k_max is not None else min(5, n - 1)
    result = kmeans_silhouette(feats, (2, max(2, k_max)), seed, params.n_init)
    norms = np.array([np.linalg.norm(updates[c]) for c in ids])
    kept, dist, tau = filter_inliers(result, feats, params.tau_inlier, params.inlier_reference, norms)
    return [ids[i] for i in kept], result, dist, tau


def geminiguard_round(
    spec: ModelSpec,
    global_params: np.ndarray,
    updates: Mapping[int, np.ndarray],
    aux: Batch,
    params: GuardParams = GuardParams(),
    seed: int = 0,
) -> tuple[np.ndarray, RoundDiagnostics]:
    """One defended aggregation: cluster and filter, score survivors by MMD, weighted average."""
    if len(updates) < 2:
        raise ValueError("the defense needs at least two updates")
    ids = sorted(updates)
    survivors, result, dist, tau = weight_stage(global_params, updates, params, seed)
    diag = RoundDiagnostics(
        clients=ids,
        k_star=result.k_star,
        silhouette_by_k=dict(result.silhouette_by_k),
        cluster_of={cid: int(result.assignments[i]) for i, cid in enumerate(ids)},
        centroid_dist={cid: float(dist[i]) for i, cid in enumerate(ids)},
        tau_inlier=float(tau),
        survivors=survivors,
    )
    kept = {cid: updates[cid] for cid in survivors}
    if len(survivors) == 1:
        diag.scores = {survivors[0]: 1.0}
        return aggregate_weighted(global_params, kept, diag.scores), diag
    layers = params.layers(spec)
    lseqs = {cid: extract_lseq(spec, global_params, kept[cid], aux, layers) for cid in survivors}
    if isinstance(params.bandwidth, str):
        if params.bandwidth != "median":
            raise ValueError(f"unknown bandwidth mode {params.bandwidth!r}")
        bw = median_bandwidth([lseqs[c] for c in survivors])
    else:
        bw = float(params.bandwidth)
    trust = trust_scores(avg_distances(lseqs, bw), params.tau_temp)
    diag.bandwidth = bw
    diag.avg_dist = trust.avg_dist
    diag.scores = trust.score
    return aggregate_weighted(global_params, kept, trust), diag
