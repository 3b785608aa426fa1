"""Classical baseline aggregators.

Each takes the global parameters and the round's updates, either as a
mapping client id -> update (summed in ascending id order) or as a plain
sequence, and returns the new global parameters.
"""

from __future__ import annotations

from typing import Mapping, Sequence, Union

import numpy as np

Updates = Union[Mapping[int, np.ndarray], Sequence[np.ndarray]]


def _ids_and_stack(updates: Updates) -> tuple[list[int], np.ndarray]:
    if isinstance(updates, Mapping):
        ids = sorted(updates)
        rows = [updates[i] for i in ids]
    else:
        ids = list(range(len(updates)))
        rows = list(updates)
    if not rows:
        raise ValueError("no updates to aggregate")
    return ids, np.stack([np.asarray(r, dtype=np.float64) for r in rows])


def aggregate_fedavg(global_params: np.ndarray, updates: Updates) -> np.ndarray:
    _, u = _ids_and_stack(updates)
    return np.asarray(global_params, dtype=np.float64) + u.mean(axis=0)


def krum_scores(u: np.ndarray, f: int) -> np.ndarray:
    n = len(u)
    d2 = ((u[:, None, :] - u[None, :, :]) ** 2).sum(-1)
    k = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(d2[i], i))
        scores[i] = others[:k].sum()
    return scores


def krum_select(updates: Updates, f: int) -> int:
    """Client id of the Krum choice; ties go to the lowest id."""
    ids, u = _ids_and_stack(updates)
    if len(u) < f + 3:
        raise ValueError(f"Krum needs n >= f + 3 (n={len(u)}, f={f})")
    return ids[int(np.argmin(krum_scores(u, f)))]


def aggregate_krum(global_params: np.ndarray, updates: Updates, f: int) -> np.ndarray:
    chosen = krum_select(updates, f)
    u = updates[chosen] if isinstance(updates, Mapping) else updates[chosen]
    return np.asarray(global_params, dtype=np.float64) + np.asarray(u, dtype=np.float64)


def aggregate_trimmed_mean(global_params: np.ndarray, updates: Updates, trim_k: int) -> np.ndarray:
    _, u = _ids_and_stack(updates)
    n = len(u)
    if trim_k < 0 or n <= 2 * trim_k:
        raise ValueError(f"trimmed mean needs n > 2 * trim_k (n={n}, trim_k={trim_k})")
    if trim_k == 0:
        return aggregate_fedavg(global_params, updates)
    s = np.sort(u, axis=0)
    return np.asarray(global_params, dtype=np.float64) + s[trim_k : n - trim_k].mean(axis=0)


def aggregate_median(global_params: np.ndarray, updates: Updates) -> np.ndarray:
    _, u = _ids_and_stack(updates)
    return np.asarray(global_params, dtype=np.float64) + np.median(u, axis=0)
