"""Periodic region profiles and K-means over them (Euclidean or DTW).

A region's profile is its normalized demand averaged per phase of the
series period (hour-of-day for hourly data, month-of-year for monthly).
K-means seeds with greedy farthest-point selection, runs Lloyd
iterations to an assignment fixpoint, re-seeds empty clusters from the
points farthest from their centroids, and - because coordinate means
are not the DTW barycenter - reverts and stops if an update ever
increases the objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

METRICS = ("euclidean", "dtw")


@dataclass
class RegionPattern:
    region_id: int
    profile: np.ndarray  # [period]
    empty: bool = False  # no raw observations in the profiled span


@dataclass
class ClusterAssignment:
    region_id: int
    centroid_id: int
    one_hot: np.ndarray  # [n_clusters]


def build_profiles(series, train_end=None, period=None, channel=0):
    """Per-region phase-averaged normalized demand over the train span.

    Returns one RegionPattern per region (row-major region ids).
    Regions with no raw observations are flagged ``empty`` but still get
    a (constant) profile so downstream clustering stays total.
    """
    if series.norm is None:
        raise DataError("build_profiles needs a normalized series (fit norm first)")
    t_end = series.T if train_end is None else int(train_end)
    if period is None:
        period = series.period
    if t_end < period:
        raise DataError(f"train span {t_end} shorter than one period {period}")
    norm = series.normalized()[:t_end, :, :, channel]  # [T, I, J]
    raw = series.values[:t_end, :, :, channel]
    phases = np.array([series.phase(t) for t in range(t_end)])
    prof = np.zeros((period, series.rows, series.cols))
    for ph in range(period):
        sel = phases == ph
        if not np.any(sel):
            raise DataError(f"phase {ph} absent from the first {t_end} intervals")
        prof[ph] = norm[sel].mean(axis=0)
    out = []
    for i in range(series.rows):
        for j in range(series.cols):
            rid = i * series.cols + j
            out.append(
                RegionPattern(
                    region_id=rid,
                    profile=prof[:, i, j].copy(),
                    empty=not np.any(raw[:, i, j]),
                )
            )
    return out


def dtw_distance(a, b):
    """Dynamic time warping cost with squared pointwise differences.

    Full DP over match/insert/delete steps, no warping window. The
    accumulation order is fixed, so results are bit-reproducible.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise DataError(f"dtw_distance expects 1-D series, got {a.shape} and {b.shape}")
    if a.size == 0 or b.size == 0:
        raise DataError("dtw_distance on an empty series")
    n, m = a.size, b.size
    av, bv = a.tolist(), b.tolist()
    inf = float("inf")
    prev = [inf] * (m + 1)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur = [inf] * (m + 1)
        ai = av[i - 1]
        for j in range(1, m + 1):
            d = ai - bv[j - 1]
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = d * d + best
        prev = cur
    return prev[m]


def _sq_euclidean_to(X, c):
    d = X - c[None, :]
    return np.einsum("ij,ij->i", d, d)


def _distances_to(X, c, metric):
    if metric == "euclidean":
        return _sq_euclidean_to(X, c)
    return np.array([dtw_distance(x, c) for x in X])


def _pairwise_to_centroids(X, centroids, metric):
    return np.stack([_distances_to(X, c, metric) for c in centroids], axis=1)  # [n, G]


def _farthest_point_seeds(X, k, metric, rng):
    n = X.shape[0]
    first = int(rng.integers(n))
    chosen = [first]
    best = _distances_to(X, X[first], metric)
    while len(chosen) < k:
        nxt = int(np.argmax(best))
        chosen.append(nxt)
        best = np.minimum(best, _distances_to(X, X[nxt], metric))
    return chosen


def kmeans(profiles, n_clusters, metric="euclidean", seed=0, max_iters=300):
    """Cluster profiles; returns (centroids [G, P], assignments).

    Accepts RegionPattern lists or a raw [n, P] array. Ties in both
    seeding and assignment break toward the lowest index, so a fixed
    seed reproduces the run exactly.
    """
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}, expected one of {METRICS}")
    if n_clusters < 1:
        raise ConfigError("n_clusters must be >= 1")
    if max_iters < 1:
        raise ConfigError("max_iters must be >= 1")
    if isinstance(profiles, np.ndarray):
        X = np.asarray(profiles, dtype=np.float64)
        region_ids = list(range(X.shape[0]))
    else:
        profiles = list(profiles)
        if not profiles:
            raise DataError("kmeans on zero profiles")
        X = np.stack([p.profile for p in profiles]).astype(np.float64)
        region_ids = [p.region_id for p in profiles]
    n = X.shape[0]
    if n < n_clusters:
        raise DataError(f"{n} profiles cannot form {n_clusters} clusters")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    centroids = X[_farthest_point_seeds(X, n_clusters, metric, rng)].copy()

    assign = None
    prev_obj = np.inf
    prev_state = None
    for _ in range(max_iters):
        dists = _pairwise_to_centroids(X, centroids, metric)
        new_assign = np.argmin(dists, axis=1)
        # Re-seed empty clusters from the points farthest from their centroid.
        for g in range(n_clusters):
            if np.any(new_assign == g):
                continue
            spread = dists[np.arange(n), new_assign]
            far = int(np.argmax(spread))
            centroids[g] = X[far]
            new_assign[far] = g
            dists[:, g] = _distances_to(X, centroids[g], metric)
        obj = float(dists[np.arange(n), new_assign].sum())
        if obj > prev_obj:
            centroids, assign = prev_state  # revert non-improving update
            break
        prev_state = (centroids.copy(), new_assign.copy())
        prev_obj = obj
        if assign is not None and np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
        for g in range(n_clusters):
            members = X[assign == g]
            if members.shape[0]:
                centroids[g] = members.mean(axis=0)

    eye = np.eye(n_clusters)
    assignments = [
        ClusterAssignment(region_id=rid, centroid_id=int(g), one_hot=eye[int(g)].copy())
        for rid, g in zip(region_ids, assign)
    ]
    return centroids, assignments


def kmeans_objective(X, centroids, assign, metric="euclidean"):
    """Sum of member-to-assigned-centroid distances (test hook)."""
    X = np.asarray(X, dtype=np.float64)
    return float(
        np.sum(
            [_distances_to(X[assign == g], c, metric).sum() for g, c in enumerate(centroids)]
        )
    )


def adjusted_rand_index(labels_a, labels_b):
    """Chance-corrected agreement between two flat label arrays."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.size != b.size:
        raise DataError(f"label arrays differ in length: {a.size} vs {b.size}")
    if a.size == 0:
        raise DataError("adjusted_rand_index on empty labels")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    total = comb2(a.size)
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0 if sum_ij == expected else 0.0
    return float((sum_ij - expected) / (max_index - expected))
