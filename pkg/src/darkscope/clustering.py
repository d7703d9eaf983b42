"""K-means on embeddings and clustering quality scores.

Scores:

* silhouette: mean over samples of (b - a) / max(a, b), singletons score 0
* pair-count Jaccard against an external partition: M11 / (M01 + M10 + M11)
* bootstrap stability: mean best-match set Jaccard between clusterings of
  bootstrap resamples, measured on their common points
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

_CHUNK_ELEMS = 1 << 22


@dataclass
class Clustering:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    seed: int
    history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(Z: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances (N, K), computed by differences in row chunks."""
    n, q = Z.shape
    k = C.shape[0]
    out = np.empty((n, k))
    step = max(1, _CHUNK_ELEMS // max(1, k * q))
    for s in range(0, n, step):
        d = Z[s : s + step, None, :] - C[None, :, :]
        out[s : s + step] = np.einsum("nkq,nkq->nk", d, d)
    return out


def _point_costs(Z: np.ndarray, C: np.ndarray, labels: np.ndarray) -> np.ndarray:
    d = Z - C[labels]
    return np.einsum("nq,nq->n", d, d)


def kmeans_pp(Z: np.ndarray, k: int, rng: np.random.Generator, n_trials: int | None = None) -> np.ndarray:
    """Greedy k-means++ seeding; returns the chosen row indices.

    Each new centre is the best of ``n_trials`` D^2-sampled candidates
    (the one leaving the smallest total squared distance); the default
    2 + floor(ln k) is the usual choice, and ``n_trials=1`` is plain k-means++.
    """
    n = Z.shape[0]
    if n_trials is None:
        n_trials = 2 + int(np.log(k))
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(Z, Z[chosen[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            cands = rng.choice(n, size=n_trials, p=d2 / total)
        else:
            # every point coincides with a chosen centre
            free = np.setdiff1d(np.arange(n), chosen)
            cands = rng.choice(free, size=1)
        trial = np.minimum(d2[:, None], _sq_dists(Z, Z[cands]))
        best = int(np.argmin(trial.sum(axis=0)))
        chosen.append(int(cands[best]))
        d2 = trial[:, best]
    return np.array(chosen)


class MonotonicityError(FloatingPointError):
    """Inertia went up during Lloyd iterations."""


def _record(history: list[float], costs: np.ndarray) -> None:
    value = float(costs.sum())
    if value > history[-1]:
        raise MonotonicityError(f"inertia rose from {history[-1]!r} to {value!r} at step {len(history)}")
    history.append(value)


def kmeans(Z: np.ndarray, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6,
           n_init: int = 1) -> Clustering:
    """Lloyd iterations from k-means++ seeding.

    Each assignment moves a point only to a strictly closer centre and each
    update keeps a cluster's mean only if it does not raise that cluster's
    cost, so the recorded ``history`` (inertia after every assignment and
    every update step) is non-increasing in floating point as well.  An empty
    cluster is re-seeded at the point farthest from its current centre.
    With ``n_init > 1`` the lowest-inertia run is kept (derived seeds).
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2:
        raise ValueError("Z must be a 2-D array")
    n = Z.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"K={k} must be between 1 and N={n}")
    if n_init > 1:
        runs = [kmeans(Z, k, seed=int(s), max_iter=max_iter, tol=tol)
                for s in np.random.SeedSequence(seed).generate_state(n_init)]
        best = min(runs, key=lambda c: c.inertia)
        best.seed = seed
        return best

    rng = np.random.default_rng(seed)
    C = Z[kmeans_pp(Z, k, rng)].copy()
    labels = np.argmin(_sq_dists(Z, C), axis=1)
    costs = _point_costs(Z, C, labels)
    history = [float(costs.sum())]
    it = 0
    for it in range(1, max_iter + 1):
        # update step
        C_old = C.copy()
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(costs))
            C[j] = Z[far]
            labels[far] = j
            costs[far] = 0.0
            counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, Z)
        for j in range(k):
            members = labels == j
            if counts[j] == 0:
                continue
            mean = sums[j] / counts[j]
            new_cost = _point_costs(Z[members], mean[None, :], np.zeros(counts[j], dtype=int))
            trial = costs.copy()
            trial[members] = new_cost
            # compare whole sums so the recorded history cannot rise by rounding
            if trial.sum() <= costs.sum():
                C[j] = mean
                costs = trial
        _record(history, costs)

        # assignment step
        D = _sq_dists(Z, C)
        best = np.argmin(D, axis=1)
        cur = D[np.arange(n), labels]
        move = D[np.arange(n), best] < cur
        labels = np.where(move, best, labels)
        costs = D[np.arange(n), labels]
        _record(history, costs)

        shift = np.sqrt(np.max(np.sum((C - C_old) ** 2, axis=1)))
        if shift < tol and not move.any():
            break

    return Clustering(labels=labels.astype(int), centroids=C, inertia=float(costs.sum()),
                      n_iter=it, seed=seed, history=history)


def assign(Z: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid labels (lowest index on ties)."""
    return np.argmin(_sq_dists(np.asarray(Z, dtype=float), np.asarray(centroids, dtype=float)), axis=1)


def inertia(Z: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    return float(_point_costs(np.asarray(Z, dtype=float), np.asarray(centroids, dtype=float),
                              np.asarray(labels)).sum())


def _codes(labels: Sequence[Hashable]) -> tuple[np.ndarray, int]:
    arr = np.asarray(labels)
    _, inv = np.unique(arr, return_inverse=True)
    inv = inv.reshape(-1)
    return inv, int(inv.max()) + 1 if inv.size else 0


def silhouette_samples(Z: np.ndarray, labels: Sequence[Hashable]) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    codes, k = _codes(labels)
    if k < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    n = Z.shape[0]
    onehot = np.zeros((n, k))
    onehot[np.arange(n), codes] = 1.0
    sizes = onehot.sum(axis=0)
    out = np.zeros(n)
    step = max(1, _CHUNK_ELEMS // max(1, n * Z.shape[1]))
    for s in range(0, n, step):
        zc = Z[s : s + step]
        d = np.sqrt(_sq_dists(zc, Z))
        sums = d @ onehot
        own = codes[s : s + step]
        own_size = sizes[own]
        rows = np.arange(zc.shape[0])
        a = np.where(own_size > 1, sums[rows, own] / np.maximum(own_size - 1, 1), 0.0)
        means = sums / sizes[None, :]
        means[rows, own] = np.inf
        b = means.min(axis=1)
        denom = np.maximum(a, b)
        sc = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
        out[s : s + step] = np.where(own_size > 1, sc, 0.0)
    return out


def silhouette(Z: np.ndarray, labels: Sequence[Hashable]) -> float:
    """Mean silhouette coefficient; a sample alone in its cluster scores 0."""
    return float(np.mean(silhouette_samples(Z, labels)))


def pair_counts(labels: Sequence[Hashable], external: Sequence[Hashable]) -> tuple[int, int, int]:
    """(M11, M10, M01) from the label contingency table.

    M10 counts pairs together in ``labels`` only, M01 in ``external`` only.
    """
    if len(labels) != len(external):
        raise ValueError("label vectors differ in length")
    a, ka = _codes(labels)
    b, kb = _codes(external)
    if a.size == 0:
        return 0, 0, 0
    table = np.zeros((ka, kb), dtype=np.int64)
    np.add.at(table, (a, b), 1)

    def pairs(x):
        return int(np.sum(x * (x - 1) // 2))

    m11 = pairs(table)
    same_a = pairs(table.sum(axis=1))
    same_b = pairs(table.sum(axis=0))
    return m11, same_a - m11, same_b - m11


def jaccard_pair(labels: Sequence[Hashable], external: Sequence[Hashable]) -> float:
    """Pair-count Jaccard; 0 when no pair is together in either partition."""
    m11, m10, m01 = pair_counts(labels, external)
    denom = m11 + m10 + m01
    return m11 / denom if denom else 0.0


def jaccard_set(a, b) -> float:
    """|A & B| / |A | B|, with two empty sets scoring 1."""
    a, b = set(a), set(b)
    union = len(a | b)
    return len(a & b) / union if union else 1.0


@dataclass
class StabilityConfig:
    rounds: int = 50
    sample_size: int | None = None
    seed: int = 0

    def size_for(self, n: int) -> int:
        return min(n, 50000) if self.sample_size is None else self.sample_size


def best_match_scores(idx_a: np.ndarray, lab_a: np.ndarray,
                      idx_b: np.ndarray, lab_b: np.ndarray) -> np.ndarray:
    """For each cluster of A on the common distinct points, its best Jaccard in B."""
    ua, pa = np.unique(idx_a, return_index=True)
    ub, pb = np.unique(idx_b, return_index=True)
    common, ia, ib = np.intersect1d(ua, ub, assume_unique=True, return_indices=True)
    if common.size == 0:
        return np.array([])
    la, ka = _codes(lab_a[pa][ia])
    lb, kb = _codes(lab_b[pb][ib])
    table = np.zeros((ka, kb))
    np.add.at(table, (la, lb), 1.0)
    size_a = table.sum(axis=1)
    size_b = table.sum(axis=0)
    jac = table / (size_a[:, None] + size_b[None, :] - table)
    return jac.max(axis=1)


def stability_from_samples(Z: np.ndarray, k: int, samples: Sequence[np.ndarray],
                           seeds: Sequence[int], **kmeans_kw) -> float:
    if len(samples) < 2:
        raise ValueError("stability needs at least 2 rounds")
    Z = np.asarray(Z, dtype=float)
    labs = [kmeans(Z[idx], k, seed=int(s), **kmeans_kw).labels for idx, s in zip(samples, seeds)]
    scores = []
    for r in range(len(samples)):
        for s in range(r + 1, len(samples)):
            scores.append(best_match_scores(samples[r], labs[r], samples[s], labs[s]))
    allscores = np.concatenate(scores)
    return float(allscores.mean()) if allscores.size else 0.0


def stability(Z: np.ndarray, k: int, cfg: StabilityConfig | None = None, **kmeans_kw) -> float:
    """Bootstrap stability score in [0, 1].

    Round r draws ``sample_size`` indices with replacement and clusters them
    with a seed derived from (cfg.seed, r).
    """
    cfg = cfg or StabilityConfig()
    if cfg.rounds < 2:
        raise ValueError("stability needs B >= 2 rounds")
    n = len(Z)
    size = cfg.size_for(n)
    if not 1 <= size <= n:
        raise ValueError("sample_size must be in [1, N]")
    ss = np.random.SeedSequence(cfg.seed)
    children = ss.spawn(cfg.rounds)
    samples, seeds = [], []
    for child in children:
        rng = np.random.default_rng(child)
        samples.append(rng.integers(0, n, size=size))
        seeds.append(int(child.generate_state(1)[0]))
    return stability_from_samples(Z, k, samples, seeds, **kmeans_kw)


def knee_point(xs: Sequence[float], ys: Sequence[float]) -> int:
    """Index of the point farthest from the chord joining the first and last points.

    Both axes are min-max normalised first.  Advisory only.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size < 3:
        return 0
    xn = (x - x.min()) / (np.ptp(x) or 1.0)
    yn = (y - y.min()) / (np.ptp(y) or 1.0)
    p0 = np.array([xn[0], yn[0]])
    p1 = np.array([xn[-1], yn[-1]])
    d = p1 - p0
    norm = np.hypot(*d) or 1.0
    dist = np.abs(d[0] * (yn - p0[1]) - d[1] * (xn - p0[0])) / norm
    return int(np.argmax(dist))


def k_sweep(Z: np.ndarray, k_list: Sequence[int], external: Sequence[Hashable] | None = None,
            seed: int = 0, **kmeans_kw) -> tuple[list[dict], int]:
    """One K-means per K with metrics; returns (rows, suggested knee K)."""
    ks = list(k_list)
    if ks != sorted(ks):
        raise ValueError("K list must be ascending")
    rows = []
    for k in ks:
        cl = kmeans(Z, k, seed=seed, **kmeans_kw)
        n_labels = len(np.unique(cl.labels))
        rows.append({
            "k": k,
            "jaccard": jaccard_pair(cl.labels, external) if external is not None else float("nan"),
            "silhouette": silhouette(Z, cl.labels) if n_labels >= 2 else float("nan"),
            "inertia": cl.inertia,
        })
    curve = [r["jaccard"] for r in rows] if external is not None else [r["inertia"] for r in rows]
    return rows, ks[knee_point(ks, curve)]
