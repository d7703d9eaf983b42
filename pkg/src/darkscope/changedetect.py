"""Cluster signatures and Earth Mover's Distance between days.

A signature is the set {(cluster mean, cluster weight)} of one clustering.
EMD is the optimal value of the balanced transportation problem between two
signatures with a (Euclidean by default) ground distance, solved exactly by
the transportation simplex method.
"""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

SPACES = ("input", "latent")
WEIGHT_TOL = 1e-9


class TransportError(RuntimeError):
    """The simplex failed to reach a certified optimum."""


@dataclass
class Signature:
    means: np.ndarray  # (n_clusters, dim)
    weights: np.ndarray  # (n_clusters,)
    clusters: list[int]
    space: str = "input"
    fingerprint: str | None = None
    day: str | None = None

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.space not in SPACES:
            raise ValueError(f"unknown space {self.space!r}")
        if self.means.shape[0] != self.weights.shape[0]:
            raise ValueError("one weight per mean required")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def __len__(self) -> int:
        return len(self.weights)

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "space": self.space,
            "day": self.day,
            "entries": [
                {"cluster": int(c), "weight": float(w), "mean": [float(v) for v in m]}
                for c, w, m in zip(self.clusters, self.weights, self.means)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Signature":
        ents = d["entries"]
        return cls(
            means=np.array([e["mean"] for e in ents], dtype=float),
            weights=np.array([e["weight"] for e in ents], dtype=float),
            clusters=[int(e["cluster"]) for e in ents],
            space=d.get("space", "input"),
            fingerprint=d.get("fingerprint"),
            day=d.get("day"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Signature":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_signature(labels: Sequence[int], X: np.ndarray, space: str = "input",
                    fingerprint: str | None = None, day: str | None = None) -> Signature:
    """Mean vector and member fraction of every non-empty cluster, ordered by cluster id."""
    labels = np.asarray(labels)
    X = np.asarray(X, dtype=float)
    if labels.size == 0:
        raise ValueError("empty clustering")
    if X.shape[0] != labels.size:
        raise ValueError("labels and rows differ in length")
    ids, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    sums = np.zeros((ids.size, X.shape[1]))
    np.add.at(sums, inv.reshape(-1), X)
    return Signature(sums / counts[:, None], counts / labels.size, [int(i) for i in ids],
                     space, fingerprint, day)


@dataclass
class TransportPlan:
    flow: np.ndarray
    cost: float
    pivots: int = 0


def euclidean(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = A[:, None, :] - B[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", d, d))


def _northwest_basis(a: np.ndarray, b: np.ndarray, eps: float):
    m, n = a.size, b.size
    sa, sb = a.copy(), b.copy()
    flow = np.zeros((m, n))
    basis = []
    i = j = 0
    while True:
        x = min(sa[i], sb[j])
        flow[i, j] = x
        sa[i] -= x
        sb[j] -= x
        basis.append((i, j))
        if i == m - 1 and j == n - 1:
            break
        if (sa[i] <= eps and i < m - 1) or j == n - 1:
            i += 1
        else:
            j += 1
    return flow, basis


def _tree_potentials(m: int, n: int, adj: list[set], cost: np.ndarray):
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    queue = deque([0])
    seen = {0}
    while queue:
        node = queue.popleft()
        for other in adj[node]:
            if other in seen:
                continue
            seen.add(other)
            if node < m:  # row -> column
                v[other - m] = cost[node, other - m] - u[node]
            else:
                u[other] = cost[other, node - m] - v[node - m]
            queue.append(other)
    return u, v


def _tree_path(adj: list[set], start: int, goal: int) -> list[int]:
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for other in adj[node]:
            if other not in parent:
                parent[other] = node
                queue.append(other)
    path = [goal]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    return path[::-1]


def transport(a: Sequence[float], b: Sequence[float], cost: np.ndarray,
              max_pivots: int | None = None) -> TransportPlan:
    """Solve min sum F*cost s.t. F 1 = a, F^T 1 = b, F >= 0.

    Transportation simplex: northwest-corner start with an explicit
    spanning-tree basis (degenerate zero-flow cells kept basic), potentials
    for reduced costs, Dantzig entering rule and Bland's rule after a run of
    degenerate pivots so the method cannot cycle.  Raises TransportError if
    no optimal basis is certified within ``max_pivots``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cost = np.asarray(cost, dtype=float)
    m, n = a.size, b.size
    if cost.shape != (m, n):
        raise ValueError("cost shape mismatch")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("negative weights")
    if abs(a.sum() - b.sum()) > WEIGHT_TOL * max(1.0, a.sum()):
        raise ValueError("unbalanced problem: weights sum differently")
    scale = float(np.max(np.abs(cost))) if cost.size else 0.0
    red_tol = 1e-12 * max(1.0, scale)
    eps = 1e-15 * max(1.0, float(a.sum()))
    if max_pivots is None:
        max_pivots = 50 * (m + n) ** 2 + 1000

    flow, basis_cells = _northwest_basis(a, b, eps)
    basis = set(basis_cells)
    adj: list[set] = [set() for _ in range(m + n)]
    for i, j in basis:
        adj[i].add(m + j)
        adj[m + j].add(i)

    degenerate_run = 0
    for pivot in range(max_pivots + 1):
        u, v = _tree_potentials(m, n, adj, cost)
        reduced = cost - u[:, None] - v[None, :]
        if degenerate_run > m + n:
            neg = np.flatnonzero(reduced.ravel() < -red_tol)
            if neg.size == 0:
                break
            ei, ej = divmod(int(neg[0]), n)
        else:
            flat = int(np.argmin(reduced))
            ei, ej = divmod(flat, n)
            if reduced[ei, ej] >= -red_tol:
                break
        if pivot == max_pivots:
            raise TransportError(f"no optimal basis after {max_pivots} pivots")

        path = _tree_path(adj, ei, m + ej)
        # cycle cells after the entering cell alternate -, +, -, ...
        cells = []
        for k in range(len(path) - 1):
            p, q = path[k], path[k + 1]
            cells.append((p, q - m) if p < m else (q, p - m))
        minus = cells[0::2]
        plus = cells[1::2]
        theta = min(flow[c] for c in minus)
        leaving = min((c for c in minus if flow[c] == theta), key=lambda c: c[0] * n + c[1])
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        flow[ei, ej] += theta
        flow[leaving] = 0.0
        basis.remove(leaving)
        adj[leaving[0]].discard(m + leaving[1])
        adj[m + leaving[1]].discard(leaving[0])
        basis.add((ei, ej))
        adj[ei].add(m + ej)
        adj[m + ej].add(ei)
        degenerate_run = degenerate_run + 1 if theta <= eps else 0

    np.maximum(flow, 0.0, out=flow)
    return TransportPlan(flow, float(np.sum(flow * cost)), pivot)


def _canonical_key(sig: Signature) -> tuple:
    return (sig.weights.tobytes(), sig.means.tobytes())


def emd(sig_a: Signature, sig_b: Signature,
        distance: Callable[[np.ndarray, np.ndarray], np.ndarray] = euclidean,
        return_plan: bool = False):
    """Earth Mover's Distance between two weight-normalised signatures.

    The problem is always solved in a canonical orientation so that
    emd(A, B) and emd(B, A) are bitwise equal.
    """
    if sig_a.space != sig_b.space:
        raise ValueError(f"signature spaces differ: {sig_a.space} vs {sig_b.space}")
    if sig_a.dim != sig_b.dim:
        raise ValueError(f"signature dimensions differ: {sig_a.dim} vs {sig_b.dim}")
    for s in (sig_a, sig_b):
        if abs(s.weights.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError("signature weights must sum to 1")
    swap = _canonical_key(sig_a) > _canonical_key(sig_b)
    first, second = (sig_b, sig_a) if swap else (sig_a, sig_b)
    D = distance(first.means, second.means)
    plan = transport(first.weights, second.weights, D)
    if swap:
        plan = TransportPlan(plan.flow.T.copy(), plan.cost, plan.pivots)
    return (plan.cost, plan) if return_plan else plan.cost


@dataclass
class DistanceSeries:
    days: list[str]
    emd: list[float]
    flags: list[bool] = field(default_factory=list)
    threshold: float = float("nan")

    def flagged_days(self) -> list[str]:
        return [d for d, f in zip(self.days, self.flags) if f]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["day", "emd", "flag"])
            for d, e, f in zip(self.days, self.emd, self.flags):
                w.writerow([d, repr(float(e)), int(f)])


def change_threshold(values: Sequence[float], kappa: float = 5.0) -> float:
    """median + kappa * MAD of the series."""
    x = np.asarray(values, dtype=float)
    med = float(np.median(x))
    mad = float(np.median(np.abs(x - med)))
    return med + kappa * mad


def diff_series(signatures: Sequence[Signature], days: Sequence[str] | None = None,
                kappa: float = 5.0) -> DistanceSeries:
    """EMD between each consecutive pair, labelled by the later day, with change flags."""
    if len(signatures) < 2:
        raise ValueError("need at least two days")
    spaces = {s.space for s in signatures}
    if len(spaces) > 1:
        raise ValueError(f"mixed signature spaces: {sorted(spaces)}")
    prints = {s.fingerprint for s in signatures}
    if len(prints) > 1:
        raise ValueError("signatures built against different feature schemas")
    if days is None:
        days = [s.day if s.day is not None else str(i) for i, s in enumerate(signatures)]
    if len(days) != len(signatures):
        raise ValueError("one day label per signature required")
    values = [emd(signatures[t - 1], signatures[t]) for t in range(1, len(signatures))]
    thr = change_threshold(values, kappa)
    return DistanceSeries(list(days[1:]), values, [v > thr for v in values], thr)
