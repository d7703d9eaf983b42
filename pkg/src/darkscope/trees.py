"""Axis-aligned classification trees explaining a clustering.

Two learners share one tree representation:

* ``fit_tree_greedy``: CART-style recursive splitting on Gini gain.
* ``fit_tree_exact``: exhaustive search over all trees up to a small depth
  that minimises the training misclassification count, ties broken by fewer
  nodes and then by the lexicographic (preorder) sequence of split indices.

A split sends a row right when ``x > threshold``; boolean tags use threshold
0.5, so "right" means the tag is set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class SearchBudgetExceeded(RuntimeError):
    pass


@dataclass
class Node:
    # internal nodes: feature/threshold/left/right; leaves: prediction
    feature: int | None = None
    threshold: float | None = None
    left: int | None = None
    right: int | None = None
    prediction: int | None = None
    hist: dict[int, int] = field(default_factory=dict)

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"prediction": self.prediction, "hist": {str(k): v for k, v in self.hist.items()}}
        return {"feature": self.feature, "threshold": self.threshold,
                "left": self.left, "right": self.right,
                "hist": {str(k): v for k, v in self.hist.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "Node":
        hist = {int(k): int(v) for k, v in d.get("hist", {}).items()}
        if "prediction" in d:
            return cls(prediction=int(d["prediction"]), hist=hist)
        return cls(feature=int(d["feature"]), threshold=float(d["threshold"]),
                   left=int(d["left"]), right=int(d["right"]), hist=hist)


@dataclass
class DecisionTree:
    nodes: list[Node]
    columns: list[str]
    is_tag: list[bool]
    max_depth: int

    @property
    def root(self) -> Node:
        return self.nodes[0]

    def depth(self, node_id: int = 0) -> int:
        n = self.nodes[node_id]
        if n.is_leaf:
            return 0
        return 1 + max(self.depth(n.left), self.depth(n.right))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.is_leaf]

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf id reached by each row."""
        X = np.asarray(X, dtype=float)
        out = np.zeros(X.shape[0], dtype=int)
        stack = [(0, np.arange(X.shape[0]))]
        while stack:
            nid, idx = stack.pop()
            node = self.nodes[nid]
            if node.is_leaf:
                out[idx] = nid
                continue
            go_right = X[idx, node.feature] > node.threshold
            stack.append((node.left, idx[~go_right]))
            stack.append((node.right, idx[go_right]))
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        leaf = self.apply(X)
        return np.array([self.nodes[i].prediction for i in leaf], dtype=int)

    def errors(self, X: np.ndarray, y: Sequence[int]) -> int:
        return int(np.sum(self.predict(X) != np.asarray(y)))

    def accuracy(self, X: np.ndarray, y: Sequence[int]) -> float:
        y = np.asarray(y)
        return float(np.mean(self.predict(X) == y))

    def to_dict(self) -> dict:
        return {"columns": self.columns, "is_tag": self.is_tag, "max_depth": self.max_depth,
                "nodes": [n.to_dict() for n in self.nodes]}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        return cls([Node.from_dict(n) for n in d["nodes"]], list(d["columns"]),
                   [bool(t) for t in d["is_tag"]], int(d["max_depth"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DecisionTree":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def render(self) -> str:
        lines: list[str] = []

        def walk(nid: int, indent: int, prefix: str) -> None:
            node = self.nodes[nid]
            pad = "  " * indent
            if node.is_leaf:
                total = sum(node.hist.values())
                lines.append(f"{pad}{prefix}cluster {node.prediction} "
                             f"({node.hist.get(node.prediction, 0)}/{total})")
                return
            lines.append(f"{pad}{prefix}{self._test_text(node)}")
            walk(node.right, indent + 1, "yes: ")
            walk(node.left, indent + 1, "no:  ")

        walk(0, 0, "")
        return "\n".join(lines) + "\n"

    def _test_text(self, node: Node) -> str:
        name = self.columns[node.feature]
        if self.is_tag[node.feature]:
            return f"{name}?"
        return f"{name} > {node.threshold:.6g}?"


def majority(hist: dict[int, int]) -> int:
    """Most frequent label, lowest label on ties."""
    return min(hist, key=lambda c: (-hist[c], c))


def _hist(y: np.ndarray) -> dict[int, int]:
    vals, counts = np.unique(y, return_counts=True)
    return {int(v): int(c) for v, c in zip(vals, counts)}


def midpoints(values: np.ndarray) -> np.ndarray:
    u = np.unique(values)
    return (u[:-1] + u[1:]) / 2.0


def candidate_splits(X: np.ndarray, is_tag: Sequence[bool],
                     max_thresholds: int | None = None) -> list[tuple[int, float]]:
    """(feature, threshold) pairs in feature order, thresholds ascending.

    Tags contribute one split at 0.5.  Numeric features use midpoints of
    adjacent distinct values; with ``max_thresholds`` set, at most that many
    midpoints are kept, chosen at evenly spaced quantiles of the data.
    """
    X = np.asarray(X, dtype=float)
    out = []
    for j in range(X.shape[1]):
        col = X[:, j]
        if is_tag[j]:
            if col.min() < 0.5 < col.max():
                out.append((j, 0.5))
            continue
        mids = midpoints(col)
        if max_thresholds is not None and mids.size > max_thresholds:
            qs = np.quantile(col, np.linspace(0, 1, max_thresholds + 2)[1:-1])
            # snap each quantile to the nearest midpoint at or above it
            pos = np.clip(np.searchsorted(mids, qs), 0, mids.size - 1)
            mids = mids[np.unique(pos)]
        out.extend((j, float(t)) for t in mids)
    return out


def _encode(y: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    classes, codes = np.unique(np.asarray(y), return_inverse=True)
    return classes, codes.reshape(-1)


class _Builder:
    """Accumulates nodes in preorder."""

    def __init__(self, classes: np.ndarray):
        self.classes = classes
        self.nodes: list[Node] = []

    def leaf(self, codes: np.ndarray) -> int:
        counts = np.bincount(codes, minlength=self.classes.size)
        hist = {int(self.classes[c]): int(n) for c, n in enumerate(counts) if n}
        self.nodes.append(Node(prediction=majority(hist) if hist else int(self.classes[0]), hist=hist))
        return len(self.nodes) - 1

    def split(self, feature: int, threshold: float, codes: np.ndarray) -> int:
        counts = np.bincount(codes, minlength=self.classes.size)
        hist = {int(self.classes[c]): int(n) for c, n in enumerate(counts) if n}
        self.nodes.append(Node(feature=feature, threshold=threshold, hist=hist))
        return len(self.nodes) - 1


def _gini_from_counts(counts: np.ndarray) -> np.ndarray:
    n = counts.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / n[..., None]
        g = 1.0 - np.sum(p * p, axis=-1)
    return np.where(n > 0, g, 0.0)


def fit_tree_greedy(X: np.ndarray, y: Sequence[int], columns: Sequence[str], is_tag: Sequence[bool],
                    max_depth: int = 3, min_leaf: int = 10,
                    max_thresholds: int | None = None) -> DecisionTree:
    """Recursive best-Gini-gain splitting; stops at max_depth, min_leaf or zero gain."""
    X = np.asarray(X, dtype=float)
    classes, codes = _encode(y)
    k = classes.size
    builder = _Builder(classes)
    cands = candidate_splits(X, is_tag, max_thresholds)

    def grow(idx: np.ndarray, depth: int) -> int:
        sub = codes[idx]
        counts = np.bincount(sub, minlength=k)
        n = idx.size
        if depth == max_depth or n < 2 * min_leaf or np.count_nonzero(counts) <= 1:
            return builder.leaf(sub)
        parent = _gini_from_counts(counts.astype(float))
        onehot = np.zeros((n, k))
        onehot[np.arange(n), sub] = 1.0
        best = None
        best_gain = 1e-12
        for s, (j, t) in enumerate(cands):
            right = X[idx, j] > t
            nr = int(right.sum())
            if nr < min_leaf or n - nr < min_leaf:
                continue
            cr = onehot[right].sum(axis=0)
            cl = counts - cr
            gain = parent - (nr * _gini_from_counts(cr) + (n - nr) * _gini_from_counts(cl)) / n
            if gain > best_gain:
                best, best_gain = s, gain
        if best is None:
            return builder.leaf(sub)
        j, t = cands[best]
        nid = builder.split(j, t, sub)
        right = X[idx, j] > t
        builder.nodes[nid].left = grow(idx[~right], depth + 1)
        builder.nodes[nid].right = grow(idx[right], depth + 1)
        return nid

    grow(np.arange(X.shape[0]), 0)
    return DecisionTree(builder.nodes, list(columns), list(is_tag), max_depth)


# ---------------------------------------------------------------------------
# exact search

@dataclass(frozen=True, order=True)
class _Sol:
    errors: int
    n_nodes: int
    seq: tuple  # preorder split indices, -1 for a leaf


_LEAF = _Sol(0, 1, (-1,))


class _ExactSearch:
    def __init__(self, B: np.ndarray, codes: np.ndarray, n_classes: int, min_leaf: int):
        self.B = B  # (N, S) bool: row goes right under split s
        self.codes = codes
        self.k = n_classes
        self.min_leaf = min_leaf
        self.cache: dict[tuple, _Sol] = {}
        self.evaluations = 0

    def _usable(self, idx: np.ndarray) -> np.ndarray:
        sub = self.B[idx]
        nr = sub.sum(axis=0)
        ok = np.flatnonzero((nr >= self.min_leaf) & (idx.size - nr >= self.min_leaf))
        if ok.size < 2:
            return ok
        # splits inducing the same partition of these rows are interchangeable;
        # keep the lowest index of each
        packed = np.packbits(sub[:, ok], axis=0).T
        _, first = np.unique(packed, axis=0, return_index=True)
        return ok[np.sort(first)]

    def _leaf(self, idx: np.ndarray) -> _Sol:
        counts = np.bincount(self.codes[idx], minlength=self.k)
        return _Sol(int(idx.size - counts.max()) if idx.size else 0, 1, (-1,))

    def solve(self, idx: np.ndarray, depth: int) -> _Sol:
        key = (depth, idx.tobytes())
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        if depth == 0 or idx.size < 2 * self.min_leaf:
            sol = self._leaf(idx)
        elif depth <= 2:
            sol = self._solve_shallow(idx, depth)
        else:
            sol = self._solve_deep(idx, depth)
        self.cache[key] = sol
        return sol

    def _solve_deep(self, idx: np.ndarray, depth: int) -> _Sol:
        best = self._leaf(idx)
        if best.errors == 0:
            return best
        usable = self._usable(idx)
        # try splits whose depth-1 error is lowest first for an early incumbent
        d1 = self._depth1_errors(idx, usable)
        for s in usable[np.argsort(d1, kind="stable")]:
            right = self.B[idx, s]
            self.evaluations += 1
            left_sol = self.solve(idx[~right], depth - 1)
            if left_sol.errors > best.errors:
                continue
            right_sol = self.solve(idx[right], depth - 1)
            cand = _Sol(left_sol.errors + right_sol.errors, 1 + left_sol.n_nodes + right_sol.n_nodes,
                        (int(s), *left_sol.seq, *right_sol.seq))
            if cand < best:
                best = cand
        return best

    def _depth1_errors(self, idx: np.ndarray, usable: np.ndarray) -> np.ndarray:
        Y = np.zeros((idx.size, self.k))
        Y[np.arange(idx.size), self.codes[idx]] = 1.0
        Bs = self.B[idx][:, usable].astype(float)
        R = Bs.T @ Y
        L = Y.sum(axis=0)[None, :] - R
        return (idx.size - R.max(axis=1) - L.max(axis=1))

    def _solve_shallow(self, idx: np.ndarray, depth: int) -> _Sol:
        """Depth 1 or 2, vectorised over all candidate splits."""
        n = idx.size
        present = np.unique(self.codes[idx])
        remap = np.full(self.k, -1)
        remap[present] = np.arange(present.size)
        c = present.size
        Y = np.zeros((n, c))
        Y[np.arange(n), remap[self.codes[idx]]] = 1.0
        tot = Y.sum(axis=0)
        leaf_err = int(n - tot.max())
        best = _Sol(leaf_err, 1, (-1,))
        if leaf_err == 0:
            return best
        usable = self._usable(idx)
        if usable.size == 0:
            return best
        Bs = self.B[idx][:, usable].astype(float)  # (n, S)
        S = usable.size
        R = Bs.T @ Y  # (S, c)
        L = tot[None, :] - R
        nR = R.sum(axis=1)
        nL = n - nR
        errR_leaf = nR - R.max(axis=1)
        errL_leaf = nL - L.max(axis=1)
        self.evaluations += S
        if depth == 1:
            total = (errL_leaf + errR_leaf).astype(int)
            s = int(np.argmin(total))  # first index on ties = lowest split index
            cand = _Sol(int(total[s]), 3, (int(usable[s]), -1, -1))
            return min(best, cand)

        # depth 2: pair counts RR[:, s1, s2] = rows right under both splits
        self.evaluations += S * S
        # rows carry one class each, so a Gram matrix per class suffices;
        # class axis first keeps the reductions below contiguous
        codes_sub = remap[self.codes[idx]]
        Bf = Bs.astype(np.float32)
        RR = np.empty((c, S, S))
        for cls in range(c):
            Bc = Bf[codes_sub == cls]
            RR[cls] = Bc.T @ Bc
        Rt, Lt = R.T, L.T  # (c, S)
        ml = self.min_leaf
        # children of s1 split further by s2: [class, s1, s2]
        rr = RR
        rl = Rt[:, :, None] - RR
        lr = Rt[:, None, :] - RR
        ll = Lt[:, :, None] - lr
        n_rr = rr.sum(axis=0)
        n_rl = nR[:, None] - n_rr
        n_lr = nR[None, :] - n_rr
        n_ll = nL[:, None] - n_lr
        best_sides = []
        for a, b_, na, nb, base_err in ((ll, lr, n_ll, n_lr, errL_leaf), (rl, rr, n_rl, n_rr, errR_leaf)):
            err = (na - a.max(axis=0)) + (nb - b_.max(axis=0))
            valid = (na >= ml) & (nb >= ml)
            err = np.where(valid, err, np.inf)
            s2 = np.argmin(err, axis=1)
            e2 = err[np.arange(S), s2]
            use_split = e2 < base_err  # leaf wins ties (fewer nodes)
            best_sides.append((np.where(use_split, e2, base_err), use_split, s2))
        (eL, splitL, s2L), (eR, splitR, s2R) = best_sides
        total = (eL + eR).astype(int)
        nodes = 3 + 2 * splitL + 2 * splitR
        order = np.lexsort((np.arange(S), nodes, total))
        s1 = int(order[0])
        seq_l = (int(usable[s2L[s1]]), -1, -1) if splitL[s1] else (-1,)
        seq_r = (int(usable[s2R[s1]]), -1, -1) if splitR[s1] else (-1,)
        cand = _Sol(int(total[s1]), int(nodes[s1]), (int(usable[s1]), *seq_l, *seq_r))
        # among equal (errors, nodes) the lowest s1 comes first, matching preorder order
        return min(best, cand)


def fit_tree_exact(X: np.ndarray, y: Sequence[int], columns: Sequence[str], is_tag: Sequence[bool],
                   max_depth: int = 3, min_leaf: int = 10, max_thresholds: int | None = 32,
                   budget: float = 1e6) -> DecisionTree:
    """Minimum-misclassification tree of depth <= max_depth over the candidate splits.

    ``budget`` bounds S ** (max_depth - 1), the number of split sequences
    along one root-to-leaf path, where S is the number of distinct
    candidate splits; larger searches raise SearchBudgetExceeded.
    """
    X = np.asarray(X, dtype=float)
    classes, codes = _encode(y)
    cands = candidate_splits(X, is_tag, max_thresholds)
    if cands:
        B = np.column_stack([X[:, j] > t for j, t in cands])
    else:
        B = np.zeros((X.shape[0], 0), dtype=bool)
    if max_depth >= 1 and len(cands) ** max(max_depth - 1, 1) > budget:
        raise SearchBudgetExceeded(
            f"{len(cands)} candidate splits at depth {max_depth} exceed the search budget; "
            "lower the depth or max_thresholds")
    search = _ExactSearch(B, codes, classes.size, min_leaf)
    sol = search.solve(np.arange(X.shape[0]), max_depth)

    builder = _Builder(classes)
    seq = iter(sol.seq)

    def build(idx: np.ndarray) -> int:
        s = next(seq)
        if s < 0:
            return builder.leaf(codes[idx])
        j, t = cands[s]
        nid = builder.split(j, t, codes[idx])
        right = B[idx, s]
        builder.nodes[nid].left = build(idx[~right])
        builder.nodes[nid].right = build(idx[right])
        return nid

    build(np.arange(X.shape[0]))
    return DecisionTree(builder.nodes, list(columns), list(is_tag), max_depth)


# ---------------------------------------------------------------------------
# paths and DNF structures

@dataclass(frozen=True)
class Literal:
    column: str
    op: str  # "<=", ">", "is", "not"
    value: float | None = None

    def __str__(self) -> str:
        if self.op == "is":
            return self.column
        if self.op == "not":
            return f"!{self.column}"
        return f"{self.column} {self.op} {self.value:.6g}"

    def holds(self, x: float) -> bool:
        if self.op == "is":
            return x > 0.5
        if self.op == "not":
            return x <= 0.5
        if self.op == "<=":
            return x <= self.value
        return x > self.value


def _edge_literals(tree: DecisionTree, nid: int, went_right: bool) -> Literal:
    node = tree.nodes[nid]
    name = tree.columns[node.feature]
    if tree.is_tag[node.feature]:
        return Literal(name, "is" if went_right else "not")
    return Literal(name, ">" if went_right else "<=", node.threshold)


def merge_literals(literals: Sequence[Literal]) -> list[Literal]:
    """Collapse repeated tests on one column to the tightest interval.

    Order follows each column's first appearance; a numeric column yields at
    most one '>' and one '<=' literal.
    """
    order: list[str] = []
    lower: dict[str, float] = {}
    upper: dict[str, float] = {}
    tags: dict[str, str] = {}
    for lit in literals:
        if lit.column not in order:
            order.append(lit.column)
        if lit.op in ("is", "not"):
            prev = tags.get(lit.column)
            if prev is not None and prev != lit.op:
                raise AssertionError(f"contradictory tag tests on {lit.column}")
            tags[lit.column] = lit.op
        elif lit.op == ">":
            lower[lit.column] = max(lower.get(lit.column, -np.inf), lit.value)
        else:
            upper[lit.column] = min(upper.get(lit.column, np.inf), lit.value)
    out = []
    for col in order:
        if col in tags:
            out.append(Literal(col, tags[col]))
            continue
        if col in lower:
            out.append(Literal(col, ">", lower[col]))
        if col in upper:
            out.append(Literal(col, "<=", upper[col]))
    return out


def _raw_paths(tree: DecisionTree) -> dict[int, list[Literal]]:
    out: dict[int, list[Literal]] = {}
    stack: list[tuple[int, list[Literal]]] = [(0, [])]
    while stack:
        nid, lits = stack.pop()
        node = tree.nodes[nid]
        out[nid] = lits
        if node.is_leaf:
            continue
        stack.append((node.right, lits + [_edge_literals(tree, nid, True)]))
        stack.append((node.left, lits + [_edge_literals(tree, nid, False)]))
    return out


def decision_paths(tree: DecisionTree) -> list[tuple[int, list[Literal]]]:
    """(leaf id, merged root-to-leaf conjunction) for every leaf, in node order."""
    raw = _raw_paths(tree)
    return [(nid, merge_literals(raw[nid])) for nid in tree.leaves()]


@dataclass
class Disjunct:
    leaf: int
    literals: list[Literal]
    support: int
    precision: float

    def __str__(self) -> str:
        body = " & ".join(str(l) for l in self.literals) or "TRUE"
        return f"({body})"


@dataclass
class DnfStructure:
    cluster: int
    disjuncts: list[Disjunct]

    @property
    def empty(self) -> bool:
        return not self.disjuncts

    @property
    def support(self) -> int:
        return sum(d.support for d in self.disjuncts)

    def __str__(self) -> str:
        if self.empty:
            return f"cluster {self.cluster}: <no leaf predicts this cluster>"
        return f"cluster {self.cluster}: " + " | ".join(str(d) for d in self.disjuncts)


def dnf_for_cluster(tree: DecisionTree, cluster: int, X: np.ndarray | None = None,
                    y: Sequence[int] | None = None) -> DnfStructure:
    """Disjunction of the paths to leaves predicting ``cluster``.

    Support and precision come from the leaf histograms, or from (X, y)
    when given.
    """
    routed = tree.apply(X) if X is not None else None
    y_arr = np.asarray(y) if y is not None else None
    disjuncts = []
    for nid, lits in decision_paths(tree):
        node = tree.nodes[nid]
        if node.prediction != cluster:
            continue
        if routed is not None and y_arr is not None:
            mask = routed == nid
            support = int(mask.sum())
            hits = int(np.sum(y_arr[mask] == cluster))
        else:
            support = sum(node.hist.values())
            hits = node.hist.get(cluster, 0)
        disjuncts.append(Disjunct(nid, lits, support, hits / support if support else 0.0))
    return DnfStructure(int(cluster), disjuncts)


def node_paths(tree: DecisionTree) -> dict[int, list[Literal]]:
    """Merged conjunction from the root to every node (internal nodes included)."""
    return {nid: merge_literals(l) for nid, l in _raw_paths(tree).items()}


@dataclass
class SharedPath:
    node: int
    literals: list[Literal]
    coverage: dict[int, float]


def shared_path(tree: DecisionTree, X: np.ndarray, labels: Sequence[int],
                clusters: Sequence[int], min_coverage: float = 0.8) -> SharedPath:
    """Deepest node whose path still holds for most rows of every given cluster.

    Starting at the root, step into the child with the larger minimum
    per-cluster coverage (fraction of a cluster's rows satisfying the path)
    as long as that minimum stays at or above ``min_coverage``.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    clusters = [int(c) for c in clusters]
    masks = {c: labels == c for c in clusters}
    sizes = {c: int(m.sum()) for c, m in masks.items()}
    if any(s == 0 for s in sizes.values()):
        raise ValueError("every cluster needs at least one member")
    paths = node_paths(tree)
    at = np.ones(len(labels), dtype=bool)
    nid = 0

    def cov(mask: np.ndarray) -> dict[int, float]:
        return {c: float(np.sum(mask & masks[c])) / sizes[c] for c in clusters}

    while not tree.nodes[nid].is_leaf:
        node = tree.nodes[nid]
        right = X[:, node.feature] > node.threshold
        # right first so that equal scores prefer the "yes" branch
        options = [(node.right, at & right), (node.left, at & ~right)]
        score, child, m = max(((min(cov(m).values()), child, m) for child, m in options),
                              key=lambda t: t[0])
        if score < min_coverage:
            break
        nid, at = child, m
    return SharedPath(nid, paths[nid], cov(at))
