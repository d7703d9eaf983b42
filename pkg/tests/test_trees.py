import numpy as np
import pytest
from hypothesis import given, strategies as st

from darkscope.trees import (
    DecisionTree, Literal, SearchBudgetExceeded, candidate_splits, decision_paths, dnf_for_cluster,
    fit_tree_exact, fit_tree_greedy, majority, merge_literals, shared_path,
)


def brute_best(X, y, is_tag, depth, min_leaf):
    """(errors, n_nodes) of the best tree, by plain recursion over every split."""
    cands = candidate_splits(X, is_tag)
    y = np.asarray(y)

    def leaf_err(idx):
        return idx.size - np.bincount(y[idx]).max() if idx.size else 0

    def best(idx, d):
        out = (leaf_err(idx), 1)
        if d == 0 or idx.size < 2 * min_leaf:
            return out
        for j, t in cands:
            right = X[idx, j] > t
            if right.sum() < min_leaf or (~right).sum() < min_leaf:
                continue
            l, r = best(idx[~right], d - 1), best(idx[right], d - 1)
            out = min(out, (l[0] + r[0], 1 + l[1] + r[1]))
        return out

    return best(np.arange(len(y)), depth)


def xor_data(per_cell=40, seed=0):
    """Balanced XOR of tags a and b plus a distractor tag agreeing with the label 75% of the time.

    Within every (a, b, distractor) slice the XOR cells stay balanced, so a
    Gini-greedy learner takes the distractor first and then sees no gain.
    """
    rows = []
    for a in (0, 1):
        for b in (0, 1):
            y = a ^ b
            for r in range(per_cell):
                d = y if r < 3 * per_cell // 4 else 1 - y
                rows.append((a, b, d, r % 2, y))
    data = np.array(rows, dtype=float)
    data = data[np.random.default_rng(seed).permutation(len(data))]
    return data[:, :4], data[:, 4].astype(int), ["a", "b", "d", "n"], [True] * 4


def small_dataset(seed, n, k, cols):
    rng = np.random.default_rng(seed)
    X = np.hstack([rng.integers(0, 2, (n, cols // 2)).astype(float),
                   rng.integers(0, 4, (n, cols - cols // 2)).astype(float)])
    is_tag = [True] * (cols // 2) + [False] * (cols - cols // 2)
    y = rng.integers(0, k, n)
    return X, y, is_tag


@given(st.integers(0, 10**6), st.integers(1, 3), st.integers(1, 3))
def test_exact_matches_brute_force(seed, depth, min_leaf):
    X, y, is_tag = small_dataset(seed, 14, 3, 3)
    names = [f"c{j}" for j in range(X.shape[1])]
    tree = fit_tree_exact(X, y, names, is_tag, depth, min_leaf=min_leaf, max_thresholds=None)
    assert (tree.errors(X, y), tree.n_nodes) == brute_best(X, y, is_tag, depth, min_leaf)
    assert tree.depth() <= depth


@given(st.integers(0, 10**6), st.integers(1, 3))
def test_exact_never_worse_than_greedy(seed, depth):
    X, y, is_tag = small_dataset(seed, 60, 4, 4)
    names = [f"c{j}" for j in range(X.shape[1])]
    exact = fit_tree_exact(X, y, names, is_tag, depth, min_leaf=2, max_thresholds=None)
    greedy = fit_tree_greedy(X, y, names, is_tag, depth, min_leaf=2)
    assert exact.accuracy(X, y) >= greedy.accuracy(X, y)


def test_xor_exact_vs_greedy():
    X, y, names, tags = xor_data()
    exact = fit_tree_exact(X, y, names, tags, 2, min_leaf=1)
    greedy = fit_tree_greedy(X, y, names, tags, 2, min_leaf=1)
    assert exact.accuracy(X, y) == 1.0
    assert greedy.accuracy(X, y) <= 0.75
    assert {exact.columns[exact.root.feature]} <= {"a", "b"}


def test_budget_guard():
    X = np.random.default_rng(0).normal(size=(300, 6))
    with pytest.raises(SearchBudgetExceeded):
        fit_tree_exact(X, np.arange(300) % 3, list("abcdef"), [False] * 6, 3, max_thresholds=None,
                       budget=1e3)


def test_candidate_splits():
    X = np.array([[0.0, 1.0], [1.0, 3.0], [1.0, 2.0]])
    assert candidate_splits(X, [True, False]) == [(0, 0.5), (1, 1.5), (1, 2.5)]
    assert candidate_splits(np.ones((3, 1)), [True]) == []
    many = np.arange(100.0)[:, None]
    assert len(candidate_splits(many, [False], max_thresholds=8)) <= 8


def test_majority_ties_lowest():
    assert majority({3: 2, 1: 2, 5: 1}) == 1


def test_depth_zero_is_a_leaf():
    X, y, names, tags = xor_data(8)
    tree = fit_tree_exact(X, y, names, tags, 0)
    assert tree.n_nodes == 1 and tree.root.is_leaf


def test_dnf_supports_sum_to_predictions():
    X, y, names, tags = xor_data(60, seed=3)
    tree = fit_tree_exact(X, y, names, tags, 2, min_leaf=1)
    pred = tree.predict(X)
    for c in (0, 1):
        dnf = dnf_for_cluster(tree, c, X, y)
        assert dnf.support == int(np.sum(pred == c))
        assert all(d.precision == 1.0 for d in dnf.disjuncts)
        assert len(dnf.disjuncts) == 2
        # leaf histograms give the same numbers without the data
        assert dnf_for_cluster(tree, c).support == dnf.support
    assert dnf_for_cluster(tree, 7).empty
    assert "no leaf" in str(dnf_for_cluster(tree, 7))


def test_dnf_literals_hold_for_rows():
    X, y, names, tags = xor_data(48, seed=5)
    tree = fit_tree_exact(X, y, names, tags, 2, min_leaf=1)
    leaf = tree.apply(X)
    for nid, lits in decision_paths(tree):
        rows = X[leaf == nid]
        for lit in lits:
            col = names.index(lit.column)
            assert all(lit.holds(v) for v in rows[:, col])


def test_merge_literals():
    lits = [Literal("x", ">", 1.0), Literal("t", "is"), Literal("x", ">", 3.0), Literal("x", "<=", 9.0),
            Literal("x", "<=", 5.0)]
    assert merge_literals(lits) == [Literal("x", ">", 3.0), Literal("x", "<=", 5.0), Literal("t", "is")]
    with pytest.raises(AssertionError):
        merge_literals([Literal("t", "is"), Literal("t", "not")])


def test_render_and_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    X = np.column_stack([rng.integers(0, 2, 100), rng.normal(size=100)])
    y = (X[:, 0] + (X[:, 1] > 0.3)).astype(int)
    tree = fit_tree_greedy(X, y, ["tag", "score"], [True, False], 2, min_leaf=3)
    text = tree.render()
    assert text.startswith("tag?") or text.startswith("score >")
    assert "yes: " in text and "no:  " in text
    tree.save(tmp_path / "t.json")
    back = DecisionTree.load(tmp_path / "t.json")
    assert back == tree and np.array_equal(back.predict(X), tree.predict(X))


def test_min_leaf_respected():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(80, 3))
    y = rng.integers(0, 3, 80)
    for fit in (fit_tree_exact, fit_tree_greedy):
        tree = fit(X, y, list("abc"), [False] * 3, 2, min_leaf=7)
        counts = np.bincount(tree.apply(X), minlength=tree.n_nodes)
        assert all(counts[i] >= 7 for i in tree.leaves())


def test_shared_path_finds_common_tag():
    rng = np.random.default_rng(4)
    n = 300
    mgmt = rng.random(n) < 0.5
    size = rng.normal(size=n)
    labels = np.where(mgmt, np.where(size > 0, 1, 2), 0)
    X = np.column_stack([mgmt, size]).astype(float)
    tree = fit_tree_exact(X, labels, ["censys:mgmt", "size"], [True, False], 2, min_leaf=5)
    sp = shared_path(tree, X, labels, [1, 2])
    assert Literal("censys:mgmt", "is") in sp.literals
    assert min(sp.coverage.values()) >= 0.8
    # a single cluster drills down further than the pair
    assert len(shared_path(tree, X, labels, [1]).literals) > len(sp.literals)
    with pytest.raises(ValueError):
        shared_path(tree, X, labels, [9])


def test_shared_path_root_when_nothing_common():
    X, y, names, tags = xor_data(48)
    tree = fit_tree_exact(X, y, names, tags, 2, min_leaf=1)
    sp = shared_path(tree, X, y, [0, 1])
    assert sp.node == 0 and sp.literals == [] and sp.coverage == {0: 1.0, 1: 1.0}
