import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linprog

from darkscope.changedetect import (
    Signature, TransportError, build_signature, change_threshold, diff_series, emd, euclidean,
    transport,
)


def random_signature(rng, k, dim, space="input"):
    w = rng.random(k) + 0.05
    w /= w.sum()
    w[-1] = 1.0 - w[:-1].sum()
    return Signature(rng.normal(size=(k, dim)), w, list(range(k)), space)


def lp_oracle(a, b, cost):
    m, n = cost.shape
    A_eq = np.zeros((m + n, m * n))
    for i in range(m):
        A_eq[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        A_eq[m + j, j::n] = 1.0
    res = linprog(cost.ravel(), A_eq=A_eq, b_eq=np.r_[a, b], bounds=(0, None), method="highs-ds",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    assert res.status == 0
    return res.fun


def vertex_oracle(a, b, cost):
    """Minimum over every basic feasible solution (square subsystems of the marginal equations)."""
    m, n = cost.shape
    cells = [(i, j) for i in range(m) for j in range(n)]
    rhs = np.r_[a, b][:-1]  # one marginal equation is redundant
    best = np.inf
    for basis in itertools.combinations(range(len(cells)), m + n - 1):
        M = np.zeros((m + n - 1, m + n - 1))
        for col, c in enumerate(basis):
            i, j = cells[c]
            M[i, col] = 1.0
            if m + j < m + n - 1:
                M[m + j, col] = 1.0
        if abs(np.linalg.det(M)) < 0.5:  # totally unimodular: singular or +-1
            continue
        x = np.linalg.solve(M, rhs)
        if x.min() < -1e-12:
            continue
        best = min(best, sum(x[col] * cost[cells[c]] for col, c in enumerate(basis)))
    return best


def test_identical_signatures_zero():
    rng = np.random.default_rng(0)
    s = random_signature(rng, 5, 3)
    assert emd(s, s) == 0.0


def test_single_edge_closed_form():
    a = Signature([[0.0, 0.0]], [1.0], [0])
    b = Signature([[3.0, 4.0]], [1.0], [0])
    assert emd(a, b) == pytest.approx(5.0, abs=1e-12)


def test_two_by_two_shift():
    a = Signature([[0.0, 0.0], [4.0, 0.0]], [0.5, 0.5], [0, 1])
    b = Signature([[1.0, 0.0], [5.0, 0.0]], [0.5, 0.5], [0, 1])
    assert emd(a, b) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(40))
def test_matches_lp_oracle(seed):
    rng = np.random.default_rng(seed)
    m, n = rng.integers(1, 7, 2)
    A = random_signature(rng, m, 4)
    B = random_signature(rng, n, 4)
    value, plan = emd(A, B, return_plan=True)
    assert abs(value - lp_oracle(A.weights, B.weights, euclidean(A.means, B.means))) < 1e-9
    assert np.abs(plan.flow.sum(axis=1) - A.weights).max() < 1e-12
    assert np.abs(plan.flow.sum(axis=0) - B.weights).max() < 1e-12
    assert plan.flow.min() >= 0.0


@pytest.mark.parametrize("seed", range(15))
def test_matches_vertex_enumeration(seed):
    rng = np.random.default_rng(100 + seed)
    m, n = rng.integers(1, 4, 2)
    a = rng.dirichlet(np.ones(m))
    b = rng.dirichlet(np.ones(n))
    cost = rng.random((m, n))
    assert abs(transport(a, b, cost).cost - vertex_oracle(a, b, cost)) < 1e-9


def test_degenerate_marginals():
    # equal partial sums make the northwest start degenerate
    a = np.array([0.25, 0.25, 0.25, 0.25])
    b = np.array([0.5, 0.25, 0.25])
    cost = np.array([[4.0, 1, 3], [2, 0, 5], [3, 2, 2], [1, 4, 1]])
    assert abs(transport(a, b, cost).cost - lp_oracle(a, b, cost)) < 1e-12


def test_integer_costs_with_many_ties():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a = np.full(6, 1 / 6)
        b = np.full(6, 1 / 6)
        cost = rng.integers(0, 3, (6, 6)).astype(float)
        assert abs(transport(a, b, cost).cost - lp_oracle(a, b, cost)) < 1e-9


def test_pivot_cap_raises():
    rng = np.random.default_rng(1)
    a = rng.dirichlet(np.ones(8))
    b = rng.dirichlet(np.ones(8))
    with pytest.raises(TransportError):
        transport(a, b, rng.random((8, 8)), max_pivots=0)


@given(st.integers(0, 2**32 - 1))
def test_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    A, B, C = (random_signature(rng, int(rng.integers(1, 9)), 10) for _ in range(3))
    assert emd(A, B) == emd(B, A)
    assert emd(A, A) <= 1e-12
    assert emd(A, C) <= emd(A, B) + emd(B, C) + 1e-9


def test_space_and_weight_checks():
    rng = np.random.default_rng(0)
    a = random_signature(rng, 2, 3)
    b = random_signature(rng, 2, 3, space="latent")
    with pytest.raises(ValueError):
        emd(a, b)
    with pytest.raises(ValueError):
        emd(a, random_signature(rng, 2, 4))
    with pytest.raises(ValueError):
        emd(a, Signature(np.zeros((2, 3)), [0.5, 0.6], [0, 1]))
    with pytest.raises(ValueError):
        Signature(np.zeros((2, 3)), [1.0], [0])


def test_build_signature_counting_oracle():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(97, 4))
    labels = rng.integers(0, 6, 97)
    labels[labels == 3] = 4  # cluster 3 empty
    sig = build_signature(labels, X)
    assert sig.clusters == [0, 1, 2, 4, 5]
    for c, w, m in zip(sig.clusters, sig.weights, sig.means):
        members = [i for i in range(97) if labels[i] == c]
        assert w == len(members) / 97
        assert np.allclose(m, X[members].mean(axis=0), atol=1e-12)
    assert abs(sig.weights.sum() - 1.0) < 1e-9
    one = build_signature(np.zeros(5, dtype=int), X[:5])
    assert one.weights.tolist() == [1.0] and np.allclose(one.means[0], X[:5].mean(axis=0))
    with pytest.raises(ValueError):
        build_signature([], np.zeros((0, 3)))


def test_signature_roundtrip(tmp_path):
    sig = random_signature(np.random.default_rng(0), 4, 3)
    sig.fingerprint, sig.day = "abc", "2021-09-01"
    sig.save(tmp_path / "s.json")
    back = Signature.load(tmp_path / "s.json")
    assert np.array_equal(back.means, sig.means) and np.array_equal(back.weights, sig.weights)
    assert (back.fingerprint, back.day, back.clusters) == ("abc", "2021-09-01", sig.clusters)


def test_series_constant_days():
    sig = random_signature(np.random.default_rng(0), 3, 2)
    s = diff_series([sig] * 5)
    assert s.emd == [0.0] * 4 and s.flagged_days() == []


def test_series_spike_flags_exactly_that_day():
    rng = np.random.default_rng(3)
    base = random_signature(rng, 5, 6)
    sigs = []
    for d in range(1, 31):
        means = base.means + rng.normal(scale=0.01, size=base.means.shape)
        if d == 15:
            means[2] += 25.0
        sigs.append(Signature(means, base.weights, base.clusters, day=f"d{d:02d}"))
    s = diff_series(sigs)
    assert len(s.emd) == 29
    # leaving and returning are both transitions
    assert s.flagged_days() == ["d15", "d16"]


def test_series_one_day_shift_persisting():
    rng = np.random.default_rng(4)
    base = random_signature(rng, 5, 6)
    sigs = []
    for d in range(1, 31):
        means = base.means + rng.normal(scale=0.01, size=base.means.shape)
        if d >= 15:
            means[2] += 25.0
        sigs.append(Signature(means, base.weights, base.clusters, day=f"d{d:02d}"))
    assert diff_series(sigs).flagged_days() == ["d15"]


def test_series_errors(tmp_path):
    rng = np.random.default_rng(0)
    a = random_signature(rng, 2, 3)
    with pytest.raises(ValueError):
        diff_series([a])
    with pytest.raises(ValueError):
        diff_series([a, random_signature(rng, 2, 3, space="latent")])
    b = random_signature(rng, 2, 3)
    b.fingerprint = "other"
    with pytest.raises(ValueError):
        diff_series([a, b])


def test_change_threshold():
    assert change_threshold([1, 2, 3, 4, 100], kappa=5) == 3 + 5 * 1


def test_series_csv(tmp_path):
    rng = np.random.default_rng(0)
    sigs = [random_signature(rng, 3, 2) for _ in range(4)]
    diff_series(sigs, ["a", "b", "c", "d"]).to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "day,emd,flag" and [l.split(",")[0] for l in lines[1:]] == ["b", "c", "d"]
