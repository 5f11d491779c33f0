import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eapstab.graph import Circuit
from eapstab.stats import (
    UndefinedJaccard,
    classical_mds,
    jaccard,
    jaccard_matrix,
    mean_pairwise_jaccard,
    median_circuit,
    membership,
    summarize,
    union_circuit,
)
from oracles import jaccard_sets, median_by_counting, two_pass_stats, union_by_fold

H = "h" * 16


def C(*edges, h=H):
    return Circuit(frozenset(edges), h)


def random_sets(rng, k, universe=12, p=0.4):
    out = []
    for _ in range(k):
        s = {f"e{i}" for i in range(universe) if rng.random() < p}
        out.append(s or {f"e{rng.integers(universe)}"})
    return out


def pairwise(x):
    return np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))


# ---- jaccard


def test_jaccard_examples():
    assert jaccard({"a", "b"}, {"a", "b"}) == 1.0
    assert jaccard({"a"}, {"b"}) == 0.0
    assert jaccard({"a", "b", "c"}, {"b", "c", "d"}) == 0.5
    assert jaccard(C("a", "b"), C("b")) == 0.5
    assert jaccard(set(), {"a"}) == 0.0
    with pytest.raises(UndefinedJaccard):
        jaccard(set(), set())


def test_jaccard_random_vs_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a, b = random_sets(rng, 2)
        assert jaccard(a, b) == jaccard_sets(a, b)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 9))
def test_matrix_symmetric_unit_diagonal(seed, n):
    sets = random_sets(np.random.default_rng(seed), n)
    jm = jaccard_matrix(sets)
    assert np.array_equal(jm, jm.T)
    assert np.all(np.diag(jm) == 1.0)
    assert ((0 <= jm) & (jm <= 1)).all()
    for i in range(n):
        for j in range(n):
            assert abs(jm[i, j] - jaccard_sets(sets[i], sets[j])) < 1e-15


def test_matrix_rejects_empty_member():
    with pytest.raises(UndefinedJaccard):
        jaccard_matrix([{"a"}, set()])


def test_mean_pairwise():
    jm = jaccard_matrix([{"a", "b"}, {"a", "b"}, {"c"}])
    assert mean_pairwise_jaccard(jm) == pytest.approx(1 / 3, abs=1e-15)
    with pytest.raises(ValueError):
        mean_pairwise_jaccard(np.ones((1, 1)))


def test_membership_universe_sorted():
    m, u = membership([{"b", "a"}, {"c"}])
    assert u == ["a", "b", "c"]
    assert m.tolist() == [[True, True, False], [False, False, True]]


# ---- summaries


def test_summary_examples():
    s = summarize([2, 2, 2])
    assert (s.mean, s.variance, s.cv, s.n) == (2.0, 0.0, 0.0, 3)
    s = summarize([1, 3])
    assert (s.mean, s.variance, s.cv) == (2.0, 1.0, 0.5)
    s = summarize([-1, 1])
    assert s.cv is None and s.to_row()[2] == ""
    with pytest.raises(ValueError):
        summarize([])
    with pytest.raises(ValueError):
        summarize([1.0, math.nan])


def test_summary_vs_two_pass():
    rng = np.random.default_rng(1)
    for _ in range(20):
        xs = (rng.standard_normal(1000) * rng.uniform(0.1, 10) + rng.uniform(-5, 5)).tolist()
        s = summarize(xs)
        mu, var = two_pass_stats(xs)
        assert abs(s.mean - mu) <= 1e-12 * max(1.0, abs(mu))
        assert abs(s.variance - var) <= 1e-12 * max(1.0, var)
        assert abs(s.cv - math.sqrt(var) / mu) <= 1e-10 * abs(s.cv)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40), st.randoms(use_true_random=False))
def test_summary_permutation_invariant(xs, r):
    ys = list(xs)
    r.shuffle(ys)
    assert summarize(xs) == summarize(ys)
    assert summarize(xs).variance >= 0


# ---- median and union


def test_median_examples():
    assert median_circuit([C("a", "b")] * 4).edges == {"a", "b"}
    assert median_circuit([C("a", "b"), C("a", "c"), C("a", "d")]).edges == {"a"}
    # exactly half is not a majority
    assert median_circuit([C("a"), C("b")]).edges == frozenset()
    with pytest.raises(ValueError):
        median_circuit([])
    with pytest.raises(ValueError, match="different DAGs"):
        median_circuit([C("a"), C("a", h="x" * 16)])


def test_union_examples():
    assert union_circuit([C("a", "b")]).edges == {"a", "b"}
    assert union_circuit([C("a"), C("b")]).edges == {"a", "b"}
    with pytest.raises(ValueError):
        union_circuit([])


def test_median_and_union_vs_oracles():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        k = int(rng.integers(1, 11))
        sets = random_sets(rng, k, universe=int(rng.integers(3, 15)))
        cs = [Circuit(frozenset(s), H) for s in sets]
        med, uni = median_circuit(cs), union_circuit(cs)
        assert med.edges == median_by_counting(sets)
        assert uni.edges == union_by_fold(sets)
        assert med.edges <= uni.edges
        assert med.dag_hash == H and med.meta["kind"] == "median"


# ---- MDS


def test_mds_equilateral():
    D = 1.0 - np.eye(3)
    e = classical_mds(D)
    d = pairwise(e.coords)
    iu = np.triu_indices(3, 1)
    assert np.abs(d[iu] - 1.0).max() < 1e-9
    assert e.stress < 1e-9


def test_mds_zero_matrix():
    e = classical_mds(np.zeros((4, 4)))
    assert not e.coords.any() and e.stress == 0.0


def test_mds_round_trip_planar():
    rng = np.random.default_rng(3)
    for _ in range(50):
        pts = rng.standard_normal((6, 2)) * rng.uniform(0.1, 5)
        D = pairwise(pts)
        e = classical_mds(D)
        assert np.abs(pairwise(e.coords) - D).max() < 1e-6
        assert np.abs(e.coords.mean(axis=0)).max() < 1e-12


def test_mds_permutation_invariant_distances():
    rng = np.random.default_rng(4)
    sets = random_sets(rng, 7)
    D = 1.0 - jaccard_matrix(sets)
    perm = rng.permutation(7)
    a = pairwise(classical_mds(D).coords)
    b = pairwise(classical_mds(D[np.ix_(perm, perm)]).coords)
    np.testing.assert_allclose(b, a[np.ix_(perm, perm)], atol=1e-9)


def test_mds_stress_positive_when_not_planar():
    D = 1.0 - np.eye(4)  # regular tetrahedron needs three dimensions
    e = classical_mds(D)
    assert e.stress > 0.05
    assert e.eigenvalues.shape == (2,) and (e.eigenvalues >= 0).all()
    assert classical_mds(D, dim=3).stress < 1e-9


def test_mds_deterministic_signs():
    pts = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    a = classical_mds(pairwise(pts)).coords
    b = classical_mds(pairwise(pts)).coords
    assert np.array_equal(a, b)
    for j in range(2):
        assert a[np.argmax(np.abs(a[:, j])), j] > 0


@pytest.mark.parametrize(
    "D",
    [
        np.zeros((1, 1)),
        np.array([[0.0, 1.0], [2.0, 0.0]]),
        np.array([[1.0, 1.0], [1.0, 1.0]]),
        np.array([[0.0, -1.0], [-1.0, 0.0]]),
        np.zeros((2, 3)),
    ],
)
def test_mds_rejects_bad_input(D):
    with pytest.raises(ValueError):
        classical_mds(D)
