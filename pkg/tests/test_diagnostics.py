from itertools import combinations
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajkit import diagnostics
from trajkit.diagnostics import (
    adjusted_rand,
    align_curves,
    align_labels,
    hcluster_centers,
    hcluster_curves,
    rand_index,
    rand_replicates,
    replicate_seed,
    silhouette,
    silhouette_from_distances,
    splitmix64,
)
from trajkit.simgen import generate, preset
from trajkit.spline import fit_penalized, make_basis_spec
from trajkit.trajectories import ClusterParams, cluster


def brute_pairs(a, b):
    """Walk every pair once: (agree, together_a, together_b, total)."""
    agree = ta = tb = both = 0
    pairs = list(combinations(range(len(a)), 2))
    for i, j in pairs:
        sa, sb = a[i] == a[j], b[i] == b[j]
        agree += sa == sb
        ta += sa
        tb += sb
        both += sa and sb
    return agree, ta, tb, both, len(pairs)


def brute_rand(a, b):
    agree, *_, total = brute_pairs(a, b)
    return agree / total


def brute_ari(a, b):
    _, ta, tb, both, total = brute_pairs(a, b)
    expected = ta * tb / total
    top = (ta + tb) / 2
    return 1.0 if top == expected else (both - expected) / (top - expected)


partitions = st.integers(2, 40).flatmap(
    lambda n: st.tuples(st.lists(st.integers(1, 5), min_size=n, max_size=n), st.lists(st.integers(1, 6), min_size=n, max_size=n))
)


def test_hand_case():
    a, b = [1, 1, 2, 2], [1, 2, 1, 2]
    assert rand_index(a, b) == pytest.approx(1 / 3)
    assert adjusted_rand(a, b) == pytest.approx(-0.5)


def test_identical_partitions():
    a = [1, 2, 2, 3, 3, 3]
    assert rand_index(a, a) == 1.0
    assert adjusted_rand(a, [7, 9, 9, 4, 4, 4]) == 1.0


def test_single_cluster_convention():
    assert adjusted_rand([1, 1, 1], [2, 2, 2]) == 1.0


def test_length_checks():
    with pytest.raises(ValueError):
        rand_index([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        adjusted_rand([1], [1])


def test_against_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 51))
        a = rng.integers(1, int(rng.integers(2, 7)), n)
        b = rng.integers(1, int(rng.integers(2, 7)), n)
        assert rand_index(a, b) == pytest.approx(brute_rand(a, b), abs=1e-15)
        assert adjusted_rand(a, b) == pytest.approx(brute_ari(a, b), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(partitions)
def test_symmetry_and_relabeling(ab):
    a, b = map(np.asarray, ab)
    assert adjusted_rand(a, b) == pytest.approx(adjusted_rand(b, a), abs=1e-12)
    assert rand_index(a, b) == rand_index(b, a)
    relabeled = 100 - 3 * a
    assert adjusted_rand(relabeled, b) == pytest.approx(adjusted_rand(a, b), abs=1e-12)
    assert 0.0 <= rand_index(a, b) <= 1.0
    assert adjusted_rand(a, a) == 1.0


def test_splitmix_reference_values():
    # first outputs of the reference splitmix64 stream seeded with 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4


def test_replicate_seeds_distinct():
    seeds = {replicate_seed(42, k, r) for k in range(2, 11) for r in range(1, 11)}
    assert len(seeds) == 90
    assert replicate_seed(42, 5, 1) == replicate_seed(42, 5, 1)


@pytest.fixture(scope="module")
def small_clean():
    return generate(preset("clean2", n_subjects=80, seed=1))


def test_rand_replicates_table(small_clean):
    table = rand_replicates(small_clean, [2, 3], 2, ClusterParams(k=2), seed=5)
    assert table.runs == [(2, 1), (2, 2), (3, 1), (3, 2)]
    assert len(table.pairs) == comb(4, 2)
    assert list(table.pairs.columns) == ["k_a", "rep_a", "k_b", "rep_b", "ari"]
    assert list(table.truth.columns) == ["k", "replicate", "ari"]
    m = table.matrix()
    assert np.allclose(m, m.T) and np.all(np.diag(m) == 1)
    assert table.within_k_mean()[2] == pytest.approx(1.0)


def test_rand_replicates_forced_equal_seeds(small_clean, monkeypatch):
    monkeypatch.setattr(diagnostics, "replicate_seed", lambda master, k, r: 7)
    table = rand_replicates(small_clean, [4], 2, ClusterParams(k=2), seed=0)
    assert table.pairs.ari.tolist() == [1.0]


def test_rand_replicates_parallel_equal_serial(small_clean):
    a = rand_replicates(small_clean, [2, 3], 2, ClusterParams(k=2), seed=3, cores=1)
    b = rand_replicates(small_clean, [2, 3], 2, ClusterParams(k=2), seed=3, cores=3)
    assert a.pairs.equals(b.pairs)


def test_rand_replicates_needs_two():
    with pytest.raises(ValueError):
        rand_replicates(None, [2], 1, ClusterParams(k=2), seed=0)


def test_silhouette_hand_oracle():
    d = np.array([[1.0, 3.0], [2.0, 2.0], [4.0, 1.0]])
    table = silhouette_from_distances(d, np.array([1, 2]), np.array([1, 1, 2]), ["a", "b", "c"])
    expected = {"a": (3 - 1) / 3, "b": 0.0, "c": (4 - 1) / 4}
    got = dict(zip(table.id, table.silhouette))
    for key, val in expected.items():
        assert got[key] == pytest.approx(val, abs=1e-12)
    assert table.id.tolist() == ["a", "b", "c"]
    assert table.neighbor.tolist() == [2, 2, 1]


def test_silhouette_extremes():
    d = np.array([[0.0, 5.0], [5.0, 0.0]])
    table = silhouette_from_distances(d, np.array([1, 2]), np.array([1, 2]))
    assert table.silhouette.tolist() == [1.0, 1.0]
    zero = silhouette_from_distances(np.zeros((1, 2)), np.array([1, 2]), np.array([1]))
    assert zero.silhouette.tolist() == [0.0]


def test_silhouette_of_clustering(small_clean):
    res = cluster(small_clean, ClusterParams(k=2, seed=0))
    table = silhouette(res, small_clean)
    assert len(table) == small_clean.n_subjects
    assert table.silhouette.between(-1, 1).all()
    assert (table.neighbor != table.cluster).all()
    assert table.silhouette.mean() > 0.9
    one = cluster(small_clean, ClusterParams(k=1))
    with pytest.raises(ValueError, match="single cluster"):
        silhouette(one, small_clean)


def test_complete_linkage_hand_trace():
    # points 0, 1, -2 on a line: d(a,b)=1, d(a,c)=2, d(b,c)=3
    tree = hcluster_curves(np.array([[0.0], [1.0], [-2.0]]), [7, 8, 9])
    np.testing.assert_array_equal(tree.merges, [[0, 1, 1.0], [2, 3, 3.0]])
    assert tree.to_frame().step.tolist() == [1, 2]
    assert tree.cut(2) == {7: 1, 8: 1, 9: 2} or tree.cut(2) == {7: 2, 8: 2, 9: 1}


def test_identical_centers_merge_at_zero():
    t = np.linspace(0, 10, 30)
    spec = make_basis_spec(t, 6)
    m = fit_penalized(t, np.sin(t), spec, 1.0)
    other = fit_penalized(t, np.cos(t), spec, 1.0)
    tree = hcluster_centers({1: m, 2: m, 3: other}, grid_points=50)
    assert tree.heights[0] == 0.0
    assert len(tree.merges) == 2
    assert np.all(np.diff(tree.heights) >= 0)
    assert tree.curves.shape == (3, 50)


def test_greedy_alignment_hand_trace():
    a = np.array([[0.0], [10.0], [20.0]])
    b = np.array([[11.0], [1.0], [30.0]])
    al = align_curves([1, 2, 3], a, [1, 2, 3], b)
    assert al.mapping == {2: 1, 1: 2, 3: 3}
    assert al.distances == {2: 1.0, 1: 1.0, 3: 10.0}
    assert al.unmapped_a == [] and al.unmapped_b == []


def test_alignment_of_permutation_and_size_mismatch():
    t = np.linspace(0, 10, 30)
    spec = make_basis_spec(t, 6)
    models = {lab: fit_penalized(t, lab * 10 + np.sin(t * lab), spec, 0.1) for lab in range(1, 6)}
    perm = {1: 4, 2: 1, 3: 5, 4: 2, 5: 3}
    permuted = {perm[lab]: m for lab, m in models.items()}
    al = align_labels(models, permuted)
    assert al.mapping == perm
    assert all(d == 0 for d in al.distances.values())
    two = align_labels({1: models[1], 2: models[2]}, models)
    assert len(two.mapping) == 2 and len(two.unmapped_b) == 3
    assert len(set(two.mapping.values())) == 2
