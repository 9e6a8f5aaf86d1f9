import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.model_selection import cross_val_score
from sklearn.linear_model import LinearRegression

from celldemand import splitcv as cv
from celldemand.geogrid import GridIndex
from celldemand.synthcity import CityRecipe, generate


def set_partitions(items):  # independent of the library enumerator
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def two_blocks(side, gap):
    xs = [(r, c) for r in range(side) for c in range(side)]
    a = np.array(xs, dtype=float)
    b = a + [0.0, side + gap]
    return np.vstack([a, b]) * 1500.0


# -- stage 1 -----------------------------------------------------------------------


def test_kmeans_k1_is_grand_mean():
    g = GridIndex(4, 5)
    st1 = cv.kmeans_centroids(g, 1, seed=0)
    assert np.allclose(st1.centroids[0], g.centroids.mean(axis=0))


def test_kmeans_k_equals_n_zero_objective():
    g = GridIndex(3, 3)
    st1 = cv.kmeans_centroids(g, 9, seed=0)
    assert st1.objective == 0.0
    assert len(np.unique(st1.assignment)) == 9


def test_kmeans_recovers_two_5x5_blocks():
    X = two_blocks(5, 6)
    km = cv.SpatialKMeans(2, random_state=3).fit(X)
    assert len(set(km.labels_[:25])) == 1 and len(set(km.labels_[25:])) == 1
    assert km.labels_[0] != km.labels_[25]


def test_kmeans_matches_exhaustive_two_cluster_oracle():
    X = two_blocks(3, 4)
    n = len(X)
    best = np.inf
    # every labeling with point 0 in cluster 0 (label symmetry)
    for bits in range(2 ** (n - 1)):
        lab = np.array([0] + [(bits >> i) & 1 for i in range(n - 1)])
        if lab.all() or not lab.any():
            continue
        cost = sum(((X[lab == j] - X[lab == j].mean(axis=0)) ** 2).sum() for j in (0, 1))
        best = min(best, cost)
    km = cv.SpatialKMeans(2, random_state=0).fit(X)
    assert km.inertia_ == pytest.approx(best, rel=1e-12)


@given(st.integers(0, 1000), st.integers(2, 6))
@settings(max_examples=20)
def test_kmeans_objective_never_increases(seed, k):
    X = np.random.default_rng(seed).uniform(0, 10_000, (60, 2))
    km = cv.SpatialKMeans(k, random_state=seed).fit(X)
    hist = np.array(km.objective_history_)
    assert np.all(np.diff(hist) <= 1e-6 * hist[0])
    assert len(np.unique(km.labels_)) == k


def test_kmeans_deterministic_and_validated():
    X = np.random.default_rng(0).uniform(size=(40, 2))
    a = cv.SpatialKMeans(4, random_state=7).fit(X).labels_
    b = cv.SpatialKMeans(4, random_state=7).fit(X).labels_
    assert np.array_equal(a, b)
    with pytest.raises(cv.SplitError):
        cv.SpatialKMeans(50).fit(X)


def test_choose_stage1_k_clipped():
    assert cv.choose_stage1_k(1600, 3.0) == 30  # floor(56.6) clipped
    assert cv.choose_stage1_k(1600, 6.0) == 14
    assert cv.choose_stage1_k(1600, 10.0) == 5
    assert cv.choose_stage1_k(100, 20.0) == 3


# -- stage 2 -----------------------------------------------------------------------


def test_dissimilarity_identity_and_normalisation():
    s = np.array([2.0, 0.5, 3.0])
    a = np.array([1.0, 2.0, 3.0])
    assert cv.context_dissimilarity(a, a, s) == 0.0
    assert cv.context_dissimilarity(a, a + s, s) == pytest.approx(3.0)


def test_dissimilarity_matches_direct_sum(rng):
    a, b = rng.normal(size=7), rng.normal(size=7)
    s = rng.uniform(0.1, 2, 7)
    direct = 0.0
    for i in range(7):
        direct += abs(a[i] - b[i]) / s[i]
    assert abs(cv.context_dissimilarity(a, b, s) - direct) < 1e-12


def test_zero_sigma_feature_ignored():
    assert cv.context_dissimilarity([1, 5], [2, 9], [1.0, 0.0]) == 1.0


def test_single_context_cluster_one_subcluster():
    stage1 = np.zeros(6, dtype=int)
    X = np.tile([1.0, 0.0], (6, 1))
    sub = cv.refine_context(stage1, X, np.array([0.5, 0.5]), np.array(["a"] * 6, dtype=object))
    assert len(np.unique(sub.sub)) == 1


def test_singleton_stage1_cluster():
    sub = cv.refine_context(np.array([0, 1, 1]), np.array([[1.0], [0.0], [1.0]]), np.array([0.5]),
                            np.array(["a", "b", "a"], dtype=object))
    assert np.sum(sub.sub == sub.sub[0]) == 1


def test_two_pure_blocks_split_like_brute_force(rng):
    n = 8
    X = np.zeros((n, 3))
    X[:4, 0] = 1.0
    X[4:, 1] = 1.0
    X[:, 2] = rng.normal(scale=0.05, size=n)
    sigma = np.array([0.5, 0.5, 1.0])
    labels = np.array(["a"] * 4 + ["b"] * 4, dtype=object)
    sub = cv.refine_context(np.zeros(n, dtype=int), X, sigma, labels)
    D = np.array([[cv.context_dissimilarity(X[i], X[j], sigma) for j in range(n)] for i in range(n)])

    def worst(part):
        return max(D[np.ix_(p, p)].sum() / max(len(p) * (len(p) - 1), 1) for p in part)

    best = min((p for p in set_partitions(list(range(n))) if len(p) == 2), key=worst)
    got = [sorted(np.flatnonzero(sub.sub == s).tolist()) for s in np.unique(sub.sub)]
    assert sorted(got) == sorted(sorted(p) for p in best)
    assert sorted(sub.dominant.values()) == ["a", "b"]


# -- fold merging ------------------------------------------------------------------


def pure_units(classes, size=10):
    stage1 = np.repeat(np.arange(len(classes)), size)
    dominant = {i: c for i, c in enumerate(classes)}
    return stage1, cv.SubClustering(stage1, stage1.copy(), dominant, {})


def test_montreal_like_five_clusters_two_classes_gives_three_folds():
    stage1 = np.repeat(np.arange(5), 10)
    sub_ids = stage1.copy()
    sub_ids[25:30] = 5  # cluster 2 is half A, half B
    dominant = {0: "A", 1: "B", 2: "A", 3: "A", 4: "B", 5: "B"}
    folds = cv.build_folds(stage1, cv.SubClustering(stage1, sub_ids, dominant, {}))
    assert folds.n_folds == 3
    assert folds.violations() == []


def test_all_diverse_clusters_identity_merge():
    stage1 = np.repeat(np.arange(3), 6)
    sub_ids = np.arange(18) // 2
    dominant = {s: "ABC"[s % 3] for s in range(9)}
    folds = cv.build_folds(stage1, cv.SubClustering(stage1, sub_ids, dominant, {}))
    assert folds.n_folds == 3
    assert np.array_equal(folds.fold, stage1)


def test_six_clusters_three_contexts_matches_exhaustive_search():
    classes = ["A", "A", "B", "B", "C", "C"]
    stage1, sub = pure_units(classes)
    folds = cv.build_folds(stage1, sub)
    best = None
    for part in set_partitions(list(range(6))):
        if len(part) < 3:
            continue
        diverse = all(len({classes[u] for u in g}) >= 2 for g in part)
        sizes = [len(g) for g in part]
        if diverse and max(sizes) <= 2 * min(sizes):
            best = len(part) if best is None else min(best, len(part))
    assert folds.n_folds == best
    for f in range(folds.n_folds):
        assert len(set(folds.context[folds.fold == f])) >= 2


def test_greedy_path_for_many_units_is_diverse_and_balanced():
    classes = ["A", "B", "C"] * 4
    stage1, sub = pure_units(classes)
    assert len(classes) > cv.EXACT_MAX_UNITS
    folds = cv.build_folds(stage1, sub)
    sizes = np.bincount(folds.fold)
    assert folds.violations() == []
    assert sizes.max() <= 2 * sizes.min() and folds.n_folds >= 3


def test_too_few_units_raises():
    stage1, sub = pure_units(["A", "B"])
    with pytest.raises(cv.SplitError):
        cv.build_folds(stage1, sub)


# -- baselines and invariants ------------------------------------------------------


def test_random_split_edge_cases():
    assert np.all(cv.random_split(10, 1, seed=0).fold == 0)
    f = cv.random_split(10, 10, seed=0)
    assert sorted(f.fold.tolist()) == list(range(10))
    assert np.array_equal(cv.random_split(50, 4, 3).fold, cv.random_split(50, 4, 3).fold)


@given(st.integers(1, 200), st.integers(1, 12), st.integers(0, 99))
def test_random_split_partitions_and_balances(n, k, seed):
    k = min(k, n)
    f = cv.random_split(n, k, seed)
    counts = np.bincount(f.fold, minlength=k)
    assert counts.sum() == n and counts.max() - counts.min() <= 1


@given(st.integers(0, 50))
@settings(max_examples=8)
def test_two_stage_invariants_on_synthetic_cities(seed):
    city = generate(CityRecipe(n_rows=18, n_cols=18, seed=seed))
    folds = cv.two_stage_split(city.grid, city.features, "landuse=", seed, separation_r=2.0)
    assert folds.violations() == []
    assert len(folds.fold) == city.grid.n_cells
    assert folds.n_folds >= 3
    for c in np.unique(folds.stage1):
        assert len(np.unique(folds.fold[folds.stage1 == c])) == 1


def test_kmeans_location_never_splits_clusters():
    g = GridIndex(12, 12)
    f = cv.kmeans_location_split(g, 5, seed=2)
    assert f.violations() == [] and f.n_folds == 5


def test_fold_frame_roundtrip():
    city = generate(CityRecipe(n_rows=15, n_cols=15, seed=4))
    folds = cv.two_stage_split(city.grid, city.features, "landuse=", 4, 2.0)
    back = cv.FoldAssignment.from_frame(folds.to_frame())
    assert np.array_equal(back.fold, folds.fold) and np.array_equal(back.stage2, folds.stage2)
    assert list(folds.to_frame().columns) == ["cell_id", "fold", "stage1", "stage2", "context_class"]


def test_splitter_usable_as_sklearn_cv():
    city = generate(CityRecipe(n_rows=12, n_cols=12, seed=0))
    splitter = cv.SpatialFoldSplitter("kmeans_location", n_folds=4, random_state=0).fit(city.grid, city.features)
    scores = cross_val_score(LinearRegression(), city.features.values, city.demand, cv=splitter)
    assert len(scores) == 4
    assert splitter.get_params()["method"] == "kmeans_location"


# -- audit -------------------------------------------------------------------------


def test_single_fold_audit_is_zero():
    g = GridIndex(4, 4)
    a = cv.audit_leakage(cv.random_split(16, 1, 0), g, 1.0)
    assert a.boundary_pair_count == 0 and a.to_dict()["min_interfold_distance_m"] is None


def test_audit_matches_dense_pair_scan():
    g = GridIndex(10, 10)
    folds = cv.random_split(100, 5, seed=1)
    pts = g.centroids
    count, min_d = 0, np.inf
    for i, j in itertools.combinations(range(100), 2):
        d = np.hypot(*(pts[i] - pts[j]))
        if folds.fold[i] != folds.fold[j]:
            min_d = min(min_d, d)
            if d <= 1.0 * g.cell_size + 1e-9:
                count += 1
    a = cv.audit_leakage(folds, g, 1.0)
    assert a.boundary_pair_count == count
    assert a.min_interfold_distance == pytest.approx(min_d)


def test_two_stage_boundary_fraction_below_random():
    city = generate(CityRecipe(n_rows=20, n_cols=20, seed=5))
    two = cv.two_stage_split(city.grid, city.features, "landuse=", 5, 3.0)
    rnd = cv.random_split(city.grid.n_cells, two.n_folds, 5)
    assert cv.audit_leakage(two, city.grid, 3.0).fraction_boundary < cv.audit_leakage(rnd, city.grid, 3.0).fraction_boundary
