import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from celldemand import spatialstats as ss
from celldemand.geogrid import GridIndex
from celldemand.synthcity import CityRecipe, generate, oracle_local_moran_dense, oracle_moran_dense


def test_rook_and_queen_on_3x3():
    g = GridIndex(3, 3)
    rook = ss.build_weights(g, ss.DISTANCE, 1.0)
    assert rook.cardinalities[0] == 2 and rook.cardinalities[4] == 4
    queen = ss.build_weights(g, ss.DISTANCE, 1.5)
    assert queen.cardinalities[4] == 8 and queen.cardinalities[0] == 3


def test_knn_rows_have_k_entries():
    w = ss.build_weights(GridIndex(10, 10), ss.KNN, 4)
    assert np.all(w.cardinalities == 4)
    assert w.matrix.diagonal().sum() == 0


def test_no_neighbors_and_empty_grid_errors():
    with pytest.raises(ss.SpatialStatsError, match="no neighbors"):
        ss.build_weights(GridIndex(3, 3), ss.DISTANCE, 0.5)
    with pytest.raises(ss.SpatialStatsError, match="empty"):
        ss.distance_weights(np.empty((0, 2)), 1.0)


@given(st.integers(2, 8), st.integers(2, 8), st.sampled_from([1.0, 1.5, 2.0, 3.0]))
def test_distance_weights_symmetric_binary_zero_diagonal(nr, nc, t):
    w = ss.build_weights(GridIndex(nr, nc), ss.DISTANCE, t)
    m = w.matrix.toarray()
    assert np.array_equal(m, m.T)
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert np.all(np.diag(m) == 0)


def test_standardized_rows_sum_to_one():
    w = ss.build_weights(GridIndex(4, 4), ss.DISTANCE, 1.0).standardize()
    assert np.allclose(np.asarray(w.matrix.sum(axis=1)).ravel(), 1.0)


def test_checkerboard_is_minus_one():
    w = ss.build_weights(GridIndex(2, 2), ss.DISTANCE, 1.0)
    assert ss.global_morans_i([1, -1, -1, 1], w).I == -1.0


def test_two_constant_blocks_is_one():
    # two 2x2 blocks five cells apart; rook weights never cross blocks
    g = GridIndex(2, 9)
    keep = [0, 1, 9, 10, 7, 8, 16, 17]
    pts = g.centroids[keep]
    w = ss.distance_weights(pts, g.cell_size)
    y = np.array([5, 5, 5, 5, -2, -2, -2, -2], dtype=float)
    assert ss.global_morans_i(y, w).I == pytest.approx(1.0, abs=1e-12)


def test_zero_variance_raises():
    w = ss.build_weights(GridIndex(3, 3), ss.DISTANCE, 1.0)
    with pytest.raises(ss.SpatialStatsError, match="zero variance"):
        ss.global_morans_i(np.ones(9), w)


def test_global_matches_dense_oracle_6x6(rng):
    g = GridIndex(6, 6)
    w = ss.build_weights(g, ss.DISTANCE, 1.5)
    y = rng.normal(size=36)
    assert abs(ss.global_morans_i(y, w).I - oracle_moran_dense(y, w)) < 1e-10


@given(st.integers(0, 10_000))
def test_local_sum_equals_global_numerator(seed):
    rng = np.random.default_rng(seed)
    g = GridIndex(6, 6)
    w = ss.build_weights(g, ss.DISTANCE, 1.0)
    y = rng.normal(size=36)
    z = y - y.mean()
    numerator = z @ (w.matrix.toarray() @ z)
    assert abs(ss.local_morans_i(y, w).Ii.sum() - numerator) < 1e-10


def test_local_categories():
    g = GridIndex(3, 3)
    w = ss.build_weights(g, ss.DISTANCE, 1.5)
    spike = np.zeros(9)
    spike[4] = 100.0
    spike[[0, 2]] = 1.0
    loc = ss.local_morans_i(spike, w)
    assert loc.category[4] == ss.HL and loc.Ii[4] < 0
    hot = np.array([0, 0, 0, 0, 10, 10, 0, 10, 10], dtype=float)
    loc = ss.local_morans_i(hot, ss.build_weights(g, ss.DISTANCE, 1.0))
    assert loc.category[8] == ss.HH
    assert loc.category[0] == ss.LL


def test_local_matches_dense_oracle(rng):
    g = GridIndex(7, 5)
    w = ss.build_weights(g, ss.KNN, 3)
    y = rng.lognormal(size=35)
    assert np.max(np.abs(ss.local_morans_i(y, w).Ii - oracle_local_moran_dense(y, w))) < 1e-10


def test_permutation_pvalue_detects_structure():
    city = generate(CityRecipe(n_rows=15, n_cols=15, seed=1))
    w = ss.build_weights(city.grid, ss.DISTANCE, 1.0)
    res = ss.global_morans_i(city.demand, w, permutations=199, seed=0)
    assert res.p_sim <= 0.01
    assert res.n_used == 225


def test_white_noise_profile_within_null_envelope(rng):
    g = GridIndex(30, 30)
    y = rng.normal(size=g.n_cells)
    prof = ss.morans_profile(y, g, [1, 2, 3, 4, 5])
    assert np.all(np.abs(prof.I) <= 3 * np.sqrt(1 / g.n_cells))
    assert prof.correlation_range == 0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_smoothed_field_profile_decreases_and_range_tracks_radius(seed):
    rho = 3.0
    city = generate(CityRecipe(seed=seed, smoothing_radius=rho, hotspot_count=0, context_response=0.0,
                               context_multipliers=(1.0, 1.0, 1.0)))
    prof = ss.morans_profile(np.log(city.demand), city.grid, np.arange(1, 13))
    assert np.all(np.diff(prof.I[:8]) < 0)
    assert rho <= prof.correlation_range <= 3 * rho


def test_profile_single_threshold_and_validation():
    g = GridIndex(5, 5)
    y = np.arange(25.0)
    assert len(ss.morans_profile(y, g, [1.0]).I) == 1
    with pytest.raises(ss.SpatialStatsError):
        ss.morans_profile(y, g, [2.0, 1.0])


def test_correlation_range_picks_largest_qualifying_distance():
    assert ss.correlation_range([1, 2, 3, 4], [0.5, 0.3, 0.1, 0.25]) == 4.0
    assert ss.correlation_range([1, 2], [0.1, 0.0]) == 0.0
