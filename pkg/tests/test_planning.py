import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from celldemand import planning as pl


def test_spectral_efficiency_values():
    assert pl.spectral_efficiency(1.0) == pytest.approx(1.0)
    assert pl.spectral_efficiency(3.0, rho_oh=0.25) == pytest.approx(1.5)
    assert pl.spectral_efficiency(0.0) == 0.0
    with pytest.raises(pl.PlanningError):
        pl.spectral_efficiency(-1.0)


def test_effective_eta_interpolated_quantile():
    # spectral efficiencies 1 and 2 bps/Hz; the median interpolates to 1.5
    eta = pl.effective_eta([[1.0, 3.0]], 0.5, min_samples=2)
    assert eta[0] == pytest.approx(1.5)
    assert pl.effective_eta([[1.0, 3.0]], 0.1, upper=True, min_samples=2)[0] == pytest.approx(1.9)


def test_effective_eta_matches_sort_oracle(rng):
    s = rng.lognormal(size=57)
    se = np.sort(np.log2(1 + s))
    pos = 0.05 * (len(se) - 1)
    lo = int(np.floor(pos))
    want = se[lo] + (pos - lo) * (se[lo + 1] - se[lo])
    assert abs(pl.effective_eta([s], 0.05)[0] - want) < 1e-10


def test_effective_eta_needs_enough_samples():
    with pytest.raises(pl.PlanningError, match="SINR samples"):
        pl.effective_eta([[1.0] * 5], 0.05)


def test_bandwidth_required_and_infeasible():
    d = pl.bandwidth_required([1000.0, 0.0, 5.0], eta=[2.0, 0.0, 0.0])
    assert pl.to_mhz(d.b_req_hz[0]) == pytest.approx(25.0)
    assert d.b_req_hz[1] == 0.0 and np.isinf(d.b_req_hz[2])
    assert d.infeasible.tolist() == [False, False, True]


def test_bde_hand_values():
    assert round(float(pl.to_mhz(pl.bde(1432.7, eta=2.0))), 1) == 35.8
    assert round(float(pl.to_mhz(pl.bde(806.7, eta=3.5))), 1) == 11.5
    with pytest.raises(pl.PlanningError):
        pl.bde(1.0, eta=0.0)


@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=30), st.floats(0.5, 5))
def test_bde_equals_mean_bandwidth_error(values, eta):
    y = np.array(values)
    yhat = y[::-1]
    mae = np.mean(np.abs(y - yhat))
    assert np.mean(pl.bandwidth_errors(y, yhat, eta=eta)) == pytest.approx(pl.bde(mae, eta=eta), rel=1e-12, abs=1e-9)


def test_bde_table_layout():
    t = pl.bde_table(pl.PAPER_ALL_CITIES_MAE)
    assert list(t.index) == list(pl.PAPER_ETAS)
    assert t.loc[3.0, "Two-Stage"] == pytest.approx(989.9 * 50e3 / 3.0 / 1e6)


def test_congestion_strict_inequality():
    # demand 2 units -> 100 kbps -> needs exactly 50 kHz at eta 2
    d = pl.bandwidth_required([2.0, 2.0, 0.0, 4.0, 1.0])
    c = pl.congestion_curve(d, [50e3])
    assert c.p_cong[0] == pytest.approx(1 / 5)
    assert pl.congestion_curve(d, [0.0]).p_cong[0] == pytest.approx(4 / 5)


def test_congestion_edge_cases():
    with pytest.raises(pl.PlanningError):
        pl.congestion_curve(pl.bandwidth_required(np.zeros(0)), [1.0])
    zero = pl.congestion_curve(pl.bandwidth_required(np.zeros(4)), [0.0, 1e6])
    assert np.all(zero.p_cong == 0)


@given(st.lists(st.floats(0, 1e5), min_size=1, max_size=40))
def test_congestion_curve_monotone(values):
    c = pl.congestion_curve(pl.bandwidth_required(values), np.arange(0, 201, 5) * 1e6)
    assert np.all(np.diff(c.p_cong) <= 0)
    assert np.all((0 <= c.p_cong) & (c.p_cong <= 1))


def test_calibrated_prediction_hits_target(rng):
    y = rng.lognormal(7, 1, size=900)
    e = rng.normal(size=900)
    yhat = pl.calibrated_prediction(y, e, 500.0)
    assert abs(np.mean(np.abs(yhat - y)) - 500.0) < 0.01 * 500.0
    assert np.all(yhat >= 0)


def test_calibrated_prediction_zero_target_and_errors(rng):
    y = rng.lognormal(size=50)
    assert np.array_equal(pl.calibrated_prediction(y, rng.normal(size=50), 0.0), y)
    with pytest.raises(pl.PlanningError):
        pl.calibrated_prediction(y, rng.normal(size=50), -1.0)
    with pytest.raises(pl.PlanningError, match="exceeds"):
        pl.calibrated_prediction(y, rng.normal(size=50), 10 * y.mean())


def test_case_study_zero_target_reproduces_observed(rng):
    y = rng.lognormal(8, 1, size=100)
    cs = pl.case_study_all_cities(y, (10, 10), {"exact": 0.0})
    assert cs.max_gaps()["exact"] == 0.0
    assert cs.realized_mae["exact"] == 0.0


def test_case_study_realized_mae_and_frame(rng):
    y = rng.lognormal(8, 1, size=400)
    cs = pl.case_study_all_cities(y, (20, 20), seed=1)
    for m, target in pl.PAPER_ALL_CITIES_MAE.items():
        assert cs.realized_mae[m] == pytest.approx(target, rel=1e-3)
    df = cs.to_frame()
    assert set(df["label"]) == {"observed", *(f"predicted:{m}" for m in pl.PAPER_ALL_CITIES_MAE)}
    with pytest.raises(pl.PlanningError):
        pl.case_study_all_cities(y, (10, 10))


def test_planning_config_validation():
    with pytest.raises(pl.PlanningError):
        pl.PlanningConfig(kappa=0)
    with pytest.raises(pl.PlanningError):
        pl.PlanningConfig(delta=1.0)
    with pytest.raises(pl.PlanningError):
        pl.PlanningConfig(eta_mode="other")
    assert len(pl.PlanningConfig().candidate_bandwidths) == 41
