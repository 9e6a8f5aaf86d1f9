"""Bandwidth dimensioning and congestion screening from demand-proxy maps.

Units: demand in bit/s, bandwidth in Hz, spectral efficiency in bit/s/Hz.
Conversion to MHz happens only in the table/CSV helpers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from ._validation import check_vector

KAPPA_BPS = 50e3  # busy-hour traffic per proxy unit
PAPER_ALL_CITIES_MAE = {"k-Means": 1432.7, "Two-Stage": 989.9, "Two-Stage + SEM": 806.7}
PAPER_ETAS = (2.0, 3.0, 3.5)
MIN_SINR_SAMPLES = 20


class PlanningError(ValueError):
    pass


def to_mhz(hz):
    return np.asarray(hz, dtype=float) / 1e6


@dataclass
class PlanningConfig:
    kappa: float = KAPPA_BPS
    rho_oh: float = 0.0
    delta: float = 0.05
    eta: float = 2.0
    eta_mode: str = "constant"
    upper_quantile: bool = False
    candidate_bandwidths: np.ndarray = field(default_factory=lambda: np.arange(0.0, 201.0, 5.0) * 1e6)

    def __post_init__(self):
        if not self.kappa > 0:
            raise PlanningError("kappa must be positive")
        if not 0 <= self.rho_oh < 1:
            raise PlanningError("rho_oh must be in [0, 1)")
        if not 0 < self.delta < 1:
            raise PlanningError("delta must be in (0, 1)")
        if self.eta_mode not in ("constant", "per_cell"):
            raise PlanningError("eta_mode must be constant or per_cell")
        if self.eta_mode == "constant" and not self.eta > 0:
            raise PlanningError("eta must be positive in constant mode")
        self.candidate_bandwidths = np.asarray(self.candidate_bandwidths, dtype=float)


def spectral_efficiency(gamma, rho_oh: float = 0.0):
    """``(1 - rho_oh) * log2(1 + gamma)`` for linear SINR ``gamma``."""
    g = np.asarray(gamma, dtype=float)
    if np.any(g < 0):
        raise PlanningError("linear SINR must be nonnegative")
    out = (1.0 - rho_oh) * np.log2(1.0 + g)
    return float(out) if out.ndim == 0 else out


def effective_eta(sinr_samples, delta: float, rho_oh: float = 0.0, upper: bool = False,
                  min_samples: int = MIN_SINR_SAMPLES) -> np.ndarray:
    """Outage-constrained spectral efficiency per cell.

    Takes the empirical ``delta``-quantile of ``spectral_efficiency`` over each
    cell's SINR samples, so the cell is served with probability ``1 - delta``.
    ``upper=True`` takes the ``(1 - delta)``-quantile instead. Quantiles use
    linear interpolation between order statistics.
    """
    if not 0 < delta < 1:
        raise PlanningError("delta must be in (0, 1)")
    q = 1.0 - delta if upper else delta
    out = []
    for i, s in enumerate(sinr_samples):
        s = np.asarray(s, dtype=float).ravel()
        if len(s) < min_samples:
            raise PlanningError(f"cell {i}: {len(s)} SINR samples, need {min_samples}")
        out.append(np.quantile(spectral_efficiency(s, rho_oh), q, method="linear"))
    return np.array(out)


def sample_sinr(labels, n_samples: int, mean_db: dict, sd_db: float = 6.0, seed: int = 0) -> np.ndarray:
    """Log-normal SINR draws (normal in dB) per cell, mean set by context class."""
    rng = np.random.default_rng(seed)
    mu = np.array([mean_db[c] for c in labels], dtype=float)
    db = mu[:, None] + sd_db * rng.standard_normal((len(mu), n_samples))
    return 10.0 ** (db / 10.0)


@dataclass
class DemandMap:
    demand_bps: np.ndarray
    eta: np.ndarray
    b_req_hz: np.ndarray
    infeasible: np.ndarray


def bandwidth_required(y, kappa: float = KAPPA_BPS, eta=2.0) -> DemandMap:
    """Offered demand ``kappa * y`` and required bandwidth ``demand / eta`` per cell."""
    y = check_vector(y)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), y.shape).copy()
    d = kappa * y
    bad = eta <= 0
    b = np.divide(d, eta, out=np.full_like(d, np.inf), where=~bad)
    b[bad & (d == 0)] = 0.0
    return DemandMap(d, eta, b, bad & (d > 0))


def bde(mae: float, kappa: float = KAPPA_BPS, eta: float = 2.0) -> float:
    """Mean absolute bandwidth dimensioning error in Hz: ``kappa / eta * MAE``."""
    if not eta > 0:
        raise PlanningError("eta must be positive")
    return kappa / eta * mae


def bandwidth_errors(y, yhat, kappa: float = KAPPA_BPS, eta=2.0) -> np.ndarray:
    """Per-cell ``|B_hat - B| = kappa / eta_i * |yhat - y|`` in Hz."""
    y = check_vector(y)
    yhat = check_vector(yhat, len(y), "yhat")
    return kappa / np.asarray(eta, dtype=float) * np.abs(yhat - y)


def bde_table(mae_by_method: dict, etas=PAPER_ETAS, kappa: float = KAPPA_BPS) -> pd.DataFrame:
    """BDE in MHz: rows are eta values, columns methods."""
    rows = {eta: {m: float(to_mhz(bde(v, kappa, eta))) for m, v in mae_by_method.items()} for eta in etas}
    df = pd.DataFrame.from_dict(rows, orient="index")
    df.index.name = "eta_bps_per_hz"
    return df


@dataclass
class CongestionCurve:
    bandwidths_hz: np.ndarray
    p_cong: np.ndarray
    label: str

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"B_MHz": to_mhz(self.bandwidths_hz), "label": self.label, "p_cong": self.p_cong})


def congestion_curve(demand: DemandMap, bandwidths, label: str = "observed") -> CongestionCurve:
    """Share of cells with ``D_i > B * eta_i`` for each candidate ``B`` (strict)."""
    if len(demand.demand_bps) == 0:
        raise PlanningError("no cells")
    B = np.asarray(bandwidths, dtype=float)
    cap = B[:, None] * demand.eta[None, :]
    p = (demand.demand_bps[None, :] > cap).mean(axis=1)
    return CongestionCurve(B, p, label)


def max_curve_gap(a: CongestionCurve, b: CongestionCurve) -> float:
    return float(np.max(np.abs(a.p_cong - b.p_cong)))


def calibrated_prediction(y, error_field, target_mae: float, rel_tol: float = 1e-3) -> np.ndarray:
    """``max(y + s * error_field, 0)`` with ``s`` chosen so the MAE against ``y`` is ``target_mae``."""
    y = check_vector(y)
    e = check_vector(error_field, len(y), "error_field")
    if target_mae == 0:
        return y.copy()
    if target_mae < 0:
        raise PlanningError("MAE target must be nonnegative")
    if target_mae >= y.mean():
        raise PlanningError(f"MAE target {target_mae} exceeds the field scale (mean demand {y.mean():.1f})")
    e = e - e.mean()

    def excess(s):
        return np.mean(np.abs(np.maximum(y + s * e, 0.0) - y)) - target_mae

    hi = target_mae / max(np.mean(np.abs(e)), 1e-300)
    for _ in range(60):
        if excess(hi) > 0:
            break
        hi *= 2
    else:
        raise PlanningError("MAE target is unattainable with this error field")
    s = brentq(excess, 0.0, hi, xtol=1e-12, rtol=1e-12)
    out = np.maximum(y + s * e, 0.0)
    realized = np.mean(np.abs(out - y))
    if abs(realized - target_mae) > rel_tol * target_mae:
        raise PlanningError("failed to calibrate error field")
    return out


@dataclass
class CaseStudy:
    observed: CongestionCurve
    predicted: dict
    realized_mae: dict
    demand: np.ndarray

    def curves(self) -> list[CongestionCurve]:
        return [self.observed, *self.predicted.values()]

    def max_gaps(self) -> dict:
        return {m: max_curve_gap(c, self.observed) for m, c in self.predicted.items()}

    def to_frame(self) -> pd.DataFrame:
        return pd.concat([c.to_frame() for c in self.curves()], ignore_index=True)


def case_study_all_cities(
    demand,
    shape: tuple[int, int],
    mae_targets: dict | None = None,
    bandwidths=None,
    kappa: float = KAPPA_BPS,
    eta: float = 2.0,
    error_radius: float = 3.0,
    seed: int = 0,
) -> CaseStudy:
    """Observed vs predicted congestion curves for MAE-calibrated error fields.

    ``demand`` is a heavy-tailed proxy field on a grid of ``shape``. Each
    method gets its own spatially correlated zero-mean error field (smoothed
    noise with radius ``error_radius`` cells), scaled so the prediction MAE
    equals the method's target.
    """
    from .synthcity import smoothed_field

    y = check_vector(demand)
    if len(y) != shape[0] * shape[1]:
        raise PlanningError("demand length does not match shape")
    targets = dict(PAPER_ALL_CITIES_MAE if mae_targets is None else mae_targets)
    B = PlanningConfig().candidate_bandwidths if bandwidths is None else np.asarray(bandwidths, float)
    observed = congestion_curve(bandwidth_required(y, kappa, eta), B, "observed")
    predicted, realized = {}, {}
    for i, (method, target) in enumerate(targets.items()):
        rng = np.random.default_rng([seed, i])
        field_ = smoothed_field(rng, shape, error_radius).ravel()
        yhat = calibrated_prediction(y, field_, target)
        realized[method] = float(np.mean(np.abs(yhat - y)))
        predicted[method] = congestion_curve(bandwidth_required(yhat, kappa, eta), B, f"predicted:{method}")
    return CaseStudy(observed, predicted, realized, y)
