"""Spatial-error-model post-processing of regression residuals.

Residuals are modelled as ``eps = lam * W eps + u``. ``lam`` is estimated on
training residuals; held-out predictions are then shifted by ``lam`` times
the row-standardised lag of neighbouring training residuals.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import minimize_scalar
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from ._validation import check_points, check_vector
from .spatialstats import DISTANCE, KNN, SpatialStatsError, SpatialWeights, distance_weights, global_morans_i, knn_weights

LAMBDA_BOUND = 0.99
GRID_STEP = 1e-3
MIN_CELLS = 10
DENSE_LOGDET_MAX = 3000


class SemError(ValueError):
    pass


# -- lambda estimation -----------------------------------------------------------


class _LogDet:
    """``log|det(I - lam W)|`` for a fixed W, via eigenvalues or sparse LU."""

    def __init__(self, W: sp.csr_matrix):
        self.W = W
        n = W.shape[0]
        self.eig = None
        if n <= DENSE_LOGDET_MAX:
            A = (W != 0).astype(float)
            if abs(A - A.T).sum() == 0:
                # row-standardised symmetric W is similar to D^-1/2 A D^-1/2
                d = np.asarray(A.sum(axis=1)).ravel()
                s = np.divide(1.0, np.sqrt(d), out=np.zeros_like(d), where=d > 0)
                S = (sp.diags(s) @ A @ sp.diags(s)).toarray()
                self.eig = np.linalg.eigvalsh(S).astype(complex)
            else:
                self.eig = np.linalg.eigvals(W.toarray())

    def __call__(self, lam: float) -> float:
        if self.eig is not None:
            return float(np.log(np.abs(1.0 - lam * self.eig)).sum())
        lu = spla.splu((sp.identity(self.W.shape[0], format="csc") - lam * self.W).tocsc())
        return float(np.log(np.abs(lu.U.diagonal())).sum() + np.log(np.abs(lu.L.diagonal())).sum())


def _objective(eps: np.ndarray, W: sp.csr_matrix, method: str):
    We = W @ eps
    n = len(eps)

    def sse(lam):
        r = eps - lam * We
        return float(r @ r)

    if method == "sse":
        return sse
    if method != "ml":
        raise SemError(f"unknown estimation method {method!r}")
    logdet = _LogDet(W)

    def nll(lam):
        s = sse(lam)
        if s <= 0:
            return -np.inf
        return 0.5 * n * np.log(s / n) - logdet(lam)

    return nll


def _fit_component(eps: np.ndarray, W: sp.csr_matrix, method: str) -> float:
    if not np.any(eps):
        return 0.0
    f = _objective(eps, W, method)
    res = minimize_scalar(f, bounds=(-LAMBDA_BOUND, LAMBDA_BOUND), method="bounded", options={"xatol": 1e-7})
    lam, best = float(res.x), float(res.fun)
    grid = np.arange(-LAMBDA_BOUND, LAMBDA_BOUND + GRID_STEP / 2, GRID_STEP)
    vals = np.array([f(g) for g in grid])
    g = int(np.argmin(vals))
    if vals[g] < best - 1e-9 * max(1.0, abs(best)):
        lo, hi = max(grid[g] - GRID_STEP, -LAMBDA_BOUND), min(grid[g] + GRID_STEP, LAMBDA_BOUND)
        lam = float(minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-7}).x)
    return lam


@dataclass
class SemModel:
    lam: float
    weights: SpatialWeights
    train_residuals: np.ndarray
    innovations: np.ndarray
    innovation_sse: float
    moran_before: float | None
    moran_after: float | None
    per_component: list = field(default_factory=list)  # (size, lambda)
    method: str = "ml"

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "innovation_sse": self.innovation_sse,
            "moran_before": self.moran_before,
            "moran_after": self.moran_after,
            "per_component": [{"size": int(n), "lambda": float(l)} for n, l in self.per_component],
            "method": self.method,
        }


def _safe_moran(v: np.ndarray, w: SpatialWeights) -> float | None:
    try:
        return global_morans_i(v, w).I
    except SpatialStatsError:
        return None


def fit_lambda(residuals, w: SpatialWeights, method: str = "ml") -> SemModel:
    """Estimate the residual spatial dependence ``lam`` given weights.

    ``method="ml"`` maximises the concentrated Gaussian likelihood
    (innovation SSE plus the log-Jacobian); ``method="sse"`` minimises the
    innovation SSE alone. Disconnected weight graphs are fitted per
    component and ``lam`` is the size-weighted mean over components with
    at least two cells.
    """
    eps = check_vector(residuals, name="residuals")
    if len(eps) != w.n:
        raise SemError(f"{len(eps)} residuals for {w.n} weighted cells")
    if len(eps) < MIN_CELLS:
        raise SemError(f"need at least {MIN_CELLS} cells to fit lambda")
    if not w.row_standardized:
        w = w.standardize()
    W = w.matrix
    n_comp, comp = connected_components(W, directed=False)
    per = []
    lam_cells = np.zeros(len(eps))
    for c in range(n_comp):
        idx = np.flatnonzero(comp == c)
        if len(idx) < 2:
            continue
        sub = W[idx][:, idx].tocsr()
        lam_c = _fit_component(eps[idx], sub, method)
        per.append((len(idx), lam_c))
        lam_cells[idx] = lam_c
    if not per:
        raise SemError("weights have no edges; lambda is not identifiable")
    sizes = np.array([p[0] for p in per], dtype=float)
    lam = float(np.dot(sizes, [p[1] for p in per]) / sizes.sum())
    # innovations use each component's own lambda
    u = eps - lam_cells * (W @ eps)
    return SemModel(
        lam, w, eps.copy(), u, float(u @ u), _safe_moran(eps, w), _safe_moran(u, w), per, method
    )


# -- correction ------------------------------------------------------------------


def cross_weights(test_pts, train_pts, threshold: float) -> sp.csr_matrix:
    """Row-standardised test-to-training neighbour weights within ``threshold`` metres."""
    test_pts = check_points(test_pts)
    train_pts = check_points(train_pts)
    d = cKDTree(test_pts).sparse_distance_matrix(
        cKDTree(train_pts), threshold * (1 + 1e-9) + 1e-9, output_type="coo_matrix"
    )
    m = sp.csr_matrix((np.ones(d.nnz), (d.row, d.col)), shape=(len(test_pts), len(train_pts)))
    rs = np.asarray(m.sum(axis=1)).ravel()
    inv = np.divide(1.0, rs, out=np.zeros_like(rs), where=rs > 0)
    return sp.csr_matrix(sp.diags(inv) @ m)


def cross_weights_knn(test_pts, train_pts, k: int) -> sp.csr_matrix:
    test_pts = check_points(test_pts)
    train_pts = check_points(train_pts)
    k = min(int(k), len(train_pts))
    _, nbr = cKDTree(train_pts).query(test_pts, k=k)
    nbr = np.asarray(nbr).reshape(len(test_pts), -1)
    rows = np.repeat(np.arange(len(test_pts)), nbr.shape[1])
    return sp.csr_matrix((np.full(rows.size, 1.0 / nbr.shape[1]), (rows, nbr.ravel())), shape=(len(test_pts), len(train_pts)))


def correct_predictions(sem: SemModel, predictions, cross: sp.csr_matrix, lam: float | None = None):
    """Add ``lam * sum_j w_ij e_j`` over training neighbours to each prediction.

    Returns the corrected predictions and a mask of cells that had no
    training neighbour (passed through unchanged).
    """
    pred = check_vector(predictions, name="predictions")
    cross = sp.csr_matrix(cross)
    if cross.shape != (len(pred), len(sem.train_residuals)):
        raise SemError(f"cross weights shape {cross.shape} does not match ({len(pred)}, {len(sem.train_residuals)})")
    lam = sem.lam if lam is None else lam
    no_nbr = np.diff(cross.indptr) == 0
    if lam == 0 or cross.nnz == 0:
        return pred.copy(), no_nbr
    return pred + lam * (cross @ sem.train_residuals), no_nbr


class SpatialErrorCorrector(BaseEstimator):
    """Fit ``lam`` on training residuals at known coordinates; correct new predictions.

    Parameters
    ----------
    kind : {"distance_threshold", "knn"}
    threshold : float
        Neighbourhood radius in cell units for distance weights.
    k : int
        Neighbour count for knn weights (symmetrised by union for fitting).
    cell_size : float
        Metres per cell unit.
    method : {"ml", "sse"}
    """

    def __init__(self, kind: str = DISTANCE, threshold: float = 1.5, k: int = 8, cell_size: float = 1500.0, method: str = "ml"):
        self.kind = kind
        self.threshold = threshold
        self.k = k
        self.cell_size = cell_size
        self.method = method

    def _weights(self, pts: np.ndarray) -> SpatialWeights:
        if self.kind == DISTANCE:
            return distance_weights(pts, self.threshold * self.cell_size)
        if self.kind == KNN:
            return knn_weights(pts, self.k).symmetrize()
        raise SemError(f"unknown weights kind {self.kind!r}")

    def fit(self, X, y):
        """``X``: training coordinates, ``y``: training residuals."""
        X = check_points(X)
        self.train_points_ = X
        self.sem_ = fit_lambda(y, self._weights(X).standardize(), self.method)
        self.lambda_ = self.sem_.lam
        return self

    def cross_weights(self, X) -> sp.csr_matrix:
        if self.kind == DISTANCE:
            return cross_weights(X, self.train_points_, self.threshold * self.cell_size)
        return cross_weights_knn(X, self.train_points_, self.k)

    def correct(self, X, predictions) -> np.ndarray:
        corrected, _ = correct_predictions(self.sem_, predictions, self.cross_weights(X))
        return corrected


# -- regularised objective -----------------------------------------------------------


@dataclass(frozen=True)
class SemObjective:
    value: float
    mse: float
    l2_theta: float
    spatial_penalty: float
    alpha: float
    beta: float
    whitening_penalty: float  # beta * ||(I - lam W) eps||^2, reported alongside

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "mse": self.mse,
            "l2_theta": self.l2_theta,
            "spatial_penalty": self.spatial_penalty,
            "alpha": self.alpha,
            "beta": self.beta,
            "whitening_penalty": self.whitening_penalty,
        }


def solve_filter(W: sp.csr_matrix, lam: float, rhs: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Solve ``(I - lam W) z = rhs`` iteratively (GMRES)."""
    n = W.shape[0]
    if lam == 0:
        return rhs.copy()
    A = (sp.identity(n, format="csr") - lam * W).tocsr()
    bound = abs(lam) * float(np.abs(W).sum(axis=1).max())
    if bound >= 1:
        raise SemError(f"|lambda| * ||W||_inf = {bound:.4g} >= 1; (I - lambda W) may be singular")
    z, info = spla.gmres(A, rhs, rtol=tol, atol=0.0, maxiter=10 * n, restart=min(n, 50))
    resid = np.linalg.norm(A @ z - rhs)
    if info != 0 or resid > 10 * tol * max(np.linalg.norm(rhs), 1.0):
        raise SemError(f"filter solve did not converge (lambda={lam}, ||W||_inf bound={bound:.4g}, residual={resid:.3g})")
    return z


def evaluate_objective(model, residuals, sem: SemModel, alpha: float = 0.0, beta: float = 0.0) -> SemObjective:
    """Mean squared error + ``alpha * ||theta||^2`` + ``beta * ||(I - lam W)^-1 eps||^2``.

    ``theta`` is every leaf value of the booster. The inverse filter is applied
    as written; the whitening form is returned separately for comparison.
    """
    if alpha < 0 or beta < 0:
        raise SemError("alpha and beta must be nonnegative")
    eps = check_vector(residuals, sem.weights.n, "residuals")
    mse = float(np.mean(eps**2))
    theta = getattr(model, "leaf_values_", np.zeros(0))
    l2 = alpha * float(np.dot(theta, theta))
    W = sem.weights.matrix
    if beta:
        z = solve_filter(W, sem.lam, eps)
        white = eps - sem.lam * (W @ eps)
        spatial = beta * float(z @ z)
        whitening = beta * float(white @ white)
    else:
        spatial = whitening = 0.0
    return SemObjective(mse + l2 + spatial, mse, l2, spatial, float(alpha), float(beta), whitening)
