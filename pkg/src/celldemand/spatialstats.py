"""Spatial weights and Moran's I (global, local, distance profile)."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .geogrid import GridIndex

DISTANCE = "distance_threshold"
KNN = "knn"
RANGE_CUTOFF = 0.2
# slack on distance thresholds so lattice distances equal to the threshold are kept
_DIST_EPS = 1e-9

HH, LL, HL, LH, NONE = "HH", "LL", "HL", "LH", "NONE"


class SpatialStatsError(ValueError):
    pass


@dataclass(frozen=True)
class SpatialWeights:
    """Sparse neighbour structure with zero diagonal.

    ``matrix`` is an ``n x n`` CSR matrix; ``param`` is the distance threshold
    in metres for ``distance_threshold`` weights, or ``k`` for ``knn``.
    """

    matrix: sp.csr_matrix
    kind: str
    param: float
    row_standardized: bool = False

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def total(self) -> float:
        return float(self.matrix.sum())

    @property
    def cardinalities(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def standardize(self) -> "SpatialWeights":
        """Row-standardised copy; rows without neighbours stay empty."""
        m = self.matrix.astype(float)
        rs = np.asarray(m.sum(axis=1)).ravel()
        inv = np.divide(1.0, rs, out=np.zeros_like(rs), where=rs > 0)
        return replace(self, matrix=sp.csr_matrix(sp.diags(inv) @ m), row_standardized=True)

    def symmetrize(self) -> "SpatialWeights":
        """Union of ``W`` and ``W.T`` as binary weights."""
        b = (self.matrix != 0).astype(float)
        m = b.maximum(b.T).tocsr()
        return replace(self, matrix=m, row_standardized=False)

    def subset(self, idx) -> "SpatialWeights":
        idx = np.asarray(idx)
        m = self.matrix[idx][:, idx].tocsr()
        out = replace(self, matrix=m, row_standardized=False)
        return out.standardize() if self.row_standardized else out

    def lag(self, v) -> np.ndarray:
        return self.matrix @ np.asarray(v, dtype=float)


def _pairs_within(points: np.ndarray, dist: float) -> np.ndarray:
    tree = cKDTree(points)
    return tree.query_pairs(dist * (1 + _DIST_EPS) + _DIST_EPS, output_type="ndarray")


def distance_weights(points: np.ndarray, threshold: float) -> SpatialWeights:
    points = np.asarray(points, dtype=float)
    n = len(points)
    if n == 0:
        raise SpatialStatsError("empty grid")
    if not threshold > 0:
        raise SpatialStatsError("distance threshold must be positive")
    pairs = _pairs_within(points, threshold)
    if len(pairs) == 0:
        raise SpatialStatsError("no neighbors at this scale")
    i = np.concatenate([pairs[:, 0], pairs[:, 1]])
    j = np.concatenate([pairs[:, 1], pairs[:, 0]])
    m = sp.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    m.sort_indices()
    return SpatialWeights(m, DISTANCE, float(threshold))


def knn_weights(points: np.ndarray, k: int) -> SpatialWeights:
    points = np.asarray(points, dtype=float)
    n = len(points)
    if n == 0:
        raise SpatialStatsError("empty grid")
    k = int(k)
    if not 0 < k < n:
        raise SpatialStatsError("knn needs 0 < k < n")
    _, nbr = cKDTree(points).query(points, k=k + 1)
    rows, cols = [], []
    for i, row in enumerate(nbr):
        row = [j for j in row if j != i][:k]
        rows += [i] * len(row)
        cols += row
    m = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    m.sort_indices()
    return SpatialWeights(m, KNN, float(k))


def build_weights(grid: GridIndex, kind: str = DISTANCE, param: float = 1.0, *, in_cells: bool = True) -> SpatialWeights:
    """Weights over grid centroids.

    For ``distance_threshold`` the threshold is in cell units unless
    ``in_cells`` is False, in which case it is in metres.
    """
    if kind == DISTANCE:
        d = param * grid.cell_size if in_cells else param
        return distance_weights(grid.centroids, d)
    if kind == KNN:
        return knn_weights(grid.centroids, int(param))
    raise SpatialStatsError(f"unknown weights kind {kind!r}")


@dataclass(frozen=True)
class MoranResult:
    I: float
    n_used: int
    mean: float
    variance_term: float
    p_sim: float | None = None


def _check(y, w: SpatialWeights) -> tuple[np.ndarray, np.ndarray, float]:
    y = np.asarray(y, dtype=float).ravel()
    if len(y) != w.n:
        raise SpatialStatsError(f"y has {len(y)} values, weights have {w.n}")
    z = y - y.mean()
    ss = float(z @ z)
    if ss <= 1e-300 or np.ptp(y) == 0:
        raise SpatialStatsError("Moran undefined: zero variance")
    if w.total <= 0:
        raise SpatialStatsError("Moran undefined: weights sum to zero")
    return y, z, ss


def global_morans_i(y, w: SpatialWeights, permutations: int = 0, seed: int | None = None) -> MoranResult:
    """Global Moran's I, ``(N / S0) * z'Wz / z'z``.

    With ``permutations > 0`` a one-sided pseudo p-value from random
    relabellings is attached (not used by the pipeline).
    """
    y, z, ss = _check(y, w)
    n = len(y)
    s0 = w.total
    stat = n / s0 * float(z @ (w.matrix @ z)) / ss
    p = None
    if permutations:
        rng = np.random.default_rng(seed)
        sims = np.empty(permutations)
        for k in range(permutations):
            zp = rng.permutation(z)
            sims[k] = n / s0 * float(zp @ (w.matrix @ zp)) / ss
        above = (sims >= stat).sum() if stat >= np.median(sims) else (sims <= stat).sum()
        p = (above + 1) / (permutations + 1)
    return MoranResult(stat, n, float(y.mean()), ss, p)


@dataclass(frozen=True)
class LocalMoranMap:
    Ii: np.ndarray
    category: np.ndarray
    lag: np.ndarray
    p_sim: np.ndarray | None = None


def _quadrant(dev: np.ndarray, lag: np.ndarray, has_nbr: np.ndarray) -> np.ndarray:
    cat = np.full(len(dev), NONE, dtype=object)
    ok = has_nbr & (dev != 0) & (lag != 0)
    cat[ok & (dev > 0) & (lag > 0)] = HH
    cat[ok & (dev < 0) & (lag < 0)] = LL
    cat[ok & (dev > 0) & (lag < 0)] = HL
    cat[ok & (dev < 0) & (lag > 0)] = LH
    return cat


def local_morans_i(y, w: SpatialWeights, permutations: int = 0, seed: int | None = None) -> LocalMoranMap:
    """Per-cell ``I_i = z_i * sum_j w_ij z_j`` with HH/LL/HL/LH labels.

    Cells without neighbours, or with an exactly zero deviation or lag, are
    labelled NONE. ``permutations`` enables conditional-permutation pseudo
    p-values (each cell's value held fixed, neighbours drawn from the rest).
    """
    y, z, _ = _check(y, w)
    lag = w.matrix @ z
    Ii = z * lag
    cat = _quadrant(z, lag, w.cardinalities > 0)
    p = None
    if permutations:
        rng = np.random.default_rng(seed)
        n = len(z)
        p = np.ones(n)
        m = w.matrix
        for i in range(n):
            lo, hi = m.indptr[i], m.indptr[i + 1]
            k = hi - lo
            if k == 0:
                continue
            wts = m.data[lo:hi]
            others = np.delete(z, i)
            draws = np.array([rng.choice(others, size=k, replace=False) for _ in range(permutations)])
            sims = z[i] * (draws @ wts)
            extreme = (sims >= Ii[i]).sum() if Ii[i] >= np.median(sims) else (sims <= Ii[i]).sum()
            p[i] = (extreme + 1) / (permutations + 1)
    return LocalMoranMap(Ii, cat, lag, p)


@dataclass(frozen=True)
class MoranProfile:
    distances: np.ndarray
    I: np.ndarray
    correlation_range: float
    range_cutoff: float


def correlation_range(distances, values, cutoff: float = RANGE_CUTOFF) -> float:
    """Largest distance whose I reaches ``cutoff``; 0 when none does."""
    d = np.asarray(distances, dtype=float)
    v = np.asarray(values, dtype=float)
    hit = d[v >= cutoff]
    return float(hit.max()) if len(hit) else 0.0


def morans_profile(y, grid: GridIndex, thresholds, range_cutoff: float = RANGE_CUTOFF) -> MoranProfile:
    """Global I at each distance threshold (cell units)."""
    thresholds = np.asarray(thresholds, dtype=float).ravel()
    if len(thresholds) == 0:
        raise SpatialStatsError("at least one threshold required")
    if np.any(np.diff(thresholds) <= 0):
        raise SpatialStatsError("thresholds must be strictly increasing")
    values = np.array([global_morans_i(y, build_weights(grid, DISTANCE, t)).I for t in thresholds])
    return MoranProfile(thresholds, values, correlation_range(thresholds, values, range_cutoff), range_cutoff)
