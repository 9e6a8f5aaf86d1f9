"""Leakage-reduced cross-validation folds.

Two-stage splitting: Stage 1 groups grid cells into spatial blocks with
k-Means on their centroids; Stage 2 splits each block into context-homogeneous
sub-clusters (average linkage under a sigma-normalised L1 distance); blocks are
then greedily merged into the smallest set of context-diverse, size-balanced
folds. Random and location-only k-Means splitters are provided as baselines.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from itertools import combinations

import numpy as np
import pandas as pd
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist, squareform
from sklearn.base import BaseEstimator, ClusterMixin

from ._validation import check_points, check_random_state_seed
from .geogrid import FeatureMatrix, GridIndex

RANDOM = "random"
KMEANS_LOCATION = "kmeans_location"
TWO_STAGE = "two_stage"
METHODS = (RANDOM, KMEANS_LOCATION, TWO_STAGE)

MAX_ITER = 300
MIN_FOLDS = 3
SIZE_BALANCE = 2.0
EXACT_MAX_UNITS = 8  # Bell(8) = 4140 partitions


class SplitError(ValueError):
    pass


# -- Stage 1 -----------------------------------------------------------------


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than k: take the first unused index
            nxt = next(i for i in range(n) if i not in set(chosen))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].astype(float)


class SpatialKMeans(ClusterMixin, BaseEstimator):
    """Lloyd's k-Means with k-means++ seeding on planar coordinates.

    Iterates until assignments stop changing or ``max_iter`` is reached. An
    empty cluster is re-seeded at the point farthest from its assigned
    centre (lowest index on ties), so the run is deterministic per seed.

    Attributes
    ----------
    labels_ : ndarray of int
    cluster_centers_ : ndarray of shape (k, 2)
    inertia_ : float
        Within-cluster sum of squared distances at ``labels_``.
    objective_history_ : list of float
        Objective after each assignment step.
    """

    def __init__(self, n_clusters: int = 8, max_iter: int = MAX_ITER, random_state=None):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_points(X)
        n = len(X)
        k = int(self.n_clusters)
        if not 1 <= k <= n:
            raise SplitError(f"need 1 <= k <= n, got k={k}, n={n}")
        rng = np.random.default_rng(check_random_state_seed(self.random_state))
        centers = kmeans_plusplus(X, k, rng)
        labels = None
        history = []
        n_iter = 0
        for n_iter in range(1, self.max_iter + 1):
            d2 = _sq_dists(X, centers)
            new = d2.argmin(axis=1)
            history.append(float(d2[np.arange(n), new].sum()))
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for j in range(k):
                members = labels == j
                if members.any():
                    centers[j] = X[members].mean(axis=0)
                else:
                    far = int(d2[np.arange(n), labels].argmax())
                    centers[j] = X[far]
                    labels[far] = j
        self.labels_ = labels
        self.cluster_centers_ = centers
        self.inertia_ = float(((X - centers[labels]) ** 2).sum())
        self.objective_history_ = history
        self.n_iter_ = n_iter
        return self


@dataclass
class SpatialClustering:
    k: int
    assignment: np.ndarray
    centroids: np.ndarray
    objective: float
    history: list


def kmeans_centroids(grid: GridIndex, k: int, seed: int) -> SpatialClustering:
    km = SpatialKMeans(k, random_state=seed).fit(grid.centroids)
    return SpatialClustering(k, km.labels_, km.cluster_centers_, km.inertia_, km.objective_history_)


def choose_stage1_k(n_cells: int, cell_size_r: float, min_k: int = MIN_FOLDS, max_k: int = 30) -> int:
    """Cluster count whose mean disc-equivalent diameter is at least ``2r`` cells."""
    r = max(float(cell_size_r), 1.0)
    k = int(math.floor(n_cells / (math.pi * r * r)))
    return int(min(max(k, min_k), max_k, n_cells))


# -- Stage 2 -----------------------------------------------------------------


def context_dissimilarity(a, b, sigma) -> float:
    """Sum over features of ``|a_l - b_l| / sigma_l``; zero-sigma features skipped."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    s = np.asarray(sigma, dtype=float)
    keep = s > 0
    return float(np.sum(np.abs(a[keep] - b[keep]) / s[keep]))


def scaled_context(X: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    keep = sigma > 0
    return X[:, keep] / sigma[keep]


def context_labels_from_features(features: FeatureMatrix, prefix: str) -> np.ndarray:
    """Class label per cell from one-hot columns named ``<prefix><class>``."""
    idx = features.columns(prefix)
    if len(idx) == 0:
        raise SplitError(f"no context columns with prefix {prefix!r}")
    names = np.array([features.names[i][len(prefix):] for i in idx], dtype=object)
    block = features.values[:, idx]
    return names[block.argmax(axis=1)]


@dataclass
class SubClustering:
    parent: np.ndarray  # per cell Stage-1 cluster
    sub: np.ndarray  # per cell global sub-cluster id
    dominant: dict  # sub-cluster id -> context class
    radius: dict  # Stage-1 cluster -> radius used

    def cell_context(self) -> np.ndarray:
        return np.array([self.dominant[s] for s in self.sub], dtype=object)


def _mean_internal(D: np.ndarray, labels: np.ndarray) -> np.ndarray:
    uniq = np.unique(labels)
    M = (labels[:, None] == uniq[None, :]).astype(float)
    sums = (M * (D @ M)).sum(axis=0)
    sizes = M.sum(axis=0)
    pairs = sizes * (sizes - 1)
    return np.divide(sums, pairs, out=np.zeros_like(sums), where=pairs > 0)


def _dominant(labels: np.ndarray, class_order: list) -> object:
    counts = {c: 0 for c in class_order}
    for c in labels:
        counts[c] += 1
    return max(class_order, key=lambda c: (counts[c], -class_order.index(c)))


def refine_context(
    stage1: np.ndarray,
    context_X: np.ndarray,
    sigma: np.ndarray,
    labels: np.ndarray,
    context_radius: float | None = None,
    radius_scale: float = 0.5,
) -> SubClustering:
    """Split every Stage-1 cluster into context-homogeneous sub-clusters.

    Average-linkage clustering under the sigma-normalised L1 distance, cut at
    the fewest clusters whose internal mean pairwise dissimilarity is at most
    the radius. The default radius is ``radius_scale`` times the mean pairwise
    dissimilarity inside the Stage-1 cluster.
    """
    stage1 = np.asarray(stage1)
    Z = scaled_context(np.asarray(context_X, dtype=float), np.asarray(sigma, dtype=float))
    labels = np.asarray(labels, dtype=object)
    class_order = sorted(set(labels))
    sub = np.empty(len(stage1), dtype=int)
    dominant, radii = {}, {}
    next_id = 0
    for c in np.unique(stage1):
        idx = np.flatnonzero(stage1 == c)
        if len(idx) == 1 or Z.shape[1] == 0:
            cut = np.zeros(len(idx), dtype=int)
            radii[int(c)] = 0.0
        else:
            dvec = pdist(Z[idx], "cityblock")
            rad = float(context_radius) if context_radius is not None else radius_scale * float(dvec.mean())
            radii[int(c)] = rad
            D = squareform(dvec)
            tree = linkage(dvec, method="average")
            cut = np.zeros(len(idx), dtype=int)
            for t in range(1, len(idx) + 1):
                cand = fcluster(tree, t, criterion="maxclust")
                if np.all(_mean_internal(D, cand) <= rad + 1e-12):
                    cut = cand
                    break
        # renumber in order of first member so ids are stable
        _, first = np.unique(cut, return_index=True)
        for local in cut[np.sort(first)]:
            members = idx[cut == local]
            sub[members] = next_id
            dominant[next_id] = _dominant(labels[members], class_order)
            next_id += 1
    return SubClustering(stage1.copy(), sub, dominant, radii)


# -- folds -------------------------------------------------------------------


@dataclass
class FoldAssignment:
    n_folds: int
    fold: np.ndarray
    stage1: np.ndarray
    stage2: np.ndarray
    context: np.ndarray
    method: str

    def __post_init__(self):
        self.fold = np.asarray(self.fold, dtype=int)
        if len(np.unique(self.fold)) != self.n_folds:
            raise SplitError("fold ids must cover 0..n_folds-1 with no empty fold")

    def split(self, X=None, y=None, groups=None):
        """sklearn-style generator of ``(train_idx, test_idx)`` per fold."""
        idx = np.arange(len(self.fold))
        for f in range(self.n_folds):
            test = self.fold == f
            yield idx[~test], idx[test]

    def get_n_splits(self, X=None, y=None, groups=None) -> int:
        return self.n_folds

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "cell_id": np.arange(len(self.fold)),
                "fold": self.fold,
                "stage1": self.stage1,
                "stage2": self.stage2,
                "context_class": self.context,
            }
        )

    @classmethod
    def from_frame(cls, df: pd.DataFrame, method: str = TWO_STAGE) -> "FoldAssignment":
        need = ["cell_id", "fold", "stage1", "stage2", "context_class"]
        missing = [c for c in need if c not in df.columns]
        if missing:
            raise SplitError(f"folds table missing columns {missing}")
        df = df.sort_values("cell_id")
        fold = df["fold"].to_numpy(dtype=int)
        return cls(
            int(fold.max()) + 1,
            fold,
            df["stage1"].to_numpy(dtype=int),
            df["stage2"].to_numpy(dtype=int),
            df["context_class"].astype(str).to_numpy(dtype=object),
            method,
        )

    def violations(self) -> list[str]:
        """Invariant breaches; an empty list means the assignment is valid."""
        out = []
        if self.method in (KMEANS_LOCATION, TWO_STAGE):
            for c in np.unique(self.stage1):
                if len(np.unique(self.fold[self.stage1 == c])) > 1:
                    out.append(f"stage1 cluster {c} split across folds")
        if self.method == TWO_STAGE:
            for s in np.unique(self.stage2):
                if len(np.unique(self.stage1[self.stage2 == s])) > 1:
                    out.append(f"sub-cluster {s} leaves its stage1 cluster")
            if len(set(self.context)) >= 2:
                for f in range(self.n_folds):
                    if len(set(self.context[self.fold == f])) < 2:
                        out.append(f"fold {f} has a single context class")
        return out


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def _merge_path(comp: np.ndarray, min_folds: int, balance: float = SIZE_BALANCE):
    """Greedy merges of Stage-1 units; yields fold groupings from k down to min_folds."""
    groups = [[u] for u in range(len(comp))]
    gcomp = [comp[u].copy() for u in range(len(comp))]
    yield [list(g) for g in groups]
    while len(groups) > min_folds:
        best = None
        for a, b in combinations(range(len(groups)), 2):
            merged = gcomp[a] + gcomp[b]
            rest = [gcomp[i] for i in range(len(groups)) if i not in (a, b)] + [merged]
            n_single = sum((c > 0).sum() < 2 for c in rest)
            sizes = [c.sum() for c in rest]
            excess = max(max(sizes) / min(sizes), balance)
            min_h = min(_entropy(c) for c in rest)
            key = (n_single, round(excess, 12), -round(min_h, 12), merged.sum(), a, b)
            if best is None or key < best[0]:
                best = (key, a, b)
        _, a, b = best
        groups[a] = groups[a] + groups[b]
        gcomp[a] = gcomp[a] + gcomp[b]
        del groups[b], gcomp[b]
        yield [list(g) for g in groups]


def _partitions(items: list):
    """All set partitions of ``items`` (Bell-number many)."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1 :]
        yield [[first]] + part


def _acceptable(groups, comp, need_diverse: bool, balance: float) -> tuple[bool, bool]:
    sizes = np.array([comp[g].sum() for g in groups])
    diverse = all((comp[g].sum(axis=0) > 0).sum() >= 2 for g in groups) if need_diverse else True
    balanced = sizes.max() <= balance * sizes.min()
    return diverse, balanced


def _pick(candidates, comp, need_diverse: bool, balance: float, require_balance: bool):
    """Fewest folds first, then highest minimum context entropy, then first seen."""
    best, best_key = None, None
    for groups in candidates:
        diverse, balanced = _acceptable(groups, comp, need_diverse, balance)
        if not diverse or (require_balance and not balanced):
            continue
        key = (len(groups), -round(min(_entropy(comp[g].sum(axis=0)) for g in groups), 12))
        if best_key is None or key < best_key:
            best, best_key = groups, key
    return best


def build_folds(
    stage1: np.ndarray,
    sub: SubClustering,
    min_folds: int = MIN_FOLDS,
    balance: float = SIZE_BALANCE,
) -> FoldAssignment:
    """Merge Stage-1 clusters into the fewest context-diverse, balanced folds.

    With at most ``EXACT_MAX_UNITS`` Stage-1 clusters every grouping is
    searched. Beyond that a greedy path is used: starting from one fold per
    cluster, repeatedly merge the pair whose union leaves the fewest
    single-context folds, then keeps the size ratio within ``balance``, then
    has the highest minimum context entropy, down to ``min_folds``.
    Either way the chosen grouping has the fewest folds (at least
    ``min_folds``) such that every fold holds two or more context classes and
    fold sizes are within ``balance``x; ties go to the highest minimum
    context entropy.
    """
    stage1 = np.asarray(stage1)
    units = np.unique(stage1)
    if len(units) < min_folds:
        raise SplitError(f"{len(units)} Stage-1 cluster(s) cannot form {min_folds} folds; increase k")
    context = sub.cell_context()
    classes = sorted(set(context))
    comp = np.zeros((len(units), len(classes)))
    unit_pos = {u: i for i, u in enumerate(units)}
    cls_pos = {c: i for i, c in enumerate(classes)}
    for s1, c in zip(stage1, context):
        comp[unit_pos[s1], cls_pos[c]] += 1
    need_diverse = len(classes) >= 2

    if len(units) <= EXACT_MAX_UNITS:
        candidates = [p for p in _partitions(list(range(len(units)))) if len(p) >= min_folds]
    else:
        candidates = list(_merge_path(comp, min_folds, balance))
    chosen = _pick(candidates, comp, need_diverse, balance, require_balance=True)
    if chosen is None:
        chosen = _pick(candidates, comp, need_diverse, balance, require_balance=False)
        if chosen is None:
            raise SplitError("no merge reaches context-diverse folds; refine Stage 1 with a larger k")
        warnings.warn("fold sizes exceed the balance bound; returning the smallest diverse grouping", stacklevel=2)

    unit_fold = np.empty(len(units), dtype=int)
    # number folds by their smallest Stage-1 unit for stable ids
    for f, g in enumerate(sorted(chosen, key=min)):
        unit_fold[g] = f
    fold = unit_fold[[unit_pos[s] for s in stage1]]
    return FoldAssignment(len(chosen), fold, stage1.copy(), sub.sub.copy(), context, TWO_STAGE)


# -- baselines ---------------------------------------------------------------


def random_split(n_cells: int, n_folds: int, seed: int, context=None) -> FoldAssignment:
    """Balanced uniform assignment: a seeded permutation dealt round-robin."""
    if not 1 <= n_folds <= n_cells:
        raise SplitError("need 1 <= n_folds <= n_cells")
    perm = np.random.default_rng(seed).permutation(n_cells)
    fold = np.empty(n_cells, dtype=int)
    fold[perm] = np.arange(n_cells) % n_folds
    ctx = np.asarray(context, dtype=object) if context is not None else np.full(n_cells, "", dtype=object)
    return FoldAssignment(n_folds, fold, np.full(n_cells, -1), np.full(n_cells, -1), ctx, RANDOM)


def kmeans_location_split(grid: GridIndex, n_folds: int, seed: int, context=None) -> FoldAssignment:
    """Location-only baseline: one k-Means cluster of centroids per fold."""
    st = kmeans_centroids(grid, n_folds, seed)
    ctx = np.asarray(context, dtype=object) if context is not None else np.full(grid.n_cells, "", dtype=object)
    return FoldAssignment(n_folds, st.assignment, st.assignment.copy(), np.full(grid.n_cells, -1), ctx, KMEANS_LOCATION)


def two_stage_split(
    grid: GridIndex,
    features: FeatureMatrix,
    context_prefix: str,
    seed: int,
    separation_r: float = 3.0,
    k: int | None = None,
    extra_context: list[str] | None = None,
    context_radius: float | None = None,
    min_folds: int = MIN_FOLDS,
    balance: float = SIZE_BALANCE,
) -> FoldAssignment:
    """Stage 1 k-Means, Stage 2 refinement and fold merging in one call."""
    k = k if k is not None else choose_stage1_k(grid.n_cells, separation_r, min_k=min_folds)
    stage1 = kmeans_centroids(grid, k, seed)
    cols = list(features.columns(context_prefix))
    if extra_context:
        cols += list(features.columns(extra_context))
    labels = context_labels_from_features(features, context_prefix)
    sub = refine_context(
        stage1.assignment, features.values[:, cols], features.schema.sigma[cols], labels, context_radius
    )
    return build_folds(stage1.assignment, sub, min_folds, balance)


class SpatialFoldSplitter(BaseEstimator):
    """Fold splitter usable as ``cv=`` in sklearn once fitted on the grid.

    Parameters
    ----------
    method : {"random", "kmeans_location", "two_stage"}
    n_folds : int
        Fold count for the random and location baselines; the two-stage
        method picks its own count (at least ``min_folds``).
    """

    def __init__(
        self,
        method: str = TWO_STAGE,
        n_folds: int = 5,
        separation_r: float = 3.0,
        k: int | None = None,
        context_prefix: str = "landuse=",
        min_folds: int = MIN_FOLDS,
        random_state: int = 0,
    ):
        self.method = method
        self.n_folds = n_folds
        self.separation_r = separation_r
        self.k = k
        self.context_prefix = context_prefix
        self.min_folds = min_folds
        self.random_state = random_state

    def fit(self, grid: GridIndex, features: FeatureMatrix | None = None):
        context = None
        if features is not None and len(features.columns(self.context_prefix)):
            context = context_labels_from_features(features, self.context_prefix)
        if self.method == RANDOM:
            self.folds_ = random_split(grid.n_cells, self.n_folds, self.random_state, context)
        elif self.method == KMEANS_LOCATION:
            self.folds_ = kmeans_location_split(grid, self.n_folds, self.random_state, context)
        elif self.method == TWO_STAGE:
            if features is None:
                raise SplitError("two_stage splitting needs the feature matrix")
            self.folds_ = two_stage_split(
                grid, features, self.context_prefix, self.random_state, self.separation_r, self.k,
                min_folds=self.min_folds,
            )
        else:
            raise SplitError(f"unknown split method {self.method!r}")
        return self

    def split(self, X=None, y=None, groups=None):
        return self.folds_.split(X, y, groups)

    def get_n_splits(self, X=None, y=None, groups=None) -> int:
        return self.folds_.n_folds


# -- leakage audit -------------------------------------------------------------


@dataclass(frozen=True)
class LeakageAudit:
    min_interfold_distance: float
    boundary_pair_count: int
    fraction_boundary: float

    def to_dict(self) -> dict:
        d = self.min_interfold_distance
        return {
            "min_interfold_distance_m": None if math.isinf(d) else d,
            "boundary_pair_count": self.boundary_pair_count,
            "fraction_boundary": self.fraction_boundary,
        }


def audit_leakage(folds: FoldAssignment, grid: GridIndex, r: float) -> LeakageAudit:
    """Cross-fold neighbour pairs within ``r`` cells and the closest cross-fold distance."""
    pts = grid.centroids
    dist = r * grid.cell_size
    pairs = cKDTree(pts).query_pairs(dist * (1 + 1e-9) + 1e-9, output_type="ndarray")
    cross = folds.fold[pairs[:, 0]] != folds.fold[pairs[:, 1]] if len(pairs) else np.zeros(0, bool)
    n_cross = int(cross.sum())
    frac = n_cross / len(pairs) if len(pairs) else 0.0
    min_d = math.inf
    for f in range(folds.n_folds):
        inside = folds.fold == f
        if inside.all():
            continue
        d, _ = cKDTree(pts[~inside]).query(pts[inside], k=1)
        min_d = min(min_d, float(d.min()))
    return LeakageAudit(min_d, n_cross, float(frac))
