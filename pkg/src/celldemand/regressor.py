"""Gradient-boosted regression trees and the evaluation protocol.

The booster fits depth-limited trees to squared-error residuals with exact
greedy splits. Leaf values are ``sum(residual) / (count + l2_leaf)`` and the
model predicts ``base_score + learning_rate * sum(tree outputs)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import check_mask, check_random_state_seed, check_vector

DEFAULT_PARAMS = dict(n_trees=300, learning_rate=0.1, max_depth=4, min_leaf=5, l2_leaf=1.0, subsample=0.8, random_state=0)


class RegressorError(ValueError):
    pass


@dataclass
class Tree:
    """Flat binary tree; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return node
            rows = np.flatnonzero(internal)
            go_left = X[rows, f[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    @property
    def leaf_values(self) -> np.ndarray:
        return self.value[self.feature < 0]

    def to_dict(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"leaf": float(self.value[i])}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "left": self.to_dict(int(self.left[i])),
            "right": self.to_dict(int(self.right[i])),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        feature, threshold, left, right, value = [], [], [], [], []

        def add(node):
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            if "leaf" in node:
                value[i] = float(node["leaf"])
            else:
                feature[i] = int(node["feature"])
                threshold[i] = float(node["threshold"])
                left[i] = add(node["left"])
                right[i] = add(node["right"])
            return i

        add(d)
        return cls(np.array(feature), np.array(threshold), np.array(left), np.array(right), np.array(value))


def _best_split(X: np.ndarray, g: np.ndarray, min_leaf: int, l2: float):
    """Exact greedy split maximising the regularised squared-error gain."""
    n, m = X.shape
    if n < 2 * min_leaf or n < 2:
        return None
    order = np.argsort(X, axis=0, kind="stable")
    Xs = np.take_along_axis(X, order, axis=0)
    Gl = np.cumsum(g[order], axis=0)[:-1]
    G = g.sum()
    nl = np.arange(1, n, dtype=float)[:, None]
    nr = n - nl
    gain = Gl**2 / (nl + l2) + (G - Gl) ** 2 / (nr + l2) - G**2 / (n + l2)
    valid = (Xs[1:] > Xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
    gain = np.where(valid, gain, -np.inf)
    flat = int(np.argmax(gain.T))  # lowest feature, then lowest position, on ties
    f, pos = divmod(flat, n - 1)
    best = gain[pos, f]
    if not np.isfinite(best) or best <= 1e-12 * float(g @ g):
        return None
    thr = 0.5 * (Xs[pos, f] + Xs[pos + 1, f])
    if not thr < Xs[pos + 1, f]:  # midpoint rounded up onto the right value
        thr = Xs[pos, f]
    return f, thr


def _grow_tree(X: np.ndarray, g: np.ndarray, max_depth: int, min_leaf: int, l2: float) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []
    stack = [(np.arange(len(X)), 0, None, False)]
    while stack:
        rows, depth, parent, is_right = stack.pop()
        i = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(g[rows].sum() / (len(rows) + l2))
        if parent is not None:
            (right if is_right else left)[parent] = i
        split = _best_split(X[rows], g[rows], min_leaf, l2) if depth < max_depth else None
        if split is None:
            continue
        f, thr = split
        feature[i], threshold[i] = f, thr
        go_left = X[rows, f] <= thr
        stack.append((rows[~go_left], depth + 1, i, True))
        stack.append((rows[go_left], depth + 1, i, False))
    return Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right), np.array(value, dtype=float))


class GradientBoostedRegressor(RegressorMixin, BaseEstimator):
    """Squared-error gradient boosting over exact-greedy regression trees.

    Parameters
    ----------
    n_trees : int
        Boosting rounds.
    learning_rate : float
        Shrinkage applied to every tree output.
    max_depth : int
        Maximum number of split levels per tree.
    min_leaf : int
        Minimum training rows in each leaf.
    l2_leaf : float
        L2 penalty on leaf values (adds to the leaf count in the denominator).
    subsample : float
        Fraction of rows drawn without replacement for each tree.
    random_state : int
        Seed for row subsampling.
    """

    def __init__(
        self,
        n_trees: int = 300,
        learning_rate: float = 0.1,
        max_depth: int = 4,
        min_leaf: int = 5,
        l2_leaf: float = 1.0,
        subsample: float = 0.8,
        random_state: int = 0,
    ):
        self.n_trees = n_trees
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.l2_leaf = l2_leaf
        self.subsample = subsample
        self.random_state = random_state

    def fit(self, X, y, record_loss: bool = False):
        if len(np.atleast_1d(y)) == 0:
            raise RegressorError("empty training set")
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        if len(y) < 2 * self.min_leaf:
            raise RegressorError(f"need at least {2 * self.min_leaf} training rows, got {len(y)}")
        if not 0 < self.subsample <= 1:
            raise RegressorError("subsample must be in (0, 1]")
        rng = np.random.default_rng(check_random_state_seed(self.random_state))
        n = len(y)
        self.base_score_ = float(y.mean())
        self.n_features_in_ = X.shape[1]
        pred = np.full(n, self.base_score_)
        self.trees_ = []
        self.train_loss_ = [float(((y - pred) ** 2).sum())] if record_loss else None
        n_sub = max(int(round(self.subsample * n)), 1)
        for _ in range(int(self.n_trees)):
            resid = y - pred
            rows = np.sort(rng.choice(n, size=n_sub, replace=False)) if n_sub < n else np.arange(n)
            tree = _grow_tree(X[rows], resid[rows], int(self.max_depth), int(self.min_leaf), float(self.l2_leaf))
            self.trees_.append(tree)
            pred = pred + self.learning_rate * tree.predict(X)
            if record_loss:
                self.train_loss_.append(float(((y - pred) ** 2).sum()))
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "trees_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise RegressorError(f"model was trained on {self.n_features_in_} features, got {X.shape[1]}")
        out = np.full(len(X), self.base_score_)
        for tree in self.trees_:
            out += self.learning_rate * tree.predict(X)
        return out

    @property
    def leaf_values_(self) -> np.ndarray:
        """All leaf values of all trees; the parameters penalised by ``l2_leaf``."""
        check_is_fitted(self, "trees_")
        if not self.trees_:
            return np.zeros(0)
        return np.concatenate([t.leaf_values for t in self.trees_])

    def to_json(self) -> str:
        check_is_fitted(self, "trees_")
        return json.dumps(
            {
                "format": "gbt-regressor/1",
                "params": self.get_params(),
                "base_score": self.base_score_,
                "n_features": self.n_features_in_,
                "trees": [t.to_dict() for t in self.trees_],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "GradientBoostedRegressor":
        doc = json.loads(text)
        if doc.get("format") != "gbt-regressor/1":
            raise RegressorError("not a serialized gradient-boosted model")
        model = cls(**doc["params"])
        model.base_score_ = float(doc["base_score"])
        model.n_features_in_ = int(doc["n_features"])
        model.trees_ = [Tree.from_dict(t) for t in doc["trees"]]
        return model


def gbt_train(features, y, train_mask=None, hyperparams: dict | None = None) -> GradientBoostedRegressor:
    X = np.asarray(getattr(features, "values", features), dtype=float)
    mask = check_mask(train_mask, len(X))
    params = {**DEFAULT_PARAMS, **(hyperparams or {})}
    if not mask.any():
        raise RegressorError("empty training set")
    return GradientBoostedRegressor(**params).fit(X[mask], np.asarray(y, dtype=float)[mask])


def gbt_predict(model: GradientBoostedRegressor, features, mask=None) -> np.ndarray:
    X = np.asarray(getattr(features, "values", features), dtype=float)
    mask = check_mask(mask, len(X))
    if not mask.any():
        return np.zeros(0)
    return model.predict(X[mask])


# -- metrics and protocol --------------------------------------------------------


def mae(y, yhat) -> float:
    return float(np.mean(np.abs(np.asarray(y, float) - np.asarray(yhat, float))))


def r2(y, yhat) -> float | None:
    """``1 - SSE/SST``; None when the reference has zero variance."""
    y = np.asarray(y, float)
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0:
        return None
    return 1.0 - float(((y - np.asarray(yhat, float)) ** 2).sum()) / sst


@dataclass
class EvalReport:
    mae: float
    r2: float | None
    per_fold: list = field(default_factory=list)  # (fold, mae, r2)
    residuals: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "r2": self.r2,
            "per_fold": [{"fold": int(f), "mae": m, "r2": r} for f, m, r in self.per_fold],
        }


def evaluate(y, yhat, folds=None) -> EvalReport:
    """Pooled MAE and R^2 with a per-fold breakdown when fold ids are given."""
    y = check_vector(y)
    yhat = check_vector(yhat, len(y), "yhat")
    per_fold = []
    if folds is not None:
        fid = np.asarray(getattr(folds, "fold", folds))
        for f in np.unique(fid):
            m = fid == f
            per_fold.append((int(f), mae(y[m], yhat[m]), r2(y[m], yhat[m])))
    return EvalReport(mae(y, yhat), r2(y, yhat), per_fold, y - yhat)


@dataclass
class CVResult:
    report: EvalReport
    oof: np.ndarray
    train_mae: list
    val_mae: list
    train_residuals: list  # (train_idx, residuals) per fold
    models: list

    @property
    def gap(self) -> float:
        """Mean validation MAE minus mean training MAE across folds."""
        return float(np.mean(self.val_mae) - np.mean(self.train_mae))


def cross_validate(features, y, folds, hyperparams: dict | None = None, keep_models: bool = False) -> CVResult:
    """Train on all folds but one, predict the held-out fold, for every fold."""
    X = np.asarray(getattr(features, "values", features), dtype=float)
    y = check_vector(y, len(X))
    fid = np.asarray(folds.fold)
    uniq = np.unique(fid)
    if len(uniq) < 2:
        raise RegressorError("cross-validation needs at least 2 folds")
    oof = np.empty(len(y))
    train_mae, val_mae, train_res, models = [], [], [], []
    for f in uniq:
        test = fid == f
        if not test.any():
            raise RegressorError(f"fold {f} has no cells")
        model = gbt_train(X, y, ~test, hyperparams)
        tr = np.flatnonzero(~test)
        fit_tr = model.predict(X[tr])
        oof[test] = model.predict(X[test])
        train_mae.append(mae(y[tr], fit_tr))
        val_mae.append(mae(y[test], oof[test]))
        train_res.append((tr, y[tr] - fit_tr))
        if keep_models:
            models.append(model)
    return CVResult(evaluate(y, oof, fid), oof, train_mae, val_mae, train_res, models)


@dataclass
class LearningCurve:
    train_sizes: np.ndarray
    train_mae_mean: np.ndarray
    train_mae_sd: np.ndarray
    val_mae_mean: np.ndarray
    val_mae_sd: np.ndarray

    @property
    def gap(self) -> np.ndarray:
        return self.val_mae_mean - self.train_mae_mean

    def to_rows(self) -> list[dict]:
        return [
            {"train_size": float(s), "train_mae_mean": a, "train_mae_sd": b, "val_mae_mean": c, "val_mae_sd": d}
            for s, a, b, c, d in zip(
                self.train_sizes, self.train_mae_mean, self.train_mae_sd, self.val_mae_mean, self.val_mae_sd
            )
        ]


def learning_curve(features, y, folds, sizes, hyperparams: dict | None = None, seed: int = 0) -> LearningCurve:
    """Train/validation MAE per training-size fraction, mean and sd over folds."""
    X = np.asarray(getattr(features, "values", features), dtype=float)
    y = check_vector(y, len(X))
    sizes = np.asarray(sizes, dtype=float)
    if np.any((sizes <= 0) | (sizes > 1)):
        raise RegressorError("sizes must lie in (0, 1]")
    params = {**DEFAULT_PARAMS, **(hyperparams or {})}
    fid = np.asarray(folds.fold)
    uniq = np.unique(fid)
    if len(uniq) < 2:
        raise RegressorError("learning curves need at least 2 folds")
    tr_m, tr_s, va_m, va_s = [], [], [], []
    for s in sizes:
        tr_err, va_err = [], []
        for f in uniq:
            test = fid == f
            tr = np.flatnonzero(~test)
            if s < 1:
                rng = np.random.default_rng([seed, int(f), int(round(s * 1e6))])
                n_take = int(round(s * len(tr)))
                tr = np.sort(rng.choice(tr, size=n_take, replace=False))
            if len(tr) < 2 * params["min_leaf"]:
                raise RegressorError(f"size {s} leaves {len(tr)} training cells")
            model = GradientBoostedRegressor(**params).fit(X[tr], y[tr])
            tr_err.append(mae(y[tr], model.predict(X[tr])))
            va_err.append(mae(y[test], model.predict(X[test])))
        tr_m.append(np.mean(tr_err))
        tr_s.append(np.std(tr_err))
        va_m.append(np.mean(va_err))
        va_s.append(np.std(va_err))
    return LearningCurve(sizes, np.array(tr_m), np.array(tr_s), np.array(va_m), np.array(va_s))


def leave_one_city_out(cities, hyperparams: dict | None = None) -> dict:
    """Hold out each city in turn, training on the rest; returns name -> EvalReport."""
    if len(cities) < 2:
        raise RegressorError("leave-one-city-out needs at least 2 cities")
    names = [c.name for c in cities]
    schema = cities[0].features.names
    for c in cities[1:]:
        if c.features.names != schema:
            raise RegressorError("cities do not share a feature schema")
    out = {}
    for i, held in enumerate(cities):
        rest = [c for j, c in enumerate(cities) if j != i]
        X = np.vstack([c.features.values for c in rest])
        y = np.concatenate([c.demand for c in rest])
        model = gbt_train(X, y, None, hyperparams)
        out[names[i]] = evaluate(held.demand, model.predict(held.features.values))
    return out


def r2_gain_matrix(r2_by_method: dict) -> dict:
    """Relative R^2 gain (%) of each method over each other method."""
    out = {}
    for a, ra in r2_by_method.items():
        for b, rb in r2_by_method.items():
            if a != b and ra is not None and rb not in (None, 0):
                out[f"{a}_vs_{b}"] = 100.0 * (ra - rb) / abs(rb)
    return out
