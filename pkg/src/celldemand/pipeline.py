"""End-to-end run: synthesize or load a city, split, train, correct, plan.

Every stage reads and writes plain CSV/JSON so the stage-wise CLI
subcommands and the one-shot pipeline share the same code and outputs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import planning, regressor, semcorrect, spatialstats, splitcv
from .geogrid import GridIndex, read_features_csv, write_features_csv
from .synthcity import CityRecipe, generate

log = logging.getLogger(__name__)

METHOD_LABELS = {
    splitcv.KMEANS_LOCATION: "k-Means",
    splitcv.TWO_STAGE: "Two-Stage",
    "two_stage_sem": "Two-Stage + SEM",
}


@dataclass
class RunConfig:
    seed: int = 0
    # no "seed" key: the city follows the run seed unless a recipe pins one
    recipe: dict | None = field(default_factory=lambda: {k: v for k, v in CityRecipe().to_dict().items() if k != "seed"})
    input_csv: str | None = None
    thresholds: list = field(default_factory=lambda: list(range(1, 13)))
    range_cutoff: float = spatialstats.RANGE_CUTOFF
    local_threshold: float = 1.5
    n_folds: int = 5
    stage1_k: int | None = None
    min_folds: int = splitcv.MIN_FOLDS
    balance: float = splitcv.SIZE_BALANCE
    context_prefix: str = "landuse="
    hyperparams: dict = field(default_factory=lambda: dict(regressor.DEFAULT_PARAMS))
    sem_kind: str = spatialstats.DISTANCE
    sem_threshold: float = 1.5
    sem_k: int = 8
    sem_method: str = "ml"
    objective_alpha: float = 0.0
    objective_beta: float = 1.0
    kappa: float = planning.KAPPA_BPS
    etas: list = field(default_factory=lambda: list(planning.PAPER_ETAS))
    bandwidths_mhz: list = field(default_factory=lambda: [float(b) for b in np.arange(0, 201, 5)])
    case_study_error_radius: float = 3.0
    learning_sizes: list = field(default_factory=lambda: [0.5, 1.0])
    paper_mode: bool = False
    mae_overrides: dict | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


# -- file helpers ------------------------------------------------------------------


def write_csv(path, df: pd.DataFrame, config_hash: str | None = None) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        df.to_csv(fh, index=False, float_format="%.10g", lineterminator="\n")
    return path


def write_json(path, doc: dict, config_hash: str | None = None) -> Path:
    path = Path(path)
    if config_hash:
        doc = {"config_hash": config_hash, **doc}
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=False) + "\n")
    return path


class InputError(ValueError):
    """Missing or malformed input; maps to exit code 2."""


def read_table(path, required=(), numeric=()) -> pd.DataFrame:
    """Read a handoff CSV, reporting format problems with 1-based file line numbers."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    lines = path.read_text().splitlines()
    n_comments = 0
    while n_comments < len(lines) and lines[n_comments].startswith("#"):
        n_comments += 1
    try:
        df = pd.read_csv(path, comment="#")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise InputError(f"{path}:{n_comments + 1}: missing columns {missing}")
    for col in numeric:
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = np.flatnonzero(vals.isna().to_numpy())
        if len(bad):
            line = n_comments + 2 + int(bad[0])
            raise InputError(f"{path}:{line}: column {col!r} is not numeric: {df[col].iloc[bad[0]]!r}")
    return df


def read_city(path):
    """``(grid, features, y)`` from a city CSV; ``y`` is required."""
    head = read_table(path, required=("cell_id", "row", "col", "cx", "cy", "y"))
    read_table(path, numeric=list(head.columns))
    return read_features_csv(path)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if not np.isfinite(v) else round(v, 10)
    return obj


# -- stages ------------------------------------------------------------------------


def recipe_for(cfg: RunConfig) -> CityRecipe:
    """Recipe with the run seed unless the recipe pins its own."""
    d = dict(cfg.recipe or {})
    d.setdefault("seed", cfg.seed)
    return CityRecipe(**d)


def synthesize(cfg: RunConfig, path, config_hash: str) -> Path:
    city = generate(recipe_for(cfg))
    write_features_csv(path, city.grid, city.features, city.demand, comment=f"config_hash={config_hash}")
    return Path(path)


def sem_report(reports: list[dict]) -> dict:
    """Run-level SEM summary over folds plus the per-fold entries."""
    sizes = np.array([r["n_test"] for r in reports], dtype=float)

    def wmean(key):
        vals = [r[key] for r in reports]
        if any(v is None for v in vals):
            return None
        return float(np.average(vals, weights=sizes))

    return {
        "lambda": wmean("lambda"),
        "innovation_sse": float(sum(r["innovation_sse"] for r in reports)),
        "moran_before": wmean("moran_before"),
        "moran_after": wmean("moran_after"),
        "per_component": [c for r in reports for c in r["per_component"]],
        "folds": reports,
    }


def separation_range(profile: spatialstats.MoranProfile) -> float:
    """Correlation range in cells used as the split separation; at least one cell."""
    return max(profile.correlation_range, 1.0)


def make_folds(method: str, grid: GridIndex, features, cfg: RunConfig, r: float) -> splitcv.FoldAssignment:
    context = None
    if len(features.columns(cfg.context_prefix)):
        context = splitcv.context_labels_from_features(features, cfg.context_prefix)
    if method == splitcv.RANDOM:
        return splitcv.random_split(grid.n_cells, cfg.n_folds, cfg.seed, context)
    if method == splitcv.KMEANS_LOCATION:
        return splitcv.kmeans_location_split(grid, cfg.n_folds, cfg.seed, context)
    if method == splitcv.TWO_STAGE:
        return splitcv.two_stage_split(
            grid, features, cfg.context_prefix, cfg.seed, r, cfg.stage1_k,
            min_folds=cfg.min_folds, balance=cfg.balance,
        )
    raise ValueError(f"unknown split method {method!r}")


def predictions_frame(y, cv: regressor.CVResult, folds: splitcv.FoldAssignment) -> pd.DataFrame:
    return pd.DataFrame({"cell_id": np.arange(len(y)), "fold": folds.fold, "y": y, "yhat": cv.oof})


def train_fits_frame(cv: regressor.CVResult, folds: splitcv.FoldAssignment) -> pd.DataFrame:
    parts = []
    for f, (tr, res) in zip(np.unique(folds.fold), cv.train_residuals):
        parts.append(pd.DataFrame({"fold": f, "cell_id": tr, "residual": res}))
    return pd.concat(parts, ignore_index=True)


def sem_correct(grid_points: np.ndarray, cell_size: float, preds: pd.DataFrame, fits: pd.DataFrame, cfg: RunConfig):
    """Per-fold SEM: fit lambda on the fold's training residuals, correct its held-out cells."""
    corrected = preds["yhat"].to_numpy(dtype=float).copy()
    reports = []
    for f in np.unique(preds["fold"]):
        part = fits[fits["fold"] == f]
        tr = part["cell_id"].to_numpy(dtype=int)
        te = preds.index[preds["fold"] == f].to_numpy()
        corr = semcorrect.SpatialErrorCorrector(
            kind=cfg.sem_kind, threshold=cfg.sem_threshold, k=cfg.sem_k, cell_size=cell_size, method=cfg.sem_method
        ).fit(grid_points[tr], part["residual"].to_numpy(dtype=float))
        cw = corr.cross_weights(grid_points[te])
        corrected[te], no_nbr = semcorrect.correct_predictions(corr.sem_, corrected[te], cw)
        rep = {"fold": int(f), **corr.sem_.to_dict(), "n_test": len(te), "n_test_without_train_neighbor": int(no_nbr.sum())}
        reports.append((rep, corr.sem_))
    return corrected, reports


@dataclass
class RunManifest:
    config_hash: str
    timings: dict
    files: list
    metrics: dict

    def to_dict(self) -> dict:
        return asdict(self)


def run_pipeline(cfg: RunConfig, out_dir) -> RunManifest:
    out = Path(out_dir)
    created_dir = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    h = cfg.config_hash()
    timings = {}

    def timed(name):
        class _T:
            def __enter__(self_):
                self_.t = time.perf_counter()
                log.info("stage %s", name)

            def __exit__(self_, *exc):
                timings[name] = time.perf_counter() - self_.t

        return _T()

    stage = "data"
    try:
        with timed(stage):
            if cfg.input_csv:
                if not Path(cfg.input_csv).exists():
                    raise InputError(f"{cfg.input_csv}: no such file")
                grid, features, y = read_city(cfg.input_csv)
                written.append(out / "city.csv")
                write_features_csv(written[-1], grid, features, y, comment=f"config_hash={h}")
            else:
                written.append(synthesize(cfg, out / "city.csv", h))
            # downstream stages see exactly what a file-based chain would
            grid, features, y = read_city(written[-1])

        stage = "morans"
        with timed(stage):
            profile = spatialstats.morans_profile(y, grid, cfg.thresholds, cfg.range_cutoff)
            r = separation_range(profile)
            written.append(write_csv(out / "morans_profile.csv", pd.DataFrame({"distance": profile.distances, "I": profile.I}), h))
            lw = spatialstats.build_weights(grid, spatialstats.DISTANCE, cfg.local_threshold)
            loc = spatialstats.local_morans_i(y, lw)
            written.append(write_csv(out / "local_morans.csv",
                                     pd.DataFrame({"cell_id": np.arange(grid.n_cells), "Ii": loc.Ii, "category": loc.category}), h))

        stage = "split"
        folds = {}
        audits = {}
        with timed(stage):
            for m in splitcv.METHODS:
                folds[m] = make_folds(m, grid, features, cfg, r)
                audits[m] = splitcv.audit_leakage(folds[m], grid, r).to_dict()
                written.append(write_csv(out / f"folds_{m}.csv", folds[m].to_frame(), h))
                written.append(write_json(out / f"audit_{m}.json", audits[m], h))

        stage = "train"
        cvres, preds, fits = {}, {}, {}
        with timed(stage):
            for m in splitcv.METHODS:
                cvres[m] = regressor.cross_validate(features, y, folds[m], cfg.hyperparams, keep_models=True)
                preds[m] = predictions_frame(y, cvres[m], folds[m])
                fits[m] = train_fits_frame(cvres[m], folds[m])
                written.append(write_csv(out / f"predictions_{m}.csv", preds[m], h))
                written.append(write_csv(out / f"train_residuals_{m}.csv", fits[m], h))

        stage = "sem"
        with timed(stage):
            ts_preds = read_table(out / f"predictions_{splitcv.TWO_STAGE}.csv")
            ts_fits = read_table(out / f"train_residuals_{splitcv.TWO_STAGE}.csv")
            sem_pred, sem_reps = sem_correct(grid.centroids, grid.cell_size, ts_preds, ts_fits, cfg)
            objective = []
            for (rep, sem), model, (tr, res) in zip(sem_reps, cvres[splitcv.TWO_STAGE].models,
                                                    cvres[splitcv.TWO_STAGE].train_residuals):
                obj = semcorrect.evaluate_objective(model, res, sem, cfg.objective_alpha, cfg.objective_beta)
                objective.append({"fold": rep["fold"], **obj.to_dict()})
            sem_frame = ts_preds.assign(yhat=sem_pred)
            written.append(write_csv(out / "predictions_two_stage_sem.csv", sem_frame, h))
            written.append(write_json(out / "sem_report.json", sem_report([r_ for r_, _ in sem_reps]), h))
            written.append(write_json(out / "sem_objective.json", {"folds": objective}, h))

        stage = "metrics"
        with timed(stage):
            reports = {m: cvres[m].report for m in splitcv.METHODS}
            reports["two_stage_sem"] = regressor.evaluate(y, sem_pred, folds[splitcv.TWO_STAGE])
            r2s = {m: rep.r2 for m, rep in reports.items()}
            metrics = {
                "correlation_range_cells": r,
                "n_folds": {m: folds[m].n_folds for m in splitcv.METHODS},
                "methods": {m: reports[m].to_dict() for m in reports},
                "gap": {m: cvres[m].gap for m in splitcv.METHODS},
                "r2_gain_pct": regressor.r2_gain_matrix(r2s),
                "audit": audits,
            }
            table = pd.DataFrame([{
                "city": "synthetic" if not cfg.input_csv else Path(cfg.input_csv).stem,
                **{METHOD_LABELS[m]: reports[m].mae for m in METHOD_LABELS},
                "R2 Gain (%)": regressor.r2_gain_matrix(
                    {"a": r2s["two_stage_sem"], "b": r2s[splitcv.KMEANS_LOCATION]}).get("a_vs_b"),
            }])
            written.append(write_csv(out / "methods_comparison.csv", table, h))
            written.append(write_json(out / "metrics.json", metrics, h))

        stage = "learning_curve"
        if cfg.learning_sizes:
            with timed(stage):
                rows = []
                for m in splitcv.METHODS:
                    lc = regressor.learning_curve(features, y, folds[m], cfg.learning_sizes, cfg.hyperparams, cfg.seed)
                    rows += [{"method": m, **row} for row in lc.to_rows()]
                written.append(write_csv(out / "learning_curves.csv", pd.DataFrame(rows), h))

        stage = "planning"
        with timed(stage):
            if cfg.mae_overrides:
                mae_for_bde = dict(cfg.mae_overrides)
            elif cfg.paper_mode:
                mae_for_bde = dict(planning.PAPER_ALL_CITIES_MAE)
            else:
                mae_for_bde = {METHOD_LABELS[m]: reports[m].mae for m in METHOD_LABELS}
            bde = planning.bde_table(mae_for_bde, cfg.etas, cfg.kappa)
            written.append(write_csv(out / "bde_sensitivity.csv", format_bde(bde), h))
            B = np.asarray(cfg.bandwidths_mhz, dtype=float) * 1e6
            eta0 = float(cfg.etas[0])
            curves = [planning.congestion_curve(planning.bandwidth_required(y, cfg.kappa, eta0), B, "observed")]
            pred_surfaces = {m: preds[m]["yhat"].to_numpy() for m in (splitcv.KMEANS_LOCATION, splitcv.TWO_STAGE)}
            pred_surfaces["two_stage_sem"] = sem_pred
            for m, yh in pred_surfaces.items():
                curves.append(planning.congestion_curve(
                    planning.bandwidth_required(np.maximum(yh, 0.0), cfg.kappa, eta0), B, f"predicted:{METHOD_LABELS[m]}"))
            written.append(write_csv(out / "congestion_curves.csv", pd.concat([c.to_frame() for c in curves]), h))
            cs = planning.case_study_all_cities(
                y, (grid.n_rows, grid.n_cols), mae_for_bde, B, cfg.kappa, eta0, cfg.case_study_error_radius, cfg.seed
            )
            written.append(write_csv(out / "case_study_curves.csv", cs.to_frame(), h))
            metrics["bde_mhz"] = {str(k): v for k, v in bde.round(1).to_dict(orient="index").items()}
            metrics["case_study_max_gap"] = cs.max_gaps()
            metrics["case_study_realized_mae"] = cs.realized_mae
            written.append(write_json(out / "planning_summary.json",
                                      {k: metrics[k] for k in ("bde_mhz", "case_study_max_gap", "case_study_realized_mae")}, h))
    except BaseException as exc:
        for p in written:
            Path(p).unlink(missing_ok=True)
        if created_dir and not any(out.iterdir()):
            out.rmdir()
        raise StageError(stage, exc) from exc

    manifest = RunManifest(h, timings, [p.name for p in written], _jsonable(metrics))
    write_json(out / "manifest.json", manifest.to_dict())
    return manifest


def format_bde(df: pd.DataFrame) -> pd.DataFrame:
    """Table with one-decimal MHz strings, eta as the first column."""
    out = df.map(lambda v: f"{v:.1f}")
    out.insert(0, "eta_bps_per_hz", [f"{e:g}" for e in df.index])
    return out.reset_index(drop=True)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
