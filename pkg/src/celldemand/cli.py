"""Command-line entry point: ``celldemand <subcommand> ...``.

Exit codes: 0 success, 1 computation error, 2 input or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import planning, regressor, spatialstats, splitcv
from .geogrid import GeometryError, write_layer_json
from .pipeline import (
    InputError,
    RunConfig,
    StageError,
    format_bde,
    make_folds,
    predictions_frame,
    read_city,
    read_table,
    recipe_for,
    run_pipeline,
    sem_correct,
    sem_report,
    separation_range,
    synthesize,
    train_fits_frame,
    write_csv,
    write_json,
)
from .synthcity import generate

EXIT_OK, EXIT_COMPUTE, EXIT_INPUT = 0, 1, 2
INPUT_ERRORS = (InputError, FileNotFoundError, json.JSONDecodeError, GeometryError, TypeError, KeyError)

log = logging.getLogger("celldemand")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def load_config(args, require_seed: bool = False) -> RunConfig:
    """Config file (if any) overlaid with explicit flags."""
    if args.config:
        if not Path(args.config).exists():
            raise InputError(f"{args.config}: no such file")
        try:
            cfg = RunConfig.from_json(args.config)
        except (TypeError, ValueError) as exc:
            raise InputError(f"{args.config}: {exc}") from exc
    else:
        if require_seed and args.seed is None:
            raise InputError("--seed is required for this stage (or pass --config)")
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    overrides = {
        "thresholds": "thresholds",
        "local_threshold": "local_threshold",
        "n_folds": "n_folds",
        "stage1_k": "k",
        "sem_threshold": "sem_threshold",
        "sem_method": "sem_method",
        "kappa": "kappa",
        "paper_mode": "paper_mode",
        "input_csv": "input",
    }
    for field_, attr in overrides.items():
        v = getattr(args, attr, None)
        if v is not None and v is not False:
            setattr(cfg, field_, v)
    if getattr(args, "n_trees", None) is not None:
        cfg.hyperparams = {**cfg.hyperparams, "n_trees": args.n_trees}
    recipe = dict(cfg.recipe or {})
    for key, attr in (("n_rows", "rows"), ("n_cols", "cols"), ("smoothing_radius", "rho"), ("context_layout", "layout")):
        v = getattr(args, attr, None)
        if v is not None:
            recipe[key] = v
    cfg.recipe = recipe
    if getattr(args, "mae_overrides", None):
        labels = list(planning.PAPER_ALL_CITIES_MAE)
        if len(args.mae_overrides) != len(labels):
            raise InputError(f"--mae-overrides needs {len(labels)} values ({', '.join(labels)})")
        cfg.mae_overrides = dict(zip(labels, args.mae_overrides))
    return cfg


# -- subcommands -------------------------------------------------------------------


def cmd_pipeline(args) -> int:
    cfg = load_config(args, require_seed=True)
    manifest = run_pipeline(cfg, args.out)
    comp = manifest.metrics["methods"]
    for m, rep in comp.items():
        print(f"{m:16s} MAE={rep['mae']:.1f} R2={rep['r2'] if rep['r2'] is None else round(rep['r2'], 3)}")
    print(f"wrote {len(manifest.files)} files to {args.out} (config_hash={manifest.config_hash})")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(args, require_seed=True)
    h = cfg.config_hash()
    synthesize(cfg, args.out, h)
    if args.layers_dir:
        city = generate(recipe_for(cfg))
        d = Path(args.layers_dir)
        d.mkdir(parents=True, exist_ok=True)
        for layer in city.to_layers(cfg.seed).values():
            write_layer_json(d / f"{layer.name}.json", layer)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_morans(args) -> int:
    cfg = load_config(args)
    h = cfg.config_hash()
    grid, _, y = read_city(args.city)
    profile = spatialstats.morans_profile(y, grid, cfg.thresholds, cfg.range_cutoff)
    for d, i in zip(profile.distances, profile.I):
        print(f"d={d:g} I={i:.6g}")
    print(f"correlation_range={profile.correlation_range:g}")
    if args.out_profile:
        write_csv(args.out_profile, pd.DataFrame({"distance": profile.distances, "I": profile.I}), h)
    if args.out_local:
        w = spatialstats.build_weights(grid, spatialstats.DISTANCE, cfg.local_threshold)
        loc = spatialstats.local_morans_i(y, w)
        write_csv(args.out_local, pd.DataFrame({"cell_id": np.arange(grid.n_cells), "Ii": loc.Ii, "category": loc.category}), h)
    return EXIT_OK


def _range_from(args, cfg) -> float:
    if args.r is not None:
        return float(args.r)
    if args.profile:
        df = read_table(args.profile, required=("distance", "I"), numeric=("distance", "I"))
        profile = spatialstats.MoranProfile(
            df["distance"].to_numpy(float), df["I"].to_numpy(float),
            spatialstats.correlation_range(df["distance"].to_numpy(float), df["I"].to_numpy(float), cfg.range_cutoff),
            cfg.range_cutoff,
        )
        return separation_range(profile)
    return 3.0


def cmd_split(args) -> int:
    cfg = load_config(args, require_seed=True)
    h = cfg.config_hash()
    grid, features, _ = read_city(args.city)
    r = _range_from(args, cfg)
    folds = make_folds(args.method, grid, features, cfg, r)
    bad = folds.violations()
    if bad:
        raise splitcv.SplitError("; ".join(bad))
    write_csv(args.out, folds.to_frame(), h)
    audit = splitcv.audit_leakage(folds, grid, r).to_dict()
    if args.audit:
        write_json(args.audit, audit, h)
    print(f"{args.method}: {folds.n_folds} folds, boundary pairs {audit['boundary_pair_count']}")
    return EXIT_OK


def _read_folds(path, method) -> splitcv.FoldAssignment:
    df = read_table(path, required=("cell_id", "fold", "stage1", "stage2", "context_class"),
                    numeric=("cell_id", "fold", "stage1", "stage2"))
    return splitcv.FoldAssignment.from_frame(df, method)


def cmd_train(args) -> int:
    cfg = load_config(args)
    h = cfg.config_hash()
    _, features, y = read_city(args.city)
    folds = _read_folds(args.folds, splitcv.TWO_STAGE)
    if len(folds.fold) != len(y):
        raise InputError(f"{args.folds}: {len(folds.fold)} cells, city has {len(y)}")
    cv = regressor.cross_validate(features, y, folds, cfg.hyperparams)
    write_csv(args.out, predictions_frame(y, cv, folds), h)
    if args.residuals_out:
        write_csv(args.residuals_out, train_fits_frame(cv, folds), h)
    if args.report:
        write_json(args.report, {**cv.report.to_dict(), "train_mae": cv.train_mae, "val_mae": cv.val_mae, "gap": cv.gap}, h)
    if args.model_out:
        model = regressor.GradientBoostedRegressor(**cfg.hyperparams).fit(features.values, y)
        Path(args.model_out).write_text(model.to_json())
    print(f"MAE={cv.report.mae:.1f} R2={cv.report.r2}")
    return EXIT_OK


def cmd_sem(args) -> int:
    cfg = load_config(args)
    h = cfg.config_hash()
    grid, _, y = read_city(args.city)
    preds = read_table(args.predictions, required=("cell_id", "fold", "y", "yhat"), numeric=("cell_id", "fold", "y", "yhat"))
    fits = read_table(args.residuals, required=("fold", "cell_id", "residual"), numeric=("fold", "cell_id", "residual"))
    if len(preds) != grid.n_cells:
        raise InputError(f"{args.predictions}: {len(preds)} rows, city has {grid.n_cells}")
    corrected, reps = sem_correct(grid.centroids, grid.cell_size, preds, fits, cfg)
    write_csv(args.out, preds.assign(yhat=corrected), h)
    if args.report:
        write_json(args.report, sem_report([r for r, _ in reps]), h)
    before = regressor.mae(y, preds["yhat"].to_numpy(float))
    print(f"MAE before={before:.1f} after={regressor.mae(y, corrected):.1f}")
    return EXIT_OK


def cmd_plan(args) -> int:
    kappa = args.kappa
    if args.mae is not None and not args.paper_mode:
        for eta in args.eta or [2.0]:
            print(f"{planning.to_mhz(planning.bde(args.mae, kappa, eta)):.1f} MHz")
        return EXIT_OK
    mae = dict(planning.PAPER_ALL_CITIES_MAE)
    if args.mae_overrides:
        mae = dict(zip(mae, args.mae_overrides))
    etas = args.eta or list(planning.PAPER_ETAS)
    table = format_bde(planning.bde_table(mae, etas, kappa))
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "bde_sensitivity.csv", table)
    print(table.to_string(index=False))
    if args.city:
        grid, _, y = read_city(args.city)
        eta0 = float(etas[0])
        B = np.arange(0.0, 201.0, 5.0) * 1e6
        curves = [planning.congestion_curve(planning.bandwidth_required(y, kappa, eta0), B, "observed")]
        for path in args.predictions or []:
            df = read_table(path, required=("yhat",), numeric=("yhat",))
            yh = np.maximum(df["yhat"].to_numpy(float), 0.0)
            curves.append(planning.congestion_curve(planning.bandwidth_required(yh, kappa, eta0), B, f"predicted:{Path(path).stem}"))
        if args.out_dir:
            write_csv(Path(args.out_dir) / "congestion_curves.csv", pd.concat([c.to_frame() for c in curves]))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="celldemand", description="Leakage-aware spatial demand prediction and planning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON RunConfig")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("pipeline", help="run every stage")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--input", help="city CSV instead of a synthetic recipe")
    sp.add_argument("--rows", type=int)
    sp.add_argument("--cols", type=int)
    sp.add_argument("--rho", type=float)
    sp.add_argument("--layout", choices=("blocks", "radial", "voronoi"))
    sp.add_argument("--n-trees", type=int)
    sp.add_argument("--paper-mode", action="store_true", help="BDE table from the reference MAE values")
    sp.add_argument("--mae-overrides", type=_floats)
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("synth", help="generate a synthetic city CSV")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--rows", type=int)
    sp.add_argument("--cols", type=int)
    sp.add_argument("--rho", type=float)
    sp.add_argument("--layout", choices=("blocks", "radial", "voronoi"))
    sp.add_argument("--layers-dir", help="also write layer JSON documents here")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("morans", help="Moran's I profile and local map")
    common(sp, seed=False)
    sp.add_argument("--city", required=True)
    sp.add_argument("--thresholds", type=_floats)
    sp.add_argument("--local-threshold", type=float)
    sp.add_argument("--out-profile")
    sp.add_argument("--out-local")
    sp.set_defaults(func=cmd_morans)

    sp = sub.add_parser("split", help="assign cells to CV folds")
    common(sp)
    sp.add_argument("--city", required=True)
    sp.add_argument("--method", choices=splitcv.METHODS, default=splitcv.TWO_STAGE)
    sp.add_argument("--n-folds", type=int)
    sp.add_argument("--k", type=int, help="stage-1 cluster count")
    sp.add_argument("--r", type=float, help="separation range in cells")
    sp.add_argument("--profile", help="Moran profile CSV to read the range from")
    sp.add_argument("--out", required=True)
    sp.add_argument("--audit")
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("train", help="cross-validate the booster")
    common(sp)
    sp.add_argument("--city", required=True)
    sp.add_argument("--folds", required=True)
    sp.add_argument("--n-trees", type=int)
    sp.add_argument("--out", required=True, help="out-of-fold predictions CSV")
    sp.add_argument("--residuals-out", help="per-fold training residuals CSV")
    sp.add_argument("--report")
    sp.add_argument("--model-out", help="model fit on all cells, JSON")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sem", help="spatial-error correction of held-out predictions")
    common(sp, seed=False)
    sp.add_argument("--city", required=True)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--residuals", required=True)
    sp.add_argument("--sem-threshold", type=float)
    sp.add_argument("--sem-method", choices=("ml", "sse"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_sem)

    sp = sub.add_parser("plan", help="bandwidth dimensioning error and congestion curves")
    sp.add_argument("--mae", type=float)
    sp.add_argument("--eta", type=_floats, help="comma-separated; default 2.0 for --mae, the reference set for tables")
    sp.add_argument("--kappa", type=float, default=planning.KAPPA_BPS)
    sp.add_argument("--paper-mode", action="store_true")
    sp.add_argument("--mae-overrides", type=_floats)
    sp.add_argument("--city")
    sp.add_argument("--predictions", action="append")
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_plan)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT if isinstance(exc.cause, INPUT_ERRORS) else EXIT_COMPUTE
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
