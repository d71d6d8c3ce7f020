"""Command line interface: ``hdgm fit | predict | scenario | cv | diagnose | simulate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from . import io
from .diagnostics import losocv, st_variogram, station_acf, studentized_residuals
from .emfit import EMOptions, em_fit, smooth_at
from .errors import HDGMError, InputError
from .panel import ModelSpec
from .predict import PredictionGrid, predict_response
from .scenario import ScenarioSpec, pixel_map, run_scenario
from .sim import SimSpec, simulate, simulate_grid

log = logging.getLogger("hdgm")

EXIT_OK, EXIT_NOT_CONVERGED = 0, 4
DEFAULT_SCENARIOS = (("PRIA", 0.26), ("Strong", 0.50))


def _csv_list(text: Optional[str]) -> Optional[List[str]]:
    if text is None:
        return None
    return [t.strip() for t in text.split(",") if t.strip()]


def _options(cfg: io.RunConfig, args) -> EMOptions:
    em = cfg.em
    return EMOptions(max_iter=args.max_iter if args.max_iter is not None else em.max_iter,
                     tol=args.tol if args.tol is not None else em.tol,
                     seed=args.seed if args.seed is not None else em.seed)


def _model(cfg: io.RunConfig, args) -> ModelSpec:
    covs = _csv_list(getattr(args, "covariates", None))
    inter = _csv_list(getattr(args, "interactions", None))
    if cfg.model is None and covs is None:
        raise InputError("no model formula: pass --covariates or a config with a model section")
    base = cfg.model.to_dict() if cfg.model is not None else {"covariates": covs}
    if covs is not None:
        base["covariates"] = covs
    if inter is not None:
        base["interactions"] = inter
    return ModelSpec.from_dict(base)


def _read_panel(path, cfg: io.RunConfig, spec: Optional[ModelSpec]):
    return io.read_panel_csv(path, None if spec is None else spec.covariates, cfg.columns,
                             cfg.rain_source, cfg.rain_threshold, cfg.rain_name)


def _read_grid(path, cfg: io.RunConfig, spec: ModelSpec):
    return io.read_grid_csv(path, spec.covariates, cfg.columns, cfg.rain_source,
                            cfg.rain_threshold, cfg.rain_name)


def _out(path) -> Path:
    return Path(path)


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args) -> int:
    cfg = io.load_config(args.config)
    spec = _model(cfg, args)
    panel = _read_panel(args.panel, cfg, spec)
    fit = em_fit(panel, spec, _options(cfg, args))
    out = _out(args.out)
    coef = pd.DataFrame(fit.coefficient_table())
    s2 = pd.DataFrame({"date": np.datetime_as_string(fit.dates), "sigma2_eps": fit.params.sigma2_eps,
                       "sigma2_eps_original": fit.params.sigma2_eps * fit.params.moments.y_std ** 2})
    summary = {"n_iter": fit.report.n_iter, "converged": fit.report.converged,
               "loglik": fit.report.loglik_trace[-1], "alpha": fit.params.alpha, "g": fit.params.g,
               "theta": fit.params.theta, "rmse_in_sample": fit.report.rmse_in_sample}
    stem = out.with_suffix("")
    outputs = {
        str(out): json.dumps(io.fit_to_dict(fit), indent=1, sort_keys=True) + "\n",
        args.coef or f"{stem}_coefficients.csv": io.frame_to_csv(coef),
        args.sigma2 or f"{stem}_sigma2.csv": io.frame_to_csv(s2),
        f"{stem}_summary.json": json.dumps(summary, indent=1, sort_keys=True) + "\n",
    }
    io.commit_outputs(outputs)
    return EXIT_OK if fit.report.converged else EXIT_NOT_CONVERGED


def cmd_predict(args) -> int:
    cfg = io.load_config(args.config)
    fit = io.load_fit(args.fit)
    grid = _read_grid(args.grid, cfg, fit.spec)
    pred = predict_response(fit, grid)
    io.write_csv(io.prediction_frame(pred), args.out)
    return EXIT_OK


def _scenario_list(cfg: io.RunConfig, args):
    named = []
    for item in args.scenario or []:
        # NAME or NAME=R
        name, _, r = item.partition("=")
        named.append((name, float(r) if r else None))
    target = args.target
    entries = {s.name: s for s in cfg.scenarios}
    defaults = dict(DEFAULT_SCENARIOS)
    if not named:
        named = [(s.name, None) for s in cfg.scenarios] or [(k, None) for k, _ in DEFAULT_SCENARIOS]
    out = []
    for name, r in named:
        entry = entries.get(name)
        tgt = target or (entry.target if entry else None)
        if tgt is None:
            raise InputError(f"scenario {name}: no target covariate (use --target)")
        if r is None:
            r = entry.r if entry else defaults.get(name)
        if r is None:
            raise InputError(f"scenario {name}: no reduction factor given")
        out.append(ScenarioSpec(target=tgt, r=r, name=name,
                                seasons=tuple(cfg.seasons) if cfg.seasons else None,
                                max_altitude=cfg.max_altitude, exclude_forest=cfg.exclude_forest,
                                group_by=tuple(_csv_list(args.group_by) or cfg.group_by)))
    return out


def cmd_scenario(args) -> int:
    cfg = io.load_config(args.config)
    fit = io.load_fit(args.fit)
    grid = _read_grid(args.grid, cfg, fit.spec)
    baseline = predict_response(fit, grid)
    out_dir = Path(args.out_dir)
    outputs, rows = {}, []
    for spec in _scenario_list(cfg, args):
        res = run_scenario(fit, grid, spec, baseline)
        rows += [{"scenario": spec.name, "r": spec.r, **g.as_row()} for g in res.groups]
        dd = res.daily
        m, T = dd.delta.shape
        daily = pd.DataFrame({
            "pixel_id": np.repeat(np.asarray(dd.pixel_ids, dtype=object), T),
            "date": np.tile(np.datetime_as_string(dd.dates), m),
            "delta": dd.delta.reshape(-1), "in_scope": dd.scope.reshape(-1).astype(int)})
        outputs[str(out_dir / f"{spec.name}_daily.csv")] = io.frame_to_csv(daily[daily.in_scope == 1])
        outputs[str(out_dir / f"{spec.name}_pixels.csv")] = io.frame_to_csv(pd.DataFrame(pixel_map(dd, fit)))
    outputs[str(out_dir / "summary.csv")] = io.frame_to_csv(pd.DataFrame(rows))
    io.commit_outputs(outputs)
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = io.load_config(args.config)
    spec = _model(cfg, args)
    panel = _read_panel(args.panel, cfg, spec)
    holdout = panel.station_ids if args.holdout == "all" else _csv_list(args.holdout)
    report = losocv(panel, spec, _options(cfg, args), holdout)
    io.write_csv(pd.DataFrame(report.rows()), args.out)
    return EXIT_OK if not report.failed else EXIT_NOT_CONVERGED


def cmd_diagnose(args) -> int:
    cfg = io.load_config(args.config)
    fit = io.load_fit(args.fit)
    panel = _read_panel(args.panel, cfg, fit.spec)
    sm = smooth_at(panel, fit.spec, fit.params) if panel.T == fit.dates.size else None
    if sm is None:
        raise InputError("diagnose needs the panel the model was fitted on (date ranges differ)")
    res = studentized_residuals(panel, fit.spec, fit.params, sm)
    n, T = res.shape
    resid = pd.DataFrame({"station": np.repeat(np.asarray(panel.station_ids, dtype=object), T),
                          "date": np.tile(np.datetime_as_string(panel.dates), n),
                          "value": res.reshape(-1)})
    acfs = station_acf(res, args.max_lag, panel.station_ids)
    acf_rows = [{"station": s, "lag": k, "value": v} for s, a in acfs.items() for k, v in enumerate(a)]
    vg = st_variogram(panel, n_bins=args.bins, max_lag=args.lags - 1)
    vg_rows = [{"h_bin": h, "h_lo": vg.bin_edges[h], "h_hi": vg.bin_edges[h + 1], "u_lag": int(u),
                "gamma": vg.gamma[h, u], "count": int(vg.counts[h, u])}
               for h in range(vg.gamma.shape[0]) for u in range(vg.gamma.shape[1])]
    out_dir = Path(args.out_dir)
    io.commit_outputs({
        str(out_dir / "residuals.csv"): io.frame_to_csv(resid.dropna()),
        str(out_dir / "acf.csv"): io.frame_to_csv(pd.DataFrame(acf_rows, columns=["station", "lag", "value"])),
        str(out_dir / "variogram.csv"): io.frame_to_csv(pd.DataFrame(vg_rows)),
    })
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = io.load_config(args.config)
    params = dict(cfg.simulation)
    for key, val in (("seed", args.seed), ("n_sites", args.n_sites), ("T", args.T)):
        if val is not None:
            params[key] = val
    try:
        spec = SimSpec(**params)
    except TypeError as exc:
        raise InputError(f"bad simulation settings: {exc}") from exc
    res = simulate(spec)
    out = Path(args.out)
    outputs = {str(out): io.frame_to_csv(io.panel_frame(res.panel))}
    if args.latent:
        n, T = res.z.shape
        lat = pd.DataFrame({"station_id": np.repeat(np.asarray(res.panel.station_ids, dtype=object), T),
                            "date": np.tile(np.datetime_as_string(res.panel.dates), n),
                            "z": res.z.reshape(-1), "sigma2_eps": np.tile(res.sigma2_eps, n)})
        outputs[args.latent] = io.frame_to_csv(lat)
    if args.grid:
        sites, ids, dates, cov, meta = simulate_grid(spec, step=args.grid_step)
        outputs[args.grid] = io.frame_to_csv(io.grid_frame(PredictionGrid(ids, sites, dates, cov, meta)))
    io.commit_outputs(outputs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _em_flags(p):
    p.add_argument("--max-iter", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--seed", type=int)


def _model_flags(p):
    p.add_argument("--covariates", help="comma-separated model covariates")
    p.add_argument("--interactions", help="comma-separated covariates with season interactions")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hdgm", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the model to a panel CSV")
    p.add_argument("--panel", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="fit artifact (JSON)")
    p.add_argument("--coef", help="coefficient table CSV")
    p.add_argument("--sigma2", help="daily variance CSV")
    _model_flags(p)
    _em_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict on a grid CSV")
    p.add_argument("--fit", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("scenario", help="emission reduction scenarios")
    p.add_argument("--fit", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--config")
    p.add_argument("--target", help="covariate to reduce")
    p.add_argument("--scenario", action="append", help="NAME or NAME=R; defaults PRIA=0.26, Strong=0.50")
    p.add_argument("--group-by", help="comma-separated: overall, season, province, land_type")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("cv", help="leave-one-station-out cross-validation")
    p.add_argument("--panel", required=True)
    p.add_argument("--config")
    p.add_argument("--holdout", required=True, help="comma-separated station ids, or 'all'")
    p.add_argument("--out", required=True)
    _model_flags(p)
    _em_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("diagnose", help="residuals, ACF and variogram CSVs")
    p.add_argument("--fit", required=True)
    p.add_argument("--panel", required=True)
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-lag", type=int, default=30)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--lags", type=int, default=10)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="simulate a panel CSV")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--latent")
    p.add_argument("--grid", help="also write a prediction grid CSV")
    p.add_argument("--grid-step", type=float, default=0.5)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-sites", type=int)
    p.add_argument("--T", type=int)
    p.set_defaults(func=cmd_simulate)
    return ap


def _error_line(kind: str, message: str) -> str:
    return json.dumps({"error": kind, "message": " ".join(str(message).split())})


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HDGMError as exc:
        print(_error_line(exc.kind, exc), file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(_error_line("input", exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
