"""CSV panels and grids, run configuration and fit artifacts."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from .emfit import EMOptions, FitReport, FitResult, ModelParams
from .errors import InputError, SchemaError
from .geo import SiteSet
from .panel import ModelSpec, Moments, ObservationPanel
from .predict import GridPrediction, PredictionGrid

log = logging.getLogger(__name__)

ARTIFACT_SCHEMA = "hdgm-fit"
ARTIFACT_VERSION = "1.0"
KEY_COLUMNS = ("station_id", "date", "latitude", "longitude")
META_COLUMNS = ("altitude", "province", "land_type", "forest")
_TEXT_META = ("province", "land_type")


# ---------------------------------------------------------------------------
# atomic writes


def atomic_write_text(path, text: str):
    """Write ``text`` to a temporary sibling and rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def frame_to_csv(df: pd.DataFrame) -> str:
    # default float formatting is repr, the shortest round-trip form
    return df.to_csv(index=False, lineterminator="\n")


def write_csv(df: pd.DataFrame, path):
    atomic_write_text(path, frame_to_csv(df))


def commit_outputs(outputs: Mapping[str, str]):
    """Write several rendered files; nothing is written until all are rendered."""
    for path, text in outputs.items():
        atomic_write_text(path, text)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ScenarioEntry:
    name: str
    target: str
    r: float


@dataclass
class RunConfig:
    """Run settings loaded from a YAML file; every section is optional."""

    model: Optional[ModelSpec] = None
    columns: Dict[str, str] = field(default_factory=dict)
    rain_source: Optional[str] = None
    rain_threshold: float = 1.0
    rain_name: str = "rain"
    em: EMOptions = field(default_factory=EMOptions)
    scenarios: List[ScenarioEntry] = field(default_factory=list)
    max_altitude: Optional[float] = 640.0
    exclude_forest: bool = True
    seasons: Optional[List[str]] = None
    group_by: List[str] = field(default_factory=lambda: ["overall", "season"])
    output_dir: str = "out"
    simulation: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if not self.rain_threshold >= 0:
            raise InputError("rain threshold must be >= 0")
        for s in self.scenarios:
            if not 0.0 <= s.r <= 1.0:
                raise InputError(f"scenario {s.name}: r must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        d = dict(d or {})
        known = {"model", "columns", "rain", "em", "scenarios", "mask", "scenario_window",
                 "output_dir", "simulation"}
        extra = sorted(set(d) - known)
        if extra:
            raise SchemaError(f"unknown config sections: {', '.join(extra)}")
        model = d.get("model")
        rain = d.get("rain") or {}
        em = d.get("em") or {}
        mask = d.get("mask") or {}
        window = d.get("scenario_window") or {}
        try:
            return cls(
                model=None if model is None else ModelSpec.from_dict(model),
                columns={str(k): str(v) for k, v in (d.get("columns") or {}).items()},
                rain_source=rain.get("source"),
                rain_threshold=float(rain.get("threshold", 1.0)),
                rain_name=str(rain.get("name", "rain")),
                em=EMOptions(**{k: em[k] for k in ("max_iter", "tol", "seed") if k in em}),
                scenarios=[ScenarioEntry(str(s["name"]), str(s["target"]), float(s["r"]))
                           for s in d.get("scenarios") or []],
                max_altitude=mask.get("max_altitude", 640.0),
                exclude_forest=bool(mask.get("exclude_forest", True)),
                seasons=window.get("seasons"),
                group_by=list(window.get("group_by", ["overall", "season"])),
                output_dir=str(d.get("output_dir", "out")),
                simulation=dict(d.get("simulation") or {}),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed config: {exc}") from exc


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise SchemaError(f"config {path} is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise SchemaError("config must be a mapping")
    return RunConfig.from_dict(data or {})


# ---------------------------------------------------------------------------
# panel and grid CSVs


def _read_csv(path, mapping: Optional[Mapping[str, str]]) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype={"station_id": str, "pixel_id": str}, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if mapping:
        inverse = {v: k for k, v in mapping.items()}
        df = df.rename(columns=inverse)
    return df


def _require(df: pd.DataFrame, cols: Sequence[str], what: str):
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise SchemaError(f"{what} lacks required columns: {', '.join(missing)}")


def _index_rows(df: pd.DataFrame, id_col: str):
    """Unique ids, contiguous daily dates and row/column positions."""
    df[id_col] = df[id_col].astype(str)
    try:
        dates = pd.to_datetime(df["date"], format="ISO8601").values.astype("datetime64[D]")
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"unparseable date: {exc}") from exc
    dup = df.assign(_d=dates).duplicated([id_col, "_d"], keep=False)
    if dup.any():
        rows = (np.flatnonzero(dup.values) + 2).tolist()        # 1-based, after the header line
        raise InputError(f"duplicate ({id_col}, date) rows at lines {rows[:20]}")
    ids = tuple(pd.unique(df[id_col]))
    full = np.arange(dates.min(), dates.max() + np.timedelta64(1, "D"))
    row = pd.Index(ids).get_indexer(df[id_col])
    col = (dates - full[0]).astype(int)
    return ids, full, row, col


def _per_site(df: pd.DataFrame, id_col: str, ids) -> SiteSet:
    g = df.groupby(id_col, sort=False)[["latitude", "longitude"]]
    spread = g.max() - g.min()
    bad = spread.index[(spread.abs() > 1e-9).any(axis=1)].tolist()
    if bad:
        raise InputError(f"inconsistent coordinates for {id_col} {', '.join(map(str, bad[:10]))}")
    first = g.first().loc[list(ids)]
    return SiteSet(first["latitude"].values, first["longitude"].values, labels=ids)


def _metadata(df: pd.DataFrame, id_col: str, ids) -> Dict[str, np.ndarray]:
    meta = {}
    for c in META_COLUMNS:
        if c in df.columns:
            vals = df.groupby(id_col, sort=False)[c].first().loc[list(ids)].values
            meta[c] = vals.astype(str) if c in _TEXT_META else vals.astype(float)
    return meta


def _to_matrix(values, row, col, n, T) -> np.ndarray:
    out = np.full((n, T), np.nan)
    out[row, col] = np.asarray(values, dtype=float)
    return out


def derive_rain(precip: np.ndarray, threshold: float = 1.0) -> np.ndarray:
    """Rain indicator: 1 where precipitation strictly exceeds ``threshold``."""
    precip = np.asarray(precip, dtype=float)
    return np.where(np.isfinite(precip), (precip > threshold).astype(float), np.nan)


def _covariate_columns(df: pd.DataFrame, reserved: Sequence[str], required: Optional[Sequence[str]]):
    if required is not None:
        _require(df, required, "CSV")
        return list(required)
    skip = set(reserved) | set(META_COLUMNS)
    return [c for c in df.columns if c not in skip and pd.api.types.is_numeric_dtype(df[c])]


def read_panel_csv(path, covariates: Optional[Sequence[str]] = None,
                   mapping: Optional[Mapping[str, str]] = None, rain_source: Optional[str] = None,
                   rain_threshold: float = 1.0, rain_name: str = "rain") -> ObservationPanel:
    """Long-format panel CSV to an :class:`ObservationPanel`.

    Required columns are ``station_id, date, latitude, longitude, response``;
    ``covariates`` lists the model columns (all other numeric columns when
    None). With ``rain_source`` set, ``rain_name`` is derived from it.
    """
    df = _read_csv(path, mapping)
    _require(df, KEY_COLUMNS + ("response",), "panel CSV")
    wanted = None if covariates is None else [c for c in covariates if c != rain_name or rain_source is None]
    if rain_source is not None:
        _require(df, [rain_source], "panel CSV")
    cols = _covariate_columns(df, KEY_COLUMNS + ("response",), wanted)
    ids, dates, row, col = _index_rows(df, "station_id")
    sites = _per_site(df, "station_id", ids)
    n, T = len(ids), dates.size
    cov = {c: _to_matrix(df[c].values, row, col, n, T) for c in cols}
    if rain_source is not None:
        cov[rain_name] = derive_rain(_to_matrix(df[rain_source].values, row, col, n, T), rain_threshold)
    y = _to_matrix(pd.to_numeric(df["response"], errors="coerce").values, row, col, n, T)
    panel = ObservationPanel(ids, sites, dates, y, cov, _metadata(df, "station_id", ids))
    log.info("panel %s: %s", path, panel.missing_summary())
    return panel


def read_grid_csv(path, covariates: Optional[Sequence[str]] = None,
                  mapping: Optional[Mapping[str, str]] = None, rain_source: Optional[str] = None,
                  rain_threshold: float = 1.0, rain_name: str = "rain") -> PredictionGrid:
    """Grid CSV keyed by ``pixel_id`` (or ``station_id``) with covariates per date."""
    df = _read_csv(path, mapping)
    id_col = "pixel_id" if "pixel_id" in df.columns else "station_id"
    _require(df, (id_col, "date", "latitude", "longitude"), "grid CSV")
    wanted = None if covariates is None else [c for c in covariates if c != rain_name or rain_source is None]
    cols = _covariate_columns(df, (id_col, "date", "latitude", "longitude", "response", "pixel_id", "station_id"),
                              wanted)
    ids, dates, row, col = _index_rows(df, id_col)
    sites = _per_site(df, id_col, ids)
    m, T = len(ids), dates.size
    cov = {c: _to_matrix(df[c].values, row, col, m, T) for c in cols}
    if rain_source is not None:
        _require(df, [rain_source], "grid CSV")
        cov[rain_name] = derive_rain(_to_matrix(df[rain_source].values, row, col, m, T), rain_threshold)
    return PredictionGrid(ids, sites, dates, cov, _metadata(df, id_col, ids))


def _long_frame(id_name, ids, sites: SiteSet, dates, columns: Mapping[str, np.ndarray],
                metadata: Mapping[str, np.ndarray]) -> pd.DataFrame:
    n, T = len(ids), len(dates)
    out = {
        id_name: np.repeat(np.asarray(ids, dtype=object), T),
        "date": np.tile(np.datetime_as_string(np.asarray(dates, dtype="datetime64[D]")), n),
        "latitude": np.repeat(sites.lat, T),
        "longitude": np.repeat(sites.lon, T),
    }
    for k, v in columns.items():
        out[k] = np.asarray(v, dtype=float).reshape(n * T)
    for k, v in metadata.items():
        out[k] = np.repeat(np.asarray(v), T)
    return pd.DataFrame(out)


def panel_frame(panel: ObservationPanel) -> pd.DataFrame:
    cols = {"response": panel.y, **panel.covariates}
    return _long_frame("station_id", panel.station_ids, panel.sites, panel.dates, cols, panel.metadata)


def grid_frame(grid: PredictionGrid) -> pd.DataFrame:
    return _long_frame("pixel_id", grid.pixel_ids, grid.sites, grid.dates, grid.covariates, grid.metadata)


def prediction_frame(pred: GridPrediction) -> pd.DataFrame:
    cols = {"y_hat": pred.y_hat, "latent": pred.latent, "skipped": pred.skipped.astype(float)}
    df = _long_frame("pixel_id", pred.pixel_ids, pred.sites, pred.dates, cols, {})
    df["skipped"] = df["skipped"].astype(int)
    return df


# ---------------------------------------------------------------------------
# fit artifact


def _arr(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def fit_to_dict(fit: FitResult) -> dict:
    p, r = fit.params, fit.report
    return {
        "schema": ARTIFACT_SCHEMA,
        "schema_version": ARTIFACT_VERSION,
        "spec": fit.spec.to_dict(),
        "params": {"beta": _arr(p.beta), "alpha": float(p.alpha), "g": float(p.g), "theta": float(p.theta),
                   "sigma2_eps": _arr(p.sigma2_eps), "mu0": _arr(p.mu0), "sigma0": _arr(p.sigma0)},
        "moments": p.moments.to_dict(),
        "stations": {"ids": list(fit.station_ids), "latitude": _arr(fit.sites.lat),
                     "longitude": _arr(fit.sites.lon)},
        "dates": [str(d) for d in np.datetime_as_string(fit.dates)],
        "z_smooth": _arr(fit.z_smooth),
        "fitted": None if fit.fitted is None else _arr(fit.fitted),
        "report": {"n_iter": r.n_iter, "loglik_trace": [float(v) for v in r.loglik_trace],
                   "converged": bool(r.converged), "criterion": float(r.criterion),
                   "column_names": list(r.column_names), "beta_cov": _arr(r.beta_cov),
                   "rmse_in_sample": float(r.rmse_in_sample), "studentized": _arr(r.studentized)},
    }


def fit_from_dict(d: Mapping) -> FitResult:
    if d.get("schema") != ARTIFACT_SCHEMA:
        raise SchemaError("not a fit artifact")
    version = str(d.get("schema_version", ""))
    if version.split(".")[0] != ARTIFACT_VERSION.split(".")[0]:
        raise SchemaError(f"unsupported fit artifact version {version!r}")
    try:
        pr, rp, st = d["params"], d["report"], d["stations"]
        params = ModelParams(beta=np.array(pr["beta"]), alpha=float(pr["alpha"]), g=float(pr["g"]),
                             theta=float(pr["theta"]), sigma2_eps=np.array(pr["sigma2_eps"]),
                             mu0=np.array(pr["mu0"]), sigma0=np.array(pr["sigma0"]),
                             moments=Moments.from_dict(d["moments"]))
        report = FitReport(n_iter=int(rp["n_iter"]), loglik_trace=list(rp["loglik_trace"]),
                           converged=bool(rp["converged"]), criterion=float(rp["criterion"]),
                           column_names=tuple(rp["column_names"]), beta_cov=np.array(rp["beta_cov"]),
                           rmse_in_sample=float(rp["rmse_in_sample"]), studentized=np.array(rp["studentized"]))
        ids = tuple(st["ids"])
        return FitResult(spec=ModelSpec.from_dict(d["spec"]), params=params, report=report, station_ids=ids,
                         sites=SiteSet(st["latitude"], st["longitude"], labels=ids),
                         dates=np.array(d["dates"], dtype="datetime64[D]"), z_smooth=np.array(d["z_smooth"]),
                         fitted=None if d.get("fitted") is None else np.array(d["fitted"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed fit artifact: {exc}") from exc


def save_fit(fit: FitResult, path):
    # json writes floats with repr, which round-trips exactly
    atomic_write_text(path, json.dumps(fit_to_dict(fit), indent=1, sort_keys=True) + "\n")


def load_fit(path) -> FitResult:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read fit artifact {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"fit artifact {path} is not valid JSON: {exc}") from exc
    return fit_from_dict(data)
