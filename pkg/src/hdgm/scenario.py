"""What-if emission reduction scenarios on prediction grids.

A scenario scales one base covariate by ``1 - r`` in original units over a
spatial mask and a time window. Because the model is linear in the
standardized covariates, the daily change is ``Delta_x' beta`` and the
latent term and intercept cancel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .emfit import FitResult
from .errors import InputError, SchemaError
from .panel import design_tensor, season_of
from .predict import GridPrediction, PredictionGrid, check_columns, date_alignment, predict_response

log = logging.getLogger(__name__)

GROUP_KEYS = ("overall", "province", "land_type", "season")


@dataclass(frozen=True)
class ScenarioSpec:
    """Reduction of ``target`` by the factor ``r`` over a masked window.

    ``seasons`` / ``start`` / ``end`` restrict the time window; the spatial
    mask keeps pixels below ``max_altitude`` that are not forested, plus
    optional province and land-type filters. Masks silently pass when the
    grid lacks the corresponding metadata column.
    """

    target: str
    r: float
    name: str = "scenario"
    seasons: Optional[Tuple[str, ...]] = None
    start: Optional[str] = None
    end: Optional[str] = None
    max_altitude: Optional[float] = 640.0
    exclude_forest: bool = True
    provinces: Optional[Tuple[str, ...]] = None
    land_types: Optional[Tuple[str, ...]] = None
    group_by: Tuple[str, ...] = ("overall",)

    def __post_init__(self):
        if not 0.0 <= float(self.r) <= 1.0:
            raise InputError(f"reduction factor must lie in [0, 1], got {self.r}")
        object.__setattr__(self, "r", float(self.r))
        for attr in ("seasons", "provinces", "land_types"):
            val = getattr(self, attr)
            if val is not None:
                object.__setattr__(self, attr, tuple(str(v) for v in val))
        gb = tuple(self.group_by)
        bad = [g for g in gb if g not in GROUP_KEYS]
        if bad:
            raise InputError(f"unknown aggregation keys: {', '.join(bad)}")
        object.__setattr__(self, "group_by", gb)

    def with_r(self, r: float) -> "ScenarioSpec":
        return ScenarioSpec(**{**self.__dict__, "r": r})

    def time_window(self, dates: np.ndarray) -> np.ndarray:
        dates = np.asarray(dates, dtype="datetime64[D]")
        keep = np.ones(dates.size, dtype=bool)
        if self.seasons is not None:
            keep &= np.isin(season_of(dates), self.seasons)
        if self.start is not None:
            keep &= dates >= np.datetime64(self.start, "D")
        if self.end is not None:
            keep &= dates <= np.datetime64(self.end, "D")
        return keep

    def spatial_mask(self, metadata: Dict[str, np.ndarray], m: int) -> np.ndarray:
        keep = np.ones(m, dtype=bool)
        if self.max_altitude is not None and "altitude" in metadata:
            keep &= np.asarray(metadata["altitude"], dtype=float) < self.max_altitude
        if self.exclude_forest and "forest" in metadata:
            keep &= ~np.asarray(metadata["forest"]).astype(float).astype(bool)
        if self.provinces is not None and "province" in metadata:
            keep &= np.isin(np.asarray(metadata["province"]).astype(str), self.provinces)
        if self.land_types is not None and "land_type" in metadata:
            keep &= np.isin(np.asarray(metadata["land_type"]).astype(str), self.land_types)
        return keep


def _scope(grid: PredictionGrid, spec: ScenarioSpec) -> np.ndarray:
    space = spec.spatial_mask(grid.metadata, grid.m)
    time = spec.time_window(grid.dates)
    if not space.any():
        raise InputError("spatial mask selects no pixel")
    if not time.any():
        raise InputError("time window selects no day")
    return space[:, None] & time[None, :]


def apply_reduction(grid: PredictionGrid, spec: ScenarioSpec, model_spec=None) -> PredictionGrid:
    """Counterfactual grid: target scaled by ``1 - r`` over the scenario scope.

    Interaction columns are rebuilt from the reduced base when the design is
    assembled, so season-specific sensitivities carry over.
    """
    if spec.target not in grid.covariates:
        raise SchemaError(f"unknown target covariate {spec.target!r}")
    if model_spec is not None:
        if spec.target not in model_spec.covariates:
            raise SchemaError(f"target {spec.target!r} is not a model covariate")
    scope = _scope(grid, spec)
    cov = dict(grid.covariates)
    cov[spec.target] = np.where(scope, cov[spec.target] * (1.0 - spec.r), cov[spec.target])
    return grid.with_covariates(cov)


@dataclass
class DailyDelta:
    """Per pixel-day change ``y_hat - y_hat^r`` (positive = lower concentrations)."""

    pixel_ids: Tuple[str, ...]
    dates: np.ndarray
    delta: np.ndarray           # (m, T) original units
    delta_std: np.ndarray       # (m, T) standardized units
    dx: np.ndarray              # (T, m, p) standardized covariate difference
    scope: np.ndarray           # (m, T) pixel-days inside mask, window and fitted period
    baseline: GridPrediction
    metadata: Dict[str, np.ndarray] = field(default_factory=dict)


def daily_delta(fit: FitResult, grid: PredictionGrid, spec: ScenarioSpec,
                baseline: Optional[GridPrediction] = None) -> DailyDelta:
    check_columns(fit, grid)
    if fit.params.moments is not None and spec.target not in fit.params.moments.means:
        raise SchemaError(f"target {spec.target!r} must be a standardized continuous covariate")
    p = fit.params
    reduced = apply_reduction(grid, spec, fit.spec)
    X = design_tensor(grid.covariates, grid.dates, fit.spec, p.moments)
    Xr = design_tensor(reduced.covariates, grid.dates, fit.spec, p.moments)
    dx = X - Xr
    d_std = np.einsum("tmp,p->mt", dx, p.beta)
    if baseline is None:
        baseline = predict_response(fit, grid)
    scope = _scope(grid, spec) & ~baseline.skipped
    d_std = np.where(baseline.skipped, np.nan, d_std)
    return DailyDelta(grid.pixel_ids, grid.dates, d_std * p.moments.y_std, d_std, dx, scope,
                      baseline, dict(grid.metadata))


@dataclass
class GroupSummary:
    key: str
    group: str
    n_pixels: int
    n_days: int
    y_bar: float
    mean_delta: float
    std: float

    @property
    def change(self) -> float:
        return -self.mean_delta

    @property
    def percent(self) -> float:
        return 100.0 * self.change / self.y_bar if self.y_bar != 0 else float("nan")

    def as_row(self) -> dict:
        return {"key": self.key, "group": self.group, "n_pixels": self.n_pixels, "n_days": self.n_days,
                "y_bar": self.y_bar, "change": self.change, "std": self.std, "percent": self.percent}


def group_variance(dx_bar: np.ndarray, beta_cov: np.ndarray, sigma2_days: np.ndarray, n_pixels: int) -> float:
    """Variance of the aggregated change in standardized units."""
    n_days = sigma2_days.size
    return float(dx_bar @ beta_cov @ dx_bar + 2.0 / (n_days ** 2 * n_pixels) * sigma2_days.sum())


def _summarize(key, label, sel, dd: DailyDelta, fit: FitResult, sigma2_grid) -> Optional[GroupSummary]:
    if not sel.any():
        log.info("empty group %s=%s skipped", key, label)
        return None
    pix = np.flatnonzero(sel.any(axis=1))
    days = np.flatnonzero(sel.any(axis=0))
    dx_bar = dd.dx.transpose(1, 0, 2)[sel].mean(axis=0)
    var = group_variance(dx_bar, fit.report.beta_cov, sigma2_grid[days], pix.size)
    y_std = fit.params.moments.y_std
    return GroupSummary(key, label, int(pix.size), int(days.size), float(dd.baseline.y_hat[sel].mean()),
                        float(dd.delta[sel].mean()), float(np.sqrt(var) * y_std))


def _group_labels(key: str, dd: DailyDelta):
    m, T = dd.delta.shape
    if key == "overall":
        return [("Overall", np.ones((m, T), bool))]
    if key == "season":
        s = season_of(dd.dates)
        return [(lvl, np.broadcast_to(s == lvl, (m, T))) for lvl in sorted(set(s))]
    if key not in dd.metadata:
        raise InputError(f"grid has no {key!r} metadata for grouping")
    col = np.asarray(dd.metadata[key]).astype(str)
    return [(lvl, np.broadcast_to((col == lvl)[:, None], (m, T))) for lvl in sorted(set(col))]


def sigma2_on_grid(fit: FitResult, dates) -> np.ndarray:
    idx = date_alignment(fit.dates, dates)
    out = np.full(idx.size, np.nan)
    out[idx >= 0] = fit.params.sigma2_eps[idx[idx >= 0]]
    return out


def aggregate(dd: DailyDelta, spec: ScenarioSpec, fit: FitResult) -> List[GroupSummary]:
    """Group means of the daily change and their standard deviations."""
    s2 = sigma2_on_grid(fit, dd.dates)
    rows = []
    for key in spec.group_by:
        for label, sel in _group_labels(key, dd):
            row = _summarize(key, label, sel & dd.scope, dd, fit, s2)
            if row is not None:
                rows.append(row)
    return rows


def pixel_map(dd: DailyDelta, fit: FitResult) -> List[dict]:
    """Per-pixel mean change and std over the scenario window (map inputs)."""
    s2 = sigma2_on_grid(fit, dd.dates)
    scope = dd.scope
    cnt = scope.sum(axis=1)
    has = cnt > 0
    c = np.where(has, cnt, 1)
    dx_bar = np.einsum("tmp,mt->mp", np.nan_to_num(dd.dx), scope) / c[:, None]
    var = (np.einsum("mp,pq,mq->m", dx_bar, fit.report.beta_cov, dx_bar)
           + 2.0 / c ** 2 * (scope * np.nan_to_num(s2)[None, :]).sum(axis=1))
    y_std = fit.params.moments.y_std
    mean = np.where(scope, dd.delta, 0.0).sum(axis=1) / c
    y_bar = np.where(scope, dd.baseline.y_hat, 0.0).sum(axis=1) / c
    return [{"pixel_id": pid, "n_days": int(cnt[i]), "y_bar": float(y_bar[i]),
             "change": float(-mean[i]), "std": float(np.sqrt(var[i]) * y_std)}
            for i, pid in enumerate(dd.pixel_ids) if has[i]]


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    daily: DailyDelta
    groups: List[GroupSummary]


def run_scenario(fit: FitResult, grid: PredictionGrid, spec: ScenarioSpec,
                 baseline: Optional[GridPrediction] = None) -> ScenarioResult:
    dd = daily_delta(fit, grid, spec, baseline)
    return ScenarioResult(spec, dd, aggregate(dd, spec, fit))
