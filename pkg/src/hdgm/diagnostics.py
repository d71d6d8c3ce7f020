"""Residual diagnostics, empirical variogram and leave-one-station-out CV."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .emfit import EMOptions, FitResult, ModelParams, em_fit, smooth_at
from .errors import HDGMError, InputError
from .geo import distance_matrix
from .panel import ModelSpec, ObservationPanel, design_tensor
from .predict import PredictionGrid, predict_response
from .statespace import SmootherOutput

log = logging.getLogger(__name__)


def residual_matrix(y_std: np.ndarray, X: np.ndarray, beta, alpha: float, sigma2_eps,
                    z_smooth: np.ndarray) -> np.ndarray:
    """``(y_t - X_t beta - alpha z_t^T) / sigma_t`` in standardized units; NaN stays NaN."""
    e = y_std - np.einsum("tnp,p->nt", X, np.asarray(beta)) - alpha * np.asarray(z_smooth).T
    return e / np.sqrt(np.asarray(sigma2_eps, dtype=float))[None, :]


def studentized_residuals(panel: ObservationPanel, spec: ModelSpec, params: ModelParams,
                          smoother: Optional[SmootherOutput] = None) -> np.ndarray:
    """Studentized residuals ``(n, T)`` of ``panel`` under ``params``.

    The smoother is rerun at ``params`` when no output is supplied.
    """
    y = params.moments.standardize_response(panel.y)
    X = design_tensor(panel.covariates, panel.dates, spec, params.moments)
    if smoother is None:
        smoother = smooth_at(panel, spec, params)
    return residual_matrix(y, X, params.beta, params.alpha, params.sigma2_eps, smoother.z_smooth)


def acf(series: np.ndarray, max_lag: int = 30) -> np.ndarray:
    """Sample autocorrelation with pairwise-complete handling of NaN.

    ``c_k`` is the mean of lagged products of deviations over complete pairs,
    normalized by the variance over all observed points, so ``acf[0] == 1``.
    """
    x = np.asarray(series, dtype=float)
    ok = np.isfinite(x)
    if ok.sum() < max_lag + 2:
        raise InputError(f"series has {int(ok.sum())} observed points, need {max_lag + 2}")
    d = np.where(ok, x - x[ok].mean(), 0.0)
    c0 = np.mean(d[ok] ** 2)
    if not c0 > 0:
        raise InputError("series has zero variance")
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    for k in range(1, max_lag + 1):
        pair = ok[k:] & ok[:-k]
        out[k] = np.sum(d[k:] * d[:-k] * pair) / pair.sum() / c0 if pair.any() else np.nan
    return out


def station_acf(residuals: np.ndarray, max_lag: int = 30, station_ids: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
    """ACF per station; stations with too short or constant series are skipped."""
    ids = station_ids if station_ids is not None else [str(i) for i in range(residuals.shape[0])]
    out = {}
    for sid, row in zip(ids, residuals):
        try:
            out[sid] = acf(row, max_lag)
        except InputError as exc:
            log.warning("station %s skipped in ACF: %s", sid, exc)
    return out


@dataclass
class Variogram:
    bin_edges: np.ndarray
    lags: np.ndarray
    gamma: np.ndarray       # (n_bins, n_lags), NaN where empty
    counts: np.ndarray      # (n_bins, n_lags)

    @property
    def bin_centres(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


def st_variogram(panel_or_y, sites=None, n_bins: int = 10, max_distance: Optional[float] = None,
                 max_lag: int = 9) -> Variogram:
    """Empirical spatiotemporal semivariogram.

    For time lag ``u`` and distance bin ``h`` the semivariance is half the
    mean squared difference ``y(s, t) - y(s', t + u)`` over station pairs in
    the bin. Both orderings of each pair are used for ``u > 0``; at ``u = 0``
    a station is never paired with itself.
    """
    if isinstance(panel_or_y, ObservationPanel):
        y, sites = panel_or_y.y, panel_or_y.sites
    else:
        y = np.asarray(panel_or_y, dtype=float)
    n, T = y.shape
    if n < 2:
        raise InputError("variogram needs at least two stations")
    D = distance_matrix(sites)
    if max_distance is None:
        max_distance = 0.5 * D.max()
    edges = np.linspace(0.0, max_distance, n_bins + 1)
    bins = np.digitize(D, edges[1:-1])
    bins = np.where(D <= max_distance, bins, -1)
    ok = np.isfinite(y)
    yz = np.where(ok, y, 0.0)
    gamma = np.zeros((n_bins, max_lag + 1))
    counts = np.zeros((n_bins, max_lag + 1), dtype=np.int64)
    for u in range(max_lag + 1):
        if u >= T:
            break
        a, b = yz[:, :T - u], yz[:, u:]
        oa, ob = ok[:, :T - u], ok[:, u:]
        # squared differences summed over time for every ordered pair (s, s')
        sq = ((a ** 2) @ ob.T + oa @ (b ** 2).T - 2.0 * a @ b.T)
        cnt = oa.astype(float) @ ob.T.astype(float)
        valid = bins >= 0
        if u == 0:
            valid &= ~np.eye(n, dtype=bool)
        for h in range(n_bins):
            sel = valid & (bins == h)
            c = cnt[sel].sum()
            counts[h, u] = int(round(c))
            gamma[h, u] = 0.5 * sq[sel].sum() / c if c > 0 else np.nan
    return Variogram(edges, np.arange(max_lag + 1), gamma, counts)


@dataclass
class CvReport:
    station_rmse: Dict[str, float]
    pooled_rmse: float
    in_sample_rmse: float
    predictions: Dict[str, np.ndarray]
    failed: Dict[str, str] = field(default_factory=dict)

    def rows(self) -> List[dict]:
        out = [{"station": k, "rmse": v} for k, v in self.station_rmse.items()]
        out += [{"station": k, "rmse": float("nan"), "error": v} for k, v in self.failed.items()]
        out.append({"station": "__pooled__", "rmse": self.pooled_rmse})
        out.append({"station": "__in_sample__", "rmse": self.in_sample_rmse})
        return out


def _fold(panel: ObservationPanel, spec: ModelSpec, options: EMOptions, sid: str):
    i = panel.station_ids.index(sid)
    train = panel.drop_stations([sid])
    if train.n < 2:
        raise InputError(f"fold {sid}: fewer than two training stations")
    fit = em_fit(train, spec, options)
    held = panel.select([i])
    pred = predict_response(fit, PredictionGrid.from_panel(held))
    return pred.y_hat[0]


def losocv(panel: ObservationPanel, spec: ModelSpec, options: Optional[EMOptions] = None,
           holdout_ids: Sequence[str] = (), full_fit: Optional[FitResult] = None) -> CvReport:
    """Leave-one-station-out CV over ``holdout_ids``.

    Each fold refits on the remaining stations (moments included), kriges to
    the held-out site and scores observed entries in original units.
    """
    holdout_ids = [str(h) for h in holdout_ids]
    if not holdout_ids:
        raise InputError("holdout list is empty")
    unknown = [h for h in holdout_ids if h not in panel.station_ids]
    if unknown:
        raise InputError(f"unknown holdout stations: {', '.join(unknown)}")
    opts = options or EMOptions()
    if full_fit is None:
        full_fit = em_fit(panel, spec, opts)
    per, preds, failed = {}, {}, {}
    sq_sum, count = 0.0, 0
    for sid in holdout_ids:
        try:
            y_hat = _fold(panel, spec, opts, sid)
        except HDGMError as exc:
            log.warning("fold %s failed: %s", sid, exc)
            failed[sid] = str(exc)
            continue
        y = panel.y[panel.station_ids.index(sid)]
        ok = np.isfinite(y) & np.isfinite(y_hat)
        err = (y - y_hat)[ok]
        per[sid] = float(np.sqrt(np.mean(err ** 2))) if err.size else float("nan")
        preds[sid] = y_hat
        sq_sum += float(np.sum(err ** 2))
        count += err.size
    pooled = float(np.sqrt(sq_sum / count)) if count else float("nan")
    return CvReport(per, pooled, full_fit.report.rmse_in_sample, preds, failed)
