"""Response prediction at new sites: regression term plus kriged latent state."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_solve

from .emfit import FitResult
from .errors import SchemaError
from .geo import CorrelationKernel, SiteSet, correlation_matrix, cross_correlation, jittered_cholesky
from .panel import design_tensor

log = logging.getLogger(__name__)


@dataclass
class PredictionGrid:
    """Pixels (or arbitrary sites) with covariates over time.

    Covariate arrays are ``(m, T)`` in original units; NaN marks a
    pixel-day without covariates, which is skipped at prediction time.
    """

    pixel_ids: Tuple[str, ...]
    sites: SiteSet
    dates: np.ndarray
    covariates: Dict[str, np.ndarray]
    metadata: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.pixel_ids = tuple(str(p) for p in self.pixel_ids)
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        m, T = len(self.pixel_ids), self.dates.size
        if len(self.sites) != m:
            raise SchemaError("one site per pixel required")
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()}
        for k, v in self.covariates.items():
            if v.shape != (m, T):
                raise SchemaError(f"grid covariate {k!r} must be ({m}, {T}), got {v.shape}")
        self.metadata = {k: np.asarray(v) for k, v in self.metadata.items()}

    @property
    def m(self) -> int:
        return len(self.pixel_ids)

    @classmethod
    def from_panel(cls, panel) -> "PredictionGrid":
        return cls(panel.station_ids, panel.sites, panel.dates, dict(panel.covariates), dict(panel.metadata))

    def with_covariates(self, covariates) -> "PredictionGrid":
        return PredictionGrid(self.pixel_ids, self.sites, self.dates, covariates, self.metadata)


@dataclass
class GridPrediction:
    pixel_ids: Tuple[str, ...]
    sites: SiteSet
    dates: np.ndarray
    y_hat: np.ndarray             # (m, T) original units, NaN where skipped
    y_hat_std: np.ndarray         # (m, T) standardized units
    latent: np.ndarray            # (m, T) kriged latent state
    skipped: np.ndarray           # (m, T) bool
    metadata: Dict[str, np.ndarray] = field(default_factory=dict)


def kriging_weights(fitted_sites: SiteSet, new_sites: SiteSet, kernel: CorrelationKernel) -> np.ndarray:
    """Simple-kriging weights ``r0' R^-1`` as an ``(m, n)`` matrix."""
    R = correlation_matrix(fitted_sites, kernel)
    c = jittered_cholesky(R, what="station correlation")
    r0 = cross_correlation(new_sites, fitted_sites, kernel)
    return cho_solve((c, True), r0.T).T


def krige_latent(z_smooth: np.ndarray, fitted_sites: SiteSet, new_sites: SiteSet,
                 kernel: CorrelationKernel) -> np.ndarray:
    """Kriged latent states ``(T, m)`` from smoothed station states ``(T, n)``."""
    W = kriging_weights(fitted_sites, new_sites, kernel)
    return np.asarray(z_smooth) @ W.T


def check_columns(fit: FitResult, grid: PredictionGrid):
    missing = [c for c in fit.spec.covariates if c not in grid.covariates]
    if missing:
        raise SchemaError(f"grid lacks model covariates: {', '.join(missing)}")


def date_alignment(fit_dates: np.ndarray, dates: np.ndarray) -> np.ndarray:
    """Index of each date in ``fit_dates`` (-1 when outside the fitted window)."""
    fit_dates = np.asarray(fit_dates, dtype="datetime64[D]")
    pos = np.searchsorted(fit_dates, dates)
    pos = np.clip(pos, 0, fit_dates.size - 1)
    return np.where(fit_dates[pos] == dates, pos, -1)


def predict_response(fit: FitResult, grid: PredictionGrid, times: Optional[Sequence] = None) -> GridPrediction:
    """Predicted response at grid pixels, back-transformed to original units.

    Pixel-days with missing covariates, and days outside the fitted window
    (no smoothed latent state there), are skipped and flagged.
    """
    check_columns(fit, grid)
    if times is not None:
        keep = np.isin(grid.dates, np.asarray(times, dtype="datetime64[D]"))
        grid = PredictionGrid(grid.pixel_ids, grid.sites, grid.dates[keep],
                              {k: v[:, keep] for k, v in grid.covariates.items()}, grid.metadata)
    p = fit.params
    X = design_tensor(grid.covariates, grid.dates, fit.spec, p.moments)       # (T, m, p)
    idx = date_alignment(fit.dates, grid.dates)
    kernel = CorrelationKernel(p.theta, fit.spec.kernel)
    latent = np.zeros((grid.m, grid.dates.size))
    inside = idx >= 0
    if inside.any():
        latent[:, inside] = krige_latent(fit.z_smooth[idx[inside]], fit.sites, grid.sites, kernel).T
    y_std = np.einsum("tmp,p->mt", X, p.beta) + p.alpha * latent
    skipped = ~np.isfinite(y_std) | ~inside[None, :]
    if skipped.any():
        log.warning("%d pixel-days skipped (missing covariates or outside the fitted window)",
                    int(skipped.sum()))
    y_std = np.where(skipped, np.nan, y_std)
    return GridPrediction(grid.pixel_ids, grid.sites, grid.dates, p.moments.destandardize_response(y_std),
                          y_std, np.where(skipped, np.nan, latent), skipped, dict(grid.metadata))
