"""Panel data containers, model formula and standardization."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError, SchemaError
from .geo import SiteSet

INTERCEPT = "(Intercept)"
SEASONS = ("Winter", "Spring", "Summer", "Autumn")
# Dec-Feb winter, Mar-May spring, Jun-Aug summer, Sep-Nov autumn
_MONTH_TO_SEASON = {12: "Winter", 1: "Winter", 2: "Winter", 3: "Spring", 4: "Spring", 5: "Spring",
                    6: "Summer", 7: "Summer", 8: "Summer", 9: "Autumn", 10: "Autumn", 11: "Autumn"}


def season_of(dates) -> np.ndarray:
    """Meteorological season label for each date."""
    months = (np.asarray(dates, dtype="datetime64[M]").astype(int) % 12) + 1
    return np.array([_MONTH_TO_SEASON[m] for m in np.atleast_1d(months)], dtype=object)


@dataclass
class ObservationPanel:
    """Station x time panel of the response with its covariates.

    ``y`` and every covariate array are ``(n, T)``; NaN marks a missing
    response. ``metadata`` holds optional per-station columns such as
    altitude, province or land type.
    """

    station_ids: Tuple[str, ...]
    sites: SiteSet
    dates: np.ndarray
    y: np.ndarray
    covariates: Dict[str, np.ndarray]
    metadata: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.station_ids = tuple(str(s) for s in self.station_ids)
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.y = np.asarray(self.y, dtype=float)
        n, T = len(self.station_ids), self.dates.size
        if self.y.shape != (n, T):
            raise InputError(f"response must be ({n}, {T}), got {self.y.shape}")
        if len(self.sites) != n:
            raise InputError("one site per station required")
        if len(set(self.station_ids)) != n:
            raise InputError("station ids must be unique")
        cov = {}
        for name, arr in self.covariates.items():
            arr = np.asarray(arr, dtype=float)
            if arr.shape != (n, T):
                raise InputError(f"covariate {name!r} must be ({n}, {T}), got {arr.shape}")
            cov[name] = arr
        self.covariates = cov
        self.metadata = {k: np.asarray(v) for k, v in self.metadata.items()}

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return np.isfinite(self.y)

    def drop_stations(self, station_ids: Sequence[str]) -> "ObservationPanel":
        drop = set(str(s) for s in station_ids)
        keep = np.array([s not in drop for s in self.station_ids])
        return self.select(np.flatnonzero(keep))

    def select(self, index) -> "ObservationPanel":
        index = np.asarray(index)
        return ObservationPanel(
            station_ids=tuple(np.asarray(self.station_ids, dtype=object)[index]),
            sites=self.sites.subset(index),
            dates=self.dates,
            y=self.y[index],
            covariates={k: v[index] for k, v in self.covariates.items()},
            metadata={k: v[index] for k, v in self.metadata.items()},
        )

    def missing_summary(self) -> dict:
        m = self.mask
        return {"n_stations": self.n, "n_days": self.T, "observed": int(m.sum()),
                "missing_fraction": float(1.0 - m.mean())}


@dataclass(frozen=True)
class ModelSpec:
    """Regression formula: intercept, base covariates, season interactions.

    Interaction columns ``base:Level`` are the (standardized) base column
    times the indicator of the season level; Autumn is the baseline level.
    """

    covariates: Tuple[str, ...]
    interactions: Tuple[str, ...] = ()
    interaction_levels: Tuple[str, ...] = ("Winter", "Summer", "Spring")
    binary: Optional[Tuple[str, ...]] = None
    intercept: bool = True
    kernel: str = "exponential"

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "interactions", tuple(self.interactions))
        object.__setattr__(self, "interaction_levels", tuple(self.interaction_levels))
        if self.binary is not None:
            object.__setattr__(self, "binary", tuple(self.binary))
        if INTERCEPT in self.covariates:
            raise InputError("the intercept is controlled by the `intercept` flag")
        if len(set(self.covariates)) != len(self.covariates):
            raise InputError("duplicated covariate in model formula")
        for b in self.interactions:
            if b not in self.covariates:
                raise InputError(f"interaction base {b!r} is not a model covariate")
        for lvl in self.interaction_levels:
            if lvl not in SEASONS:
                raise InputError(f"unknown season level {lvl!r}")
        if self.kernel != "exponential":
            raise InputError(f"unsupported kernel family {self.kernel!r}")

    @property
    def column_names(self) -> Tuple[str, ...]:
        cols = [INTERCEPT] if self.intercept else []
        for c in self.covariates:
            cols.append(c)
            if c in self.interactions:
                cols.extend(f"{c}:{lvl}" for lvl in self.interaction_levels)
        return tuple(cols)

    @property
    def p(self) -> int:
        return len(self.column_names)

    def interaction_columns(self, base: str) -> Tuple[str, ...]:
        if base not in self.interactions:
            return ()
        return tuple(f"{base}:{lvl}" for lvl in self.interaction_levels)

    def to_dict(self) -> dict:
        return {"covariates": list(self.covariates), "interactions": list(self.interactions),
                "interaction_levels": list(self.interaction_levels),
                "binary": None if self.binary is None else list(self.binary),
                "intercept": self.intercept, "kernel": self.kernel}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(covariates=tuple(d["covariates"]), interactions=tuple(d.get("interactions", ())),
                   interaction_levels=tuple(d.get("interaction_levels", ("Winter", "Summer", "Spring"))),
                   binary=None if d.get("binary") is None else tuple(d["binary"]),
                   intercept=bool(d.get("intercept", True)), kernel=d.get("kernel", "exponential"))


@dataclass(frozen=True)
class Moments:
    """Global standardization moments.

    Only continuous covariates appear in ``means``/``stds``; binary columns
    are passed through unchanged.
    """

    y_mean: float
    y_std: float
    means: Dict[str, float]
    stds: Dict[str, float]

    def standardize_response(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def destandardize_response(self, y):
        return np.asarray(y, dtype=float) * self.y_std + self.y_mean

    def standardize_column(self, name, values):
        values = np.asarray(values, dtype=float)
        if name not in self.means:
            return values
        return (values - self.means[name]) / self.stds[name]

    def destandardize_column(self, name, values):
        values = np.asarray(values, dtype=float)
        if name not in self.means:
            return values
        return values * self.stds[name] + self.means[name]

    def to_dict(self) -> dict:
        return {"y_mean": self.y_mean, "y_std": self.y_std,
                "means": dict(self.means), "stds": dict(self.stds)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Moments":
        return cls(float(d["y_mean"]), float(d["y_std"]),
                   {k: float(v) for k, v in d["means"].items()},
                   {k: float(v) for k, v in d["stds"].items()})


def _is_binary(values: np.ndarray) -> bool:
    v = values[np.isfinite(values)]
    return v.size > 0 and bool(np.all((v == 0) | (v == 1)))


def fit_moments(panel: ObservationPanel, spec: ModelSpec) -> Moments:
    """Moments over the station-days where the response is observed."""
    obs = panel.mask
    if not obs.any():
        raise InputError("panel has no observed response")
    y = panel.y[obs]
    y_std = float(y.std())
    if not y_std > 0:
        raise InputError("response has zero variance")
    means, stds = {}, {}
    for c in spec.covariates:
        if c not in panel.covariates:
            raise SchemaError(f"unknown column {c!r} referenced by the model formula")
        vals = panel.covariates[c][obs]
        if not np.all(np.isfinite(vals)):
            raise InputError(f"covariate {c!r} has missing values where the response is observed")
        binary = c in spec.binary if spec.binary is not None else _is_binary(vals)
        if binary:
            continue
        sd = float(vals.std())
        if not sd > 0:
            raise InputError(f"continuous covariate {c!r} has zero variance")
        means[c], stds[c] = float(vals.mean()), sd
    return Moments(float(y.mean()), y_std, means, stds)


def design_tensor(covariates: Mapping[str, np.ndarray], dates, spec: ModelSpec,
                  moments: Moments) -> np.ndarray:
    """Standardized ``(T, m, p)`` design built from original-unit covariates.

    ``covariates`` maps each base name to an ``(m, T)`` array.
    """
    missing = [c for c in spec.covariates if c not in covariates]
    if missing:
        raise SchemaError(f"missing covariate columns: {', '.join(missing)}")
    dates = np.asarray(dates, dtype="datetime64[D]")
    T = dates.size
    first = np.asarray(covariates[spec.covariates[0]]) if spec.covariates else None
    m = first.shape[0] if first is not None else None
    if m is None:
        raise SchemaError("model has no covariates")
    seasons = season_of(dates)
    cols = []
    if spec.intercept:
        cols.append(np.ones((m, T)))
    for c in spec.covariates:
        z = moments.standardize_column(c, covariates[c])
        if z.shape != (m, T):
            raise SchemaError(f"covariate {c!r} has shape {z.shape}, expected {(m, T)}")
        cols.append(z)
        for lvl in (spec.interaction_levels if c in spec.interactions else ()):
            cols.append(z * (seasons == lvl)[None, :])
    return np.stack(cols, axis=-1).transpose(1, 0, 2)


def standardize(panel: ObservationPanel, spec: ModelSpec, moments: Optional[Moments] = None):
    """Standardized response ``(n, T)``, design ``(T, n, p)`` and the moments used."""
    if moments is None:
        moments = fit_moments(panel, spec)
    y = moments.standardize_response(panel.y)
    X = design_tensor(panel.covariates, panel.dates, spec, moments)
    return y, X, moments
