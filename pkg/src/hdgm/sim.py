"""Forward sampling from the heteroskedastic HDGM."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import InputError
from .geo import CorrelationKernel, SiteSet, correlation_matrix, jittered_cholesky
from .panel import ObservationPanel

DEFAULT_BOX = (44.5, 46.5, 8.5, 11.5)       # lat_min, lat_max, lon_min, lon_max
PROVINCES = ("BG", "BS", "CO", "CR", "LC", "LO", "MN", "MI", "MB", "PV", "SO", "VA")
LAND_TYPES = ("urban", "rural", "hill", "plain")


@dataclass
class SimSpec:
    """Generator settings.

    ``skedastic`` is ``"constant"`` (``sigma2_level``), ``"sinusoidal"``
    (between ``sigma2_low`` and ``sigma2_high``, peaking on 1 January) or
    ``"explicit"`` with ``sigma2_values``. ``missing`` is ``"none"``,
    ``"uniform"`` (rate ``missing_rate``) or ``"blocks"``.
    """

    n_sites: int = 20
    T: int = 300
    beta: Sequence[float] = (1.0, -0.5, 0.3)
    alpha: float = 0.6
    g: float = 0.8
    theta: float = 1.5
    skedastic: str = "sinusoidal"
    sigma2_level: float = 1.0
    sigma2_low: float = 0.5
    sigma2_high: float = 1.5
    sigma2_values: Optional[Sequence[float]] = None
    missing: str = "none"
    missing_rate: float = 0.0
    block_count: int = 2
    block_length: int = 10
    box: Tuple[float, float, float, float] = DEFAULT_BOX
    sites: Optional[Sequence[Sequence[float]]] = None
    covariate_names: Optional[Sequence[str]] = None
    init: str = "stationary"
    start_date: str = "2016-01-01"
    seed: int = 0

    def __post_init__(self):
        self.beta = tuple(float(b) for b in self.beta)
        if len(self.beta) < 1:
            raise InputError("beta needs at least the intercept")
        if self.T < 1 or (self.sites is None and self.n_sites < 1):
            raise InputError("need at least one site and one time point")
        if not self.theta > 0:
            raise InputError("theta must be positive")
        if not abs(self.g) < 1:
            raise InputError("simulation requires |g| < 1")
        if self.covariate_names is not None and len(self.covariate_names) != len(self.beta) - 1:
            raise InputError("one covariate name per non-intercept coefficient")
        if self.missing not in ("none", "uniform", "blocks"):
            raise InputError(f"unknown missing mechanism {self.missing!r}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise InputError("missing_rate must lie in [0, 1)")
        if self.init not in ("stationary", "zero"):
            raise InputError(f"unknown init {self.init!r}")
        if np.any(self.sigma2_profile() <= 0):
            raise InputError("variance profile must be positive")

    @property
    def p(self) -> int:
        return len(self.beta)

    @property
    def names(self) -> Tuple[str, ...]:
        if self.covariate_names is not None:
            return tuple(self.covariate_names)
        return tuple(f"x{j}" for j in range(1, self.p))

    def dates(self) -> np.ndarray:
        return np.datetime64(self.start_date, "D") + np.arange(self.T)

    def sigma2_profile(self) -> np.ndarray:
        if self.skedastic == "constant":
            return np.full(self.T, float(self.sigma2_level))
        if self.skedastic == "sinusoidal":
            doy = (self.dates() - self.dates().astype("datetime64[Y]")).astype(int)
            mid = 0.5 * (self.sigma2_low + self.sigma2_high)
            amp = 0.5 * (self.sigma2_high - self.sigma2_low)
            return mid + amp * np.cos(2.0 * np.pi * doy / 365.25)
        if self.skedastic == "explicit":
            vals = np.asarray(self.sigma2_values, dtype=float)
            if vals.shape != (self.T,):
                raise InputError("explicit variance profile must have length T")
            return vals
        raise InputError(f"unknown skedastic profile {self.skedastic!r}")


@dataclass
class SimResult:
    panel: ObservationPanel
    z: np.ndarray           # (n, T) latent path
    z0: np.ndarray          # (n,)
    sigma2_eps: np.ndarray  # (T,)


def _layout(spec: SimSpec, rng) -> SiteSet:
    if spec.sites is not None:
        return SiteSet.from_pairs(spec.sites)
    lat0, lat1, lon0, lon1 = spec.box
    return SiteSet(rng.uniform(lat0, lat1, spec.n_sites), rng.uniform(lon0, lon1, spec.n_sites))


def simulate(spec: SimSpec) -> SimResult:
    """Draw one panel and its latent trajectory; deterministic given ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    sites = _layout(spec, rng)
    n, T = len(sites), spec.T
    R = correlation_matrix(sites, CorrelationKernel(spec.theta))
    L = jittered_cholesky(R, what="innovation correlation")
    X = rng.standard_normal((spec.p - 1, n, T))
    z0 = L @ rng.standard_normal(n) if spec.init == "stationary" else np.zeros(n)
    scale = np.sqrt(1.0 - spec.g ** 2)
    eta = scale * (L @ rng.standard_normal((n, T)))
    z = np.empty((n, T))
    prev = z0
    for t in range(T):
        prev = spec.g * prev + eta[:, t]
        z[:, t] = prev
    s2 = spec.sigma2_profile()
    eps = rng.standard_normal((n, T)) * np.sqrt(s2)[None, :]
    beta = np.asarray(spec.beta)
    y = beta[0] + np.einsum("jnt,j->nt", X, beta[1:]) + spec.alpha * z + eps
    y[_missing_mask(spec, rng, n, T)] = np.nan
    ids = tuple(f"S{i:03d}" for i in range(n))
    panel = ObservationPanel(station_ids=ids, sites=SiteSet(sites.lat, sites.lon, labels=ids),
                             dates=spec.dates(), y=y,
                             covariates={name: X[j] for j, name in enumerate(spec.names)})
    return SimResult(panel=panel, z=z, z0=z0, sigma2_eps=s2)


def _missing_mask(spec: SimSpec, rng, n, T) -> np.ndarray:
    miss = np.zeros((n, T), dtype=bool)
    if spec.missing == "uniform":
        miss = rng.random((n, T)) < spec.missing_rate
    elif spec.missing == "blocks":
        for i in range(n):
            for _ in range(spec.block_count):
                start = int(rng.integers(0, max(T - spec.block_length, 1)))
                miss[i, start:start + spec.block_length] = True
    # keep every time point and station observable at least once
    miss[:, miss.all(axis=0)] = False
    miss[miss.all(axis=1), :] = False
    return miss


def regular_lattice(box=DEFAULT_BOX, step: float = 0.1) -> SiteSet:
    """Pixel centres of a regular ``step x step`` degree lattice over ``box``."""
    lat0, lat1, lon0, lon1 = box
    lats = np.arange(lat0 + step / 2, lat1, step)
    lons = np.arange(lon0 + step / 2, lon1, step)
    la, lo = np.meshgrid(lats, lons, indexing="ij")
    return SiteSet(la.ravel(), lo.ravel())


def simulate_grid(spec: SimSpec, step: float = 0.5, seed: Optional[int] = None):
    """Covariates and metadata on a lattice over ``spec.box``, for prediction runs.

    Returns ``(sites, pixel_ids, dates, covariates, metadata)`` where
    covariates are ``(m, T)`` arrays drawn like the training covariates.
    """
    rng = np.random.default_rng(spec.seed + 7919 if seed is None else seed)
    sites = regular_lattice(spec.box, step)
    m = len(sites)
    cov = {name: rng.standard_normal((m, spec.T)) for name in spec.names}
    meta = {
        "altitude": np.round(rng.uniform(0.0, 1200.0, m), 1),
        "forest": (rng.random(m) < 0.2).astype(int),
        "province": rng.choice(PROVINCES, m),
        "land_type": rng.choice(LAND_TYPES, m),
    }
    ids = tuple(f"P{k:05d}" for k in range(m))
    return sites, ids, spec.dates(), cov, meta
