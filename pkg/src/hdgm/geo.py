"""Spherical geometry and the spatial correlation kernel.

Distances are central angles in degrees of great-circle arc, so that the
kernel range ``theta`` is expressed in degrees as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import InputError, NumericalError

EARTH_RADIUS_KM = 6371.0088
JITTER = 1e-10


@dataclass(frozen=True)
class SiteSet:
    """Set of sites on the sphere.

    Parameters
    ----------
    lat, lon : array_like
        Coordinates in degrees.
    ids : array_like of int, optional
        Stable integer ids, defaults to ``0..n-1``.
    labels : sequence of str, optional
        Station codes or pixel ids.
    """

    lat: np.ndarray
    lon: np.ndarray
    ids: np.ndarray = field(default=None)
    labels: Optional[tuple] = None

    def __post_init__(self):
        lat = np.atleast_1d(np.asarray(self.lat, dtype=float))
        lon = np.atleast_1d(np.asarray(self.lon, dtype=float))
        if lat.shape != lon.shape or lat.ndim != 1:
            raise InputError("lat and lon must be 1-d arrays of equal length")
        if lat.size == 0:
            raise InputError("a site set needs at least one site")
        if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
            raise InputError("non-finite site coordinate")
        if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180):
            raise InputError("coordinates out of range: lat in [-90, 90], lon in [-180, 180]")
        ids = np.arange(lat.size) if self.ids is None else np.asarray(self.ids, dtype=int)
        if ids.shape != lat.shape or np.unique(ids).size != ids.size:
            raise InputError("site ids must be unique, one per site")
        labels = None if self.labels is None else tuple(str(s) for s in self.labels)
        if labels is not None and len(labels) != lat.size:
            raise InputError("one label per site required")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.lat.size

    @classmethod
    def from_pairs(cls, pairs: Sequence[Sequence[float]], labels=None) -> "SiteSet":
        arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1], labels=labels)

    def subset(self, index) -> "SiteSet":
        index = np.asarray(index)
        labels = None if self.labels is None else tuple(np.asarray(self.labels, dtype=object)[index])
        return SiteSet(self.lat[index], self.lon[index], self.ids[index], labels)


class KernelFamily(str, Enum):
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class CorrelationKernel:
    theta: float
    family: KernelFamily = KernelFamily.EXPONENTIAL

    def __post_init__(self):
        if not np.isfinite(self.theta) or self.theta <= 0:
            raise InputError(f"kernel range theta must be positive, got {self.theta}")
        object.__setattr__(self, "family", KernelFamily(self.family))

    def __call__(self, d):
        d = np.asarray(d, dtype=float)
        if self.family is KernelFamily.EXPONENTIAL:
            return np.exp(-d / self.theta)
        raise NotImplementedError(self.family)


def _central_angle(lat1, lon1, lat2, lon2):
    # Vincenty form of the great-circle formula, well conditioned at all distances
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dl = np.radians(lon2 - lon1)
    num = np.hypot(np.cos(p2) * np.sin(dl),
                   np.cos(p1) * np.sin(p2) - np.sin(p1) * np.cos(p2) * np.cos(dl))
    den = np.sin(p1) * np.sin(p2) + np.cos(p1) * np.cos(p2) * np.cos(dl)
    return np.degrees(np.arctan2(num, den))


def geodetic_distance(a, b) -> float:
    """Central angle between two ``(lat, lon)`` points, in degrees of arc."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != (2,) or b.shape != (2,):
        raise InputError("sites must be (lat, lon) pairs")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InputError("non-finite site coordinate")
    if a[0] == b[0] and a[1] == b[1]:
        return 0.0
    return float(_central_angle(a[0], a[1], b[0], b[1]))


def distance_matrix(sites_a: SiteSet, sites_b: Optional[SiteSet] = None) -> np.ndarray:
    """Pairwise central angles (degrees) between two site sets."""
    b = sites_a if sites_b is None else sites_b
    d = _central_angle(sites_a.lat[:, None], sites_a.lon[:, None], b.lat[None, :], b.lon[None, :])
    same = (sites_a.lat[:, None] == b.lat[None, :]) & (sites_a.lon[:, None] == b.lon[None, :])
    d = np.where(same, 0.0, d)
    if sites_b is None:
        d = 0.5 * (d + d.T)
    return d


def degrees_to_km(deg):
    return np.radians(deg) * EARTH_RADIUS_KM


def correlation_from_distance(d: np.ndarray, kernel: CorrelationKernel) -> np.ndarray:
    return kernel(d)


def correlation_matrix(sites: SiteSet, kernel: CorrelationKernel) -> np.ndarray:
    """Unit-diagonal correlation matrix of the sites (no jitter applied)."""
    return kernel(distance_matrix(sites))


def cross_correlation(new_sites: SiteSet, fitted_sites: SiteSet, kernel: CorrelationKernel) -> np.ndarray:
    """``m x n`` correlations between new sites and fitted sites."""
    return kernel(distance_matrix(new_sites, fitted_sites))


def jittered_cholesky(a: np.ndarray, jitter: float = JITTER, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of ``a + jitter * I``.

    Raises :class:`NumericalError` instead of regularizing further.
    """
    a = np.asarray(a, dtype=float)
    try:
        return np.linalg.cholesky(a + jitter * np.eye(a.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite after jitter {jitter:g}") from exc


def pairwise_extent(sites: SiteSet) -> tuple:
    """Smallest positive and largest pairwise distance among the sites."""
    d = distance_matrix(sites)
    iu = np.triu_indices(len(sites), k=1)
    off = d[iu]
    pos = off[off > 0]
    if pos.size == 0:
        raise InputError("all sites coincide; spatial range is unidentifiable")
    return float(pos.min()), float(pos.max())
