"""Kalman filter, RTS smoother and lag-one covariance smoother.

The measurement and transition equations are

    y_t = X_t beta + alpha z_t + eps_t,     eps_t ~ N(0, sigma2_t I)
    z_t = g z_{t-1} + eta_t,                 eta_t ~ N(0, Sigma_eta)
    z_0 ~ N(mu0, Sigma0)

Missing entries of ``y`` (NaN) are handled by dropping the unobserved rows of
the measurement equation at each time step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotrs

from .errors import InputError, NumericalError
from .geo import JITTER

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class StateSpaceInputs:
    """Everything the filter needs for one pass.

    ``y`` is ``(n, T)`` with NaN for missing values, ``X`` is ``(T, n, p)``.
    """

    y: np.ndarray
    X: np.ndarray
    beta: np.ndarray
    alpha: float
    g: float
    sigma_eta: np.ndarray
    sigma2_eps: np.ndarray
    mu0: np.ndarray
    sigma0: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 2:
            raise InputError("y must be an (n, T) matrix")
        n, T = y.shape
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 2:
            X = X[:, :, None]
        if X.shape[:2] != (T, n):
            raise InputError(f"X must be (T, n, p) = ({T}, {n}, p), got {X.shape}")
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if beta.shape != (X.shape[2],):
            raise InputError("beta length does not match the number of covariates")
        mask = np.isfinite(y) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if mask.shape != y.shape:
            raise InputError("missing mask dimensions do not match y")
        mask = mask & np.isfinite(y)
        s2 = np.broadcast_to(np.asarray(self.sigma2_eps, dtype=float), (T,)).copy()
        if np.any(~np.isfinite(s2)) or np.any(s2 <= 0):
            raise InputError("all measurement variances must be positive")
        sig_eta = np.asarray(self.sigma_eta, dtype=float)
        sig0 = np.asarray(self.sigma0, dtype=float)
        mu0 = np.asarray(self.mu0, dtype=float).reshape(-1)
        if sig_eta.shape != (n, n) or sig0.shape != (n, n) or mu0.shape != (n,):
            raise InputError("state dimensions inconsistent with the number of sites")
        for name, val in (("y", y), ("X", X), ("beta", beta), ("sigma_eta", sig_eta),
                          ("sigma2_eps", s2), ("mu0", mu0), ("sigma0", sig0)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "g", float(self.g))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]


@dataclass
class FilterOutput:
    """Filtered and one-step predicted moments; index 0 holds the prior of z_0."""

    z_pred: np.ndarray      # (T+1, n), z_pred[0] = mu0
    P_pred: np.ndarray      # (T+1, n, n)
    z_filt: np.ndarray      # (T+1, n)
    P_filt: np.ndarray      # (T+1, n, n)
    innovations: list       # per t: observed-row innovation vector
    innovation_covs: list   # per t: innovation covariance
    loglik: float


@dataclass
class SmootherOutput:
    z_smooth: np.ndarray    # (T, n): z_t^T for t = 1..T
    P_smooth: np.ndarray    # (T, n, n)
    z0_smooth: np.ndarray   # (n,)
    P0_smooth: np.ndarray   # (n, n)
    lag_one: np.ndarray     # (T, n, n): Cov(z_t, z_{t-1} | Y) for t = 1..T
    S11: np.ndarray
    S10: np.ndarray
    S00: np.ndarray
    loglik: float


def _sym(a):
    return 0.5 * (a + a.T)


def _factor(F, t):
    """LAPACK Cholesky of ``F + JITTER I`` (lower), bypassing wrapper overhead."""
    F = F.copy()
    F.flat[::F.shape[0] + 1] += JITTER
    c, info = dpotrf(F, lower=1, clean=1)
    if info != 0:
        raise NumericalError(f"innovation covariance not positive definite at t={t}")
    return c


def kalman_filter(inp: StateSpaceInputs) -> FilterOutput:
    """Forward pass with row selection for missing data.

    The log-likelihood is accumulated by prediction-error decomposition.
    """
    n, T = inp.n, inp.T
    a, g = inp.alpha, inp.g
    z_pred = np.empty((T + 1, n))
    P_pred = np.empty((T + 1, n, n))
    z_filt = np.empty((T + 1, n))
    P_filt = np.empty((T + 1, n, n))
    z_pred[0] = z_filt[0] = inp.mu0
    P_pred[0] = P_filt[0] = _sym(inp.sigma0)
    innovations, covs = [], []
    loglik = 0.0
    mean = np.einsum("tnp,p->tn", inp.X, inp.beta)

    resid = inp.y - mean.T                                     # (n, T), NaN where missing
    rows = [np.flatnonzero(inp.mask[:, t]) for t in range(T)]
    eta = inp.sigma_eta
    for t in range(1, T + 1):
        zp = g * z_filt[t - 1]
        Pp = g * g * P_filt[t - 1] + eta                       # symmetric by construction
        z_pred[t], P_pred[t] = zp, Pp
        obs = rows[t - 1]
        m = obs.size
        if m == 0:
            z_filt[t], P_filt[t] = zp, Pp
            innovations.append(np.empty(0))
            covs.append(np.empty((0, 0)))
            continue
        if m == n:
            v = resid[:, t - 1] - a * zp
            PHt = a * Pp
            F = a * PHt
        else:
            v = resid[obs, t - 1] - a * zp[obs]
            PHt = a * Pp[:, obs]                               # P H'
            F = a * PHt[obs, :]
        F.flat[::m + 1] += inp.sigma2_eps[t - 1] + JITTER
        L, info = dpotrf(F, lower=1, clean=1)
        if info != 0:
            raise NumericalError(f"innovation covariance not positive definite at t={t}")
        # one solve for the innovation and the gain: F^-1 [v, H P]
        rhs = np.empty((m, n + 1))
        rhs[:, 0] = v
        rhs[:, 1:] = PHt.T
        sol = dpotrs(L, rhs, lower=1)[0]
        loglik -= 0.5 * (m * LOG_2PI + 2.0 * np.log(L.diagonal()).sum() + v @ sol[:, 0])
        K = sol[:, 1:].T                                       # P H' F^-1
        z_filt[t] = zp + K @ v
        Pf = Pp - K @ PHt.T
        P_filt[t] = 0.5 * (Pf + Pf.T)
        F.flat[::m + 1] -= JITTER
        innovations.append(v)
        covs.append(F)

    return FilterOutput(z_pred, P_pred, z_filt, P_filt, innovations, covs, float(loglik))


def kalman_smooth(inp: StateSpaceInputs, filtered: Optional[FilterOutput] = None) -> SmootherOutput:
    """RTS smoother plus lag-one covariances and the EM second moments."""
    f = kalman_filter(inp) if filtered is None else filtered
    n, T, g = inp.n, inp.T, inp.g
    zs = np.empty((T + 1, n))
    Ps = np.empty((T + 1, n, n))
    zs[T], Ps[T] = f.z_filt[T], f.P_filt[T]
    # all gains at once: J_{t-1} = P_{t-1|t-1} g P_{t|t-1}^{-1}
    Pp = f.P_pred[1:] + JITTER * np.eye(n)
    try:
        np.linalg.cholesky(Pp)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("predicted state covariance not positive definite") from exc
    gains = np.swapaxes(np.linalg.solve(Pp, g * f.P_filt[:-1]), 1, 2)
    for t in range(T, 0, -1):
        J = gains[t - 1]
        zs[t - 1] = f.z_filt[t - 1] + J @ (zs[t] - f.z_pred[t])
        Ps[t - 1] = f.P_filt[t - 1] + J @ (Ps[t] - f.P_pred[t]) @ J.T
    Ps = 0.5 * (Ps + np.swapaxes(Ps, 1, 2))
    lag = Ps[1:] @ np.swapaxes(gains, 1, 2)

    cur, prev = zs[1:], zs[:-1]
    S11 = cur.T @ cur + Ps[1:].sum(axis=0)
    S00 = prev.T @ prev + Ps[:-1].sum(axis=0)
    S10 = cur.T @ prev + lag.sum(axis=0)
    return SmootherOutput(
        z_smooth=zs[1:], P_smooth=Ps[1:], z0_smooth=zs[0], P0_smooth=Ps[0], lag_one=lag,
        S11=_sym(S11), S10=S10, S00=_sym(S00), loglik=f.loglik,
    )


def observed_loglik(inp: StateSpaceInputs) -> float:
    """Gaussian log-density of the observed entries of ``y``."""
    return kalman_filter(inp).loglik


def gls_information(inp: StateSpaceInputs) -> np.ndarray:
    """``X' V^-1 X`` for the marginal covariance ``V`` of the observed responses.

    Each regressor column is passed through the filter recursions as if it
    were data (with a zero initial state mean); the prediction-error
    decomposition then yields the GLS information of ``beta`` accounting for
    the latent field as well as the measurement noise.
    """
    n, T = inp.n, inp.T
    k = inp.X.shape[2]
    a, g = inp.alpha, inp.g
    A = np.zeros((n, k))
    P = _sym(inp.sigma0)
    info = np.zeros((k, k))
    for t in range(1, T + 1):
        A = g * A
        P = _sym(g * g * P + inp.sigma_eta)
        obs = np.flatnonzero(inp.mask[:, t - 1])
        if obs.size == 0:
            continue
        V = inp.X[t - 1, obs, :] - a * A[obs]
        PHt = a * P[:, obs]
        F = _sym(a * PHt[obs, :])
        F.flat[::obs.size + 1] += inp.sigma2_eps[t - 1]
        L = _factor(F, t)
        sol, _ = dpotrs(L, np.column_stack([V, PHt.T]), lower=1)
        info += V.T @ sol[:, :k]
        K = sol[:, k:].T
        A = A + K @ V
        P = _sym(P - K @ PHt.T)
    return 0.5 * (info + info.T)
