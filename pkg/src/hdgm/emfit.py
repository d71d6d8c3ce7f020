"""Maximum-likelihood fit of the heteroskedastic HDGM by EM.

The latent innovation covariance is ``Sigma_eta = (1 - g**2) R(theta)`` with
``R`` the unit-diagonal exponential correlation matrix, so that the latent
field has unit marginal variance in steady state. All estimation happens in
standardized space; the moments needed to go back are kept in the params.

Q-terms below are expectations of ``-2 * loglik`` and are therefore
minimized.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy import optimize, stats
from scipy.linalg import cho_solve
from scipy.linalg.lapack import dpotrf, dpotrs

from .errors import InputError, LikelihoodDecreaseError, NumericalError
from .geo import JITTER, SiteSet, distance_matrix, jittered_cholesky, pairwise_extent
from .panel import ModelSpec, Moments, ObservationPanel, standardize
from .statespace import SmootherOutput, StateSpaceInputs, gls_information, kalman_smooth

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-8


@dataclass
class ModelParams:
    beta: np.ndarray
    alpha: float
    g: float
    theta: float
    sigma2_eps: np.ndarray
    mu0: np.ndarray
    sigma0: np.ndarray
    moments: Optional[Moments] = None

    def innovation_cov(self, dist: np.ndarray) -> np.ndarray:
        return (1.0 - self.g ** 2) * np.exp(-dist / self.theta)

    def copy(self) -> "ModelParams":
        return replace(self, beta=self.beta.copy(), sigma2_eps=self.sigma2_eps.copy(),
                       mu0=self.mu0.copy(), sigma0=self.sigma0.copy())


@dataclass
class EMOptions:
    max_iter: int = 400
    tol: float = 1e-6
    seed: int = 0
    slack: float = 1e-8
    strict: bool = True


@dataclass
class FitReport:
    n_iter: int
    loglik_trace: List[float]
    converged: bool
    criterion: float
    column_names: tuple
    beta_cov: np.ndarray
    rmse_in_sample: float
    studentized: np.ndarray

    @property
    def beta_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.beta_cov))


@dataclass
class FitResult:
    """Everything a fit produces; ``z_smooth`` is ``(T, n)`` in standardized units."""

    spec: ModelSpec
    params: ModelParams
    report: FitReport
    station_ids: tuple
    sites: SiteSet
    dates: np.ndarray
    z_smooth: np.ndarray
    fitted: np.ndarray = field(repr=False, default=None)   # (n, T) original units

    def coefficient_table(self) -> list:
        return coefficient_table(self.spec, self.params, self.report.beta_cov)


# ---------------------------------------------------------------------------
# E-step helpers and Q-terms


def _inputs(y, X, mask, p: ModelParams, dist) -> StateSpaceInputs:
    return StateSpaceInputs(y=y, X=X, beta=p.beta, alpha=p.alpha, g=p.g,
                            sigma_eta=p.innovation_cov(dist), sigma2_eps=p.sigma2_eps,
                            mu0=p.mu0, sigma0=p.sigma0, mask=mask)


def _residual_terms(y, X, mask, beta, alpha, sm: SmootherOutput):
    """Conditional residual mean (n, T) with zeros at missing cells, and diag(P) (n, T)."""
    e = y - np.einsum("tnp,p->nt", X, beta) - alpha * sm.z_smooth.T
    e = np.where(mask, e, 0.0)
    dP = np.diagonal(sm.P_smooth, axis1=1, axis2=2).T
    return e, dP


def q1_term(y, X, mask, beta, alpha, sigma2_eps, sm: SmootherOutput) -> float:
    e, dP = _residual_terms(y, X, mask, beta, alpha, sm)
    n_t = mask.sum(axis=0)
    tr_omega = (e ** 2 + alpha ** 2 * np.where(mask, dP, 0.0)).sum(axis=0)
    s2 = np.asarray(sigma2_eps, dtype=float)
    return float(np.sum(n_t * np.log(s2) + tr_omega / s2))


def q0_term(mu0, sigma0, sm: SmootherOutput) -> float:
    c = jittered_cholesky(sigma0, what="initial covariance")
    d = sm.z0_smooth - mu0
    M = np.outer(d, d) + sm.P0_smooth
    return float(2.0 * np.log(np.diag(c)).sum() + np.trace(cho_solve((c, True), M, check_finite=False)))


def q2_term(g: float, theta: float, dist: np.ndarray, T: int, sm: SmootherOutput) -> float:
    n = dist.shape[0]
    R = np.exp(-dist / theta)
    c = jittered_cholesky(R, what="innovation correlation")
    A = sm.S11 - 2.0 * g * sm.S10 + g * g * sm.S00
    return float(T * (n * math.log(1.0 - g * g) + 2.0 * np.log(np.diag(c)).sum())
                 + np.trace(cho_solve((c, True), A, check_finite=False)) / (1.0 - g * g))


# ---------------------------------------------------------------------------
# M-step updates


def update_sigma2(y, X, mask, beta, alpha, sm: SmootherOutput, previous) -> np.ndarray:
    """Per-day variance: trace of Omega_t over the observed rows, divided by n_t."""
    e, dP = _residual_terms(y, X, mask, beta, alpha, sm)
    n_t = mask.sum(axis=0)
    tr_omega = (e ** 2 + alpha ** 2 * np.where(mask, dP, 0.0)).sum(axis=0)
    out = np.array(previous, dtype=float, copy=True)
    has = n_t > 0
    out[has] = tr_omega[has] / n_t[has]
    return np.maximum(out, VARIANCE_FLOOR)


def _weights(mask, sigma2_eps):
    return mask.T / np.asarray(sigma2_eps)[:, None]          # (T, n)


def gls_precision(X, mask, sigma2_eps) -> np.ndarray:
    """sum_t X_t' Sigma_eps,t^-1 X_t over observed rows."""
    W = _weights(mask, sigma2_eps)
    return np.einsum("tnp,tn,tnq->pq", X, W, X)


def update_beta(y, X, mask, alpha, sigma2_eps, sm: SmootherOutput) -> np.ndarray:
    W = _weights(mask, sigma2_eps)
    target = np.where(mask, y - alpha * sm.z_smooth.T, 0.0).T    # (T, n)
    A = gls_precision(X, mask, sigma2_eps)
    b = np.einsum("tnp,tn,tn->p", X, W, target)
    return _solve_design(A, b)


def update_alpha(y, X, mask, beta, sigma2_eps, sm: SmootherOutput) -> float:
    W = _weights(mask, sigma2_eps).T                              # (n, T)
    z = sm.z_smooth.T
    resid = np.where(mask, y - np.einsum("tnp,p->nt", X, beta), 0.0)
    dP = np.diagonal(sm.P_smooth, axis1=1, axis2=2).T
    num = np.sum(W * z * resid)
    den = np.sum(W * (z * z + dP))
    return float(num / den)


def update_g(theta: float, dist: np.ndarray, T: int, sm: SmootherOutput, current: float) -> float:
    """Exact minimizer of Q2 over g for fixed theta.

    With ``a, b, c = tr(R^-1 S11), tr(R^-1 S10), tr(R^-1 S00)`` the stationary
    points solve ``T n g^3 - b g^2 + (a + c - T n) g - b = 0``; the admissible
    root in (-1, 1) with the smallest Q2 is returned.
    """
    n = dist.shape[0]
    c_ = jittered_cholesky(np.exp(-dist / theta), what="innovation correlation")
    a = np.trace(cho_solve((c_, True), sm.S11, check_finite=False))
    b = np.trace(cho_solve((c_, True), sm.S10, check_finite=False))
    c = np.trace(cho_solve((c_, True), sm.S00, check_finite=False))
    tn = T * n
    roots = np.roots([tn, -b, a + c - tn, -b])
    real = roots[np.abs(roots.imag) < 1e-9].real
    cand = [r for r in real if -1.0 < r < 1.0]
    if not cand:
        return current

    def f(g):
        return tn * math.log(1.0 - g * g) + (a - 2.0 * b * g + c * g * g) / (1.0 - g * g)

    return float(min(cand, key=f))


def theta_bounds(sites: SiteSet) -> tuple:
    d_min, d_max = pairwise_extent(sites)
    return d_min / 100.0, 10.0 * d_max


def theta_objective(theta: float, g: float, dist: np.ndarray, T: int, S11, S10, S00) -> float:
    """``T log|R| + tr(R^-1 (S11 - 2g S10 + g^2 S00)) / (1 - g^2)``."""
    R = np.exp(-dist / theta)
    R.flat[::R.shape[0] + 1] += JITTER
    c, info = dpotrf(R, lower=1, clean=1)
    if info != 0:
        raise NumericalError(f"innovation correlation is not positive definite at theta={theta:g}")
    A = S11 - 2.0 * g * S10 + g * g * S00
    quad = np.trace(dpotrs(c, A, lower=1)[0])
    return float(2.0 * T * np.log(np.diag(c)).sum() + quad / (1.0 - g * g))


def theta_objective_grid(thetas: np.ndarray, g: float, dist: np.ndarray, T: int, S11, S10, S00) -> np.ndarray:
    """:func:`theta_objective` at many ranges with one batched factorization."""
    R = np.exp(-dist[None] / np.asarray(thetas, dtype=float)[:, None, None])
    R += JITTER * np.eye(dist.shape[0])
    try:
        c = np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation correlation is not positive definite on the range grid") from exc
    A = S11 - 2.0 * g * S10 + g * g * S00
    quad = np.trace(np.linalg.solve(R, np.broadcast_to(A, R.shape)), axis1=1, axis2=2)
    logdet = 2.0 * np.log(np.diagonal(c, axis1=1, axis2=2)).sum(axis=1)
    return T * logdet + quad / (1.0 - g * g)


def theta_update(S11, S10, S00, g: float, sites: SiteSet, T: int,
                 kernel_family: str = "exponential", current: Optional[float] = None,
                 n_grid: int = 24, tol: float = 1e-7) -> float:
    """Range update: minimize the theta-dependent part of Q2 over ``log theta``.

    A coarse log-grid brackets the best cell, then bounded Brent search
    refines it. When ``current`` is given the result is never worse than it.
    """
    if kernel_family != "exponential":
        raise InputError(f"unsupported kernel family {kernel_family!r}")
    lo, hi = theta_bounds(sites)
    dist = distance_matrix(sites)

    def f(log_theta):
        return theta_objective(math.exp(log_theta), g, dist, T, S11, S10, S00)

    grid = np.linspace(math.log(lo), math.log(hi), n_grid)
    vals = theta_objective_grid(np.exp(grid), g, dist, T, S11, S10, S00)
    k = int(np.argmin(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, n_grid - 1)]
    res = optimize.minimize_scalar(f, bounds=(a, b), method="bounded", options={"xatol": tol})
    x, fx = (res.x, res.fun) if res.fun <= vals[k] else (grid[k], vals[k])
    if current is not None:
        fc = f(math.log(current))
        if fc < fx:
            return float(current)
    return float(math.exp(x))


# ---------------------------------------------------------------------------
# Fixed-effects covariance


def _solve_design(A, b, names=None):
    try:
        c = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise InputError(f"singular design; collinear columns: {', '.join(collinear_columns(A, names))}")
    return cho_solve((c, True), b, check_finite=False)


def collinear_columns(A, names=None) -> list:
    w, V = np.linalg.eigh(A)
    tol = max(w.max(), 1.0) * 1e-10 * A.shape[0]
    null = V[:, w <= tol]
    involved = np.flatnonzero(np.abs(null).max(axis=1) > 1e-6) if null.size else np.arange(0)
    names = list(names) if names is not None else [f"x{j}" for j in range(A.shape[0])]
    return [names[j] for j in involved]


def beta_covariance(X, mask, sigma2_eps, names=None) -> np.ndarray:
    """Plug-in GLS covariance ``[sum_t X_t' Sigma_eps,t^-1 X_t]^-1`` over observed rows."""
    X = np.asarray(X, dtype=float)
    A = gls_precision(X, np.asarray(mask, bool), sigma2_eps)
    w, _ = np.linalg.eigh(A)
    if w.min() <= max(w.max(), 1.0) * 1e-10 * A.shape[0]:
        raise InputError(f"singular design; collinear columns: {', '.join(collinear_columns(A, names))}")
    c = np.linalg.cholesky(A)
    cov = cho_solve((c, True), np.eye(A.shape[0]))
    return 0.5 * (cov + cov.T)


def original_units_map(spec: ModelSpec, moments: Moments):
    """Linear map ``beta_orig = offset + M @ beta`` back to original units.

    The intercept row is the baseline-season intercept: interaction columns
    vanish on baseline days, so their centring shifts apply to other seasons
    only.
    """
    names = spec.column_names
    p = len(names)
    M = np.zeros((p, p))
    offset = np.zeros(p)
    for j, name in enumerate(names):
        base = name.split(":")[0]
        if name == "(Intercept)":
            continue
        M[j, j] = moments.y_std / moments.stds.get(base, 1.0)
    if spec.intercept:
        M[0, 0] = moments.y_std
        offset[0] = moments.y_mean
        for j, name in enumerate(names):
            if name in moments.means:
                M[0, j] = -moments.y_std * moments.means[name] / moments.stds[name]
    return offset, M


def marginal_beta_covariance(inp: StateSpaceInputs, names=None) -> np.ndarray:
    """GLS covariance ``(X' V^-1 X)^-1`` with ``V`` the full marginal covariance of ``y``.

    Unlike :func:`beta_covariance` this accounts for the latent field, which
    matters for the intercept and for covariates that are smooth in space
    or time.
    """
    A = gls_information(inp)
    w, _ = np.linalg.eigh(A)
    if w.min() <= max(w.max(), 1.0) * 1e-10 * A.shape[0]:
        raise InputError(f"singular design; collinear columns: {', '.join(collinear_columns(A, names))}")
    cov = cho_solve((np.linalg.cholesky(A), True), np.eye(A.shape[0]))
    return 0.5 * (cov + cov.T)


def coefficient_table(spec: ModelSpec, params: ModelParams, beta_cov: np.ndarray) -> list:
    """Rows of ``name, beta, std, |t|, p-value`` in standardized units, plus original units."""
    se = np.sqrt(np.diag(beta_cov))
    if params.moments is not None:
        offset, M = original_units_map(spec, params.moments)
        b_orig = offset + M @ params.beta
        se_orig = np.sqrt(np.diag(M @ beta_cov @ M.T))
    else:
        b_orig = se_orig = np.full(len(se), np.nan)
    rows = []
    for j, name in enumerate(spec.column_names):
        t = abs(params.beta[j]) / se[j] if se[j] > 0 else np.inf
        rows.append({"name": name, "beta": float(params.beta[j]), "std": float(se[j]),
                     "abs_t": float(t), "p_value": float(2.0 * stats.norm.sf(t)),
                     "beta_original": float(b_orig[j]), "std_original": float(se_orig[j])})
    return rows


# ---------------------------------------------------------------------------
# The EM loop


def initial_params(y, X, mask, sites: SiteSet, names=None) -> ModelParams:
    n, T = y.shape
    rows = mask.T                                                     # (T, n)
    Xo, yo = X[rows], y.T[rows]
    A = Xo.T @ Xo
    beta = _solve_design(A, Xo.T @ yo, names)
    resid = yo - Xo @ beta
    s2 = max(float(resid @ resid / max(resid.size, 1)), VARIANCE_FLOOR)
    d = distance_matrix(sites)
    off = d[np.triu_indices(n, k=1)]
    theta = float(np.median(off)) if off.size and np.median(off) > 0 else float(off.max())
    return ModelParams(beta=beta, alpha=0.5, g=0.8, theta=theta, sigma2_eps=np.full(T, s2),
                       mu0=np.zeros(n), sigma0=np.eye(n))


def m_step(y, X, mask, params: ModelParams, sm: SmootherOutput, dist, sites: SiteSet) -> ModelParams:
    """One conditional-maximization sweep in the order sigma2, beta, alpha, mu0, Sigma0, g, theta."""
    T = y.shape[1]
    new = params.copy()
    new.sigma2_eps = update_sigma2(y, X, mask, params.beta, params.alpha, sm, params.sigma2_eps)
    new.beta = update_beta(y, X, mask, params.alpha, new.sigma2_eps, sm)
    new.alpha = update_alpha(y, X, mask, new.beta, new.sigma2_eps, sm)
    new.mu0 = sm.z0_smooth.copy()
    new.sigma0 = 0.5 * (sm.P0_smooth + sm.P0_smooth.T)
    new.g = update_g(params.theta, dist, T, sm, params.g)
    new.theta = theta_update(sm.S11, sm.S10, sm.S00, new.g, sites, T, current=params.theta)
    return new


def em_fit(panel: ObservationPanel, spec: ModelSpec, options: Optional[EMOptions] = None,
           init: Optional[ModelParams] = None) -> FitResult:
    """Fit the model to ``panel``; returns parameters in standardized space plus moments."""
    opts = options or EMOptions()
    if panel.n < 2 or panel.T < 2:
        raise InputError("EM needs at least two stations and two time points")
    y, X, moments = standardize(panel, spec)
    mask = panel.mask
    names = spec.column_names
    observed_rows = X[mask.T]
    for j, name in enumerate(names):
        if not np.all(np.isfinite(observed_rows[:, j])):
            raise InputError(f"column {name!r} has non-finite values on observed rows")
    sites = panel.sites
    dist = distance_matrix(sites)
    theta_bounds(sites)                                          # fails on coincident layouts

    params = initial_params(y, X, mask, sites, names) if init is None else init.copy()
    params.moments = moments
    trace: List[float] = []
    converged = False
    criterion = np.inf
    sm = None
    for it in range(opts.max_iter + 1):
        sm = kalman_smooth(_inputs(y, X, mask, params, dist))
        ll = sm.loglik
        if not np.isfinite(ll):
            raise NumericalError(f"non-finite log-likelihood at iteration {it}")
        if trace:
            prev = trace[-1]
            if ll < prev - opts.slack * max(1.0, abs(prev)):
                trace.append(ll)
                msg = f"log-likelihood decreased at iteration {it}: {prev!r} -> {ll!r}"
                if opts.strict:
                    raise LikelihoodDecreaseError(msg, trace)
                log.warning(msg)
            else:
                trace.append(ll)
            criterion = abs(ll - prev) / max(abs(prev), 1e-300)
            if criterion < opts.tol:
                converged = True
                break
        else:
            trace.append(ll)
        if it == opts.max_iter:
            break
        params = m_step(y, X, mask, params, sm, dist, sites)
        params.moments = moments
        log.debug("iter %d loglik %.6f g %.4f theta %.4f alpha %.4f", it, ll, params.g, params.theta, params.alpha)

    if not converged:
        log.warning("EM stopped after %d iterations without convergence (criterion %.3g)",
                    len(trace) - 1, criterion)

    beta_cov = marginal_beta_covariance(_inputs(y, X, mask, params, dist), names)
    fitted_std = np.einsum("tnp,p->nt", X, params.beta) + params.alpha * sm.z_smooth.T
    fitted = moments.destandardize_response(fitted_std)
    err = (panel.y - fitted)[mask]
    rmse = float(np.sqrt(np.mean(err ** 2)))
    resid = np.where(mask, y - fitted_std, np.nan)
    studentized = resid / np.sqrt(params.sigma2_eps)[None, :]
    report = FitReport(n_iter=len(trace) - 1, loglik_trace=trace, converged=converged,
                       criterion=float(criterion), column_names=names, beta_cov=beta_cov,
                       rmse_in_sample=rmse, studentized=studentized)
    return FitResult(spec=spec, params=params, report=report, station_ids=panel.station_ids,
                     sites=sites, dates=panel.dates, z_smooth=sm.z_smooth.copy(), fitted=fitted)


def smooth_at(panel: ObservationPanel, spec: ModelSpec, params: ModelParams) -> SmootherOutput:
    """Run the smoother on ``panel`` at fixed ``params`` (using their moments)."""
    y, X, _ = standardize(panel, spec, params.moments)
    return kalman_smooth(_inputs(y, X, panel.mask, params, distance_matrix(panel.sites)))
