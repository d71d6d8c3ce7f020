import math

import numpy as np
import pytest
from scipy import optimize

from hdgm import emfit
from hdgm.emfit import EMOptions, ModelParams, em_fit
from hdgm.errors import InputError, LikelihoodDecreaseError
from hdgm.geo import SiteSet, distance_matrix
from hdgm.panel import ModelSpec, ObservationPanel, standardize
from hdgm.sim import SimSpec, simulate
from hdgm.statespace import kalman_smooth


def frozen_estep(seed=0, n=4, T=12):
    """Random parameters, a smoother pass, and the arrays the updates need."""
    rng = np.random.default_rng(seed)
    sim = simulate(SimSpec(n_sites=n, T=T, seed=seed, missing="uniform", missing_rate=0.2))
    spec = ModelSpec(covariates=("x1", "x2"))
    y, X, m = standardize(sim.panel, spec)
    mask = sim.panel.mask
    A = rng.standard_normal((n, n))
    p = ModelParams(beta=rng.standard_normal(3), alpha=float(rng.uniform(0.3, 1.0)),
                    g=float(rng.uniform(0.2, 0.8)), theta=float(rng.uniform(0.5, 2.0)),
                    sigma2_eps=rng.uniform(0.3, 1.5, T), mu0=rng.standard_normal(n),
                    sigma0=A @ A.T / n + 0.5 * np.eye(n), moments=m)
    dist = distance_matrix(sim.panel.sites)
    sm = kalman_smooth(emfit._inputs(y, X, mask, p, dist))
    return y, X, mask, p, dist, sim.panel.sites, sm


@pytest.mark.parametrize("seed", range(3))
def test_sigma2_update_minimizes_q1(seed):
    y, X, mask, p, dist, _, sm = frozen_estep(seed)
    s2 = emfit.update_sigma2(y, X, mask, p.beta, p.alpha, sm, p.sigma2_eps)
    res = optimize.minimize(lambda ls: emfit.q1_term(y, X, mask, p.beta, p.alpha, np.exp(ls), sm),
                            np.zeros_like(s2), method="BFGS", options={"gtol": 1e-10})
    np.testing.assert_allclose(s2, np.exp(res.x), rtol=1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_beta_update_minimizes_q1(seed):
    y, X, mask, p, dist, _, sm = frozen_estep(seed)
    b = emfit.update_beta(y, X, mask, p.alpha, p.sigma2_eps, sm)
    res = optimize.minimize(lambda v: emfit.q1_term(y, X, mask, v, p.alpha, p.sigma2_eps, sm),
                            np.zeros_like(b), method="BFGS", options={"gtol": 1e-10})
    np.testing.assert_allclose(b, res.x, atol=1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_alpha_update_minimizes_q1(seed):
    y, X, mask, p, dist, _, sm = frozen_estep(seed)
    a = emfit.update_alpha(y, X, mask, p.beta, p.sigma2_eps, sm)
    res = optimize.minimize_scalar(lambda v: emfit.q1_term(y, X, mask, p.beta, v, p.sigma2_eps, sm),
                                   bounds=(-5, 5), method="bounded", options={"xatol": 1e-10})
    assert a == pytest.approx(res.x, abs=1e-4)


def test_initial_state_update_minimizes_q0():
    y, X, mask, p, dist, _, sm = frozen_estep(1, n=3)
    n = 3
    il = np.tril_indices(n)

    def unpack(v):
        L = np.zeros((n, n))
        L[il] = v[n:]
        return v[:n], L @ L.T

    def f(v):
        mu, S = unpack(v)
        return emfit.q0_term(mu, S, sm)

    v0 = np.concatenate([np.zeros(n), np.eye(n)[il]])
    res = optimize.minimize(f, v0, method="BFGS", options={"gtol": 1e-10})
    mu, S = unpack(res.x)
    np.testing.assert_allclose(sm.z0_smooth, mu, atol=1e-4)
    np.testing.assert_allclose(sm.P0_smooth, S, atol=1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_g_update_minimizes_q2(seed):
    y, X, mask, p, dist, _, sm = frozen_estep(seed)
    T = y.shape[1]
    g = emfit.update_g(p.theta, dist, T, sm, p.g)
    res = optimize.minimize_scalar(lambda v: emfit.q2_term(v, p.theta, dist, T, sm),
                                   bounds=(-0.999, 0.999), method="bounded", options={"xatol": 1e-10})
    assert g == pytest.approx(res.x, abs=1e-4)


def test_g_ratio_form_is_not_the_q2_minimizer():
    # tr(S10)/tr(S00) solves the problem for Sigma_eta = R, not (1 - g^2) R
    y, X, mask, p, dist, _, sm = frozen_estep(0)
    T = y.shape[1]
    g_exact = emfit.update_g(p.theta, dist, T, sm, p.g)
    g_ratio = np.trace(sm.S10) / np.trace(sm.S00)
    assert emfit.q2_term(g_exact, p.theta, dist, T, sm) <= emfit.q2_term(g_ratio, p.theta, dist, T, sm)


@pytest.mark.parametrize("seed", range(3))
def test_theta_update_matches_grid_search(seed):
    y, X, mask, p, dist, sites, sm = frozen_estep(seed)
    T = y.shape[1]
    th = emfit.theta_update(sm.S11, sm.S10, sm.S00, p.g, sites, T)
    lo, hi = emfit.theta_bounds(sites)
    grid = np.exp(np.linspace(math.log(lo), math.log(hi), 20001))
    vals = [emfit.theta_objective(t, p.g, dist, T, sm.S11, sm.S10, sm.S00) for t in grid]
    best = grid[int(np.argmin(vals))]
    assert th == pytest.approx(best, rel=1e-3)


def test_theta_scaled_moments_move_the_argmin():
    # the log|R| term is not rescaled, so scaling the moments changes the optimum
    y, X, mask, p, dist, sites, sm = frozen_estep(0)
    T = y.shape[1]
    a = emfit.theta_update(sm.S11, sm.S10, sm.S00, p.g, sites, T)
    b = emfit.theta_update(4 * sm.S11, 4 * sm.S10, 4 * sm.S00, p.g, sites, T)
    lo, hi = emfit.theta_bounds(sites)
    grid = np.exp(np.linspace(math.log(lo), math.log(hi), 4001))
    vals = [emfit.theta_objective(t, p.g, dist, T, 4 * sm.S11, 4 * sm.S10, 4 * sm.S00) for t in grid]
    assert b == pytest.approx(grid[int(np.argmin(vals))], rel=2e-3)
    assert a != pytest.approx(b, rel=1e-3)


def test_theta_update_never_worse_than_current():
    y, X, mask, p, dist, sites, sm = frozen_estep(2)
    T = y.shape[1]
    th = emfit.theta_update(sm.S11, sm.S10, sm.S00, p.g, sites, T, current=p.theta)
    f = lambda t: emfit.theta_objective(t, p.g, dist, T, sm.S11, sm.S10, sm.S00)
    assert f(th) <= f(p.theta) + 1e-12


def test_gls_oracle_with_alpha_zero():
    # with alpha = 0 the beta update is plain weighted least squares
    rng = np.random.default_rng(5)
    n, T, p = 5, 9, 3
    X = rng.standard_normal((T, n, p))
    y = rng.standard_normal((n, T))
    mask = rng.random((n, T)) > 0.2
    y = np.where(mask, y, np.nan)
    s2 = rng.uniform(0.5, 2, T)
    sites = SiteSet(rng.uniform(45, 46, n), rng.uniform(9, 10, n))
    dist = distance_matrix(sites)
    par = ModelParams(np.zeros(p), 0.0, 0.5, 1.0, s2, np.zeros(n), np.eye(n))
    sm = kalman_smooth(emfit._inputs(y, X, mask, par, dist))
    b = emfit.update_beta(y, X, mask, 0.0, s2, sm)
    rows = mask.T
    w = np.sqrt(1 / np.repeat(s2[:, None], n, 1)[rows])
    ref, *_ = np.linalg.lstsq(X[rows] * w[:, None], y.T[rows] * w, rcond=None)
    np.testing.assert_allclose(b, ref, atol=1e-10)


def test_collinear_design_names_columns():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((6, 4, 3))
    X[..., 2] = 2 * X[..., 1]
    with pytest.raises(InputError, match="x1.*x2|b.*c"):
        emfit.beta_covariance(X, np.ones((4, 6), bool), np.ones(6), names=["a", "b", "c"])


def test_plugin_covariance_matches_direct_formula():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((5, 4, 2))
    mask = rng.random((4, 5)) > 0.3
    s2 = rng.uniform(0.5, 2, 5)
    A = sum(X[t][mask[:, t]].T @ X[t][mask[:, t]] / s2[t] for t in range(5))
    np.testing.assert_allclose(emfit.beta_covariance(X, mask, s2), np.linalg.inv(A), atol=1e-12)


@pytest.fixture(scope="module")
def sim10():
    return simulate(SimSpec(n_sites=10, T=50, seed=11))


def test_em_trace_monotone(sim10):
    fit = em_fit(sim10.panel, ModelSpec(covariates=("x1", "x2")), EMOptions(max_iter=40, tol=1e-9))
    tr = np.array(fit.report.loglik_trace)
    assert np.all(np.diff(tr) >= -1e-8 * np.maximum(1, np.abs(tr[:-1])))
    assert 0 < fit.params.g < 1


def test_em_permutation_invariant(sim10):
    spec = ModelSpec(covariates=("x1", "x2"))
    opts = EMOptions(max_iter=15, tol=0)
    a = em_fit(sim10.panel, spec, opts)
    perm = np.random.default_rng(0).permutation(sim10.panel.n)
    b = em_fit(sim10.panel.select(perm), spec, opts)
    np.testing.assert_allclose(a.report.loglik_trace, b.report.loglik_trace, rtol=1e-9)
    np.testing.assert_allclose(a.params.beta, b.params.beta, atol=1e-7)
    np.testing.assert_allclose(a.z_smooth[:, perm], b.z_smooth, atol=1e-6)


def test_em_strict_mode_raises_on_decrease(sim10, monkeypatch):
    spec = ModelSpec(covariates=("x1", "x2"))
    real = emfit.m_step

    def bad(*args):
        new = real(*args)
        new.alpha = 5.0           # deliberately damaging update
        return new

    monkeypatch.setattr(emfit, "m_step", bad)
    with pytest.raises(LikelihoodDecreaseError) as info:
        em_fit(sim10.panel, spec, EMOptions(max_iter=5))
    assert len(info.value.trace) >= 2


def test_em_reports_non_convergence(sim10):
    fit = em_fit(sim10.panel, ModelSpec(covariates=("x1", "x2")), EMOptions(max_iter=2, tol=1e-12))
    assert not fit.report.converged and fit.report.n_iter == 2


def test_em_rejects_degenerate_panels(sim10):
    spec = ModelSpec(covariates=("x1", "x2"))
    with pytest.raises(InputError):
        em_fit(sim10.panel.select([0]), spec)
    p = sim10.panel
    same = ObservationPanel(p.station_ids[:3], SiteSet([45.0] * 3, [9.0] * 3), p.dates, p.y[:3],
                            {k: v[:3] for k, v in p.covariates.items()})
    with pytest.raises(InputError):
        em_fit(same, spec)


def test_coefficient_table_columns(small_fit):
    rows = small_fit.coefficient_table()
    assert [r["name"] for r in rows] == list(small_fit.spec.column_names)
    for r in rows:
        assert r["std"] > 0 and 0 <= r["p_value"] <= 1
        assert r["abs_t"] == pytest.approx(abs(r["beta"]) / r["std"])


def test_original_units_slope(small_fit):
    m = small_fit.params.moments
    row = {r["name"]: r for r in small_fit.coefficient_table()}
    b = small_fit.params.beta[small_fit.spec.column_names.index("x2")]
    assert row["x2"]["beta_original"] == pytest.approx(b * m.y_std / m.stds["x2"])


def test_in_sample_fitted_values(small_fit, small_sim):
    mask = small_sim.panel.mask
    err = (small_sim.panel.y - small_fit.fitted)[mask]
    assert small_fit.report.rmse_in_sample == pytest.approx(np.sqrt(np.mean(err ** 2)))
