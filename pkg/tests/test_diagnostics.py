import numpy as np
import pytest

from hdgm.diagnostics import acf, losocv, residual_matrix, st_variogram, station_acf, studentized_residuals
from hdgm.emfit import EMOptions
from hdgm.errors import InputError
from hdgm.geo import SiteSet
from hdgm.panel import ModelSpec
from hdgm.sim import SimSpec, simulate


def test_residuals_exact_fit_and_scaling():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((4, 3, 2))
    beta = np.array([0.3, -1.0])
    z = rng.standard_normal((4, 3))
    y = np.einsum("tnp,p->nt", X, beta) + 0.7 * z.T
    np.testing.assert_allclose(residual_matrix(y, X, beta, 0.7, np.ones(4), z), 0.0, atol=1e-14)
    y2 = y + 1.0
    a = residual_matrix(y2, X, beta, 0.7, np.ones(4), z)
    b = residual_matrix(y2, X, beta, 0.7, 4 * np.ones(4), z)
    np.testing.assert_allclose(b, a / 2)


def test_residuals_match_stored_fit(small_fit, small_sim):
    r = studentized_residuals(small_sim.panel, small_fit.spec, small_fit.params)
    np.testing.assert_allclose(r, small_fit.report.studentized, atol=1e-10, equal_nan=True)
    assert np.isnan(r[~small_sim.panel.mask]).all()


def test_acf_white_noise_band():
    x = np.random.default_rng(1).standard_normal(2000)
    a = acf(x, 30)
    assert a[0] == 1.0
    assert np.mean(np.abs(a[1:]) < 3 / np.sqrt(x.size)) >= 0.95


def test_acf_ar1():
    rng = np.random.default_rng(2)
    x = np.zeros(1000)
    for t in range(1, 1000):
        x[t] = 0.8 * x[t - 1] + rng.standard_normal()
    assert acf(x, 5)[1] == pytest.approx(0.8, abs=0.1)


def test_acf_pairwise_complete():
    x = np.random.default_rng(3).standard_normal(200)
    x[::7] = np.nan
    a = acf(x, 10)
    ok = np.isfinite(x)
    d = x - np.nanmean(x)
    k = 3
    pair = ok[k:] & ok[:-k]
    ref = np.mean((d[k:] * d[:-k])[pair]) / np.nanmean(d ** 2)
    assert a[k] == pytest.approx(ref)


def test_station_acf_skips_bad_series(caplog):
    res = np.random.default_rng(4).standard_normal((3, 50))
    res[1] = 2.0
    res[2, 5:] = np.nan
    out = station_acf(res, 30, ["a", "b", "c"])
    assert list(out) == ["a"]
    assert "skipped" in caplog.text


def test_variogram_excludes_self_pairs_and_counts():
    y = np.array([[1.0, 2.0, 3.0], [1.5, 2.5, np.nan]])
    s = SiteSet([45.0, 45.0], [9.0, 9.1])
    v = st_variogram(y, s, n_bins=1, max_distance=1.0, max_lag=1)
    # lag 0: pairs (t=0,1) in both orders, no self pairs
    assert v.counts[0, 0] == 4
    assert v.gamma[0, 0] == pytest.approx(0.5 * 0.25)
    # lag 1: same-station pairs count too
    diffs = [1 - 2, 2 - 3, 1.5 - 2.5, 1 - 2.5, 2 - np.nan, 1.5 - 2, 2.5 - 3]
    d = np.array([v_ for v_ in diffs if np.isfinite(v_)])
    assert v.counts[0, 1] == d.size
    assert v.gamma[0, 1] == pytest.approx(0.5 * np.mean(d ** 2))


def test_variogram_symmetric_in_station_order():
    res = simulate(SimSpec(n_sites=6, T=40, seed=5))
    a = st_variogram(res.panel)
    b = st_variogram(res.panel.select(np.arange(6)[::-1]))
    np.testing.assert_allclose(a.gamma, b.gamma, equal_nan=True)
    np.testing.assert_array_equal(a.counts, b.counts)


def test_variogram_white_noise_flat():
    res = simulate(SimSpec(n_sites=30, T=200, beta=(0.0,), alpha=0.0, skedastic="constant", seed=6))
    v = st_variogram(res.panel, n_bins=5, max_lag=4)
    g = v.gamma[np.isfinite(v.gamma)]
    assert np.all(np.abs(g - 1.0) < 0.15)


def test_variogram_increases_for_model_field():
    res = simulate(SimSpec(n_sites=40, T=300, beta=(0.0,), alpha=1.0, g=0.8, theta=1.0,
                           skedastic="constant", sigma2_level=0.05, seed=7))
    v = st_variogram(res.panel, n_bins=5, max_lag=5)
    assert np.all(np.diff(v.gamma[:, 0]) > -0.02)
    assert np.all(np.diff(v.gamma[0, 1:]) > 0)


def test_variogram_needs_two_stations():
    with pytest.raises(InputError):
        st_variogram(np.zeros((1, 5)), SiteSet([45.0], [9.0]))


def test_losocv_errors(small_sim):
    spec = ModelSpec(covariates=("x1", "x2"))
    with pytest.raises(InputError):
        losocv(small_sim.panel, spec, EMOptions(max_iter=3), [])
    with pytest.raises(InputError):
        losocv(small_sim.panel, spec, EMOptions(max_iter=3), ["nope"])


def test_losocv_no_leak_and_failed_fold(small_sim, monkeypatch):
    import hdgm.diagnostics as diag
    seen = []
    real = diag.em_fit

    def spy(panel, spec, options):
        seen.append(panel.station_ids)
        if len(seen) == 3:
            raise InputError("boom")
        return real(panel, spec, options)

    monkeypatch.setattr(diag, "em_fit", spy)
    spec = ModelSpec(covariates=("x1", "x2"))
    ids = small_sim.panel.station_ids[:2]
    rep = losocv(small_sim.panel, spec, EMOptions(max_iter=10), ids)
    assert ids[0] not in seen[1] and ids[1] not in seen[2]
    assert list(rep.station_rmse) == [ids[0]] and list(rep.failed) == [ids[1]]
    y = small_sim.panel.y[0]
    ok = np.isfinite(y)
    assert rep.pooled_rmse == pytest.approx(np.sqrt(np.mean((y - rep.predictions[ids[0]])[ok] ** 2)))
