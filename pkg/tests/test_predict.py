import numpy as np
import pytest

from hdgm.errors import SchemaError
from hdgm.geo import CorrelationKernel, SiteSet
from hdgm.predict import PredictionGrid, date_alignment, krige_latent, kriging_weights, predict_response


def _sites(rng, n):
    return SiteSet(rng.uniform(45, 46, n), rng.uniform(9, 10, n))


@pytest.mark.parametrize("seed", range(5))
def test_kriging_exact_at_stations(seed):
    rng = np.random.default_rng(seed)
    s = _sites(rng, 6)
    z = rng.standard_normal((7, 6))
    out = krige_latent(z, s, s.subset([2, 4]), CorrelationKernel(0.7))
    np.testing.assert_allclose(out, z[:, [2, 4]], atol=1e-8)


def test_far_site_reverts_to_zero():
    rng = np.random.default_rng(0)
    s = _sites(rng, 4)
    far = SiteSet([-30.0], [120.0])
    out = krige_latent(rng.standard_normal((3, 4)), s, far, CorrelationKernel(0.5))
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_weights_rows_match_direct_solve():
    rng = np.random.default_rng(1)
    s, new = _sites(rng, 5), _sites(rng, 3)
    k = CorrelationKernel(0.8)
    W = kriging_weights(s, new, k)
    from hdgm.geo import correlation_matrix, cross_correlation
    ref = cross_correlation(new, s, k) @ np.linalg.inv(correlation_matrix(s, k))
    np.testing.assert_allclose(W, ref, atol=1e-8)


def test_date_alignment():
    fit = np.datetime64("2020-01-01") + np.arange(5)
    d = np.array(["2019-12-31", "2020-01-03", "2020-01-06"], dtype="datetime64[D]")
    assert date_alignment(fit, d).tolist() == [-1, 2, -1]


def test_predict_at_training_sites_reproduces_fitted(small_fit, small_sim):
    pred = predict_response(small_fit, PredictionGrid.from_panel(small_sim.panel))
    np.testing.assert_allclose(pred.y_hat, small_fit.fitted, atol=1e-8)
    assert not pred.skipped.any()


def test_missing_covariates_are_skipped(small_fit, small_grid):
    cov = dict(small_grid.covariates)
    x2 = cov["x2"].copy()
    x2[0, 3] = np.nan
    cov["x2"] = x2
    pred = predict_response(small_fit, small_grid.with_covariates(cov))
    assert pred.skipped[0, 3] and np.isnan(pred.y_hat[0, 3])
    assert pred.skipped.sum() == 1


def test_time_subset_and_outside_window(small_fit, small_grid):
    times = small_grid.dates[[0, 5]]
    pred = predict_response(small_fit, small_grid, times=times)
    assert pred.y_hat.shape == (small_grid.m, 2)
    shifted = PredictionGrid(small_grid.pixel_ids, small_grid.sites, small_grid.dates + 30,
                             small_grid.covariates, small_grid.metadata)
    out = predict_response(small_fit, shifted)
    assert out.skipped[:, -30:].all() and not out.skipped[:, :30].any()


def test_missing_model_column_is_schema_error(small_fit, small_grid):
    cov = {k: v for k, v in small_grid.covariates.items() if k != "x2"}
    with pytest.raises(SchemaError):
        predict_response(small_fit, small_grid.with_covariates(cov))
