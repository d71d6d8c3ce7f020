import numpy as np
import pytest

from hdgm.errors import InputError, SchemaError
from hdgm.geo import SiteSet
from hdgm.panel import ModelSpec, ObservationPanel, design_tensor, fit_moments, season_of, standardize


def _panel(T=6, seed=0):
    rng = np.random.default_rng(seed)
    dates = np.datetime64("2020-02-27") + np.arange(T)
    y = rng.standard_normal((3, T)) * 2 + 5
    y[0, 1] = np.nan
    cov = {"a": rng.standard_normal((3, T)) * 3 + 1, "urban": np.array([[0.0] * T, [1.0] * T, [0.0] * T])}
    return ObservationPanel(("s1", "s2", "s3"), SiteSet([45, 45.5, 46], [9, 9.5, 10]), dates, y, cov)


def test_seasons():
    d = np.array(["2020-12-01", "2021-02-28", "2021-03-01", "2021-06-30", "2021-09-01", "2021-11-30"],
                 dtype="datetime64[D]")
    assert list(season_of(d)) == ["Winter", "Winter", "Spring", "Summer", "Autumn", "Autumn"]


def test_column_order():
    spec = ModelSpec(covariates=("a", "b"), interactions=("a",))
    assert spec.column_names == ("(Intercept)", "a", "a:Winter", "a:Summer", "a:Spring", "b")
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_spec_validation():
    with pytest.raises(InputError):
        ModelSpec(covariates=("a",), interactions=("b",))
    with pytest.raises(InputError):
        ModelSpec(covariates=("a", "a"))
    with pytest.raises(InputError):
        ModelSpec(covariates=("a",), kernel="gaussian")


def test_moments_over_observed_entries():
    p = _panel()
    m = fit_moments(p, ModelSpec(covariates=("a", "urban")))
    obs = p.mask
    assert m.y_mean == pytest.approx(p.y[obs].mean())
    assert m.means["a"] == pytest.approx(p.covariates["a"][obs].mean())
    assert "urban" not in m.means          # binary passes through


def test_standardized_columns_have_unit_moments():
    p = _panel(T=40, seed=1)
    spec = ModelSpec(covariates=("a", "urban"))
    y, X, m = standardize(p, spec)
    obs = p.mask.T
    assert y[p.mask].mean() == pytest.approx(0.0, abs=1e-12)
    assert y[p.mask].std() == pytest.approx(1.0)
    assert X[..., 1][obs].std() == pytest.approx(1.0)
    np.testing.assert_array_equal(X[..., 2], p.covariates["urban"].T)
    np.testing.assert_allclose(m.destandardize_response(y), p.y)


def test_interaction_is_base_times_indicator():
    p = _panel(T=10)
    spec = ModelSpec(covariates=("a",), interactions=("a",))
    _, X, _ = standardize(p, spec)
    s = season_of(p.dates)
    np.testing.assert_allclose(X[..., 2], X[..., 1] * (s == "Winter")[:, None])
    np.testing.assert_allclose(X[..., 4], X[..., 1] * (s == "Spring")[:, None])
    assert np.all(X[..., 3] == 0)


def test_unknown_and_constant_columns():
    p = _panel()
    with pytest.raises(SchemaError):
        fit_moments(p, ModelSpec(covariates=("nope",)))
    p.covariates["c"] = np.full((3, p.T), 2.5)
    with pytest.raises(InputError):
        fit_moments(p, ModelSpec(covariates=("c",), binary=()))


def test_design_rejects_missing_column():
    p = _panel()
    m = fit_moments(p, ModelSpec(covariates=("a",)))
    with pytest.raises(SchemaError):
        design_tensor({}, p.dates, ModelSpec(covariates=("a",)), m)


def test_panel_select_and_drop():
    p = _panel()
    q = p.drop_stations(["s2"])
    assert q.station_ids == ("s1", "s3")
    np.testing.assert_array_equal(q.y[1], p.y[2])
    assert p.missing_summary()["observed"] == 3 * p.T - 1
