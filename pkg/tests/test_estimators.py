import numpy as np
import pytest

from rarecp.errors import DataError, NotFittedError
from rarecp.estimators import RareCP, SplitConformal


class TestSplitConformal:
    def test_fit_predict(self):
        rng = np.random.default_rng(0)
        residuals = rng.standard_normal(500)
        est = SplitConformal(alpha=0.2).fit(None, residuals)
        interval = est.predict_interval(10.0)
        assert interval.lower < 10.0 < interval.upper
        # roughly the 10%/90% residual quantiles around the forecast
        assert interval.lower == pytest.approx(10 + np.quantile(residuals, 0.1), abs=0.15)
        assert interval.upper == pytest.approx(10 + np.quantile(residuals, 0.9), abs=0.15)

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            SplitConformal().predict_interval(0.0)

    def test_observe_evicts_fifo(self):
        est = SplitConformal(capacity=3).fit(None, np.array([1.0, 2.0, 3.0]))
        est.observe(9.0)
        np.testing.assert_array_equal(est.store_.residuals(), [2.0, 3.0, 9.0])

    def test_nexcp_weighting_shifts_toward_recent(self):
        residuals = np.concatenate([np.full(50, -5.0), np.full(50, 5.0)])
        uniform = SplitConformal(weighting="uniform").fit(None, residuals)
        nexcp = SplitConformal(weighting="nexcp", nexcp_lambda=0.8).fit(None, residuals)
        assert nexcp.weighted_support().weights[-1] > uniform.weighted_support().weights[-1]
        assert nexcp.predict_interval(0.0).lower > uniform.predict_interval(0.0).lower

    def test_get_set_params(self):
        est = SplitConformal(alpha=0.3, nexcp_lambda=0.9)
        params = est.get_params()
        assert params["alpha"] == 0.3
        est.set_params(alpha=0.1)
        assert est.alpha == 0.1
        with pytest.raises(ValueError):
            est.set_params(unknown=1)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            SplitConformal().fit(np.zeros((3, 2)), np.zeros(4))


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(1)
    n, window = 120, 6
    X = rng.standard_normal((n, window + 1))
    y = rng.standard_normal(n) * (1.0 + 2.0 * (X[:, 0] > 0))
    est = RareCP(
        n_experts=2, top_k=8, latent_dim=4, hidden_dim=8, hidden_layers=1,
        gate_hidden_dim=2, window=window, include_forecast=True,
        epochs=4, teacher_epochs=2, batch_size=64, seed=0,
    )
    return est.fit(X, y), X, y


class TestRareCP:

    def test_fit_returns_self_and_predicts(self, fitted):
        est, X, y = fitted
        interval = est.predict_interval(X[0], forecast=3.0)
        assert interval.lower <= interval.upper
        assert interval.alpha_used == 0.2

    def test_support_bounded_by_m_times_k(self, fitted):
        est, X, _ = fitted
        support = est.weighted_support(X[1])
        assert len(support) <= est.n_experts * est.top_k
        assert abs(support.weights.sum() - 1.0) < 1e-9

    def test_observe_appends(self, fitted):
        est, X, _ = fitted
        before = len(est.store_)
        est.observe(X[0], residual=0.5)
        assert len(est.store_) == min(before + 1, est.store_.capacity)

    def test_save_load_identical_intervals(self, fitted, tmp_path):
        est, X, y = fitted
        path = tmp_path / "model.json"
        est.save(path)
        loaded = RareCP.from_checkpoint(path)
        loaded.seed_store(X, y)
        est2 = RareCP(**{**est.get_params()})
        est2.components_ = est.components_
        est2._dataset_id = 0
        est2.seed_store(X, y)
        a = est2.predict_interval(X[2], forecast=1.0)
        b = loaded.predict_interval(X[2], forecast=1.0)
        assert (a.lower, a.upper) == (b.lower, b.upper)

    def test_dimension_mismatch_rejected(self):
        est = RareCP(window=6, include_forecast=True, epochs=1, teacher_epochs=1)
        with pytest.raises(DataError):
            est.fit(np.zeros((10, 3)), np.zeros(10))

    def test_not_fitted_guard(self):
        est = RareCP()
        with pytest.raises(NotFittedError):
            est.predict_interval(np.zeros(65), 0.0)

    def test_get_params_roundtrip(self):
        est = RareCP(top_k=16, beta=6.0)
        clone = RareCP(**est.get_params())
        assert clone.top_k == 16 and clone.beta == 6.0
