import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ppfl.data import synth_generate
from ppfl.estimators import DarnnRegressor, PPFLForecaster, check_windows


def windows(n=40, T=4, n_feat=2, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, T, n_feat + 1))
    return X, X[:, -1, -1] * 0.5 + 0.1


class TestCheckWindows:
    def test_accepts(self):
        X, y = windows()
        X2, y2 = check_windows(X, y)
        assert X2.shape == X.shape and y2.shape == y.shape

    @pytest.mark.parametrize("shape", [(5, 4), (5, 4, 1)])
    def test_rejects_shape(self, shape):
        with pytest.raises(ValueError):
            check_windows(np.zeros(shape))

    def test_rejects_target_length(self):
        with pytest.raises(ValueError):
            check_windows(np.zeros((5, 3, 2)), np.zeros(4))

    def test_rejects_nan(self):
        X = np.zeros((5, 3, 2))
        X[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            check_windows(X)


class TestDarnnRegressor:
    def test_params_roundtrip(self):
        est = DarnnRegressor(hidden=3, n_steps=7)
        assert clone(est).get_params() == est.get_params()
        assert est.set_params(lr=0.01).lr == 0.01

    def test_fit_predict(self):
        X, y = windows()
        est = DarnnRegressor(hidden=3, n_steps=60, batch_size=16, lr=0.01).fit(X, y)
        assert est.predict(X).shape == (40,)
        assert est.loss_curve_[-10:].mean() < est.loss_curve_[:10].mean()
        assert np.isfinite(est.score(X, y))

    def test_deterministic(self):
        X, y = windows()
        a = DarnnRegressor(hidden=3, n_steps=5, random_state=1).fit(X, y).predict(X)
        b = DarnnRegressor(hidden=3, n_steps=5, random_state=1).fit(X, y).predict(X)
        assert np.array_equal(a, b)

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            DarnnRegressor().predict(windows()[0])

    def test_channel_mismatch(self):
        X, y = windows()
        est = DarnnRegressor(hidden=3, n_steps=1).fit(X, y)
        with pytest.raises(ValueError, match="channels"):
            est.predict(np.zeros((2, 4, 5)))


@pytest.fixture(scope="module")
def series():
    return synth_generate(2, 6, seed=0, rows=[1, 8])


class TestPPFLForecaster:
    def test_fit_evaluate_forecast(self, series):
        est = PPFLForecaster(epsilon=10, rounds=2, local_steps=1, batch_size=8, hidden=3).fit(series)
        rep = est.evaluate()
        assert len(rep.clients) == 2 and np.isfinite(rep.mean_mape)
        assert est.score() == -rep.mean_mape
        f = est.forecast(1)
        np.testing.assert_allclose(f, rep.ape[series[1].client][1])

    def test_rejects_bad_input(self, series):
        with pytest.raises(TypeError):
            PPFLForecaster(rounds=1).fit([np.zeros(3)])
        with pytest.raises(ValueError):
            PPFLForecaster(rounds=1).fit([])

    def test_clone(self):
        est = PPFLForecaster(mode="fl", rounds=3)
        assert clone(est).get_params() == est.get_params()
