"""scikit-learn style front ends for the model and the federated trainer."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import _rng
from .data import ClientData, LoadScaler, LoadSeries, SplitSpec, prepare_client
from .federation import ExperimentConfig, evaluate, run
from .metrics import EvalReport
from .model import BLOCKS, DarnnConfig, ParamLayout, loss_and_grad, predict
from .optim import AdamConfig, AdamState, MinibatchSampler

__all__ = ["LoadScaler", "DarnnRegressor", "PPFLForecaster", "check_windows"]


def check_windows(X, y=None, n_channels: int | None = None):
    """Validate stacked windows ``X`` of shape (N, T, n + 1) and optional targets (N,).

    The last channel of ``X`` is the past load, the others are exogenous
    features.
    """
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] < 2:
        raise ValueError(f"expected windows of shape (n_samples, window, n_features + 1), got {X.shape}")
    if n_channels is not None and X.shape[2] != n_channels:
        raise ValueError(f"X has {X.shape[2]} channels per step, estimator was fitted with {n_channels}")
    if y is None:
        return X
    y = check_array(y, ensure_2d=False, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ValueError(f"y must be 1-D with {X.shape[0]} entries, got shape {y.shape}")
    return X, y


class DarnnRegressor(RegressorMixin, BaseEstimator):
    """A single DARNN trained centrally with minibatch Adam.

    Parameters
    ----------
    hidden : int
        LSTM state width of encoder and decoder.
    n_layers : int
        Stacking depth of both LSTMs.
    n_steps : int
        Number of Adam steps.
    batch_size : int
        Minibatch size; batches wrap around shuffled passes.
    lr, beta1, beta2, delta : float
        Optimizer settings.
    random_state : int
        Seed for initialization and minibatch order.
    """

    def __init__(self, hidden=16, n_layers=2, n_steps=500, batch_size=64, lr=1e-3, beta1=0.9,
                 beta2=0.999, delta=1e-8, random_state=0):
        self.hidden = hidden
        self.n_layers = n_layers
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.delta = delta
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_windows(X, y)
        N, T, C = X.shape
        layout = ParamLayout(DarnnConfig(C - 1, T, self.hidden, self.n_layers), BLOCKS)
        rng = _rng.substream(int(self.random_state), _rng.ESTIMATOR)
        theta = layout.initialize(rng)
        sampler = MinibatchSampler(N, rng)
        state = AdamState(theta.size, AdamConfig(self.lr, self.beta1, self.beta2, self.delta))
        Xe, Ye = np.ascontiguousarray(X[:, :, :-1]), np.ascontiguousarray(X[:, :, -1])
        losses = []
        for _ in range(self.n_steps):
            idx = sampler.next(self.batch_size)
            value, grad = loss_and_grad(theta, layout, Xe[idx], Ye[idx], y[idx])
            theta = state.step(theta, grad)
            losses.append(value)
        self.layout_, self.theta_ = layout, theta
        self.loss_curve_ = np.asarray(losses)
        self.n_features_in_ = C
        return self

    def predict(self, X):
        check_is_fitted(self, "theta_")
        X = check_windows(X, n_channels=self.n_features_in_)
        return predict(self.theta_, self.layout_, X[:, :, :-1], X[:, :, -1])


class PPFLForecaster(BaseEstimator):
    """Federated training over a list of client series.

    ``fit`` takes one :class:`~ppfl.data.LoadSeries` (or prepared
    :class:`~ppfl.data.ClientData`) per client. Parameters mirror
    :class:`~ppfl.federation.ExperimentConfig`.
    """

    def __init__(self, mode="ppfl", epsilon=None, rounds=200, local_steps=5, batch_size=64, clip=200.0,
                 hidden=16, n_layers=2, window=12, horizon=4, seed=0, workers=1, eval_params="client"):
        self.mode = mode
        self.epsilon = epsilon
        self.rounds = rounds
        self.local_steps = local_steps
        self.batch_size = batch_size
        self.clip = clip
        self.hidden = hidden
        self.n_layers = n_layers
        self.window = window
        self.horizon = horizon
        self.seed = seed
        self.workers = workers
        self.eval_params = eval_params

    def _config(self) -> ExperimentConfig:
        return ExperimentConfig(
            mode=self.mode, epsilon=self.epsilon, rounds=self.rounds, local_steps=self.local_steps,
            batch_size=self.batch_size, clip=self.clip, hidden=self.hidden, n_layers=self.n_layers,
            window=self.window, horizon=self.horizon, seed=self.seed, workers=self.workers,
            eval_params=self.eval_params,
        )

    def fit(self, X: Sequence, y=None):
        cfg = self._config()
        if not len(X):
            raise ValueError("need at least one client")
        clients = []
        for c in X:
            if isinstance(c, LoadSeries):
                c = prepare_client(c, cfg.window, cfg.horizon, SplitSpec())
            elif not isinstance(c, ClientData):
                raise TypeError(f"clients must be LoadSeries or ClientData, got {type(c).__name__}")
            clients.append(c)
        self.config_ = cfg
        self.clients_ = clients
        self.result_ = run(cfg, clients)
        return self

    def evaluate(self, params: str | None = None) -> EvalReport:
        """Test-split scores per client, in kWh."""
        check_is_fitted(self, "result_")
        return evaluate(self.result_, self.clients_, params)

    def forecast(self, client: int, split: str = "test") -> np.ndarray:
        """Forecasts in kWh for every window of one client's split."""
        check_is_fitted(self, "result_")
        c = self.clients_[client]
        w = getattr(c, split)
        theta = self.result_.theta(client)
        return c.scaler.inverse_transform_load(predict(theta, self.result_.layout, w.X, w.Y))

    def score(self, X=None, y=None) -> float:
        """Negative mean test MAPE, so that larger is better."""
        return -self.evaluate().mean_mape
