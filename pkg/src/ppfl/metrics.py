"""Forecast accuracy: MASE, MAPE and pointwise APE."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

__all__ = ["MapeResult", "ClientScore", "EvalReport", "mase", "mape", "ape_series", "persistence_forecast"]


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.shape != y_hat.shape:
        raise ValueError(f"actuals and forecasts differ in length: {y.size} vs {y_hat.size}")
    if y.size == 0:
        raise ValueError("need at least one point")
    return y, y_hat


def mase(y, y_hat, lag: int, history=None) -> float:
    """Mean absolute error scaled by the lag-``lag`` persistence forecast.

    ``history`` holds the ``lag`` actuals preceding ``y``. Without it only
    points from index ``lag`` on are scored, since earlier ones have no
    persistence forecast. A perfect persistence denominator gives ``inf``
    and a :class:`RuntimeWarning`.
    """
    y, y_hat = _pair(y, y_hat)
    if lag < 1:
        raise ValueError(f"lag must be >= 1, got {lag}")
    if history is None:
        if y.size <= lag:
            raise ValueError(f"need more than {lag} points to score without history")
        lagged, y, y_hat = y[:-lag], y[lag:], y_hat[lag:]
    else:
        history = np.asarray(history, dtype=np.float64).reshape(-1)
        if history.size != lag:
            raise ValueError(f"history must hold exactly {lag} values, got {history.size}")
        lagged = np.concatenate([history, y])[: y.size]
    num = np.abs(y - y_hat).sum()
    den = np.abs(y - lagged).sum()
    if den == 0:
        warnings.warn("persistence forecast is exact; MASE is infinite", RuntimeWarning, stacklevel=2)
        return float("inf")
    return float(num / den)


def persistence_forecast(y, lag: int, history) -> np.ndarray:
    """``y_{t - lag}`` for every point of ``y``."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    return np.concatenate([np.asarray(history, dtype=np.float64).reshape(-1), y])[: y.size]


def ape_series(y, y_hat) -> np.ndarray:
    """Absolute percentage error per point; ``nan`` where the actual is zero."""
    y, y_hat = _pair(y, y_hat)
    out = np.full(y.shape, np.nan)
    ok = y != 0
    out[ok] = np.abs(y[ok] - y_hat[ok]) / np.abs(y[ok]) * 100.0
    return out


class MapeResult(NamedTuple):
    value: float
    n_excluded: int


def mape(y, y_hat) -> MapeResult:
    """Mean absolute percentage error, skipping points whose actual is zero."""
    ape = ape_series(y, y_hat)
    kept = ape[~np.isnan(ape)]
    excluded = int(ape.size - kept.size)
    value = float(kept.mean()) if kept.size else float("nan")
    return MapeResult(value, excluded)


@dataclass(frozen=True)
class ClientScore:
    client: str
    mase: float
    mape: float
    n_points: int
    n_excluded: int

    @classmethod
    def score(cls, client: str, y, y_hat, lag: int, history) -> "ClientScore":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            m = mase(y, y_hat, lag, history)
        p = mape(y, y_hat)
        return cls(client, m, p.value, int(np.size(y)), p.n_excluded)


@dataclass
class EvalReport:
    """Per-client scores plus their unweighted mean."""

    clients: list = field(default_factory=list)
    ape: dict = field(default_factory=dict)

    HEADER = ("client", "mase", "mape", "n_points", "n_excluded")

    @property
    def mean_mase(self) -> float:
        return float(np.mean([c.mase for c in self.clients]))

    @property
    def mean_mape(self) -> float:
        return float(np.mean([c.mape for c in self.clients]))

    @property
    def infinite_mase(self) -> list:
        """Clients whose MASE denominator vanished."""
        return [c.client for c in self.clients if np.isinf(c.mase)]

    def rows(self) -> list[tuple]:
        rows = [(c.client, c.mase, c.mape, c.n_points, c.n_excluded) for c in self.clients]
        rows.append(("aggregate", self.mean_mase, self.mean_mape,
                     sum(c.n_points for c in self.clients), sum(c.n_excluded for c in self.clients)))
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            for name, ms, mp, n, ex in self.rows():
                w.writerow([name, repr(float(ms)), repr(float(mp)), n, ex])

    def write_ape_csv(self, path, last_n: int | None = None) -> None:
        """One row per test point per client; ``last_n`` keeps each client's final points."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("client", "index", "actual", "forecast", "ape"))
            for client, (y, y_hat) in self.ape.items():
                ape = ape_series(y, y_hat)
                start = 0 if last_n is None else max(len(y) - last_n, 0)
                for i in range(start, len(y)):
                    w.writerow([client, i, repr(float(y[i])), repr(float(y_hat[i])), repr(float(ape[i]))])

    @staticmethod
    def read_csv(path) -> list[dict]:
        with open(Path(path), newline="") as fh:
            return list(csv.DictReader(fh))
