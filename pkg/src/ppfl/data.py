"""Load series ingestion, windowing, splitting, scaling and synthetic clients.

A client's data is a 15-minute load series with nine exogenous features per
step: interval of day, day of week, global horizontal irradiance,
temperature, wind speed, and four static building quantities (floor, window
and roof area, cooling capacity). Calendar indices come from the timestamp.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import _rng

__all__ = [
    "CSV_COLUMNS",
    "FEATURES",
    "TABLE_I",
    "DataError",
    "LoadSeries",
    "Windows",
    "SplitSpec",
    "LoadScaler",
    "ClientData",
    "load_csv",
    "write_csv",
    "make_windows",
    "split",
    "split_sizes",
    "normalize",
    "prepare_client",
    "synth_generate",
]

CSV_COLUMNS = (
    "timestamp", "load_kwh", "ghi", "temperature", "wind_speed",
    "floor_area", "window_area", "roof_area", "cooling_capacity",
)
FEATURES = (
    "interval", "weekday", "ghi", "temperature", "wind_speed",
    "floor_area", "window_area", "roof_area", "cooling_capacity",
)
STATIC = ("floor_area", "window_area", "roof_area", "cooling_capacity")
CALENDAR = {"interval": 95.0, "weekday": 6.0}
STEP = np.timedelta64(15, "m")

# mean (kWh) and variance of the eight calibration buildings
TABLE_I = (
    (488.04, 10298.24),
    (204.59, 21119.52),
    (176.54, 3505.70),
    (156.63, 2780.87),
    (107.12, 5314.93),
    (59.18, 1906.06),
    (42.32, 888.42),
    (22.08, 137.23),
)


class DataError(ValueError):
    """Malformed or inconsistent load data."""


def _calendar(timestamps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ts = pd.DatetimeIndex(timestamps)
    minutes = ts.hour * 60 + ts.minute
    return np.asarray(minutes // 15, dtype=np.int64), np.asarray(ts.dayofweek, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class LoadSeries:
    """One client's validated series: loads (N,) and features (N, 9) in ``FEATURES`` order."""

    client: str
    timestamps: np.ndarray
    load: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[ns]")
        load = np.asarray(self.load, dtype=np.float64)
        feats = np.asarray(self.features, dtype=np.float64)
        n = ts.shape[0]
        if ts.ndim != 1 or load.shape != (n,) or feats.shape != (n, len(FEATURES)):
            raise DataError(
                f"series {self.client!r}: timestamps {ts.shape}, load {load.shape} and "
                f"features {feats.shape} do not align"
            )
        if n > 1:
            gaps = np.diff(ts)
            bad = np.flatnonzero(gaps != STEP)
            if bad.size:
                i = bad[0] + 1
                raise DataError(
                    f"series {self.client!r}: timestamps must advance in 15-minute steps; "
                    f"{pd.Timestamp(ts[i])} follows {pd.Timestamp(ts[i - 1])}"
                )
        interval, weekday = feats[:, 0], feats[:, 1]
        for name, col, hi in (("interval", interval, 95), ("weekday", weekday, 6)):
            bad = np.flatnonzero((col != np.round(col)) | (col < 0) | (col > hi))
            if bad.size:
                raise DataError(
                    f"series {self.client!r}: {name} index {col[bad[0]]:g} at row {bad[0]} "
                    f"outside 0..{hi}"
                )
        if not (np.all(np.isfinite(load)) and np.all(np.isfinite(feats))):
            raise DataError(f"series {self.client!r}: non-finite values")
        for arr in (ts, load, feats):
            arr.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "load", load)
        object.__setattr__(self, "features", feats)

    @classmethod
    def from_columns(cls, client: str, timestamps, load, ghi, temperature, wind_speed,
                     floor_area, window_area, roof_area, cooling_capacity) -> "LoadSeries":
        """Build a series from raw columns; static quantities may be scalars."""
        ts = np.asarray(timestamps, dtype="datetime64[ns]")
        n = ts.shape[0]
        interval, weekday = _calendar(ts)
        cols = [interval, weekday, ghi, temperature, wind_speed,
                floor_area, window_area, roof_area, cooling_capacity]
        feats = np.column_stack([np.broadcast_to(np.asarray(c, dtype=np.float64), (n,)) for c in cols])
        return cls(client, ts, load, feats)

    def __len__(self) -> int:
        return self.load.shape[0]

    def __getitem__(self, sl: slice) -> "LoadSeries":
        if not isinstance(sl, slice):
            raise TypeError("LoadSeries supports slice indexing only")
        return LoadSeries(self.client, self.timestamps[sl], self.load[sl], self.features[sl])

    def column(self, name: str) -> np.ndarray:
        return self.features[:, FEATURES.index(name)]


def load_csv(path, client: str | None = None) -> LoadSeries:
    """Read one client's CSV; the header must match ``CSV_COLUMNS`` exactly."""
    path = Path(path)
    client = path.stem if client is None else client
    try:
        with open(path, newline="") as fh:
            header = next(csv.reader(fh), None)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
        raise DataError(f"{path}: header must be {','.join(CSV_COLUMNS)}, got {header}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if frame.empty:
        raise DataError(f"{path}: no data rows")
    try:
        ts = pd.to_datetime(frame["timestamp"], format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: unparseable timestamp ({exc})") from None
    if ts.dt.tz is not None:
        ts = ts.dt.tz_convert("UTC").dt.tz_localize(None)
    off_grid = np.flatnonzero((ts.dt.minute % 15 != 0) | (ts.dt.second != 0) | (ts.dt.microsecond != 0))
    if off_grid.size:
        r = off_grid[0]
        raise DataError(f"{path}: timestamp {frame['timestamp'][r]} (row {r + 2}) is not on the 15-minute grid")
    values = {}
    for name in CSV_COLUMNS[1:]:
        col = pd.to_numeric(frame[name], errors="coerce")
        bad = np.flatnonzero(col.isna().to_numpy())
        if bad.size:
            r = bad[0]
            raise DataError(f"{path}: non-numeric {name} value {frame[name][r]!r} at row {r + 2}")
        values[name] = col.to_numpy(dtype=np.float64)
    for name in STATIC:
        col = values[name]
        bad = np.flatnonzero(col != col[0])
        if bad.size:
            raise DataError(f"{path}: static column {name} changes at row {bad[0] + 2}")
    stamps = ts.to_numpy(dtype="datetime64[ns]")
    series = LoadSeries.from_columns(
        client, stamps, values["load_kwh"],
        *(values[c] for c in CSV_COLUMNS[2:]),
    )
    return series


def write_csv(series: LoadSeries, path) -> None:
    """Write a series in the ``CSV_COLUMNS`` schema with ISO-8601 timestamps."""
    frame = pd.DataFrame({"timestamp": pd.DatetimeIndex(series.timestamps).strftime("%Y-%m-%dT%H:%M:%S")})
    frame["load_kwh"] = series.load
    for name in CSV_COLUMNS[2:]:
        frame[name] = series.column(name)
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


@dataclass(frozen=True, eq=False)
class Windows:
    """Model samples: ``X`` (N, T, n), past loads ``Y`` (N, T), targets (N,).

    ``target_index`` holds each target's position in the source series.
    """

    X: np.ndarray
    Y: np.ndarray
    target: np.ndarray
    target_index: np.ndarray

    def __len__(self) -> int:
        return self.target.shape[0]

    def __getitem__(self, idx) -> "Windows":
        return Windows(self.X[idx], self.Y[idx], self.target[idx], self.target_index[idx])

    def stacked(self) -> np.ndarray:
        """Estimator layout (N, T, n + 1) with the past load as the last channel."""
        return np.concatenate([self.X, self.Y[:, :, None]], axis=2)


def make_windows(features, load, window: int = 12, horizon: int = 4) -> Windows:
    """All windows of ``window`` steps whose target lies ``horizon`` steps past the end.

    Window ``d`` reads positions ``d .. d + window - 1`` and targets
    ``d + window + horizon - 1``. A series shorter than ``window + horizon``
    yields no windows.
    """
    if window < 1 or horizon < 1:
        raise ValueError(f"window and horizon must be >= 1, got {window}, {horizon}")
    features = np.asarray(features, dtype=np.float64)
    load = np.asarray(load, dtype=np.float64)
    N = load.shape[0]
    count = max(N - window - horizon + 1, 0)
    n = features.shape[1]
    if count == 0:
        return Windows(np.zeros((0, window, n)), np.zeros((0, window)), np.zeros(0), np.zeros(0, dtype=np.int64))
    starts = np.arange(count)
    idx = starts[:, None] + np.arange(window)
    target_index = starts + window + horizon - 1
    return Windows(features[idx], load[idx], load[target_index].copy(), target_index)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1

    def __post_init__(self):
        parts = (self.train, self.val, self.test)
        if any(p < 0 for p in parts) or Fraction(str(self.train)) + Fraction(str(self.val)) + Fraction(str(self.test)) != 1:
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {parts}")


def split_sizes(n: int, spec: SplitSpec = SplitSpec()) -> tuple[int, int, int]:
    """``floor(train * n)``, ``floor(val * n)`` and the remainder."""
    n_train = math.floor(Fraction(str(spec.train)) * n)
    n_val = math.floor(Fraction(str(spec.val)) * n)
    return n_train, n_val, n - n_train - n_val


def split(samples, spec: SplitSpec = SplitSpec(), min_size: int = 10):
    """Chronological train/val/test partition of anything sliceable."""
    n = len(samples)
    if n < min_size:
        raise DataError(f"need at least {min_size} samples to split, got {n}")
    a, b, _ = split_sizes(n, spec)
    return samples[:a], samples[a : a + b], samples[a + b :]


class LoadScaler(TransformerMixin, BaseEstimator):
    """Per-column z-scores with fixed ranges for calendar columns.

    Works on arrays whose columns are the nine features followed by the load.
    Columns listed in ``calendar`` are divided by their maximum index. A
    column with zero variance keeps scale 1 and is reported in
    ``constant_columns_``.
    """

    def __init__(self, calendar: dict | None = None):
        self.calendar = calendar

    def _calendar(self) -> dict:
        return {FEATURES.index(k): v for k, v in CALENDAR.items()} if self.calendar is None else dict(self.calendar)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        cal = self._calendar()
        mean = X.mean(axis=0)
        constant = X.max(axis=0) == X.min(axis=0)
        scale = np.where(constant, 1.0, X.std(axis=0))
        mean = np.where(constant, X[0], mean)
        for j, top in cal.items():
            mean[j], scale[j], constant[j] = 0.0, top, False
        self.mean_, self.scale_ = mean, scale
        self.constant_ = constant
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def constant_columns_(self) -> list[int]:
        check_is_fitted(self)
        return [int(j) for j in np.flatnonzero(self.constant_)]

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        return X * self.scale_ + self.mean_

    def transform_load(self, y) -> np.ndarray:
        check_is_fitted(self)
        return (np.asarray(y, dtype=np.float64) - self.mean_[-1]) / self.scale_[-1]

    def inverse_transform_load(self, y) -> np.ndarray:
        check_is_fitted(self)
        return np.asarray(y, dtype=np.float64) * self.scale_[-1] + self.mean_[-1]


def _table(series: LoadSeries) -> np.ndarray:
    return np.column_stack([series.features, series.load])


def normalize(train: LoadSeries, *others: LoadSeries):
    """Fit a :class:`LoadScaler` on ``train`` and transform every given split.

    Returns ``(scaler, [train, *others])`` with each split as a scaled
    (N, 10) array of features followed by load.
    """
    if len(train) == 0:
        raise DataError("cannot fit a scaler on an empty training split")
    scaler = LoadScaler().fit(_table(train))
    return scaler, [scaler.transform(_table(s)) if len(s) else np.zeros((0, len(FEATURES) + 1))
                    for s in (train, *others)]


@dataclass(frozen=True, eq=False)
class ClientData:
    """Scaled train/val/test windows for one client plus what evaluation needs.

    ``test_loads`` are the test targets in kWh and ``test_history`` the
    ``horizon`` loads preceding the first test target.
    """

    client: str
    scaler: LoadScaler
    train: Windows
    val: Windows
    test: Windows
    test_loads: np.ndarray
    test_history: np.ndarray
    window: int = 12
    horizon: int = 4
    constant_features: list = field(default_factory=list)


def prepare_client(series: LoadSeries, window: int = 12, horizon: int = 4,
                   spec: SplitSpec = SplitSpec()) -> ClientData:
    """Split the raw series, scale with train statistics, then window each split."""
    train, val, test = split(series, spec)
    scaler, (tr, va, te) = normalize(train, val, test)
    wins = [make_windows(a[:, :-1], a[:, -1], window, horizon) for a in (tr, va, te)]
    if len(wins[0]) == 0 or len(wins[2]) == 0:
        raise DataError(
            f"series {series.client!r} of length {len(series)} is too short for window={window}, "
            f"horizon={horizon} in every split"
        )
    first = wins[2].target_index[0]
    return ClientData(
        client=series.client,
        scaler=scaler,
        train=wins[0],
        val=wins[1],
        test=wins[2],
        test_loads=test.load[wins[2].target_index].copy(),
        test_history=test.load[first - horizon : first].copy(),
        window=window,
        horizon=horizon,
        constant_features=[FEATURES[j] for j in scaler.constant_columns_ if j < len(FEATURES)],
    )


# -- synthetic clients ---------------------------------------------------------

_START = np.datetime64("2018-06-04T00:00")  # a Monday


def _smooth_noise(rng: np.random.Generator, n: int, rho: float, sigma: float) -> np.ndarray:
    """Stationary AR(1) path with marginal standard deviation ``sigma``."""
    eps = rng.standard_normal(n) * sigma * math.sqrt(1.0 - rho * rho)
    out = np.empty(n)
    out[0] = rng.standard_normal() * sigma
    for t in range(1, n):
        out[t] = rho * out[t - 1] + eps[t]
    return out


def _weather(rng: np.random.Generator, n: int):
    hours = np.arange(n) / 4.0
    temp = 24.0 + 5.0 * np.sin(2 * np.pi * (hours - 9.0) / 24.0) + _smooth_noise(rng, n, 0.995, 3.0)
    cloud = 1.0 / (1.0 + np.exp(-_smooth_noise(rng, n, 0.99, 1.5)))
    sun = np.clip(np.sin(np.pi * (hours % 24 - 6.0) / 13.0), 0.0, None)
    ghi = 900.0 * sun * (1.0 - 0.75 * cloud)
    wind = np.abs(3.5 + _smooth_noise(rng, n, 0.98, 1.8))
    return ghi, temp, wind


def _building(rng: np.random.Generator, n: int, interval: np.ndarray, weekday: np.ndarray,
              ghi: np.ndarray, temp: np.ndarray) -> np.ndarray:
    """Unscaled, positive load shape for one building with its own habits."""
    hour = interval / 4.0
    open_h = rng.uniform(5.0, 9.0)
    close_h = open_h + rng.uniform(8.0, 14.0)
    ramp = rng.uniform(0.5, 2.0)
    occupied = (1.0 / (1.0 + np.exp(-(hour - open_h) / ramp * 4))) * (1.0 / (1.0 + np.exp((hour - close_h) / ramp * 4)))
    weekend = weekday >= 5
    occupied = occupied * np.where(weekend, rng.uniform(0.05, 0.9), 1.0)
    if rng.random() < 0.5:  # some buildings peak at lunch, others late in the day
        occupied = occupied * (1.0 + rng.uniform(0.1, 0.5) * np.exp(-0.5 * ((hour - rng.uniform(11, 17)) / 1.5) ** 2))
    setpoint = rng.uniform(20.0, 26.0)
    cooling = rng.uniform(0.05, 0.4) * np.clip(temp - setpoint, 0.0, None) * (0.4 + occupied)
    solar = rng.uniform(0.0, 0.4) * ghi / 900.0
    base = rng.uniform(0.15, 0.5)
    noise = np.exp(_smooth_noise(rng, n, rng.uniform(0.6, 0.95), rng.uniform(0.03, 0.1)))
    return (base + occupied + cooling + solar) * noise


def _calibrate(shape: np.ndarray, mean: float, var: float) -> np.ndarray:
    """Affine map onto the target moments, raising the shape to a power
    first when needed so that the result stays strictly positive."""
    sd = math.sqrt(var)
    floor = 0.02 * mean
    p = 1.0
    while True:
        r = shape**p
        z = (r - r.mean()) / r.std()
        out = mean + sd * z
        if out.min() > floor or p > 64:
            return out
        p *= 1.25


def synth_generate(n_clients: int, days: int, seed: int, rows=None) -> list[LoadSeries]:
    """Heterogeneous building loads calibrated to the mean/variance table.

    Clients take calibration rows in order (1-based ``rows`` picks others).
    Weather is shared across clients; static building features are drawn
    once per client. Each series has exactly the target mean and variance.
    """
    rows = list(range(1, n_clients + 1)) if rows is None else [int(r) for r in rows]
    if n_clients < 1 or len(rows) != n_clients:
        raise ValueError(f"need one calibration row per client, got {n_clients} clients and rows {rows}")
    if any(not 1 <= r <= len(TABLE_I) for r in rows):
        raise ValueError(f"calibration rows must lie in 1..{len(TABLE_I)} (the table has {len(TABLE_I)} rows), got {rows}")
    if days < 2:
        raise ValueError(f"need at least 2 days, got {days}")
    n = days * 96
    ts = _START + np.arange(n) * STEP
    interval, weekday = _calendar(ts)
    ghi, temp, wind = _weather(_rng.substream(seed, _rng.SYNTH, _rng.SERVER), n)
    out = []
    for m, row in enumerate(rows):
        rng = _rng.substream(seed, _rng.SYNTH, _rng.client_key(m))
        mean, var = TABLE_I[row - 1]
        load = _calibrate(_building(rng, n, interval, weekday, ghi, temp), mean, var)
        floor = mean * rng.uniform(8.0, 14.0)
        out.append(LoadSeries.from_columns(
            f"client_{m + 1:03d}", ts, load, ghi, temp, wind,
            floor_area=round(floor, 1),
            window_area=round(floor * rng.uniform(0.1, 0.4), 1),
            roof_area=round(floor / rng.integers(1, 6), 1),
            cooling_capacity=round(mean * rng.uniform(1.5, 3.0), 1),
        ))
    return out
