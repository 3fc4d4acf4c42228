"""Synchronous federated training with personalization layers and noisy updates.

``run_ppfl`` runs the protocol for the ``ppfl``, ``personalized`` and ``fl``
modes; ``run_baseline`` covers ``local`` and ``pooled``. ``run`` dispatches on
``config.mode``.

Every random draw comes from a substream keyed by the seed: the server's
initial ``phi`` from ``(INIT, server)``, client ``m``'s initial ``psi`` from
``(INIT, m)``, its minibatches from ``(BATCH, m)`` and its round-``k`` noise
from ``(NOISE, m, k)``. Clients within a round may run on worker threads; the
server sums their messages in client order, so results do not depend on
scheduling.
"""

from __future__ import annotations

import csv
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import _rng
from .data import ClientData, Windows
from .metrics import ClientScore, EvalReport
from .model import (
    BLOCKS,
    ENCODER_BLOCKS,
    DarnnConfig,
    ParamLayout,
    loss_and_grad,
    predict,
    save_params,
)
from .optim import (
    AdamConfig,
    AdamState,
    FedAdamConfig,
    FedAdamState,
    MinibatchSampler,
    client_update,
    server_update,
)
from .privacy import DpConfig, noise_update, parse_epsilon

__all__ = [
    "MODES",
    "ConfigError",
    "ExperimentConfig",
    "RoundTelemetry",
    "ClientModel",
    "FederatedResult",
    "encode_update",
    "decode_update",
    "run",
    "run_ppfl",
    "run_baseline",
    "evaluate",
    "evaluate_thetas",
    "federated_objective",
    "TELEMETRY_HEADER",
]

MODES = ("ppfl", "local", "pooled", "fl", "personalized")
TELEMETRY_HEADER = ("round", "client", "train_loss", "delta_l1_pre", "delta_l1_post", "noise_l1", "seconds")


class ConfigError(ValueError):
    """Inconsistent experiment settings."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a run. Defaults are the desk-scale profile."""

    mode: str = "ppfl"
    rounds: int = 200
    local_steps: int = 5
    batch_size: int = 64
    clip: float = 200.0
    epsilon: float | None = None
    hidden: int = 16
    n_layers: int = 2
    window: int = 12
    horizon: int = 4
    n_features: int = 9
    seed: int = 0
    share_all: bool = False
    pooled_batch_size: int | None = None
    eval_every: int = 25
    eval_params: str = "client"
    workers: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    delta: float = 1e-8
    server_lr: float = 0.01
    server_beta1: float = 0.99
    server_beta2: float = 0.999
    server_delta: float = 1e-8

    def __post_init__(self):
        try:
            object.__setattr__(self, "epsilon", parse_epsilon(self.epsilon))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.epsilon is not None and self.mode != "ppfl":
            raise ConfigError(f"epsilon applies only to mode=ppfl, not mode={self.mode}")
        for name in ("local_steps", "batch_size", "hidden", "n_layers", "window", "horizon",
                     "n_features", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.rounds < 0 or self.eval_every < 0 or self.seed < 0:
            raise ConfigError("rounds, eval_every and seed must be non-negative")
        if self.pooled_batch_size is not None and self.pooled_batch_size < 1:
            raise ConfigError(f"pooled_batch_size must be >= 1, got {self.pooled_batch_size}")
        if not self.clip > 0:
            raise ConfigError(f"clip must be positive, got {self.clip}")
        if self.eval_params not in ("client", "server"):
            raise ConfigError(f"eval_params must be 'client' or 'server', got {self.eval_params!r}")
        try:
            self.adam, self.fedadam  # noqa: B018 - validates the hyperparameters
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def full_scale(cls, **overrides) -> "ExperimentConfig":
        """Full-scale profile: hidden 30 and 4000 rounds."""
        return cls(**{"hidden": 30, "rounds": 4000, **overrides})

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["epsilon"] = "off" if self.epsilon is None else self.epsilon
        return out

    @property
    def dp(self) -> DpConfig:
        return DpConfig(self.epsilon, self.clip)

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2, self.delta)

    @property
    def fedadam(self) -> FedAdamConfig:
        return FedAdamConfig(self.server_lr, self.server_beta1, self.server_beta2, self.server_delta)

    @property
    def shares_all(self) -> bool:
        return self.share_all or self.mode == "fl"

    @property
    def federated(self) -> bool:
        return self.mode in ("ppfl", "fl", "personalized")

    def model_config(self) -> DarnnConfig:
        return DarnnConfig(self.n_features, self.window, self.hidden, self.n_layers)

    def layout(self) -> ParamLayout:
        shared = BLOCKS if self.shares_all else ENCODER_BLOCKS
        return ParamLayout(self.model_config(), shared)


class RoundTelemetry(NamedTuple):
    """One (round, client) record; L1 norms refer to the shared-parameter update."""

    round: int
    client: int
    train_loss: float
    delta_l1_pre: float
    delta_l1_post: float
    noise_l1: float
    seconds: float


class ClientModel(NamedTuple):
    phi: np.ndarray
    psi: np.ndarray


@dataclass
class FederatedResult:
    config: ExperimentConfig
    layout: ParamLayout
    server_phi: np.ndarray | None
    clients: list
    telemetry: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    message_sizes: list = field(default_factory=list)
    server_state: FedAdamState | None = None

    def theta(self, m: int, params: str | None = None) -> np.ndarray:
        """Client ``m``'s model; ``params="server"`` swaps in the server's ``phi``."""
        params = self.config.eval_params if params is None else params
        c = self.clients[m]
        if params == "server":
            if self.server_phi is None:
                raise ValueError(f"mode={self.config.mode} has no server model")
            return self.layout.merge(self.server_phi, c.psi)
        return self.layout.merge(c.phi, c.psi)

    def write_telemetry(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TELEMETRY_HEADER)
            for r in self.telemetry:
                w.writerow([r.round, r.client, repr(r.train_loss), repr(r.delta_l1_pre),
                            repr(r.delta_l1_post), repr(r.noise_l1), f"{r.seconds:.6f}"])

    def write_validation(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("round", "client", "val_loss"))
            for k, m, v in self.validation:
                w.writerow([k, m, repr(v)])

    def save_checkpoints(self, directory, names: Sequence[str] | None = None) -> list[Path]:
        """Write ``client_XXX.ckpt`` per client and ``server.ckpt`` when there is a server."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for m in range(len(self.clients)):
            meta = {"client": m, "mode": self.config.mode, "rounds": self.config.rounds,
                    "name": names[m] if names else f"client_{m + 1:03d}"}
            path = directory / f"client_{m:03d}.ckpt"
            save_params(path, self.theta(m, "client"), self.layout, meta)
            paths.append(path)
        if self.server_phi is not None:
            path = directory / "server.ckpt"
            save_params(path, self.server_phi, self.layout,
                        {"mode": self.config.mode, "rounds": self.config.rounds}, part="shared")
            paths.append(path)
        return paths


# -- client/server messages ----------------------------------------------------

_MSG = struct.Struct("<4sIIQ")
_MSG_MAGIC = b"PPFU"


def encode_update(round_: int, client: int, values: np.ndarray) -> bytes:
    """Serialize a client-to-server message: header plus float64 payload."""
    values = np.ascontiguousarray(values, dtype="<f8")
    return _MSG.pack(_MSG_MAGIC, round_, client, values.size) + values.tobytes()


def decode_update(message: bytes) -> tuple[int, int, np.ndarray]:
    magic, round_, client, count = _MSG.unpack_from(message)
    if magic != _MSG_MAGIC or len(message) != _MSG.size + 8 * count:
        raise ValueError("malformed client update message")
    return round_, client, np.frombuffer(message, dtype="<f8", offset=_MSG.size).astype(np.float64)


# -- helpers ---------------------------------------------------------------------


def _grad_fn(layout: ParamLayout, windows: Windows):
    def fn(theta, idx):
        return loss_and_grad(theta, layout, windows.X[idx], windows.Y[idx], windows.target[idx])

    return fn


def _mean_loss(theta: np.ndarray, layout: ParamLayout, windows: Windows) -> float:
    if len(windows) == 0:
        return float("nan")
    y_hat = predict(theta, layout, windows.X, windows.Y)
    return float(np.mean((y_hat - windows.target) ** 2))


def federated_objective(thetas: Sequence[np.ndarray], layout: ParamLayout, windows: Sequence[Windows]) -> float:
    """Mean over clients of each client's mean squared loss on its own samples."""
    if len(thetas) != len(windows) or not windows:
        raise ValueError("need one parameter vector per client dataset")
    return float(np.mean([_mean_loss(t, layout, w) for t, w in zip(thetas, windows)]))


def _check_clients(datasets: Sequence[ClientData], cfg: ExperimentConfig):
    if not datasets:
        raise ValueError("need at least one client dataset")
    for m, d in enumerate(datasets):
        if len(d.train) == 0:
            raise ValueError(f"client {m} has no training windows")
        if d.train.X.shape[1:] != (cfg.window, cfg.n_features):
            raise ValueError(
                f"client {m} windows have shape {d.train.X.shape[1:]}, config expects "
                f"({cfg.window}, {cfg.n_features})"
            )


def _init_params(cfg: ExperimentConfig, layout: ParamLayout, n_clients: int):
    phi0 = layout.initialize(_rng.substream(cfg.seed, _rng.INIT, _rng.SERVER), "shared")
    psi0 = [layout.initialize(_rng.substream(cfg.seed, _rng.INIT, _rng.client_key(m)), "personal")
            for m in range(n_clients)]
    return phi0, psi0


def _sampler(cfg: ExperimentConfig, m: int, n: int) -> MinibatchSampler:
    return MinibatchSampler(n, _rng.substream(cfg.seed, _rng.BATCH, _rng.client_key(m)))


# -- protocol ----------------------------------------------------------------------


def run_ppfl(cfg: ExperimentConfig, datasets: Sequence[ClientData]) -> FederatedResult:
    """Run ``cfg.rounds`` synchronous rounds of broadcast, local Adam, noise and FedAdam.

    Each client's returned model is its own last local copy ``(phi^m_K, psi^m_K)``.
    """
    if not cfg.federated:
        raise ConfigError(f"run_ppfl handles ppfl, personalized and fl, not {cfg.mode}")
    _check_clients(datasets, cfg)
    layout = cfg.layout()
    M = len(datasets)
    dp = cfg.dp if cfg.mode == "ppfl" else DpConfig(None, cfg.clip)
    phi, psi = _init_params(cfg, layout, M)
    clients = [ClientModel(phi.copy(), p.copy()) for p in psi]
    server = FedAdamState(layout.n_shared, cfg.fedadam)
    samplers = [_sampler(cfg, m, len(d.train)) for m, d in enumerate(datasets)]
    grads = [_grad_fn(layout, d.train) for d in datasets]
    result = FederatedResult(cfg, layout, phi, clients)

    def client_round(k: int, m: int, phi_prev: np.ndarray):
        start = time.perf_counter()
        res = client_update(phi_prev, clients[m].psi, grads[m], len(datasets[m].train), cfg.local_steps,
                            cfg.clip, cfg.batch_size, samplers[m], cfg.adam)
        true_delta = res.phi - phi_prev
        noisy = noise_update(true_delta, dp, _rng.substream(cfg.seed, _rng.NOISE, _rng.client_key(m), k))
        record = RoundTelemetry(k, m, res.train_loss, res.phi_l1_pre, float(np.abs(true_delta).sum()),
                                float(np.abs(noisy - true_delta).sum()), 0.0)
        return res, encode_update(k, m, noisy), record, time.perf_counter() - start

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for k in range(1, cfg.rounds + 1):
            phi_prev = phi
            if pool is None:
                outs = [client_round(k, m, phi_prev) for m in range(M)]
            else:
                outs = list(pool.map(lambda m: client_round(k, m, phi_prev), range(M)))
            deltas = []
            for m, (res, message, record, seconds) in enumerate(outs):
                clients[m] = ClientModel(res.phi, res.psi)
                rk, rm, values = decode_update(message)
                if (rk, rm) != (k, m):
                    raise RuntimeError(f"message from client {rm} round {rk} arrived out of order")
                result.message_sizes.append(values.size)
                deltas.append(values)
                result.telemetry.append(record._replace(seconds=seconds))
            phi, server = server_update(phi_prev, deltas, server)
            if cfg.eval_every and k % cfg.eval_every == 0:
                for m, d in enumerate(datasets):
                    result.validation.append((k, m, _mean_loss(layout.merge(*clients[m]), layout, d.val)))
    finally:
        if pool is not None:
            pool.shutdown()
    result.server_phi = phi
    result.server_state = server
    return result


def _train_continuous(cfg: ExperimentConfig, layout: ParamLayout, theta: np.ndarray, grad_fn, sampler,
                      batch_size: int, n_samples: int, client: int, per_step: bool, result: FederatedResult,
                      val: Windows | None):
    """K * K~ Adam steps with one optimizer state; telemetry per step or per K~ block."""
    state = AdamState(theta.size, cfg.adam)
    n_shared = layout.n_shared
    for k in range(1, cfg.rounds + 1):
        start, block_start, losses = time.perf_counter(), theta, []
        for _ in range(cfg.local_steps):
            step_start, before = time.perf_counter(), theta
            value, grad = grad_fn(theta, sampler.next(batch_size))
            theta = state.step(theta, grad)
            if per_step:
                d = np.abs(theta[:n_shared] - before[:n_shared]).sum()
                result.telemetry.append(RoundTelemetry(len(result.telemetry) + 1, client, value, float(d),
                                                       float(d), 0.0, time.perf_counter() - step_start))
            losses.append(value)
        if not per_step:
            d = float(np.abs(theta[:n_shared] - block_start[:n_shared]).sum())
            result.telemetry.append(RoundTelemetry(k, client, float(np.mean(losses)), d, d, 0.0,
                                                   time.perf_counter() - start))
        if val is not None and cfg.eval_every and k % cfg.eval_every == 0:
            result.validation.append((k, client, _mean_loss(theta, layout, val)))
    return theta


def _concat(windows: Sequence[Windows]) -> Windows:
    return Windows(*(np.concatenate([getattr(w, f) for w in windows]) for f in ("X", "Y", "target", "target_index")))


def run_baseline(cfg: ExperimentConfig, datasets: Sequence[ClientData]) -> FederatedResult:
    """Local (one model per client) or pooled (one model on all clients' data) training.

    Both run ``K * K~`` Adam steps without clipping or noise. The pooled batch
    is ``M * B`` unless ``pooled_batch_size`` overrides it. A local model for
    client ``m`` starts from the server's initial ``phi`` and client ``m``'s
    initial ``psi``; the pooled model uses client 0's streams.
    """
    if cfg.mode not in ("local", "pooled"):
        raise ConfigError(f"run_baseline handles local and pooled, not {cfg.mode}")
    _check_clients(datasets, cfg)
    layout = cfg.layout()
    M = len(datasets)
    phi0, psi0 = _init_params(cfg, layout, M)
    result = FederatedResult(cfg, layout, None, [])
    if cfg.mode == "local":
        for m, d in enumerate(datasets):
            theta = _train_continuous(cfg, layout, layout.merge(phi0, psi0[m]), _grad_fn(layout, d.train),
                                      _sampler(cfg, m, len(d.train)), cfg.batch_size, len(d.train), m,
                                      False, result, d.val)
            result.clients.append(ClientModel(*layout.partition(theta)))
        result.telemetry.sort(key=lambda r: (r.round, r.client))
        result.validation.sort()
        return result
    pooled = _concat([d.train for d in datasets])
    batch = cfg.pooled_batch_size or M * cfg.batch_size
    val = _concat([d.val for d in datasets])
    theta = _train_continuous(cfg, layout, layout.merge(phi0, psi0[0]), _grad_fn(layout, pooled),
                              _sampler(cfg, 0, len(pooled)), batch, len(pooled), 0, True, result,
                              val if len(val) else None)
    model = ClientModel(*layout.partition(theta))
    result.clients = [ClientModel(model.phi.copy(), model.psi.copy()) for _ in range(M)]
    return result


def run(cfg: ExperimentConfig, datasets: Sequence[ClientData]) -> FederatedResult:
    return run_ppfl(cfg, datasets) if cfg.federated else run_baseline(cfg, datasets)


def evaluate(result: FederatedResult, datasets: Sequence[ClientData], params: str | None = None) -> EvalReport:
    """Score each client's model on its test windows in kWh."""
    if len(datasets) != len(result.clients):
        raise ValueError(f"{len(datasets)} datasets for {len(result.clients)} client models")
    return evaluate_thetas([result.theta(m, params) for m in range(len(datasets))], result.layout, datasets)


def evaluate_thetas(thetas: Sequence[np.ndarray], layout: ParamLayout, datasets: Sequence[ClientData]) -> EvalReport:
    report = EvalReport()
    for theta, d in zip(thetas, datasets):
        y_hat = d.scaler.inverse_transform_load(predict(theta, layout, d.test.X, d.test.Y))
        report.clients.append(ClientScore.score(d.client, d.test_loads, y_hat, d.horizon, d.test_history))
        report.ape[d.client] = (d.test_loads, y_hat)
    return report
