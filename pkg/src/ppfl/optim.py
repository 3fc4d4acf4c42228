"""Client Adam with L1 update clipping and server-side FedAdam.

The client optimizer differs from textbook Adam in two places: the second
moment starts at ``delta`` instead of zero, and ``delta`` is added again in
the denominator. The server applies FedAdam without bias
correction and *adds* the step, since client deltas already point downhill.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

__all__ = [
    "AdamConfig",
    "FedAdamConfig",
    "AdamState",
    "FedAdamState",
    "MinibatchSampler",
    "ClientResult",
    "clip_l1",
    "client_update",
    "server_update",
]


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    delta: float = 1e-8

    def __post_init__(self):
        _check_hyper(self.lr, self.beta1, self.beta2, self.delta)


@dataclass(frozen=True)
class FedAdamConfig:
    lr: float = 0.01
    beta1: float = 0.99
    beta2: float = 0.999
    delta: float = 1e-8

    def __post_init__(self):
        _check_hyper(self.lr, self.beta1, self.beta2, self.delta)


def _check_hyper(lr, beta1, beta2, delta):
    if not lr > 0 or not delta > 0:
        raise ValueError(f"learning rate and delta must be positive, got lr={lr}, delta={delta}")
    if not (0 < beta1 < 1 and 0 < beta2 < 1):
        raise ValueError(f"betas must lie in (0, 1), got {beta1}, {beta2}")


class AdamState:
    """Moments of the client optimizer; ``m = 0``, ``v = delta`` when fresh."""

    def __init__(self, size: int, config: AdamConfig = AdamConfig()):
        self.config = config
        self.m = np.zeros(size)
        self.v = np.full(size, config.delta)
        self.k = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return the parameters after one bias-corrected step."""
        c = self.config
        self.k += 1
        self.m *= c.beta1
        self.m += (1.0 - c.beta1) * grad
        self.v *= c.beta2
        self.v += (1.0 - c.beta2) * (grad * grad)
        m_hat = self.m / (1.0 - c.beta1**self.k)
        v_hat = self.v / (1.0 - c.beta2**self.k)
        return theta - c.lr * m_hat / (np.sqrt(v_hat) + c.delta)


class FedAdamState:
    """Server moments over phi; they persist across rounds."""

    def __init__(self, size: int, config: FedAdamConfig = FedAdamConfig()):
        self.config = config
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.k = 0

    def copy(self) -> "FedAdamState":
        out = FedAdamState.__new__(FedAdamState)
        out.config, out.m, out.v, out.k = self.config, self.m.copy(), self.v.copy(), self.k
        return out


class MinibatchSampler:
    """Shuffled passes over ``n`` indices, reshuffled when a pass runs out.

    A batch larger than what is left of the current pass continues into the
    next pass, so ``batch_size > n`` wraps around instead of failing.
    """

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("cannot sample minibatches from an empty dataset")
        self.n = n
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self, batch_size: int) -> np.ndarray:
        if batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {batch_size}")
        parts, need = [], batch_size
        while need:
            if self._pos == self._order.size:
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            take = min(need, self._order.size - self._pos)
            parts.append(self._order[self._pos : self._pos + take])
            self._pos += take
            need -= take
        return parts[0] if len(parts) == 1 else np.concatenate(parts)


def clip_l1(delta, clip: float) -> np.ndarray:
    """Rescale ``delta`` onto the L1 ball of radius ``clip`` if it lies outside.

    The scale is nudged down by ulps until the rounded result satisfies the
    bound, which also makes the operation idempotent.
    """
    if not clip > 0:
        raise ValueError(f"clip value must be positive, got {clip}")
    delta = np.asarray(delta, dtype=np.float64)
    norm = np.abs(delta).sum()
    if norm <= clip:
        return delta.copy()
    if not np.isfinite(norm):
        raise ValueError("cannot clip a non-finite update")
    scale = clip / norm
    out = delta * scale
    while np.abs(out).sum() > clip:
        scale = np.nextafter(scale, 0.0)
        out = delta * scale
    return out


class ClientResult(NamedTuple):
    """Updated parameters; L1 norms are of the whole theta update unless named ``phi``."""

    phi: np.ndarray
    psi: np.ndarray
    train_loss: float
    delta_l1_pre: float
    delta_l1_post: float
    phi_l1_pre: float


GradFn = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


def client_update(phi, psi, grad_fn: GradFn, n_samples: int, n_steps: int, clip: float | None,
                  batch_size: int, sampler: MinibatchSampler | np.random.Generator,
                  config: AdamConfig = AdamConfig()) -> ClientResult:
    """Run ``n_steps`` minibatch Adam steps on ``theta = [phi, psi]`` and clip the update.

    ``grad_fn(theta, idx)`` returns the mean loss and its gradient over the
    samples ``idx``. ``clip=None`` skips clipping. ``train_loss`` is the mean
    minibatch loss over the steps.
    """
    if n_steps < 1:
        raise ValueError(f"client epochs must be >= 1, got {n_steps}")
    if n_samples < 1:
        raise ValueError("client dataset is empty")
    if isinstance(sampler, np.random.Generator):
        sampler = MinibatchSampler(n_samples, sampler)
    phi = np.asarray(phi, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    theta0 = np.concatenate([phi, psi])
    theta = theta0
    state = AdamState(theta0.size, config)
    total = 0.0
    for _ in range(n_steps):
        value, grad = grad_fn(theta, sampler.next(batch_size))
        total += value
        theta = state.step(theta, grad)
    delta = theta - theta0
    pre = float(np.abs(delta).sum())
    k = phi.size
    phi_pre = float(np.abs(delta[:k]).sum())
    if clip is not None and pre > clip:
        theta = theta0 + clip_l1(delta, clip)
    post = float(np.abs(theta - theta0).sum())
    return ClientResult(theta[:k].copy(), theta[k:].copy(), total / n_steps, pre, post, phi_pre)


def server_update(phi_prev, deltas, state: FedAdamState) -> tuple[np.ndarray, FedAdamState]:
    """Average client deltas in index order and take one FedAdam step.

    Returns the new ``phi`` and a new state; ``state`` itself is not modified.
    """
    phi_prev = np.asarray(phi_prev, dtype=np.float64)
    if len(deltas) == 0:
        raise ValueError("server update needs at least one client delta")
    total = np.zeros_like(phi_prev)
    for m, d in enumerate(deltas):
        d = np.asarray(d, dtype=np.float64)
        if d.shape != phi_prev.shape:
            raise ValueError(f"delta from client {m} has shape {d.shape}, expected {phi_prev.shape}")
        total += d
    avg = total / len(deltas)
    c = state.config
    new = state.copy()
    new.m = c.beta1 * state.m + (1.0 - c.beta1) * avg
    new.v = c.beta2 * state.v + (1.0 - c.beta2) * (avg * avg)
    new.k = state.k + 1
    return phi_prev + c.lr * new.m / (np.sqrt(new.v) + c.delta), new
