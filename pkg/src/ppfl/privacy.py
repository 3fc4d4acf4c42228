"""Laplace noise for the shared-layer updates.

A client update whose L1 norm is at most ``C`` becomes epsilon-DP once every
coordinate receives independent ``Laplace(0, 2C/epsilon)`` noise. The budget
is per message; composition across rounds is not tracked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["DpConfig", "laplace_scale", "laplace_from_uniform", "laplace_sample", "noise_update",
           "parse_epsilon", "DEFAULT_EPSILONS"]

DEFAULT_EPSILONS = (0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0)

_OFF = ("off", "none", "inf", "")


def parse_epsilon(value) -> float | None:
    """Read an epsilon setting; ``"off"`` (or ``None``) disables noise."""
    if value is None:
        return None
    if isinstance(value, str):
        if value.strip().lower() in _OFF:
            return None
        try:
            value = float(value)
        except ValueError:
            raise ValueError(f"epsilon must be a positive number or 'off', got {value!r}") from None
    value = float(value)
    if not (value > 0 and math.isfinite(value)):
        raise ValueError(f"epsilon must be positive and finite, got {value}")
    return value


def laplace_scale(clip: float, epsilon: float) -> float:
    if not clip > 0:
        raise ValueError(f"clip value must be positive, got {clip}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return 2.0 * clip / epsilon


@dataclass(frozen=True)
class DpConfig:
    """Privacy budget per message and the clip value it is calibrated to."""

    epsilon: float | None = None
    clip: float = 200.0

    def __post_init__(self):
        object.__setattr__(self, "epsilon", parse_epsilon(self.epsilon))
        if not self.clip > 0:
            raise ValueError(f"clip value must be positive, got {self.clip}")

    @property
    def enabled(self) -> bool:
        return self.epsilon is not None

    @property
    def scale(self) -> float | None:
        return None if self.epsilon is None else laplace_scale(self.clip, self.epsilon)


def laplace_from_uniform(u, b: float):
    """Inverse CDF: ``-b * sign(u) * ln(1 - 2|u|)`` for ``u`` in (-1/2, 1/2)."""
    if not b > 0:
        raise ValueError(f"Laplace scale must be positive, got {b}")
    u = np.asarray(u, dtype=np.float64)
    if np.any(np.abs(u) >= 0.5):
        raise ValueError("uniform input must lie in the open interval (-1/2, 1/2)")
    out = -b * np.sign(u) * np.log1p(-2.0 * np.abs(u))
    return float(out) if out.ndim == 0 else out


def _open_uniform(rng: np.random.Generator, size) -> np.ndarray:
    # (k + 1/2) / 2**52 is exact and never 0 or 1, so u is never -1/2 or 1/2
    k = rng.integers(0, 1 << 52, size=size, dtype=np.int64)
    return (k + 0.5) * 2.0**-52 - 0.5


def laplace_sample(b: float, rng: np.random.Generator, size=None):
    """Draw ``Laplace(0, b)`` samples by inverse-CDF transform."""
    if not b > 0:
        raise ValueError(f"Laplace scale must be positive, got {b}")
    return laplace_from_uniform(_open_uniform(rng, size), b)


def noise_update(delta_phi, config: DpConfig, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Laplace noise at scale ``2C/epsilon``; a copy of the input when off."""
    delta_phi = np.asarray(delta_phi, dtype=np.float64)
    if not config.enabled:
        return delta_phi.copy()
    return delta_phi + laplace_sample(config.scale, rng, size=delta_phi.shape)
