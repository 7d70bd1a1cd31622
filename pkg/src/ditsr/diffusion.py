"""Residual-shifting diffusion between an HR image ``x0`` and its LR twin ``y0``.

The forward marginal is ``x_t ~ N(x0 + eta_t (y0 - x0), kappa^2 eta_t I)`` and
the reverse step is the Gaussian posterior with the denoiser's x0 estimate
plugged in. ``eta[0] = 0`` so the step increments ``alpha_t = eta_t - eta_{t-1}``
use one formula for every t, and the last reverse step is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import make_rng

Denoise = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class ShiftSchedule:
    eta: np.ndarray
    kappa: float

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=np.float64)
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)
        if eta[0] != 0.0:
            raise ValueError("eta[0] must be 0")
        if np.any(np.diff(eta) <= 0):
            raise ValueError("eta must be strictly increasing")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")

    @property
    def T(self) -> int:
        return len(self.eta) - 1

    @property
    def alpha(self) -> np.ndarray:
        """``alpha[t] = eta[t] - eta[t-1]``; ``alpha[0]`` is unused and set to 0."""
        return np.concatenate([[0.0], np.diff(self.eta)])

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")


def build_schedule(T: int = 15, eta1: float = 0.04, etaT: float = 0.999, kappa: float = 2.0) -> ShiftSchedule:
    """Geometric interpolation in ``sqrt(eta)`` between ``eta1`` and ``etaT``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0 < eta1 < etaT < 1:
        raise ValueError("need 0 < eta1 < etaT < 1")
    if T == 1:
        return ShiftSchedule(np.array([0.0, etaT]), kappa)
    ratio = np.sqrt(etaT) / np.sqrt(eta1)
    root = np.sqrt(eta1) * ratio ** (np.arange(T) / (T - 1))
    eta = root ** 2
    eta[0], eta[-1] = eta1, etaT
    return ShiftSchedule(np.concatenate([[0.0], eta]), kappa)


def forward_marginal(x0, y0, t: int, sched: ShiftSchedule, noise) -> np.ndarray:
    sched.check_t(t)
    e = sched.eta[t]
    return x0 + e * (y0 - x0) + sched.kappa * np.sqrt(e) * noise


def forward_transition(x_prev, e0, t: int, sched: ShiftSchedule, noise) -> np.ndarray:
    """One forward step ``x_{t-1} -> x_t``."""
    sched.check_t(t)
    a = sched.alpha[t]
    return x_prev + a * e0 + sched.kappa * np.sqrt(a) * noise


def posterior_coefficients(t: int, sched: ShiftSchedule) -> tuple[float, float, float]:
    """``(coef_xt, coef_x0, std)`` of the reverse step at ``t``."""
    sched.check_t(t)
    eta_t, eta_prev = sched.eta[t], sched.eta[t - 1]
    a = sched.alpha[t]
    return eta_prev / eta_t, a / eta_t, sched.kappa * np.sqrt(eta_prev / eta_t * a)


def posterior_step(x_t, x0_pred, t: int, sched: ShiftSchedule, noise) -> np.ndarray:
    c_xt, c_x0, std = posterior_coefficients(t, sched)
    out = c_xt * x_t + c_x0 * x0_pred
    return out if std == 0.0 else out + std * noise


@dataclass
class SampleResult:
    x0: np.ndarray
    trajectory: list[np.ndarray]  # predicted x0 for t = T, ..., 1


def sample(denoiser: Denoise, y0: np.ndarray, sched: ShiftSchedule, seed: int,
           keep_trajectory: bool = False, zero_noise: bool = False) -> SampleResult:
    """Reverse chain from ``x_T = y0 + kappa sqrt(eta_T) eps`` down to ``x_0``.

    ``denoiser(x_t, y0, t)`` returns an x0 estimate of the same shape.
    ``zero_noise`` replaces every injected draw with zeros.
    """
    rng = make_rng(seed)
    y0 = np.asarray(y0, dtype=np.float64)

    def draw():
        return np.zeros_like(y0) if zero_noise else rng.standard_normal(y0.shape)

    x = y0 + sched.kappa * np.sqrt(sched.eta[-1]) * draw()
    traj = []
    x0_pred = x
    for t in range(sched.T, 0, -1):
        x0_pred = np.asarray(denoiser(x, y0, t), dtype=np.float64)
        if keep_trajectory:
            traj.append(x0_pred)
        x = posterior_step(x, x0_pred, t, sched, draw() if t > 1 else 0.0)
    return SampleResult(x, traj)


@dataclass
class TrainingPair:
    x_t: np.ndarray
    t: np.ndarray
    target: np.ndarray


def training_pair(x0, y0, sched: ShiftSchedule, rng: np.random.Generator) -> TrainingPair:
    """Draw ``t ~ U{1..T}`` per sample (leading axis) and noise ``x0`` to ``x_t``."""
    x0 = np.asarray(x0, dtype=np.float64)
    y0 = np.asarray(y0, dtype=np.float64)
    B = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=B)
    eta = sched.eta[t].reshape((B,) + (1,) * (x0.ndim - 1))
    noise = rng.standard_normal(x0.shape)
    x_t = x0 + eta * (y0 - x0) + sched.kappa * np.sqrt(eta) * noise
    return TrainingPair(x_t, t, x0)
