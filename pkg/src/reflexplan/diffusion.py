"""Gaussian diffusion over joint trajectories.

Linear beta schedule, forward noising, classifier-free guidance and both
reverse steps.  The deterministic step exposes its coefficient c_t so the
reflection pass can re-noise with exactly the same constant:

    c_t = beta_t / (sqrt(alpha_t - alpha_bar_t) + sqrt(1 - alpha_bar_t))
    x_{t-1} = (x_t - c_t * eps_hat) / sqrt(alpha_t)

At t = 1 the coefficient collapses to sqrt(beta_1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_T = 100
# Endpoints chosen so the terminal signal fraction alpha_bar_T stays
# below 0.05 at T = 100.
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.06
DEFAULT_SAMPLE_STEPS = 20
TERMINAL_ALPHA_BAR = 0.05


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta/alpha tables; index convention is t in [1, T]."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    # Original timestep carried by each position; differs from 1..T for
    # strided sub-schedules and is what the denoiser embeds.
    timesteps: np.ndarray

    @property
    def T(self) -> int:
        return self.beta.size

    def check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def ddim_coeff(self, t: int) -> float:
        self.check(t)
        i = t - 1
        rad = self.alpha[i] - self.alpha_bar[i]
        return float(self.beta[i] / (np.sqrt(max(rad, 0.0)) + np.sqrt(1.0 - self.alpha_bar[i])))

    @property
    def terminal_ok(self) -> bool:
        return float(self.alpha_bar[-1]) < TERMINAL_ALPHA_BAR

    def subsequence(self, ts: np.ndarray) -> "NoiseSchedule":
        """Schedule over a strictly increasing subset of timesteps.

        alpha-bar values are inherited, per-step alphas are the ratios of
        consecutive alpha-bars, so the chain of reverse steps over the
        subsequence exactly inverts the forward scaling.
        """
        ts = np.asarray(ts, dtype=np.int64)
        if ts.ndim != 1 or ts.size < 1 or np.any(np.diff(ts) <= 0):
            raise ValueError("subsequence timesteps must be strictly increasing")
        if ts[0] < 1 or ts[-1] > self.T:
            raise ValueError("subsequence timesteps out of range")
        abar = self.alpha_bar[ts - 1]
        prev = np.concatenate([[1.0], abar[:-1]])
        alpha = abar / prev
        return NoiseSchedule(beta=1.0 - alpha, alpha=alpha, alpha_bar=abar,
                             timesteps=self.timesteps[ts - 1])


def make_schedule(T: int = DEFAULT_T, beta_min: float = DEFAULT_BETA_MIN,
                  beta_max: float = DEFAULT_BETA_MAX) -> NoiseSchedule:
    """Linear beta schedule from beta_min to beta_max inclusive."""
    if T < 2:
        raise ValueError("schedule needs T >= 2")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ValueError("need 0 < beta_min < beta_max < 1")
    beta = np.linspace(beta_min, beta_max, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if np.any(np.diff(alpha_bar) >= 0):
        raise ValueError("alpha_bar must be strictly decreasing")
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         timesteps=np.arange(1, T + 1))


def strided_timesteps(T: int, steps: int) -> np.ndarray:
    """`steps` evenly spaced timesteps covering [1, T], ascending."""
    if not 1 <= steps <= T:
        raise ValueError("steps must be in [1, T]")
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(np.int64))
    return ts


def forward_noise(schedule: NoiseSchedule, x0: np.ndarray, t: int,
                  eps: np.ndarray) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    schedule.check(t)
    ab = schedule.alpha_bar[t - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(schedule: NoiseSchedule, x_t: np.ndarray, eps_hat: np.ndarray,
               t: int) -> np.ndarray:
    """Invert forward_noise for a given noise estimate."""
    schedule.check(t)
    ab = schedule.alpha_bar[t - 1]
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def cfg_combine(predictor, x_t: np.ndarray, t: int, cond, lam: float) -> np.ndarray:
    """eps_dec + lam * (eps_full - eps_dec); exactly two predictor calls."""
    eps_full = predictor(x_t, t, cond.c_full)
    eps_dec = predictor(x_t, t, cond.c_decouple)
    return eps_dec + lam * (eps_full - eps_dec)


def cfg_noise(predictor, x_t: np.ndarray, t: int, cond, lam1: float) -> np.ndarray:
    """Guided noise estimate used by every reverse step."""
    return cfg_combine(predictor, x_t, t, cond, lam1)


def ddpm_step(schedule: NoiseSchedule, x_t: np.ndarray, eps_hat: np.ndarray,
              t: int, z: np.ndarray | None) -> np.ndarray:
    """Stochastic ancestral step; the sigma_t z term sits inside the
    1/sqrt(alpha_t) factor and z must be None (zero) at t = 1."""
    schedule.check(t)
    i = t - 1
    if t == 1 and z is not None:
        raise ValueError("z must be omitted at t = 1")
    coeff = schedule.beta[i] / np.sqrt(1.0 - schedule.alpha_bar[i])
    inner = x_t - coeff * eps_hat
    if z is not None:
        inner = inner + np.sqrt(schedule.beta[i]) * z
    return inner / np.sqrt(schedule.alpha[i])


def ddim_step(schedule: NoiseSchedule, x_t: np.ndarray, eps_hat: np.ndarray,
              t: int) -> np.ndarray:
    """Deterministic step x_{t-1} = (x_t - c_t eps_hat) / sqrt(alpha_t)."""
    c = schedule.ddim_coeff(t)
    return (x_t - c * eps_hat) / np.sqrt(schedule.alpha[t - 1])
