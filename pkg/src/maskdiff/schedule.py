"""Noise schedules, forward corruption and single reverse steps.

Timesteps are 1-based: ``alpha_bar[0] == 1`` is the clean image and
``alpha_bar[T]`` the most corrupted state. Schedule tables are float64;
image arithmetic stays in the dtype of the images passed in.
"""

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed tables for a discrete variance-preserving schedule.

    Attributes
    ----------
    beta : ndarray of shape (T,)
        Per-step noise variances ``beta_1 .. beta_T`` (stored 0-based).
    alpha_bar : ndarray of shape (T + 1,)
        Cumulative products with ``alpha_bar[0] = 1``.
    sigma_ddpm : ndarray of shape (T + 1,)
        Ancestral-sampling noise scale per step; index 0 is unused and
        ``sigma_ddpm[1] == 0``.
    """

    beta: np.ndarray
    alpha_bar: np.ndarray = field(repr=False)
    sigma_ddpm: np.ndarray = field(repr=False)

    @property
    def num_steps(self):
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta):
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1:
            raise ValueError("beta must be one-dimensional")
        if len(beta) and (np.any(beta <= 0) or np.any(beta >= 1)):
            raise ValueError("all beta values must lie in (0, 1)")
        alpha_bar = np.empty(len(beta) + 1)
        alpha_bar[0] = 1.0
        for i, b in enumerate(beta, start=1):
            alpha_bar[i] = alpha_bar[i - 1] * (1.0 - b)
        sigma = np.zeros(len(beta) + 1)
        for t in range(1, len(beta) + 1):
            sigma[t] = np.sqrt((1 - alpha_bar[t - 1]) / (1 - alpha_bar[t])) * np.sqrt(
                1 - alpha_bar[t] / alpha_bar[t - 1]
            )
        for arr in (beta, alpha_bar, sigma):
            arr.flags.writeable = False
        return cls(beta=beta, alpha_bar=alpha_bar, sigma_ddpm=sigma)

    def check_timestep(self, t):
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"timestep {t} outside 1..{self.num_steps}")
        return int(t)

    def sigma(self, t, eta=1.0):
        """Reverse-step noise scale; ``eta=0`` gives DDIM, ``eta=1`` DDPM."""
        return eta * float(self.sigma_ddpm[self.check_timestep(t)])

    def digest(self):
        return f"linear-T{self.num_steps}-{self.beta[0]:.6g}-{self.beta[-1]:.6g}" if self.num_steps else "empty"


def make_linear_schedule(num_steps, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule with both endpoints included."""
    if num_steps < 0 or int(num_steps) != num_steps:
        raise ValueError(f"num_steps must be a non-negative integer, got {num_steps!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    # T=0 is allowed as an edge case: it yields an identity schedule
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, int(num_steps)))


def sigma_ddpm(schedule, t):
    return schedule.sigma(t, eta=1.0)


def forward_diffuse(x0, t, eps, schedule):
    """Closed-form marginal ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    t = schedule.check_timestep(t)
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {eps.shape}")
    ab = float(schedule.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def posterior_mean(x_t, eps_pred, t, sigma_t, schedule):
    """Mean of the reverse step given a noise prediction."""
    t = schedule.check_timestep(t)
    x_t, eps_pred = np.asarray(x_t), np.asarray(eps_pred)
    if x_t.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch: {x_t.shape} vs {eps_pred.shape}")
    ab, ab_prev = float(schedule.alpha_bar[t]), float(schedule.alpha_bar[t - 1])
    direction = 1.0 - ab_prev - sigma_t**2
    if direction < 0:
        # tolerate rounding at sigma_1 = 0 with alpha_bar[0] = 1
        if direction < -1e-12:
            raise ValueError(f"sigma_t^2={sigma_t**2} exceeds 1 - alpha_bar[t-1]={1 - ab_prev}")
        direction = 0.0
    x0_pred = (x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)
    return math.sqrt(ab_prev) * x0_pred + math.sqrt(direction) * eps_pred


def reverse_step(x_t, eps_pred, z, t, sigma_t, schedule):
    sigma_t = float(sigma_t)
    mean = posterior_mean(x_t, eps_pred, t, sigma_t, schedule)
    if sigma_t == 0:
        return mean
    z = np.asarray(z)
    if z.shape != mean.shape:
        raise ValueError(f"noise shape {z.shape} does not match image {mean.shape}")
    return mean + sigma_t * z
