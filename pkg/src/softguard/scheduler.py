"""DDPM noise schedule: forward noising, timestep sampling, ancestral sampling.

Timesteps are 1-based: t runs over 1..T and t=0 denotes the clean latent, so
``betas[t-1]`` is the noise rate applied at step t and ``alpha_bars[t-1]`` is
the cumulative signal fraction after t steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import Rng, gaussian, require_finite


class ScheduleError(ValueError):
    """Invalid schedule parameters or out-of-range timestep."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed beta/alpha/alpha-bar tables for T forward steps."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside 1..{self.T}")
        return t


@dataclass(frozen=True)
class NoisedLatent:
    """A noised latent z_t together with the exact noise that produced it."""

    z_t: np.ndarray
    t: int
    eps: np.ndarray


def make_schedule(T: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """Linear beta schedule with precomputed alpha and alpha-bar tables."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def add_noise(schedule: DiffusionSchedule, z0: np.ndarray, t: int, rng: Rng) -> NoisedLatent:
    """Closed-form forward corruption z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps."""
    t = schedule.check_t(t)
    ab = schedule.alpha_bars[t - 1]
    eps = gaussian(rng, z0.shape, dtype=z0.dtype)
    z_t = np.sqrt(ab).astype(z0.dtype) * z0 + np.sqrt(1.0 - ab).astype(z0.dtype) * eps
    return NoisedLatent(z_t=require_finite(z_t, "z_t"), t=t, eps=eps)


def sample_timestep(rng: Rng, T: int) -> int:
    """Uniform timestep in 1..T.

    One uniform draw per example per optimization step is the Monte-Carlo
    estimator of the per-timestep training objective; its expectation is
    proportional to summing the per-step residuals over all timesteps.
    """
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    return int(rng.integers(1, T))


def reverse_diffuse(
    schedule: DiffusionSchedule,
    denoise_fn: Callable[[np.ndarray, int], np.ndarray],
    z: np.ndarray,
    t_start: int,
    rng: Rng,
) -> np.ndarray:
    """Run the reverse chain from a given z_{t_start} down to a z_0 estimate.

    Reverse noise uses the posterior variance beta_tilde_t, which vanishes at
    t=1 so the final step is deterministic.
    """
    t_start = schedule.check_t(t_start)
    dtype = z.dtype
    for t in range(t_start, 0, -1):
        eps_hat = denoise_fn(z, t)
        if eps_hat.shape != z.shape:
            raise ScheduleError(f"denoiser output shape {eps_hat.shape} != latent {z.shape}")
        beta = schedule.betas[t - 1]
        alpha = schedule.alphas[t - 1]
        ab_t = schedule.alpha_bars[t - 1]
        mean = (z - (beta / np.sqrt(1.0 - ab_t)).astype(dtype) * eps_hat) / np.sqrt(alpha).astype(
            dtype
        )
        if t > 1:
            ab_prev = schedule.alpha_bars[t - 2]
            var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
            z = mean + np.sqrt(var).astype(dtype) * gaussian(rng, z.shape, dtype=dtype)
        else:
            z = mean
    return require_finite(z, "reverse diffusion output")


def ancestral_sample(
    schedule: DiffusionSchedule,
    denoise_fn: Callable[[np.ndarray, int], np.ndarray],
    rng: Rng,
    shape: tuple[int, ...],
    dtype=np.float32,
) -> np.ndarray:
    """Standard DDPM reverse loop from z_T ~ N(0, I) down to a z_0 estimate.

    ``denoise_fn(z_t, t)`` predicts the injected noise; conditioning is baked
    into the callable by the caller. Deterministic given the rng seed.
    """
    z = gaussian(rng, shape, dtype=dtype)
    return reverse_diffuse(schedule, denoise_fn, z, schedule.T, rng)
