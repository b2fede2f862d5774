"""EDM diffusion math: noising, preconditioning, loss, sigma schedule, sampler.

A raw network ``F`` is any callable ``F(x_in, c_noise, cond) -> array`` that
receives the input-scaled latent ``c_in * x_t``. The denoiser wraps it as

    D(x_t; sigma; cond) = c_skip * x_t + c_out * F(c_in * x_t; c_noise; cond)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import Rng, as_tensor

DenoiserFn = Callable[[np.ndarray, float, object], np.ndarray]


class DomainError(ValueError):
    pass


class ConditioningError(ValueError):
    pass


@dataclass(frozen=True)
class Preconditioners:
    c_in: float
    c_out: float
    c_skip: float
    c_noise: float


def precondition(sigma: float) -> Preconditioners:
    sigma = float(sigma)
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    r = math.sqrt(1.0 + sigma * sigma)
    return Preconditioners(
        c_in=1.0 / r,
        c_out=-sigma / r,
        c_skip=1.0 / (1.0 + sigma * sigma),
        c_noise=0.25 * math.log(sigma),
    )


def loss_weight(sigma: float) -> float:
    """1 / c_out(sigma)^2 == (1 + sigma^2) / sigma^2."""
    sigma = float(sigma)
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    return (1.0 + sigma * sigma) / (sigma * sigma)


def add_noise(x0: np.ndarray, sigma: float, rng: Rng) -> np.ndarray:
    """x_t = x_0 + sigma * eps with eps ~ N(0, I), i.e. noise variance sigma^2."""
    if sigma < 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    x0 = as_tensor(x0)
    eps = rng.normal(x0.shape)
    if sigma == 0:
        return x0.copy()
    return (x0 + np.float32(sigma) * eps).astype(np.float32)


def _frames(cond) -> Optional[int]:
    if cond is None:
        return None
    return getattr(cond, "num_frames", None)


def _check_cond(x_t: np.ndarray, cond) -> None:
    n = _frames(cond)
    if n is not None and n != x_t.shape[0]:
        raise ConditioningError(f"latent has {x_t.shape[0]} frames but conditioning has {n}")


def denoise(F: DenoiserFn, x_t: np.ndarray, sigma: float, cond) -> np.ndarray:
    _check_cond(x_t, cond)
    p = precondition(sigma)
    raw = F((p.c_in * x_t).astype(x_t.dtype), p.c_noise, cond)
    if raw.shape != x_t.shape:
        raise ConditioningError(f"network output shape {raw.shape} != latent shape {x_t.shape}")
    return (p.c_skip * x_t + p.c_out * raw).astype(x_t.dtype)


def cfg_denoise(F: DenoiserFn, x_t: np.ndarray, sigma: float, cond, scale: float) -> np.ndarray:
    """Guided estimate D_u + scale * (D_c - D_u); the unconditional branch zeroes the conditioning."""
    if scale < 1:
        raise DomainError(f"guidance scale must be >= 1, got {scale}")
    d_cond = denoise(F, x_t, sigma, cond)
    if scale == 1:
        return d_cond
    d_uncond = denoise(F, x_t, sigma, cond.zeroed())
    return (d_uncond + np.float32(scale) * (d_cond - d_uncond)).astype(x_t.dtype)


def dsm_loss(F: DenoiserFn, x0: np.ndarray, cond, sigma: float, rng: Rng) -> float:
    x_t = add_noise(x0, sigma, rng)
    d = denoise(F, x_t, sigma, cond)
    err = d.astype(np.float64) - x0.astype(np.float64)
    return loss_weight(sigma) * float(np.mean(err * err))


@dataclass(frozen=True)
class NoiseLevelDistribution:
    mean_log: float = 0.7
    std_log: float = 1.6


def sample_sigma(dist: NoiseLevelDistribution, rng: Rng) -> float:
    z = float(rng.gen.standard_normal())
    return math.exp(dist.mean_log + dist.std_log * z)


@dataclass(frozen=True)
class SigmaSchedule:
    values: tuple[float, ...]
    rho: float

    @property
    def steps(self) -> int:
        return len(self.values) - 1

    @property
    def sigma_max(self) -> float:
        return self.values[0]


def make_schedule(steps: int = 5, sigma_max: float = 700.0, sigma_min: float = 0.002, rho: float = 7.0) -> SigmaSchedule:
    """Karras power-interpolated sigmas with a terminal zero appended."""
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    if not (sigma_max > sigma_min > 0) or not rho > 0:
        raise DomainError(f"need sigma_max > sigma_min > 0 and rho > 0 (got {sigma_max}, {sigma_min}, {rho})")
    if steps == 1:
        return SigmaSchedule((float(sigma_max), 0.0), float(rho))
    hi = sigma_max ** (1.0 / rho)
    lo = sigma_min ** (1.0 / rho)
    vals = [(hi + i / (steps - 1) * (lo - hi)) ** rho for i in range(steps)]
    vals[0], vals[-1] = float(sigma_max), float(sigma_min)
    return SigmaSchedule(tuple(vals) + (0.0,), float(rho))


def sample(
    F: DenoiserFn,
    init: np.ndarray,
    schedule: SigmaSchedule,
    cond,
    guidance: Optional[float] = None,
    anchor: Optional[Callable[[np.ndarray, float], np.ndarray]] = None,
) -> np.ndarray:
    """Deterministic Euler integration of the probability-flow ODE from sigma_1 to 0.

    ``anchor``, when given, post-processes each denoised estimate (used by
    long-video inference to pin already-known frames).
    """
    if len(schedule.values) < 2:
        raise DomainError("schedule must contain at least one step")
    _check_cond(init, cond)
    x = as_tensor(init).copy()
    sig = schedule.values
    for i in range(len(sig) - 1):
        s, s_next = sig[i], sig[i + 1]
        if guidance is not None and guidance != 1:
            d = cfg_denoise(F, x, s, cond, guidance)
        else:
            d = denoise(F, x, s, cond)
        if anchor is not None:
            d = anchor(d, s)
        if s_next == 0:
            x = d
        else:
            x = (x + np.float32((s_next - s) / s) * (x - d)).astype(np.float32)
    return x


def gaussian_mmse_net(mu, sigma_data: float) -> DenoiserFn:
    """Raw network whose preconditioned denoiser is the MMSE estimator for N(mu, sigma_data^2 I) data.

    D*(x; sigma) = (sigma_data^2 x + sigma^2 mu) / (sigma_data^2 + sigma^2), solved back
    through the preconditioners: F = (D* - c_skip x) / c_out.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sd2 = float(sigma_data) ** 2

    def F(x_in, c_noise, cond=None):
        sigma = math.exp(4.0 * c_noise)
        p = precondition(sigma)
        x = np.asarray(x_in, dtype=np.float64) / p.c_in
        d = (sd2 * x + sigma * sigma * mu) / (sd2 + sigma * sigma)
        return ((d - p.c_skip * x) / p.c_out).astype(np.asarray(x_in).dtype)

    return F
