"""Cosine noise schedule and the forward (noising) process.

The schedule is precomputed once in float64 and indexed by integer timestep
t in [0, T]; t = 0 is the clean-data endpoint with cumulative signal level
exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError


@dataclass(frozen=True)
class Schedule:
    """Precomputed per-step quantities, each an array of length T + 1.

    betas[0] is padding (the process has no step 0, it is fixed at 0) so
    every array indexes directly by t.
    """

    num_steps: int
    betas: np.ndarray
    alpha_bar: np.ndarray
    sqrt_alpha_bar: np.ndarray
    sqrt_one_minus_alpha_bar: np.ndarray
    snr_weights: np.ndarray


SNR_WEIGHT_MAX = 1e4


def build_cosine_schedule(num_steps: int = 800, s: float = 0.008) -> Schedule:
    """Squared-cosine signal curve, discretized to per-step betas.

    The curve f(t) = cos((t/T + s) / (1 + s) * pi/2)^2 sets the target
    cumulative signal level; betas follow from consecutive ratios, clipped
    at 0.999 so no single step destroys all signal.  The stored alpha_bar
    is then recomputed as the running product of (1 - beta), which keeps
    the pair (betas, alpha_bar) exactly self-consistent where the clip
    bites (near t = T).
    """
    if num_steps < 2:
        raise ConfigurationError(f"num_steps must be >= 2, got {num_steps}")
    t = np.arange(num_steps + 1, dtype=np.float64)
    f = np.cos((t / num_steps + s) / (1.0 + s) * (np.pi / 2.0)) ** 2
    curve = f / f[0]
    betas = np.zeros(num_steps + 1, dtype=np.float64)
    betas[1:] = np.clip(1.0 - curve[1:] / curve[:-1], 0.0, 0.999)
    alpha_bar = np.cumprod(1.0 - betas)
    alpha_bar[0] = 1.0
    one_minus = 1.0 - alpha_bar
    with np.errstate(divide="ignore"):
        snr = np.where(one_minus > 0.0, alpha_bar / np.maximum(one_minus, 1e-300),
                       np.inf)
    return Schedule(
        num_steps=num_steps,
        betas=betas,
        alpha_bar=alpha_bar,
        sqrt_alpha_bar=np.sqrt(alpha_bar),
        sqrt_one_minus_alpha_bar=np.sqrt(one_minus),
        snr_weights=np.minimum(snr, SNR_WEIGHT_MAX),
    )


def _check_t(t: int, schedule: Schedule, lo: int = 0) -> int:
    t = int(t)
    if not lo <= t <= schedule.num_steps:
        raise ContractError(
            f"timestep {t} outside [{lo}, {schedule.num_steps}]"
        )
    return t


def forward_diffuse(x0: np.ndarray, eps: np.ndarray, t: int,
                    schedule: Schedule) -> np.ndarray:
    """Noised sample x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    t = _check_t(t, schedule)
    if x0.shape != eps.shape:
        raise ContractError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    dtype = x0.dtype
    return (dtype.type(schedule.sqrt_alpha_bar[t]) * x0
            + dtype.type(schedule.sqrt_one_minus_alpha_bar[t]) * eps)


def snr_weight(t: int, schedule: Schedule,
               w_max: float = SNR_WEIGHT_MAX) -> float:
    """Loss weight abar / (1 - abar), clamped above by w_max."""
    t = _check_t(t, schedule)
    ab = schedule.alpha_bar[t]
    if ab >= 1.0:
        return float(w_max)
    return float(min(ab / (1.0 - ab), w_max))


def mix_weight(t: int, schedule: Schedule) -> tuple[float, float]:
    """Global/local mixing pair (g, l) with g = sqrt(abar_t).

    The pair is adjusted so g + l == 1.0 holds bitwise in float64: when
    g >= 0.5 the subtraction 1 - g is already exact (Sterbenz); otherwise
    l = 1 - g rounds, and g is re-derived as 1 - l (exact, since l > 0.5),
    moving g by at most one ulp.
    """
    t = _check_t(t, schedule)
    g = float(schedule.sqrt_alpha_bar[t])
    l = 1.0 - g
    if g < 0.5:
        g = 1.0 - l
    return g, l
