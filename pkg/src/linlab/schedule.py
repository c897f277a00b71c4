"""Closed-form training schedules: noise levels, step size decay, gains, LR and EMA."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConsistencyParams:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sigma_data: float = 0.5

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.rho < 1:
            raise ValueError("rho must be >= 1")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int = 2000
    delta_t0: float = 0.1
    e_k: float = 2.0
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    warmup_steps: int = 100
    ema_every: int = 10
    ema_decay: float = 0.999
    gain_hold: float = 0.2
    gain_release: float = 0.9

    def __post_init__(self):
        if not 0 < self.delta_t0 < 1:
            raise ValueError("delta_t0 must lie in (0, 1)")
        if self.e_k <= 1:
            raise ValueError("e_k must exceed 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.total_steps and not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if not 0 <= self.gain_hold < self.gain_release <= 1:
            raise ValueError("need 0 <= gain_hold < gain_release <= 1")
        if self.ema_every < 1 or not 0 <= self.ema_decay < 1:
            raise ValueError("invalid EMA settings")



def sigma_of_t(t, params: ConsistencyParams = ConsistencyParams()):
    """rho-power interpolation between sigma_min (t=0) and sigma_max (t=1)."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0) | (t_arr > 1)):
        raise ValueError("t must lie in [0, 1]")
    inv = 1.0 / params.rho
    lo, hi = params.sigma_min ** inv, params.sigma_max ** inv
    out = (lo + t_arr * (hi - lo)) ** params.rho
    # pin the endpoints against rounding in the power round trip
    out = np.where(t_arr == 0, params.sigma_min, np.where(t_arr == 1, params.sigma_max, out))
    return float(out) if np.ndim(t) == 0 else out


def delta_t(k: int, K: int, delta_t0: float = 0.1, e_k: float = 2.0) -> float:
    """Step between teacher and student times, decaying from delta_t0 to delta_t0**e_k."""
    if not 0 <= k <= K:
        raise ValueError("need 0 <= k <= K")
    exponent = (k / K if K else 1.0) * (e_k - 1.0) + 1.0
    # base-10 evaluation keeps decade endpoints (0.1, 0.01) exact
    return 10.0 ** (exponent * math.log10(delta_t0))


def lambda_weight(sigma1, sigma2):
    s1, s2 = np.asarray(sigma1, dtype=np.float64), np.asarray(sigma2, dtype=np.float64)
    if np.any(s2 <= s1):
        raise ValueError("lambda_weight needs sigma2 > sigma1")
    out = 1.0 / (s2 - s1)
    return float(out) if out.ndim == 0 else out


def gain_envelope(k: float, K: int, hold: float = 0.2, release: float = 0.9) -> float:
    """1 up to ``hold*K``, 0 from ``release*K``, half-cosine in between."""
    if K <= 0 or k <= hold * K:
        return 1.0
    if k >= release * K:
        return 0.0
    return 0.5 * (1.0 + math.cos(math.pi * (k - hold * K) / ((release - hold) * K)))


def gain_bounds(k: float, K: int, hold: float = 0.2, release: float = 0.9) -> tuple[float, float]:
    if not 0 <= k <= K:
        raise ValueError("need 0 <= k <= K")
    c = gain_envelope(k, K, hold, release)
    return 1.0 - c, 1.0 + 2.0 * c


def learning_rate(k: int, cfg: ScheduleConfig = ScheduleConfig()) -> float:
    K, w = cfg.total_steps, cfg.warmup_steps
    if not 0 <= k <= K:
        raise ValueError("need 0 <= k <= K")
    if k < w:
        return cfg.lr_max * k / w
    span = K - w
    frac = (k - w) / span if span else 1.0
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


def ema_step(theta: dict, theta_ema: dict, k: int, every: int = 10, decay: float = 0.999) -> dict:
    """Return the updated shadow parameters; only every ``every`` steps moves them."""
    if theta.keys() != theta_ema.keys():
        raise ValueError("parameter sets differ")
    for name in theta:
        if np.shape(theta[name]) != np.shape(theta_ema[name]):
            raise ValueError(f"shape mismatch for {name}")
    if k % every:
        return theta_ema
    return {name: decay * theta_ema[name] + (1.0 - decay) * theta[name] for name in theta}
