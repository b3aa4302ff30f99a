"""Noise schedules plus forward corruption and x0-parameterized reverse steps.

Index convention: arrays have length ``T_max + 1`` and index 0 is clean data
(``alpha_bar[0] == 1``).  Valid noising steps are ``1..T_max``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T_max: int
    kind: str
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_mean_coef_x0: np.ndarray
    posterior_mean_coef_xt: np.ndarray
    posterior_variance: np.ndarray


def build_schedule(T_max: int, kind: str = "linear",
                   beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear betas are given for 1000 steps and rescaled by ``1000 / T_max`` so
    shorter chains still end near pure noise."""
    if T_max < 1:
        raise ValueError(f"T_max must be >= 1, got {T_max}")
    if kind == "linear":
        k = 1000.0 / T_max
        lo, hi = min(beta_start * k, 0.999), min(beta_end * k, 0.999)
        betas = np.linspace(lo, hi, T_max) if T_max > 1 else np.array([hi])
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T_max + 1) / T_max
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")

    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    denom = np.where(np.arange(T_max + 1) == 0, 1.0, 1.0 - alpha_bar)
    coef_x0 = np.sqrt(prev) * beta / denom
    coef_xt = np.sqrt(alpha) * (1.0 - prev) / denom
    var = beta * (1.0 - prev) / denom
    coef_x0[0] = coef_xt[0] = var[0] = 0.0
    return NoiseSchedule(T_max, kind, beta, alpha, alpha_bar, coef_x0, coef_xt, var)


def _per_item(values: np.ndarray, t, ndim: int) -> np.ndarray:
    """Gather schedule values at ``t`` and shape them to broadcast against a
    batch whose leading axis matches ``t``."""
    v = values[t]
    if np.ndim(v) == 0:
        return v
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def _check_t(t, lo: int, hi: int) -> None:
    t = np.asarray(t)
    if t.size and (t.min() < lo or t.max() > hi):
        raise ValueError(f"step out of range [{lo}, {hi}]: {t.min()}..{t.max()}")


def q_sample(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or an integer array over the leading batch axis.
    ``t = 0`` returns ``x0`` unchanged.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    _check_t(t, 0, sched.T_max)
    ab = _per_item(sched.alpha_bar, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def q_step(x_prev, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """One forward kernel step ``x_{t-1} -> x_t``."""
    _check_t(t, 1, sched.T_max)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    b = _per_item(sched.beta, t, x_prev.ndim)
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * np.asarray(eps)


def posterior_step(x_t, x0_hat, t, noise, sched: NoiseSchedule) -> np.ndarray:
    """Sample ``x_{t-1}`` from the DDPM posterior given a predicted clean sample.

    The variance is the fixed lower-bound choice; it is exactly zero at t=1,
    so the last step is deterministic.
    """
    _check_t(t, 1, sched.T_max)
    x_t = np.asarray(x_t, dtype=np.float64)
    c0 = _per_item(sched.posterior_mean_coef_x0, t, x_t.ndim)
    ct = _per_item(sched.posterior_mean_coef_xt, t, x_t.ndim)
    var = _per_item(sched.posterior_variance, t, x_t.ndim)
    return c0 * np.asarray(x0_hat) + ct * x_t + np.sqrt(var) * np.asarray(noise)
