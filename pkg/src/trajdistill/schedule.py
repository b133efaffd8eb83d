"""Continuous-time noise schedule and sampling-step algebra.

Time runs over k in [0, 1] with a variance-preserving pair
(alpha(k), sigma(k)), sigma = sqrt(1 - alpha^2). alpha is linear in k and
close to (but not exactly) 1 at k=0, so sigma(0) is small but nonzero;
operations that divide by sigma guard against a configurable floor and
direct callers to the x0-space fallback.

Coefficients broadcast against trailing data axes: a (B,)-shaped k against
(B, P, 2) states applies per-row. Internal arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import BoundaryStepError, ContractViolation

SIGMA_FLOOR = 1e-4


def _bcast(coef: np.ndarray, ndim: int) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    while coef.ndim < ndim:
        coef = coef[..., None]
    return coef


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_start: float = 0.9999
    alpha_end: float = 0.0001

    def __post_init__(self):
        if not (0.0 < self.alpha_end < self.alpha_start < 1.0):
            raise ContractViolation(
                f"schedule endpoints must satisfy 0 < alpha_end < alpha_start < 1, "
                f"got start={self.alpha_start}, end={self.alpha_end}"
            )

    def alpha_sigma(self, k) -> tuple[np.ndarray, np.ndarray]:
        k = np.asarray(k, dtype=np.float64)
        if np.any(k < 0.0) or np.any(k > 1.0):
            raise ContractViolation(f"k outside [0, 1]: {k}")
        alpha = self.alpha_start + k * (self.alpha_end - self.alpha_start)
        sigma = np.sqrt(1.0 - alpha * alpha)
        return alpha, sigma

    def snr(self, k) -> np.ndarray:
        alpha, sigma = self.alpha_sigma(k)
        return (alpha * alpha) / (sigma * sigma)


@dataclass(frozen=True)
class StepPlan:
    """Strictly decreasing times 1 = k_S > ... > k_0 = 0."""

    times: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        if len(ts) < 2:
            raise ContractViolation("a step plan needs at least two times")
        if ts[0] != 1.0 or ts[-1] != 0.0:
            raise ContractViolation(f"plan must start at 1 and end at 0, got {ts[0]}..{ts[-1]}")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ContractViolation(f"plan times must strictly decrease: {ts}")
        object.__setattr__(self, "times", ts)

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.times, self.times[1:]))

    @staticmethod
    def uniform(steps: int) -> "StepPlan":
        if steps < 1:
            raise ContractViolation(f"steps must be >= 1, got {steps}")
        return StepPlan(tuple(i / steps for i in range(steps, -1, -1)))


def q_sample(y0: np.ndarray, k, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward marginal draw: alpha*y0 + sigma*eps."""
    y0 = np.asarray(y0)
    eps = np.asarray(eps)
    if y0.shape != eps.shape:
        raise ContractViolation(f"q_sample shapes differ: {y0.shape} vs {eps.shape}")
    alpha, sigma = sched.alpha_sigma(k)
    return _bcast(alpha, y0.ndim) * y0 + _bcast(sigma, y0.ndim) * eps


def v_target(y0: np.ndarray, eps: np.ndarray, k, sched: NoiseSchedule) -> np.ndarray:
    """Velocity-parameterization regression target: alpha*eps - sigma*y0."""
    y0 = np.asarray(y0)
    eps = np.asarray(eps)
    alpha, sigma = sched.alpha_sigma(k)
    return _bcast(alpha, y0.ndim) * eps - _bcast(sigma, y0.ndim) * y0


def x0_from_v(y_k: np.ndarray, v: np.ndarray, k, sched: NoiseSchedule) -> np.ndarray:
    """Clean-state reconstruction: alpha*y_k - sigma*v. Defined at every k."""
    y_k = np.asarray(y_k)
    v = np.asarray(v)
    alpha, sigma = sched.alpha_sigma(k)
    return _bcast(alpha, y_k.ndim) * y_k - _bcast(sigma, y_k.ndim) * v


def eps_from_x0(
    y_k: np.ndarray,
    x0: np.ndarray,
    k,
    sched: NoiseSchedule,
    sigma_floor: float = SIGMA_FLOOR,
) -> np.ndarray:
    """Noise implied by a clean estimate: (y_k - alpha*x0) / sigma."""
    y_k = np.asarray(y_k)
    x0 = np.asarray(x0)
    alpha, sigma = sched.alpha_sigma(k)
    if np.any(sigma < sigma_floor):
        raise BoundaryStepError(
            f"sigma(k) below floor {sigma_floor}; use the x0-space fallback"
        )
    return (y_k - _bcast(alpha, y_k.ndim) * x0) / _bcast(sigma, y_k.ndim)


def ddim_step(
    y_k: np.ndarray,
    x0_hat: np.ndarray,
    k_from,
    k_to,
    sched: NoiseSchedule,
    noise_scale: float = 0.0,
    noise: np.ndarray | None = None,
    sigma_floor: float = SIGMA_FLOOR,
) -> np.ndarray:
    """Move the state from time k_from to k_to around the estimate x0_hat.

    y_to = alpha_to*x0 + sqrt(sigma_to^2 - s^2)/sigma_from * (y_k - alpha_from*x0) + s*noise

    s = 0 is the deterministic update; k_to == k_from is the identity.
    """
    y_k = np.asarray(y_k)
    x0_hat = np.asarray(x0_hat)
    kf = np.asarray(k_from, dtype=np.float64)
    kt = np.asarray(k_to, dtype=np.float64)
    if np.any(kt > kf):
        raise ContractViolation(f"ddim_step must move toward 0: k_from={k_from}, k_to={k_to}")
    a_from, s_from = sched.alpha_sigma(kf)
    a_to, s_to = sched.alpha_sigma(kt)
    if np.any(s_from < sigma_floor):
        raise BoundaryStepError(
            f"sigma(k_from) below floor {sigma_floor}; use the x0-space fallback"
        )
    s = float(noise_scale)
    if s < 0:
        raise ContractViolation(f"noise_scale must be >= 0, got {noise_scale}")
    var = s_to * s_to - s * s
    if np.any(var < 0):
        raise ContractViolation(
            f"noise_scale {s} exceeds sigma(k_to); no valid update exists"
        )
    nd = y_k.ndim
    out = _bcast(a_to, nd) * x0_hat + _bcast(np.sqrt(var) / s_from, nd) * (
        y_k - _bcast(a_from, nd) * x0_hat
    )
    if s > 0:
        if noise is None:
            raise ContractViolation("noise_scale > 0 requires a noise array")
        out = out + s * np.asarray(noise)
    return out


def ancestral_step(
    y_k: np.ndarray,
    v_hat: np.ndarray,
    k_from,
    k_to,
    sched: NoiseSchedule,
    noise: np.ndarray | None = None,
    sigma_floor: float = SIGMA_FLOOR,
) -> np.ndarray:
    """Stochastic reverse step via the posterior of the discretized chain.

    The chain segment between k_to and k_from has one-step coefficient
    alpha_step = abar_from/abar_to (ratio of squared marginal alphas); the
    posterior mean conditions on x0_hat reconstructed at k_from, and the
    injected noise has the step's beta variance. The terminal step (k_to = 0)
    returns the mean.
    """
    y_k = np.asarray(y_k)
    kf = np.asarray(k_from, dtype=np.float64)
    kt = np.asarray(k_to, dtype=np.float64)
    if np.any(kt >= kf):
        raise ContractViolation(
            f"ancestral_step needs k_to < k_from, got {k_from} -> {k_to}"
        )
    a_from, s_from = sched.alpha_sigma(kf)
    a_to, _ = sched.alpha_sigma(kt)
    if np.any(s_from < sigma_floor):
        raise BoundaryStepError(
            f"sigma(k_from) below floor {sigma_floor}; use the x0-space fallback"
        )
    x0_hat = x0_from_v(y_k, v_hat, kf, sched)
    abar_from = a_from * a_from
    abar_to = a_to * a_to
    alpha_step = abar_from / abar_to
    beta_step = 1.0 - alpha_step
    nd = y_k.ndim
    coef_x0 = _bcast(np.sqrt(abar_to) * beta_step / (1.0 - abar_from), nd)
    coef_y = _bcast(np.sqrt(alpha_step) * (1.0 - abar_to) / (1.0 - abar_from), nd)
    mean = coef_x0 * x0_hat + coef_y * y_k
    terminal = np.all(kt == 0.0)
    if terminal:
        return mean
    if noise is None:
        raise ContractViolation("non-terminal ancestral_step requires a noise array")
    return mean + _bcast(np.sqrt(beta_step), nd) * np.asarray(noise)
