"""AdamW with decoupled weight decay, plus EMA shadow tracking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..exceptions import ContractViolation, NumericOverflowError
from .params import ParamSet
from .tensor import Tensor


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    def validate(self) -> None:
        if self.lr <= 0:
            raise ContractViolation(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractViolation(f"betas must lie in [0,1): {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ContractViolation(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise ContractViolation(f"weight_decay must be >= 0, got {self.weight_decay}")


class AdamWState:
    """First/second moment buffers keyed by parameter name."""

    def __init__(self, params: ParamSet, config: AdamWConfig):
        config.validate()
        self.config = config
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}


def adamw_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    lr: float | None = None,
) -> None:
    """One decoupled-weight-decay update in place.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
    """
    cfg = state.config
    if set(grads) != set(state.m):
        raise ContractViolation("gradient names do not match optimizer state")
    step_lr = cfg.lr if lr is None else lr
    if step_lr < 0:
        raise ContractViolation(f"negative learning rate: {step_lr}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ContractViolation(
                f"gradient shape mismatch for {name}: {g.shape} vs {p.data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericOverflowError("adamw_step", where="gradient input")
        g = np.asarray(g, dtype=np.float32)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        m_hat = m / np.float32(bc1)
        v_hat = v / np.float32(bc2)
        update = m_hat / (np.sqrt(v_hat) + np.float32(cfg.eps))
        if cfg.weight_decay:
            update = update + np.float32(cfg.weight_decay) * p.data
        p.data = p.data - np.float32(step_lr) * update


class EmaState:
    """Exponential moving average of a ParamSet's values."""

    def __init__(self, params: ParamSet, decay: float = 0.999):
        if not (0.0 <= decay < 1.0):
            raise ContractViolation(f"EMA decay must lie in [0,1), got {decay}")
        self.decay = float(decay)
        self.shadow = {k: t.data.copy() for k, t in params.items()}

    def update(self, params: ParamSet) -> None:
        if set(self.shadow) != set(params.names()):
            raise ContractViolation("EMA shadow does not match parameter names")
        d = np.float32(self.decay)
        one_minus = np.float32(1.0 - self.decay)
        for name, t in params.items():
            s = self.shadow[name]
            s *= d
            s += one_minus * t.data

    def snapshot(self) -> ParamSet:
        """Shadow values as a fresh trainable ParamSet."""
        out = ParamSet()
        for name in self.shadow:
            out.add(name, Tensor(self.shadow[name].copy(), requires_grad=True))
        return out


def ema_update(state: EmaState, params: ParamSet) -> None:
    state.update(params)
