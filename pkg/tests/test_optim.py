"""AdamW and EMA against hand-computed single-step oracles."""

import numpy as np
import pytest

from trajdistill.exceptions import ContractViolation, NumericOverflowError
from trajdistill.numerics import (
    AdamWConfig,
    AdamWState,
    EmaState,
    ParamSet,
    Tensor,
    adamw_step,
)


def param_set(**values) -> ParamSet:
    ps = ParamSet()
    for name, v in values.items():
        ps.add(name, Tensor(np.asarray(v, np.float32), requires_grad=True))
    return ps


def test_single_step_hand_oracle():
    # p=1, g=1, step 1: m_hat=1, v_hat=1 regardless of betas, so
    # p' = 1 - lr*(1/(1+eps) + wd*1)
    ps = param_set(w=[1.0])
    cfg = AdamWConfig(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01)
    st = AdamWState(ps, cfg)
    adamw_step(ps, {"w": np.ones(1, np.float32)}, st)
    expected = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8) + 0.01 * 1.0)
    assert ps["w"].data[0] == pytest.approx(expected, abs=1e-8)
    assert expected == pytest.approx(0.99899000001, abs=1e-11)


def test_zero_betas_is_plain_normalized_step():
    # beta1=beta2=0: m_hat=g, v_hat=g*g, update = g/(|g|+eps) = sign(g)
    ps = param_set(w=[0.0, 0.0])
    cfg = AdamWConfig(lr=0.1, beta1=0.0, beta2=0.0, eps=1e-8, weight_decay=0.0)
    st = AdamWState(ps, cfg)
    adamw_step(ps, {"w": np.array([2.0, -0.5], np.float32)}, st)
    assert ps["w"].data == pytest.approx([-0.1, 0.1], abs=1e-8)


def test_two_steps_match_manual_recurrence():
    g1, g2 = 0.7, -0.3
    cfg = AdamWConfig(lr=2e-2, beta1=0.9, beta2=0.99, eps=1e-8, weight_decay=0.05)
    ps = param_set(w=[0.5])
    st = AdamWState(ps, cfg)

    p = 0.5
    m = v = 0.0
    for t, g in ((1, g1), (2, g2)):
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1**t)
        v_hat = v / (1 - cfg.beta2**t)
        p = p - cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p)

    adamw_step(ps, {"w": np.array([g1], np.float32)}, st)
    adamw_step(ps, {"w": np.array([g2], np.float32)}, st)
    assert ps["w"].data[0] == pytest.approx(p, rel=1e-6)
    assert st.step_count == 2


def test_weight_decay_is_decoupled():
    # zero gradient: moments stay zero, decay still shrinks the parameter
    ps = param_set(w=[2.0])
    cfg = AdamWConfig(lr=0.1, weight_decay=0.5)
    st = AdamWState(ps, cfg)
    adamw_step(ps, {"w": np.zeros(1, np.float32)}, st)
    assert ps["w"].data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-7)


def test_lr_override_and_validation():
    ps = param_set(w=[1.0])
    st = AdamWState(ps, AdamWConfig(lr=1e-3, weight_decay=0.0))
    adamw_step(ps, {"w": np.ones(1, np.float32)}, st, lr=0.0)
    assert ps["w"].data[0] == 1.0
    with pytest.raises(ContractViolation):
        adamw_step(ps, {"w": np.ones(1, np.float32)}, st, lr=-1.0)
    with pytest.raises(ContractViolation):
        AdamWConfig(lr=-1.0).validate()
    with pytest.raises(ContractViolation):
        AdamWConfig(beta1=1.0).validate()


def test_gradient_name_and_shape_contracts():
    ps = param_set(a=[1.0], b=[2.0])
    st = AdamWState(ps, AdamWConfig())
    with pytest.raises(ContractViolation):
        adamw_step(ps, {"a": np.ones(1, np.float32)}, st)
    with pytest.raises(ContractViolation):
        adamw_step(ps, {"a": np.ones(2, np.float32), "b": np.ones(1, np.float32)}, st)


def test_nonfinite_gradient_rejected():
    ps = param_set(w=[1.0])
    st = AdamWState(ps, AdamWConfig())
    with pytest.raises(NumericOverflowError):
        adamw_step(ps, {"w": np.array([np.nan], np.float32)}, st)


def test_ema_hand_oracle():
    # shadow = 0.9*1.0 + 0.1*2.0 = 1.1
    ps = param_set(w=[1.0])
    ema = EmaState(ps, decay=0.9)
    ps["w"].data[0] = 2.0
    ema.update(ps)
    assert ema.shadow["w"][0] == pytest.approx(1.1, abs=1e-7)
    snap = ema.snapshot()
    assert snap["w"].data[0] == pytest.approx(1.1, abs=1e-7)
    assert snap["w"].requires_grad
    # the snapshot is a copy, not a view
    snap["w"].data[0] = 99.0
    assert ema.shadow["w"][0] == pytest.approx(1.1, abs=1e-7)


def test_ema_validation():
    ps = param_set(w=[1.0])
    with pytest.raises(ContractViolation):
        EmaState(ps, decay=1.0)
    ema = EmaState(ps, decay=0.5)
    with pytest.raises(ContractViolation):
        ema.update(param_set(other=[1.0]))
