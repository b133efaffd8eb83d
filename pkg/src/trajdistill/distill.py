"""Pretraining and collaborative progressive distillation.

One distillation iteration halves the sampler's step count and trains two
models against the same frozen teacher: a small student learns a coarse grid
with a loss that mixes the teacher's two-half-step target with the ground
truth, and a same-size copy of the teacher (the accelerated copy) learns the
coarse grid from the teacher target alone. The accelerated copy becomes the
next iteration's teacher, so later iterations distill from a model that has
itself adapted to fewer steps; the student carries its weights across
iterations. Classic progressive distillation is the same chain without the
student and without the ground-truth term.

The teacher target for a student step k -> k'' (k'' = k - 1/K on the
student's K-step grid) runs the teacher through the two enclosed half steps,
reconstructs the clean state, and re-expresses the result as a velocity
target at k''. Where sigma(k'') falls below the configured floor the
velocity extraction is ill-conditioned and targets, predictions, and ground
truth for those rows are compared in clean-state space instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Standardizer, TrajectoryWindow, stack_windows
from .exceptions import ContractViolation, DivergenceError
from .nets import Denoiser, DenoiserConfig, Encoder, EncoderConfig, denoise
from .numerics import (
    AdamWConfig,
    AdamWState,
    EmaState,
    ParamSet,
    RandomSource,
    Tensor,
    adamw_step,
    grad,
    no_grad,
)
from .schedule import SIGMA_FLOOR, NoiseSchedule, q_sample, v_target

# ---------------------------------------------------------------------------
# losses


def _mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred - Tensor(np.asarray(target, dtype=np.float32))
    return (diff * diff).mean()


@dataclass
class LossBreakdown:
    total: Tensor
    total_value: float      # float64 affine combination of the two terms
    teacher_term: float
    data_term: float


@dataclass
class TeacherTargets:
    """Per-row regression targets produced by the frozen teacher.

    `target` rows hold the velocity-space teacher target except where
    `x0_mode` is set, in which case the row holds the clean-state
    reconstruction and comparisons must happen in that space.
    """

    target: np.ndarray     # (B, P, 2) float32
    x0_first: np.ndarray   # (B, P, 2) clean state after the first half step
    x0_second: np.ndarray  # (B, P, 2) clean state after the second half step
    x0_mode: np.ndarray    # (B,) bool


def teacher_two_step_target(
    teacher_fn: Callable[[np.ndarray, np.ndarray, np.ndarray], Tensor],
    y_k: np.ndarray,
    i: np.ndarray,
    k_steps: int,
    sched: NoiseSchedule,
    f: np.ndarray,
    sigma_floor: float = SIGMA_FLOOR,
) -> TeacherTargets:
    """Distillation target for student step index i on a k_steps grid.

    The teacher walks k -> k-1/(2*k_steps) -> k-1/k_steps with deterministic
    updates, each half step reconstructing the clean state from the
    teacher's velocity estimate. The combined move is re-expressed as the
    single-step velocity target at the landing time using the original y_k.
    """
    if k_steps < 1:
        raise ContractViolation(f"k_steps must be >= 1, got {k_steps}")
    i = np.asarray(i)
    if np.any(i < 1) or np.any(i > k_steps):
        raise ContractViolation(f"step indices must lie in [1, {k_steps}], got {i}")
    y = np.asarray(y_k, dtype=np.float64)
    nd = y.ndim

    def bc(c: np.ndarray) -> np.ndarray:
        return np.asarray(c, dtype=np.float64).reshape(c.shape + (1,) * (nd - c.ndim))

    k = i / k_steps
    k_half = (2 * i - 1) / (2 * k_steps)
    k_end = (i - 1) / k_steps
    a_k, s_k = sched.alpha_sigma(k)
    a_h, s_h = sched.alpha_sigma(k_half)
    a_e, s_e = sched.alpha_sigma(k_end)
    with no_grad():
        v1 = teacher_fn(y.astype(np.float32), k, f).data.astype(np.float64)
        x0_first = bc(a_k) * y - bc(s_k) * v1
        y_half = bc(a_h) * x0_first + bc(s_h / s_k) * (y - bc(a_k) * x0_first)
        v2 = teacher_fn(y_half.astype(np.float32), k_half, f).data.astype(np.float64)
        x0_second = bc(a_h) * y_half - bc(s_h) * v2
    # i = 1 lands on k = 0 where eps recovery is ill-conditioned, so those
    # rows (and any row under the floor) carry the clean-state target instead
    boundary = np.asarray((s_e < sigma_floor) | (k_end == 0.0)).reshape(-1)
    safe = np.where(boundary, 1.0, np.asarray(s_e, dtype=np.float64).reshape(-1))
    eps_hat = (y - bc(a_e) * x0_second) / bc(safe)
    v_teach = bc(a_e) * eps_hat - bc(s_e) * x0_second
    target = np.where(boundary.reshape((-1,) + (1,) * (nd - 1)), x0_second, v_teach)
    return TeacherTargets(
        target=target.astype(np.float32),
        x0_first=x0_first.astype(np.float32),
        x0_second=x0_second.astype(np.float32),
        x0_mode=boundary,
    )


def _mixed_pred(
    pred: Tensor, y_k: np.ndarray, k_cond: np.ndarray, sched: NoiseSchedule, x0_mode: np.ndarray
) -> Tensor:
    """Swap boundary rows of a velocity prediction into clean-state space."""
    alpha, sigma = sched.alpha_sigma(k_cond)
    nd = pred.ndim
    a = np.asarray(alpha, dtype=np.float32).reshape((-1,) + (1,) * (nd - 1))
    s = np.asarray(sigma, dtype=np.float32).reshape((-1,) + (1,) * (nd - 1))
    m = x0_mode.astype(np.float32).reshape((-1,) + (1,) * (nd - 1))
    pred_x0 = Tensor(a * np.asarray(y_k, dtype=np.float32)) - Tensor(s) * pred
    return pred * Tensor(1.0 - m) + pred_x0 * Tensor(m)


def student_loss(
    pred: Tensor,
    y_k: np.ndarray,
    k_cond: np.ndarray,
    targets: TeacherTargets,
    v_true: np.ndarray,
    z0: np.ndarray,
    sched: NoiseSchedule,
    lam: float,
) -> LossBreakdown:
    """Dual-signal objective: (1-lam) teacher term + lam ground-truth term.

    Both terms are means over every batch element and coordinate. With
    lam = 1 the built graph is exactly the pretraining objective on
    (y_k, k_cond, v_true); with lam = 0 it is the teacher term alone.
    """
    if not (0.0 <= lam <= 1.0):
        raise ContractViolation(f"lam must lie in [0, 1], got {lam}")
    if targets.x0_mode.any():
        pred_cmp = _mixed_pred(pred, y_k, k_cond, sched, targets.x0_mode)
        m = targets.x0_mode.reshape((-1,) + (1,) * (pred.ndim - 1))
        true_cmp = np.where(m, np.asarray(z0), np.asarray(v_true))
    else:
        pred_cmp = pred
        true_cmp = v_true
    teacher_t = _mse(pred_cmp, targets.target)
    data_t = _mse(pred_cmp, true_cmp)
    if lam == 0.0:
        total = teacher_t
    elif lam == 1.0:
        total = data_t
    else:
        total = teacher_t * (1.0 - lam) + data_t * lam
    tval, dval = float(teacher_t.data), float(data_t.data)
    return LossBreakdown(
        total=total,
        total_value=(1.0 - lam) * tval + lam * dval,
        teacher_term=tval,
        data_term=dval,
    )


def accel_loss(
    pred: Tensor,
    y_k: np.ndarray,
    k_cond: np.ndarray,
    targets: TeacherTargets,
    sched: NoiseSchedule,
) -> LossBreakdown:
    """Teacher-matching objective for the accelerated copy."""
    if targets.x0_mode.any():
        pred_cmp = _mixed_pred(pred, y_k, k_cond, sched, targets.x0_mode)
    else:
        pred_cmp = pred
    teacher_t = _mse(pred_cmp, targets.target)
    tval = float(teacher_t.data)
    return LossBreakdown(total=teacher_t, total_value=tval, teacher_term=tval, data_term=0.0)


# ---------------------------------------------------------------------------
# logging


LOG_COLUMNS = [
    "phase",
    "step",
    "iteration",
    "K",
    "loss_total",
    "loss_teacher_term",
    "loss_data_term",
    "loss_accel",
    "lr",
    "wall_clock_s",
]


class TrainingLogger:
    """Append-only CSV log with a fixed column set."""

    def __init__(self, path: str):
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._fh.write(",".join(LOG_COLUMNS) + "\n")
        self._t0 = time.perf_counter()

    def log(self, **fields) -> None:
        unknown = set(fields) - set(LOG_COLUMNS)
        if unknown:
            raise ContractViolation(f"unknown log fields: {sorted(unknown)}")
        fields.setdefault("wall_clock_s", f"{time.perf_counter() - self._t0:.3f}")
        row = [str(fields.get(c, "")) for c in LOG_COLUMNS]
        self._fh.write(",".join(row) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TrainingLogger":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _plateaued(history: Sequence[float], window: int, rel: float) -> bool:
    if len(history) < 2 * window:
        return False
    prev = float(np.mean(history[-2 * window : -window]))
    cur = float(np.mean(history[-window:]))
    return prev - cur < rel * max(abs(prev), 1e-12)


# ---------------------------------------------------------------------------
# pretraining


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    grid: int = 128              # conditioning times drawn from {1..grid}/grid
    ema_decay: float = 0.995
    plateau_window: int = 400
    plateau_rel: float = 1e-4
    log_every: int = 25

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.grid < 2:
            raise ContractViolation("steps and batch_size must be >= 1, grid >= 2")
        if self.lr <= 0 or not (0.0 <= self.ema_decay < 1.0):
            raise ContractViolation("lr must be positive and ema_decay in [0, 1)")
        if self.plateau_window < 1 or self.plateau_rel < 0:
            raise ContractViolation("plateau settings must be nonnegative")


@dataclass
class PretrainResult:
    denoiser: Denoiser
    encoder: Encoder
    ema_denoiser: ParamSet
    ema_encoder: ParamSet
    standardizer: Standardizer
    history: list[dict] = field(default_factory=list)
    steps_run: int = 0

    def ema_models(self) -> tuple[Denoiser, Encoder]:
        return (
            Denoiser(self.denoiser.config, self.ema_denoiser.copy()),
            Encoder(self.encoder.config, self.ema_encoder.copy()),
        )


def pretrain(
    windows: list[TrajectoryWindow],
    den_config: DenoiserConfig,
    enc_config: EncoderConfig,
    config: PretrainConfig,
    sched: NoiseSchedule,
    seed: int,
    logger: TrainingLogger | None = None,
) -> PretrainResult:
    """Joint denoiser + context-encoder training on standardized velocities."""
    batch_all = stack_windows(windows)
    standardizer = Standardizer.fit(windows)
    z_all = standardizer.transform(batch_all.target_v)
    n = batch_all.size
    rng = RandomSource(seed)
    den = Denoiser.init(den_config, rng.fork(1))
    enc = Encoder.init(enc_config, rng.fork(2))
    r_idx, r_step, r_eps = rng.fork(3), rng.fork(4), rng.fork(5)
    opt_cfg = AdamWConfig(lr=config.lr)
    opt_d, opt_e = AdamWState(den.params, opt_cfg), AdamWState(enc.params, opt_cfg)
    ema_d, ema_e = EmaState(den.params, config.ema_decay), EmaState(enc.params, config.ema_decay)
    den_names, enc_names = den.params.names(), enc.params.names()
    history: list[dict] = []
    losses: list[float] = []
    steps_run = 0
    for t in range(config.steps):
        lr_t = config.lr * (1.0 - t / config.steps)
        idx = r_idx.integers(0, n, (config.batch_size,))
        i = r_step.integers(1, config.grid + 1, (config.batch_size,))
        k = i / config.grid
        eps = r_eps.gaussian((config.batch_size,) + z_all.shape[1:])
        z0 = z_all[idx]
        y = q_sample(z0, k, eps, sched).astype(np.float32)
        v_tgt = v_target(z0, eps, k, sched).astype(np.float32)
        f = enc.forward(batch_all.ego[idx], batch_all.neighbors[idx], batch_all.neighbor_mask[idx])
        pred = denoise(den.params, den_config, y, k, f)
        loss = _mse(pred, v_tgt)
        lval = float(loss.data)
        if not np.isfinite(lval):
            raise DivergenceError(t, 0, "pretraining loss is not finite")
        gs = grad(loss, den.params.tensors() + enc.params.tensors())
        adamw_step(den.params, dict(zip(den_names, gs[: len(den_names)])), opt_d, lr=lr_t)
        adamw_step(enc.params, dict(zip(enc_names, gs[len(den_names) :])), opt_e, lr=lr_t)
        ema_d.update(den.params)
        ema_e.update(enc.params)
        losses.append(lval)
        steps_run = t + 1
        if t % config.log_every == 0 or t == config.steps - 1:
            row = {"phase": "pretrain", "step": t, "loss_total": lval, "lr": lr_t}
            history.append({"step": t, "loss": lval, "lr": lr_t})
            if logger is not None:
                logger.log(**row)
        if _plateaued(losses, config.plateau_window, config.plateau_rel):
            history.append({"step": t, "loss": lval, "lr": lr_t, "stopped": "plateau"})
            break
    return PretrainResult(
        denoiser=den,
        encoder=enc,
        ema_denoiser=ema_d.snapshot(),
        ema_encoder=ema_e.snapshot(),
        standardizer=standardizer,
        history=history,
        steps_run=steps_run,
    )


# ---------------------------------------------------------------------------
# distillation


@dataclass(frozen=True)
class DistillConfig:
    k_start: int = 128
    k_target: int = 4
    lam: float = 0.5
    steps_per_iteration: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    ema_decay: float = 0.98
    plateau_window: int = 100
    plateau_rel: float = 1e-4
    sigma_floor: float = SIGMA_FLOOR
    ablate_acceleration: bool = False
    ablate_compression: bool = False
    ablate_data_term: bool = False
    ablate_weight_init: bool = False

    def __post_init__(self):
        if self.k_target < 1:
            raise ContractViolation(f"k_target must be >= 1, got {self.k_target}")
        k = self.k_start
        while k > self.k_target and k % 2 == 0:
            k //= 2
        if k != self.k_target:
            raise ContractViolation(
                f"k_start {self.k_start} must be k_target {self.k_target} times a power of two"
            )
        if not (0.0 <= self.lam <= 1.0):
            raise ContractViolation(f"lam must lie in [0, 1], got {self.lam}")
        if self.steps_per_iteration < 1 or self.batch_size < 1:
            raise ContractViolation("steps_per_iteration and batch_size must be >= 1")
        if self.lr <= 0 or not (0.0 <= self.ema_decay < 1.0) or self.sigma_floor <= 0:
            raise ContractViolation("lr and sigma_floor must be positive, ema_decay in [0, 1)")

    @property
    def iteration_count(self) -> int:
        n, k = 0, self.k_start
        while k > self.k_target:
            k //= 2
            n += 1
        return n

    @property
    def effective_lam(self) -> float:
        return 0.0 if self.ablate_data_term else self.lam


@dataclass
class IterationOutcome:
    index: int
    k_coarse: int
    teacher: Denoiser
    student: Denoiser | None
    mean_student_loss: float
    mean_accel_loss: float
    steps_run: int


@dataclass
class DistillResult:
    student: Denoiser | None
    teacher_final: Denoiser
    iterations: list[IterationOutcome]
    standardizer: Standardizer


def _precompute_contexts(encoder: Encoder, batch_all, chunk: int = 256) -> np.ndarray:
    outs = []
    with no_grad():
        for lo in range(0, batch_all.size, chunk):
            hi = min(lo + chunk, batch_all.size)
            outs.append(
                encoder.forward(
                    batch_all.ego[lo:hi],
                    batch_all.neighbors[lo:hi],
                    batch_all.neighbor_mask[lo:hi],
                ).data
            )
    return np.concatenate(outs, axis=0)


def _distill_iteration(
    teacher: Denoiser,
    student: Denoiser | None,
    accel: Denoiser | None,
    z_all: np.ndarray,
    f_all: np.ndarray,
    config: DistillConfig,
    sched: NoiseSchedule,
    rng: RandomSource,
    it_idx: int,
    k_coarse: int,
    logger: TrainingLogger | None,
    phase: str,
) -> tuple[ParamSet | None, ParamSet | None, float, float, int]:
    """Train the optional student and accelerated copy against one teacher.

    Returns EMA snapshots for both trainables plus mean losses over the run.
    """
    n = z_all.shape[0]
    lam = config.effective_lam
    r_idx, r_step, r_eps = rng.fork(1), rng.fork(2), rng.fork(3)
    opt_cfg = AdamWConfig(lr=config.lr)
    opt_s = AdamWState(student.params, opt_cfg) if student is not None else None
    opt_a = AdamWState(accel.params, opt_cfg) if accel is not None else None
    ema_s = EmaState(student.params, config.ema_decay) if student is not None else None
    ema_a = EmaState(accel.params, config.ema_decay) if accel is not None else None
    stop_losses: list[float] = []
    s_losses: list[float] = []
    a_losses: list[float] = []
    steps_run = 0
    for t in range(config.steps_per_iteration):
        lr_t = config.lr * (1.0 - t / config.steps_per_iteration)
        idx = r_idx.integers(0, n, (config.batch_size,))
        i = r_step.integers(1, k_coarse + 1, (config.batch_size,))
        eps = r_eps.gaussian((config.batch_size,) + z_all.shape[1:])
        z0 = z_all[idx]
        k = i / k_coarse
        k_end = (i - 1) / k_coarse
        y = q_sample(z0, k, eps, sched).astype(np.float32)
        f = f_all[idx]
        targets = teacher_two_step_target(
            teacher.forward, y, i, k_coarse, sched, f, config.sigma_floor
        )
        row: dict = {"phase": phase, "step": t, "iteration": it_idx, "K": k_coarse, "lr": lr_t}
        if student is not None:
            v_true = v_target(z0, eps, k_end, sched).astype(np.float32)
            pred_s = student.forward(y, k_end, f)
            breakdown = student_loss(pred_s, y, k_end, targets, v_true, z0, sched, lam)
            if not np.isfinite(breakdown.total_value):
                raise DivergenceError(t, it_idx, "student loss is not finite")
            gs = grad(breakdown.total, student.params.tensors())
            adamw_step(student.params, dict(zip(student.params.names(), gs)), opt_s, lr=lr_t)
            ema_s.update(student.params)
            s_losses.append(breakdown.total_value)
            row.update(
                loss_total=breakdown.total_value,
                loss_teacher_term=breakdown.teacher_term,
                loss_data_term=breakdown.data_term,
            )
        if accel is not None:
            pred_a = accel.forward(y, k_end, f)
            a_break = accel_loss(pred_a, y, k_end, targets, sched)
            if not np.isfinite(a_break.total_value):
                raise DivergenceError(t, it_idx, "accelerated-copy loss is not finite")
            ga = grad(a_break.total, accel.params.tensors())
            adamw_step(accel.params, dict(zip(accel.params.names(), ga)), opt_a, lr=lr_t)
            ema_a.update(accel.params)
            a_losses.append(a_break.total_value)
            row["loss_accel"] = a_break.total_value
        steps_run = t + 1
        if logger is not None and (t % 25 == 0 or t == config.steps_per_iteration - 1):
            logger.log(**row)
        stop_losses.append(s_losses[-1] if student is not None else a_losses[-1] if accel is not None else 0.0)
        if _plateaued(stop_losses, config.plateau_window, config.plateau_rel):
            break
    return (
        ema_s.snapshot() if ema_s is not None else None,
        ema_a.snapshot() if ema_a is not None else None,
        float(np.mean(s_losses)) if s_losses else float("nan"),
        float(np.mean(a_losses)) if a_losses else float("nan"),
        steps_run,
    )


def cpd_run(
    windows: list[TrajectoryWindow],
    teacher: Denoiser,
    encoder: Encoder,
    student_init: Denoiser,
    config: DistillConfig,
    sched: NoiseSchedule,
    standardizer: Standardizer,
    seed: int,
    logger: TrainingLogger | None = None,
) -> DistillResult:
    """Collaborative chain: every iteration halves the grid, hands the EMA of
    the accelerated copy forward as the next teacher, and (unless ablated)
    trains the student at the coarse grid with the dual-signal loss. The
    student warm-starts from `student_init` (a pretrained small model) and
    carries its weights across iterations."""
    batch_all = stack_windows(windows)
    z_all = standardizer.transform(batch_all.target_v)
    f_all = _precompute_contexts(encoder, batch_all)
    rng = RandomSource(seed)
    student: Denoiser | None = None
    if not config.ablate_compression:
        student = student_init.clone()
    outcomes: list[IterationOutcome] = []
    k = config.k_start
    it_idx = 0
    while k > config.k_target:
        k_coarse = k // 2
        final_iteration = k_coarse == config.k_target
        if config.ablate_compression and final_iteration:
            student = Denoiser.init(student_init.config, rng.fork(11))
        if config.ablate_weight_init and student is not None:
            student = Denoiser.init(student_init.config, rng.fork(1000 + it_idx))
        accel = None if config.ablate_acceleration else teacher.clone()
        ema_s, ema_a, s_loss, a_loss, steps_run = _distill_iteration(
            teacher, student, accel, z_all, f_all, config, sched,
            rng.fork(100 + it_idx), it_idx, k_coarse, logger, "cpd",
        )
        if ema_a is not None:
            teacher = Denoiser(teacher.config, ema_a)
        if student is not None and ema_s is not None:
            student = Denoiser(student.config, ema_s)
        outcomes.append(
            IterationOutcome(
                index=it_idx,
                k_coarse=k_coarse,
                teacher=teacher.clone(),
                student=student.clone() if student is not None else None,
                mean_student_loss=s_loss,
                mean_accel_loss=a_loss,
                steps_run=steps_run,
            )
        )
        k = k_coarse
        it_idx += 1
    return DistillResult(
        student=student, teacher_final=teacher, iterations=outcomes, standardizer=standardizer
    )


def pd_run(
    windows: list[TrajectoryWindow],
    teacher: Denoiser,
    encoder: Encoder,
    config: DistillConfig,
    sched: NoiseSchedule,
    standardizer: Standardizer,
    seed: int,
    logger: TrainingLogger | None = None,
) -> DistillResult:
    """Plain progressive distillation: one model at the teacher's own size,
    each iteration cloning the current model as a frozen teacher and
    training the clone to match two half steps in one."""
    batch_all = stack_windows(windows)
    z_all = standardizer.transform(batch_all.target_v)
    f_all = _precompute_contexts(encoder, batch_all)
    rng = RandomSource(seed)
    outcomes: list[IterationOutcome] = []
    k = config.k_start
    it_idx = 0
    while k > config.k_target:
        k_coarse = k // 2
        accel = teacher.clone()
        _, ema_a, _, a_loss, steps_run = _distill_iteration(
            teacher, None, accel, z_all, f_all, config, sched,
            rng.fork(100 + it_idx), it_idx, k_coarse, logger, "pd",
        )
        teacher = Denoiser(teacher.config, ema_a)
        outcomes.append(
            IterationOutcome(
                index=it_idx,
                k_coarse=k_coarse,
                teacher=teacher.clone(),
                student=None,
                mean_student_loss=float("nan"),
                mean_accel_loss=a_loss,
                steps_run=steps_run,
            )
        )
        k = k_coarse
        it_idx += 1
    return DistillResult(
        student=None, teacher_final=teacher, iterations=outcomes, standardizer=standardizer
    )
