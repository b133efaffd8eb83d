"""Sampling, best-of-N displacement metrics, and cost measurement.

Sampling draws N futures per window from independent per-sample random
streams, so sample s of window w is the same array no matter how many other
samples are requested; best-of-N curves over nested N are therefore exactly
monotone. Two conditioning conventions are supported: `step_start` queries
the model at the step's origin time (the pretraining convention) and
`step_end` queries at the landing time (the distillation convention, whose
targets encode the clean state in landing-time coefficients). The terminal
step of every plan emits the clean-state reconstruction directly.

Denoiser invocations are counted exactly: one per sample per plan step.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .data import Standardizer, WindowBatch, integrate_velocity
from .exceptions import ContractViolation
from .numerics import RandomSource, no_grad
from .schedule import NoiseSchedule, StepPlan, ancestral_step, ddim_step, x0_from_v

_SAMPLE_STREAM_SPACING = 1 << 20  # windows far apart in fork-tag space


@dataclass(frozen=True)
class SamplerConfig:
    plan: StepPlan
    conditioning: str = "step_end"
    stochastic: bool = False

    def __post_init__(self):
        if self.conditioning not in ("step_start", "step_end"):
            raise ContractViolation(
                f"conditioning must be step_start or step_end, got {self.conditioning}"
            )


@dataclass
class PredictionSet:
    positions: np.ndarray       # (B, N, P, 2) absolute, NaN rows possible
    velocities: np.ndarray      # (B, N, P, 2) unstandardized
    denoiser_calls: int
    nan_samples: int
    meta: list[tuple[str, str, int]]
    provenance: dict = field(default_factory=dict)

    @property
    def n_windows(self) -> int:
        return self.positions.shape[0]

    @property
    def n_samples(self) -> int:
        return self.positions.shape[1]

    @property
    def calls_per_window(self) -> float:
        return self.denoiser_calls / max(self.n_windows, 1)


def sample_predictions(
    model,
    batch: WindowBatch,
    contexts: np.ndarray,
    standardizer: Standardizer,
    sched: NoiseSchedule,
    config: SamplerConfig,
    n_samples: int,
    seed: int,
) -> PredictionSet:
    """Draw `n_samples` futures per window with the configured plan.

    `model` needs a `forward(y, k, f) -> Tensor` method over standardized
    velocity space. Contexts are precomputed (n_windows, F) features.
    """
    if n_samples < 1:
        raise ContractViolation(f"n_samples must be >= 1, got {n_samples}")
    b = batch.size
    if contexts.shape[0] != b:
        raise ContractViolation(f"contexts rows {contexts.shape[0]} != windows {b}")
    p = batch.target_v.shape[1]
    rows = b * n_samples
    root = RandomSource(seed).fork(0x73616D)
    sources = [
        root.fork(w * _SAMPLE_STREAM_SPACING + s) for w in range(b) for s in range(n_samples)
    ]
    y = np.stack([src.gaussian((p, 2)) for src in sources]).astype(np.float64)
    f_rep = np.repeat(contexts, n_samples, axis=0)
    calls = 0
    with no_grad():
        for k_from, k_to in config.plan.pairs():
            cond_k = k_to if config.conditioning == "step_end" else k_from
            v_hat = model.forward(y.astype(np.float32), cond_k, f_rep).data.astype(np.float64)
            calls += rows
            x0_hat = x0_from_v(y, v_hat, cond_k, sched)
            if k_to == 0.0:
                y = np.asarray(x0_hat, dtype=np.float64)
            elif config.stochastic:
                a_f, s_f = sched.alpha_sigma(k_from)
                v_at_start = (float(a_f) * y - x0_hat) / float(s_f)
                noise = np.stack([src.gaussian((p, 2)) for src in sources]).astype(np.float64)
                y = ancestral_step(y, v_at_start, k_from, k_to, sched, noise=noise).astype(
                    np.float64
                )
            else:
                y = ddim_step(y, x0_hat, k_from, k_to, sched).astype(np.float64)
    z = y.reshape(b, n_samples, p, 2).astype(np.float32)
    finite = np.isfinite(z).all(axis=(2, 3))
    nan_samples = int((~finite).sum())
    vel = standardizer.inverse(z)
    anchors = batch.anchors[:, None, :]
    positions = integrate_velocity(anchors, vel.astype(np.float64), batch.dt)
    return PredictionSet(
        positions=positions.astype(np.float32),
        velocities=vel,
        denoiser_calls=calls,
        nan_samples=nan_samples,
        meta=list(batch.meta),
        provenance={
            "steps": config.plan.steps,
            "conditioning": config.conditioning,
            "stochastic": config.stochastic,
            "n_samples": n_samples,
            "seed": seed,
        },
    )


# ---------------------------------------------------------------------------
# displacement metrics


@dataclass
class DisplacementMetrics:
    min_ade: float
    min_fde: float
    n_samples: int
    n_windows: int
    skipped_windows: int
    nan_samples: int


def displacement_metrics(
    positions: np.ndarray, ground_truth: np.ndarray, n_samples: int | None = None
) -> DisplacementMetrics:
    """Best-of-N average and final displacement over a window set.

    Uses the first `n_samples` futures of each window (all by default);
    non-finite samples are excluded and counted, and a window with no finite
    sample is skipped.
    """
    pos = np.asarray(positions, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if pos.ndim != 4 or gt.ndim != 3 or pos.shape[0] != gt.shape[0] or pos.shape[2:] != gt.shape[1:]:
        raise ContractViolation(
            f"expected positions (B, N, P, 2) and ground truth (B, P, 2), "
            f"got {pos.shape} and {gt.shape}"
        )
    if n_samples is not None:
        if not (1 <= n_samples <= pos.shape[1]):
            raise ContractViolation(
                f"n_samples must lie in [1, {pos.shape[1]}], got {n_samples}"
            )
        pos = pos[:, :n_samples]
    dists = np.linalg.norm(pos - gt[:, None, :, :], axis=-1)  # (B, N, P)
    ade = dists.mean(axis=-1)
    fde = dists[:, :, -1]
    finite = np.isfinite(dists).all(axis=-1)
    nan_samples = int((~finite).sum())
    ades, fdes, skipped = [], [], 0
    for w in range(pos.shape[0]):
        ok = finite[w]
        if not ok.any():
            skipped += 1
            continue
        ades.append(ade[w][ok].min())
        fdes.append(fde[w][ok].min())
    if not ades:
        raise ContractViolation("every window was skipped: no finite samples")
    return DisplacementMetrics(
        min_ade=float(np.mean(ades)),
        min_fde=float(np.mean(fdes)),
        n_samples=pos.shape[1],
        n_windows=len(ades),
        skipped_windows=skipped,
        nan_samples=nan_samples,
    )


def metric_curve(
    positions: np.ndarray, ground_truth: np.ndarray, sample_counts: list[int]
) -> dict[int, DisplacementMetrics]:
    """Best-of-N metrics over nested prefixes of the sample axis."""
    return {n: displacement_metrics(positions, ground_truth, n) for n in sample_counts}


# ---------------------------------------------------------------------------
# reporting


@dataclass
class MetricsReport:
    label: str
    n_windows: int
    n_samples: int
    steps: int
    conditioning: str
    min_ade: float
    min_fde: float
    min_ade_1: float
    min_fde_1: float
    nan_samples: int
    skipped_windows: int
    calls_per_window: float
    params_denoiser: int
    params_encoder: int
    flops_per_step: int
    flops_per_trajectory: int
    seed: int
    config_hash: str = ""
    latency_s: float | None = None

    @property
    def params_total(self) -> int:
        return self.params_denoiser + self.params_encoder

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.csv_header()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def csv_header() -> list[str]:
        return [
            "label", "n_windows", "n_samples", "steps", "conditioning",
            "min_ade", "min_fde", "min_ade_1", "min_fde_1",
            "nan_samples", "skipped_windows", "calls_per_window",
            "params_denoiser", "params_encoder", "params_total",
            "flops_per_step", "flops_per_trajectory", "seed", "config_hash",
            "latency_s",
        ]

    def csv_row(self) -> str:
        vals = []
        for key in self.csv_header():
            v = self.params_total if key == "params_total" else getattr(self, key)
            vals.append("" if v is None else str(v))
        return ",".join(vals)


def evaluate(
    model,
    batch: WindowBatch,
    contexts: np.ndarray,
    standardizer: Standardizer,
    sched: NoiseSchedule,
    sampler_config: SamplerConfig,
    n_samples: int,
    seed: int,
    label: str = "",
    params_denoiser: int = 0,
    params_encoder: int = 0,
    flops_per_step: int = 0,
    encoder_flops: int = 0,
    config_hash: str = "",
) -> tuple[MetricsReport, PredictionSet]:
    """Sample, score, and assemble the cost-annotated report."""
    preds = sample_predictions(
        model, batch, contexts, standardizer, sched, sampler_config, n_samples, seed
    )
    gt = integrate_velocity(batch.anchors[:, None, :], batch.target_v[:, None], batch.dt)[:, 0]
    best = displacement_metrics(preds.positions, gt)
    single = displacement_metrics(preds.positions, gt, n_samples=1)
    report = MetricsReport(
        label=label,
        n_windows=batch.size,
        n_samples=n_samples,
        steps=sampler_config.plan.steps,
        conditioning=sampler_config.conditioning,
        min_ade=best.min_ade,
        min_fde=best.min_fde,
        min_ade_1=single.min_ade,
        min_fde_1=single.min_fde,
        nan_samples=best.nan_samples,
        skipped_windows=best.skipped_windows,
        calls_per_window=preds.calls_per_window,
        params_denoiser=params_denoiser,
        params_encoder=params_encoder,
        flops_per_step=flops_per_step,
        flops_per_trajectory=flops_per_step * sampler_config.plan.steps + encoder_flops,
        seed=seed,
        config_hash=config_hash,
    )
    return report, preds


# ---------------------------------------------------------------------------
# latency


@dataclass
class BenchResult:
    median_s: float
    times: list[float]


def bench_latency(
    fn: Callable[[], object],
    repeats: int = 5,
    warmup: int = 1,
    timer: Callable[[], float] = time.perf_counter,
    single_thread: bool = True,
) -> BenchResult:
    """Median wall time of `fn` over `repeats` runs after `warmup` calls."""
    if repeats < 1 or warmup < 0:
        raise ContractViolation(f"repeats must be >= 1 and warmup >= 0, got {repeats}, {warmup}")

    def run() -> BenchResult:
        for _ in range(warmup):
            fn()
        times = []
        for _ in range(repeats):
            t0 = timer()
            fn()
            times.append(timer() - t0)
        return BenchResult(median_s=float(statistics.median(times)), times=times)

    if single_thread:
        with threadpool_limits(limits=1):
            return run()
    return run()


def bench_sampler(
    model,
    batch: WindowBatch,
    contexts: np.ndarray,
    standardizer: Standardizer,
    sched: NoiseSchedule,
    config: SamplerConfig,
    repeats: int = 5,
    seed: int = 0,
    timer: Callable[[], float] = time.perf_counter,
) -> BenchResult:
    """Median latency of drawing one future for the batch's first window."""
    one = WindowBatch(
        ego=batch.ego[:1],
        neighbors=batch.neighbors[:1],
        neighbor_mask=batch.neighbor_mask[:1],
        target_v=batch.target_v[:1],
        anchors=batch.anchors[:1],
        dt=batch.dt,
        meta=batch.meta[:1],
    )
    ctx = contexts[:1]

    def draw():
        sample_predictions(model, one, ctx, standardizer, sched, config, 1, seed)

    return bench_latency(draw, repeats=repeats, timer=timer)
