"""Desk-scale lab for distilling trajectory diffusion models.

The pipeline: generate or load scenes (`data`), pretrain a v-predicting
denoiser over a fine step grid (`distill.pretrain`), then halve the grid
repeatedly while a smaller student learns from the frozen teacher's
two-step targets alongside ground truth (`distill.cpd_run`), and finally
score best-of-N displacement against held-out futures with explicit
parameter, FLOP, and latency accounting (`evaluation`).
"""

from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, load_run_config, run_config_from_dict
from .data import (
    Scene,
    Standardizer,
    SyntheticSpec,
    Track,
    TrajectoryWindow,
    WindowBatch,
    integrate_velocity,
    load_interchange,
    load_trajectory_file,
    make_windows,
    save_interchange,
    split_windows,
    stack_windows,
    synth_generate,
)
from .distill import (
    DistillConfig,
    DistillResult,
    PretrainConfig,
    PretrainResult,
    TrainingLogger,
    accel_loss,
    cpd_run,
    pd_run,
    pretrain,
    student_loss,
    teacher_two_step_target,
)
from .evaluation import (
    DisplacementMetrics,
    MetricsReport,
    PredictionSet,
    SamplerConfig,
    bench_latency,
    bench_sampler,
    displacement_metrics,
    evaluate,
    metric_curve,
    sample_predictions,
)
from .exceptions import (
    BoundaryStepError,
    CheckpointError,
    ConfigError,
    ContractViolation,
    DataError,
    DivergenceError,
    NumericOverflowError,
    ParseError,
    TrajDistillError,
)
from .nets import (
    Denoiser,
    DenoiserConfig,
    Encoder,
    EncoderConfig,
    count_encoder_params,
    count_params,
    estimate_encoder_flops,
    estimate_flops,
)
from .numerics import AdamWConfig, EmaState, ParamSet, RandomSource, Tensor, adamw_step, grad, no_grad
from .schedule import (
    NoiseSchedule,
    StepPlan,
    ancestral_step,
    ddim_step,
    eps_from_x0,
    q_sample,
    v_target,
    x0_from_v,
)

__version__ = "0.1.0"

__all__ = [
    "AdamWConfig",
    "BoundaryStepError",
    "CheckpointBundle",
    "CheckpointError",
    "ConfigError",
    "ContractViolation",
    "DataError",
    "Denoiser",
    "DenoiserConfig",
    "DisplacementMetrics",
    "DistillConfig",
    "DistillResult",
    "DivergenceError",
    "EmaState",
    "Encoder",
    "EncoderConfig",
    "MetricsReport",
    "NoiseSchedule",
    "NumericOverflowError",
    "ParamSet",
    "ParseError",
    "PredictionSet",
    "PretrainConfig",
    "PretrainResult",
    "RandomSource",
    "RunConfig",
    "SamplerConfig",
    "Scene",
    "Standardizer",
    "StepPlan",
    "SyntheticSpec",
    "Tensor",
    "Track",
    "TrainingLogger",
    "TrajDistillError",
    "TrajectoryWindow",
    "WindowBatch",
    "accel_loss",
    "adamw_step",
    "ancestral_step",
    "bench_latency",
    "bench_sampler",
    "config_hash",
    "count_encoder_params",
    "count_params",
    "cpd_run",
    "ddim_step",
    "displacement_metrics",
    "eps_from_x0",
    "estimate_encoder_flops",
    "estimate_flops",
    "evaluate",
    "grad",
    "integrate_velocity",
    "load_checkpoint",
    "load_interchange",
    "load_run_config",
    "load_trajectory_file",
    "make_windows",
    "metric_curve",
    "no_grad",
    "pd_run",
    "pretrain",
    "q_sample",
    "run_config_from_dict",
    "sample_predictions",
    "save_checkpoint",
    "save_interchange",
    "split_windows",
    "stack_windows",
    "student_loss",
    "synth_generate",
    "teacher_two_step_target",
    "v_target",
    "x0_from_v",
]
