"""Command-line entry points.

Subcommands: synth (generate branching scenes), pretrain (base denoiser +
context encoder), distill (collaborative or plain progressive), eval
(best-of-N displacement metrics with cost accounting), sample (write
predicted futures), bench (sampler latency). Every run writes its resolved
configuration next to its outputs so results are attributable to an exact
setting hash.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .data import (
    Scene,
    _fmt,
    Standardizer,
    SyntheticSpec,
    dataset_manifest,
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
    PretrainConfig,
    TrainingLogger,
    cpd_run,
    pd_run,
    pretrain,
)
from .evaluation import (
    MetricsReport,
    SamplerConfig,
    bench_sampler,
    evaluate,
    sample_predictions,
)
from .exceptions import ConfigError, TrajDistillError
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
from .schedule import NoiseSchedule, StepPlan
from .svgplot import line_plot, trajectory_plot

# ---------------------------------------------------------------------------
# section -> tool config resolution


def _denoiser_config(section: cfgmod.ModelSection, cfg: cfgmod.RunConfig) -> DenoiserConfig:
    return DenoiserConfig(
        hidden=section.hidden,
        horizon=cfg.data.horizon,
        context_width=cfg.encoder.out_width,
        time_width=section.time_width,
        layers=section.layers,
        heads=section.heads,
    )


def _encoder_config(cfg: cfgmod.RunConfig) -> EncoderConfig:
    return EncoderConfig(
        history_len=cfg.data.history_len,
        recurrent_width=cfg.encoder.recurrent_width,
        neighbor_width=cfg.encoder.neighbor_width,
        out_width=cfg.encoder.out_width,
        max_neighbors=cfg.data.max_neighbors,
        neighbor_radius=cfg.data.neighbor_radius,
    )


def _pretrain_config(cfg: cfgmod.RunConfig) -> PretrainConfig:
    p = cfg.pretrain
    return PretrainConfig(
        steps=p.steps,
        batch_size=p.batch_size,
        lr=p.lr,
        grid=cfg.distill.k_start,
        ema_decay=p.ema_decay,
        plateau_window=p.plateau_window,
        plateau_rel=p.plateau_rel,
        log_every=p.log_every,
    )


def _distill_config(cfg: cfgmod.RunConfig) -> DistillConfig:
    d = cfg.distill
    return DistillConfig(
        k_start=d.k_start,
        k_target=d.k_target,
        lam=d.lam,
        steps_per_iteration=d.steps_per_iteration,
        batch_size=d.batch_size,
        lr=d.lr,
        ema_decay=d.ema_decay,
        plateau_window=d.plateau_window,
        plateau_rel=d.plateau_rel,
        ablate_acceleration=d.ablate_acceleration,
        ablate_compression=d.ablate_compression,
        ablate_data_term=d.ablate_data_term,
        ablate_weight_init=d.ablate_weight_init,
    )


def _synth_spec(cfg: cfgmod.RunConfig) -> SyntheticSpec:
    s = cfg.data.synth
    return SyntheticSpec(
        n_scenes=s.n_scenes,
        agents_per_scene=s.agents_per_scene,
        steps_per_agent=s.steps_per_agent,
        dt=cfg.data.dt,
        speed_low=s.speed_low,
        speed_high=s.speed_high,
        turn_angle_deg=s.turn_angle_deg,
        turn_steps=s.turn_steps,
        noise_std=s.noise_std,
        spawn_box=s.spawn_box,
    )


# ---------------------------------------------------------------------------
# shared IO


def _load_scenes(cfg: cfgmod.RunConfig, data_path: str | None, seed: int) -> list[Scene]:
    path = data_path or cfg.data.path
    kind = cfg.data.kind
    if path:
        if kind == "trajectories" or (kind == "synthetic" and path.endswith(".txt")):
            return [load_trajectory_file(path, dt=cfg.data.dt)]
        return load_interchange(path, dt=cfg.data.dt)
    if kind != "synthetic":
        raise ConfigError(f"data kind {kind!r} needs a --data path or data.path setting")
    return synth_generate(_synth_spec(cfg), seed=seed)


def _all_windows(cfg: cfgmod.RunConfig, scenes: list[Scene]):
    ws = []
    for sc in scenes:
        ws.extend(
            make_windows(
                sc,
                history_len=cfg.data.history_len,
                horizon=cfg.data.horizon,
                stride=cfg.data.stride,
                max_neighbors=cfg.data.max_neighbors,
                neighbor_radius=cfg.data.neighbor_radius,
            )
        )
    return ws


def _split(cfg: cfgmod.RunConfig, windows):
    test_frac = max(0.0, 1.0 - cfg.data.train_fraction - cfg.data.val_fraction)
    return split_windows(
        windows, (cfg.data.train_fraction, cfg.data.val_fraction, test_frac), cfg.data.split_seed
    )


def _pick_split(cfg: cfgmod.RunConfig, windows, which: str):
    if which == "all":
        return windows
    train, val, test = _split(cfg, windows)
    try:
        picked = {"train": train, "val": val, "test": test}[which]
    except KeyError:
        raise ConfigError(f"unknown split {which!r}; use train, val, test, or all") from None
    if not picked:
        raise ConfigError(f"split {which!r} is empty; adjust fractions or data size")
    return picked


def _write_resolved(cfg: cfgmod.RunConfig, out_dir: str, extra: dict) -> str:
    doc = cfgmod.resolved_dict(cfg)
    doc["config_hash"] = cfgmod.config_hash(cfg)
    doc.update(extra)
    path = os.path.join(out_dir, "resolved_config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return doc["config_hash"]


def _precompute_contexts(encoder: Encoder, batch) -> np.ndarray:
    from .distill import _precompute_contexts as impl

    return impl(encoder, batch)


def _model_from_bundle(bundle: CheckpointBundle) -> tuple[Denoiser, Encoder]:
    return (
        Denoiser(bundle.denoiser_config, bundle.denoiser_params),
        Encoder(bundle.encoder_config, bundle.encoder_params),
    )


def _bundle(
    den: Denoiser,
    enc: Encoder,
    sched: NoiseSchedule,
    std: Standardizer,
    steps: int,
    iteration: int,
    conditioning: str,
    provenance: dict,
) -> CheckpointBundle:
    return CheckpointBundle(
        denoiser_config=den.config,
        encoder_config=enc.config,
        denoiser_params=den.params,
        encoder_params=enc.params,
        schedule=sched,
        standardizer=std,
        steps=steps,
        iteration=iteration,
        conditioning=conditioning,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg: cfgmod.RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    scenes = synth_generate(_synth_spec(cfg), seed=args.seed)
    csv_path = os.path.join(args.out, "scenes.csv")
    save_interchange(csv_path, scenes)
    manifest = dataset_manifest(scenes)
    manifest.update({"seed": args.seed, "kind": "synthetic"})
    chash = _write_resolved(cfg, args.out, {})
    manifest["config_hash"] = chash
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    tr = next(iter(scenes[0].tracks.values()))
    h = cfg.data.history_len
    trajectory_plot(
        os.path.join(args.out, "preview.svg"),
        tr.positions[:h],
        tr.positions[h - 1 :],
        title=scenes[0].scene_id,
    )
    print(f"wrote {manifest['scenes']} scenes ({manifest['points']} points) to {csv_path}")
    return 0


def cmd_pretrain(args, cfg: cfgmod.RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    scenes = _load_scenes(cfg, args.data, args.seed)
    train, _, _ = _split(cfg, _all_windows(cfg, scenes))
    if not train:
        raise ConfigError("no training windows; data too short for the configured window")
    section = cfg.teacher if args.model == "teacher" else cfg.student
    den_cfg = _denoiser_config(section, cfg)
    enc_cfg = _encoder_config(cfg)
    sched = NoiseSchedule(cfg.schedule.alpha_start, cfg.schedule.alpha_end)
    chash = _write_resolved(
        cfg, args.out, {"command": "pretrain", "model": args.model, "seed": args.seed}
    )
    log_path = os.path.join(args.out, "pretrain_log.csv")
    with TrainingLogger(log_path) as logger:
        result = pretrain(train, den_cfg, enc_cfg, _pretrain_config(cfg), sched, args.seed, logger)
    den, enc = result.ema_models()
    ckpt = os.path.join(args.out, "pretrained.cddm")
    save_checkpoint(
        ckpt,
        _bundle(
            den, enc, sched, result.standardizer, cfg.distill.k_start, 0, "step_start",
            {"phase": "pretrain", "model": args.model, "seed": args.seed, "config_hash": chash,
             "loss": "mean over batch and coordinates", "steps_run": result.steps_run},
        ),
    )
    steps = [h["step"] for h in result.history]
    losses = [h["loss"] for h in result.history]
    line_plot(
        os.path.join(args.out, "pretrain_loss.svg"),
        [("train loss", np.array(steps), np.array(losses))],
        title="pretraining", x_label="step", y_label="loss", log_y=True,
    )
    print(f"pretrained {result.steps_run} steps on {len(train)} windows -> {ckpt}")
    return 0


def _load_student_init(args, sched: NoiseSchedule, teacher: Denoiser) -> Denoiser:
    if not args.student_init:
        raise ConfigError("cpd mode needs --student-init (a pretrained small checkpoint)")
    sb = load_checkpoint(args.student_init)
    if (sb.schedule.alpha_start, sb.schedule.alpha_end) != (sched.alpha_start, sched.alpha_end):
        raise ConfigError(
            f"incompatible schedule endpoints: teacher checkpoint has "
            f"({sched.alpha_start}, {sched.alpha_end}), student-init has "
            f"({sb.schedule.alpha_start}, {sb.schedule.alpha_end})"
        )
    sc, tc = sb.denoiser_config, teacher.config
    if (sc.horizon, sc.point_dim, sc.context_width) != (tc.horizon, tc.point_dim, tc.context_width):
        raise ConfigError(
            f"student-init shape ({sc.horizon}, {sc.point_dim}, {sc.context_width}) does not "
            f"match teacher ({tc.horizon}, {tc.point_dim}, {tc.context_width})"
        )
    return Denoiser(sc, sb.denoiser_params)


def cmd_distill(args, cfg: cfgmod.RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    bundle = load_checkpoint(args.checkpoint)
    teacher, encoder = _model_from_bundle(bundle)
    sched = bundle.schedule
    std = bundle.standardizer
    scenes = _load_scenes(cfg, args.data, args.seed)
    train, _, _ = _split(cfg, _all_windows(cfg, scenes))
    dcfg = _distill_config(cfg)
    chash = _write_resolved(
        cfg, args.out, {"command": "distill", "mode": args.mode, "seed": args.seed}
    )
    log_path = os.path.join(args.out, f"{args.mode}_log.csv")
    prov = {"phase": args.mode, "seed": args.seed, "config_hash": chash,
            "teacher_checkpoint": os.path.basename(args.checkpoint)}
    with TrainingLogger(log_path) as logger:
        if args.mode == "cpd":
            student_init = _load_student_init(args, sched, teacher)
            prov["student_checkpoint"] = os.path.basename(args.student_init)
            result = cpd_run(train, teacher, encoder, student_init, dcfg, sched, std,
                             args.seed, logger)
        else:
            result = pd_run(train, teacher, encoder, dcfg, sched, std, args.seed, logger)
    for outcome in result.iterations:
        k = outcome.k_coarse
        save_checkpoint(
            os.path.join(args.out, f"{args.mode}_teacher_K{k}.cddm"),
            _bundle(outcome.teacher, encoder, sched, std, k, outcome.index, "step_end",
                    dict(prov, role="teacher-chain")),
        )
        if outcome.student is not None:
            save_checkpoint(
                os.path.join(args.out, f"{args.mode}_student_K{k}.cddm"),
                _bundle(outcome.student, encoder, sched, std, k, outcome.index, "step_end",
                        dict(prov, role="student")),
            )
    final = result.student if result.student is not None else result.teacher_final
    final_path = os.path.join(args.out, f"{args.mode}_final.cddm")
    save_checkpoint(
        final_path,
        _bundle(final, encoder, sched, std, dcfg.k_target, len(result.iterations) - 1,
                "step_end", dict(prov, role="final")),
    )
    ks = [o.k_coarse for o in result.iterations]
    series = [("teacher-match", np.array(ks, float), np.array([o.mean_accel_loss for o in result.iterations]))]
    if any(o.student is not None for o in result.iterations):
        series.append(("student", np.array(ks, float),
                       np.array([o.mean_student_loss for o in result.iterations])))
    line_plot(os.path.join(args.out, f"{args.mode}_loss.svg"), series,
              title=f"{args.mode} per-iteration mean loss", x_label="steps K", y_label="loss",
              log_y=True)
    print(f"{args.mode} distilled {bundle.steps} -> {dcfg.k_target} steps on {len(train)} windows -> {final_path}")
    return 0


def _eval_plan(args, cfg: cfgmod.RunConfig, bundle: CheckpointBundle) -> StepPlan:
    steps = args.steps if args.steps else (cfg.eval.steps or bundle.steps)
    if steps < bundle.steps:
        print(
            f"warning: ddim-subsampled evaluation: {steps}-step plan under a "
            f"{bundle.steps}-step model",
            file=sys.stderr,
        )
    return StepPlan.uniform(steps)


def cmd_eval(args, cfg: cfgmod.RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    bundle = load_checkpoint(args.checkpoint)
    model, encoder = _model_from_bundle(bundle)
    scenes = _load_scenes(cfg, args.data, cfg.data.split_seed)
    windows = _pick_split(cfg, _all_windows(cfg, scenes), args.split or cfg.eval.split)
    if cfg.eval.max_windows:
        windows = windows[: cfg.eval.max_windows]
    batch = stack_windows(windows)
    contexts = _precompute_contexts(encoder, batch)
    plan = _eval_plan(args, cfg, bundle)
    n_samples = args.samples or cfg.eval.n_samples
    sampler = SamplerConfig(plan=plan, conditioning=bundle.conditioning,
                            stochastic=cfg.eval.stochastic)
    chash = _write_resolved(cfg, args.out, {"command": "eval", "seed": args.seed})
    report, preds = evaluate(
        model, batch, contexts, bundle.standardizer, bundle.schedule, sampler, n_samples,
        args.seed,
        label=os.path.basename(args.checkpoint),
        params_denoiser=count_params(model.config),
        params_encoder=count_encoder_params(encoder.config),
        flops_per_step=estimate_flops(model.config, 1),
        encoder_flops=estimate_encoder_flops(encoder.config),
        config_hash=chash,
    )
    if args.bench:
        bench = bench_sampler(model, batch, contexts, bundle.standardizer, bundle.schedule,
                              sampler, repeats=cfg.eval.bench_repeats, seed=args.seed)
        report.latency_s = bench.median_s
    with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(MetricsReport.csv_header()) + "\n" + report.csv_row() + "\n")
    gt = integrate_velocity(batch.anchors[0], batch.target_v[0], batch.dt)
    hist = windows[0].ego_history[:, :2] + windows[0].anchor_position
    trajectory_plot(
        os.path.join(args.out, "example.svg"), hist, gt,
        samples=preds.positions[0], title=f"window 0, {plan.steps} steps",
    )
    print(
        f"minADE{n_samples} {report.min_ade:.4f}  minFDE{n_samples} {report.min_fde:.4f}  "
        f"minADE1 {report.min_ade_1:.4f}  windows {report.n_windows}  "
        f"calls/window {report.calls_per_window:.0f}"
    )
    return 0


def cmd_sample(args, cfg: cfgmod.RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    bundle = load_checkpoint(args.checkpoint)
    model, encoder = _model_from_bundle(bundle)
    scenes = _load_scenes(cfg, args.data, cfg.data.split_seed)
    windows = _all_windows(cfg, scenes)[: args.windows]
    if not windows:
        raise ConfigError("no windows to sample")
    batch = stack_windows(windows)
    contexts = _precompute_contexts(encoder, batch)
    plan = StepPlan.uniform(args.steps or bundle.steps)
    sampler = SamplerConfig(plan=plan, conditioning=bundle.conditioning)
    preds = sample_predictions(
        model, batch, contexts, bundle.standardizer, bundle.schedule, sampler,
        args.samples, args.seed,
    )
    csv_path = os.path.join(args.out, "predictions.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("scene_id,agent_id,t_index,sample,step,x,y\n")
        for w, (sid, aid, t0) in enumerate(preds.meta):
            for s in range(preds.n_samples):
                for t in range(preds.positions.shape[2]):
                    x, y = preds.positions[w, s, t]
                    fh.write(f"{sid},{aid},{t0 + 1 + t},{s},{t},{_fmt(x)},{_fmt(y)}\n")
    for w in range(min(3, batch.size)):
        gt = integrate_velocity(batch.anchors[w], batch.target_v[w], batch.dt)
        hist = windows[w].ego_history[:, :2] + windows[w].anchor_position
        trajectory_plot(
            os.path.join(args.out, f"window{w}.svg"), hist, gt, samples=preds.positions[w],
            title=f"{preds.meta[w][0]} agent {preds.meta[w][1]}",
        )
    print(f"wrote {preds.n_samples} samples x {batch.size} windows to {csv_path}")
    return 0


def cmd_bench(args, cfg: cfgmod.RunConfig) -> int:
    bundle = load_checkpoint(args.checkpoint)
    model, encoder = _model_from_bundle(bundle)
    scenes = _load_scenes(cfg, args.data, cfg.data.split_seed)
    windows = _all_windows(cfg, scenes)[:1]
    if not windows:
        raise ConfigError("no windows to bench")
    batch = stack_windows(windows)
    contexts = _precompute_contexts(encoder, batch)
    steps_list = [int(s) for s in args.steps.split(",")] if args.steps else [bundle.steps]
    rows = {}
    for steps in steps_list:
        sampler = SamplerConfig(plan=StepPlan.uniform(steps), conditioning=bundle.conditioning)
        res = bench_sampler(model, batch, contexts, bundle.standardizer, bundle.schedule,
                            sampler, repeats=args.repeats, seed=args.seed)
        rows[steps] = res.median_s
        print(f"steps {steps:4d}: median {res.median_s * 1e3:.2f} ms/trajectory")
    if len(rows) > 1:
        hi, lo = max(rows), min(rows)
        print(f"speedup {hi} -> {lo} steps: {rows[hi] / rows[lo]:.1f}x")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="trajdistill",
        description="Desk-scale distillation lab for trajectory diffusion models.",
    )
    ap.add_argument("--config", help="JSON run configuration", default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=0, help="cap BLAS threads (0: leave as is)")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate branching synthetic scenes")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("pretrain", help="train the base denoiser and encoder")
    sp.add_argument("--data", default=None, help="scene CSV (defaults to synthetic)")
    sp.add_argument("--model", choices=("teacher", "student"), default="teacher",
                    help="which model section to train")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("distill", help="progressively distill a pretrained model")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--student-init", default=None,
                    help="pretrained small checkpoint to warm-start the cpd student")
    sp.add_argument("--data", default=None)
    sp.add_argument("--mode", choices=("cpd", "pd"), default="cpd")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("eval", help="best-of-N displacement metrics")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=0, help="override the sampling plan length")
    sp.add_argument("--samples", type=int, default=0)
    sp.add_argument("--split", default=None, choices=("train", "val", "test", "all"))
    sp.add_argument("--bench", action="store_true", help="also measure sampler latency")

    sp = sub.add_parser("sample", help="write predicted futures for some windows")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--samples", type=int, default=20)
    sp.add_argument("--windows", type=int, default=8)
    sp.add_argument("--steps", type=int, default=0)

    sp = sub.add_parser("bench", help="sampler latency at one or more plan lengths")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--steps", default="", help="comma-separated plan lengths")
    sp.add_argument("--repeats", type=int, default=5)

    return ap


_COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    limits = threadpool_limits(limits=args.threads) if args.threads else contextlib.nullcontext()
    try:
        cfg = cfgmod.load_run_config(args.config) if args.config else cfgmod.RunConfig()
        with limits:
            return _COMMANDS[args.command](args, cfg)
    except TrajDistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
