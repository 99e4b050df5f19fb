"""Command-line entry point tying the modules into reproducible
experiment pipelines.

Every subcommand takes --seed, derives all randomness from it, and
writes a resolved-config JSON next to its outputs; reruns with identical
inputs and seeds produce byte-identical data and metrics files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from resample_forge import autodiff as ad
from resample_forge.config import ExperimentConfig, write_resolved_config
from resample_forge.metrics import write_metrics_csv
from resample_forge.particles import (
    load_particle_sets,
    particle_set_to_csv,
    save_particle_sets,
)
from resample_forge.resamplers import ResamplerKind
from resample_forge.rng import RngStream
from resample_forge.transformer import TransformerParams

SWEEP_COLUMNS = ["resampler", "bandwidth", "mean_loss", "stderr", "n_cases"]
EVAL_COLUMNS = ["resampler", "trial", "n_trajectories", "error_rate",
                "error_rate_se", "mse", "mse_se", "error_threshold"]
NORM_COLUMNS = ["step", "component", "pre_clip_norm", "k"]


def _load_experiment_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return ExperimentConfig.load(args.config)
    return ExperimentConfig()


def _resampler_kind(args, config: ExperimentConfig) -> ResamplerKind:
    alpha = getattr(args, "soft_alpha", None)
    if alpha is None:
        alpha = config.filter.soft_alpha
    return ResamplerKind(args.resampler, alpha=alpha)


def _maybe_transformer(args) -> TransformerParams | None:
    path = getattr(args, "checkpoint", None)
    if path:
        return TransformerParams.load(path)
    return None



def _particle_count(args, config: ExperimentConfig) -> int:
    if getattr(args, "particles", None) is not None:
        return args.particles
    return config.filter.particles

def _write_config(out_dir_or_file, args, config: ExperimentConfig,
                  command: str) -> None:
    arguments = {k: v for k, v in vars(args).items() if k != "func"}
    if os.path.isdir(out_dir_or_file):
        path = os.path.join(out_dir_or_file, "config.json")
    else:
        path = f"{out_dir_or_file}.config.json"
    write_resolved_config(path, config, command, arguments)


def _parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _parse_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _train_config(config: ExperimentConfig, args) -> "TrainConfig":
    from resample_forge.training import TrainConfig

    base = config.train
    overrides = {}
    mapping = {
        "lr": "learning_rate", "batch": "batch_size", "epochs": "epochs",
        "bandwidth": "loss_bandwidth", "k": "stop_period",
        "target_strategy": "target_strategy", "seed": "seed",
    }
    for flag, field in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    if getattr(args, "clip_norm", None) is not None:
        overrides["clip_norm"] = args.clip_norm if args.clip_norm > 0 else None
    if getattr(args, "freeze", None):
        overrides["freeze"] = tuple(args.freeze.split(","))
    return dataclasses.replace(base, **overrides)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from resample_forge.benchmark import generate_dataset

    config = _load_experiment_config(args)
    split = _parse_ints(args.split)
    if len(split) != 2:
        raise ValueError(f"--split must be train,eval counts, got {args.split!r}")
    os.makedirs(args.out_dir, exist_ok=True)
    generate_dataset(args.count, (split[0], split[1]), RngStream(args.seed),
                     args.out_dir, n=args.particles,
                     reuse_inputs_as_targets=args.reuse_inputs_as_targets)
    _write_config(args.out_dir, args, config, "gen-data")
    print(f"wrote {split[0]} train / {split[1]} eval sets to {args.out_dir}")
    return 0


def cmd_sweep(args) -> int:
    from resample_forge.benchmark import bandwidth_sweep, load_dataset_pair

    config = _load_experiment_config(args)
    bandwidths = (_parse_floats(args.bandwidths) if args.bandwidths
                  else list(config.sweep.bandwidths))
    inputs, targets = load_dataset_pair(
        os.path.join(args.data, f"{args.dataset_split}_inputs.pset"),
        os.path.join(args.data, f"{args.dataset_split}_targets.pset"),
    )
    kind = _resampler_kind(args, config)
    records = bandwidth_sweep(kind, inputs, targets, bandwidths,
                              RngStream(args.seed),
                              transformer_params=_maybe_transformer(args))
    write_metrics_csv(args.out, records, SWEEP_COLUMNS)
    _write_config(args.out, args, config, "sweep")
    print(f"wrote {len(records)} sweep rows to {args.out}")
    return 0


def cmd_simulate(args) -> int:
    from resample_forge.localization import WorldSpec, save_trajectories, simulate_trajectories

    config = _load_experiment_config(args)
    w = config.world
    world_seed = args.world_seed if args.world_seed is not None else w.seed
    world = WorldSpec.generate(world_seed, n_beacons=w.n_beacons, width=w.width,
                               height=w.height, obs_noise_std=w.obs_noise_std)
    trajectories = simulate_trajectories(world, args.count, args.steps,
                                         RngStream(args.seed),
                                         odometry_noise_std=w.odometry_noise_std)
    save_trajectories(args.out_dir, world, trajectories)
    _write_config(args.out_dir, args, config, "simulate")
    print(f"wrote {args.count} trajectories of {args.steps} steps to {args.out_dir}")
    return 0


def cmd_train_individual(args) -> int:
    from resample_forge.localization import load_trajectories
    from resample_forge.training import train_models_individually

    config = _load_experiment_config(args)
    world, trajectories = load_trajectories(args.data)
    train_config = _train_config(config, args)
    models, history = train_models_individually(world, trajectories,
                                                train_config,
                                                RngStream(args.seed))
    os.makedirs(args.out_dir, exist_ok=True)
    models.save(os.path.join(args.out_dir, "models.ptchk"))
    with open(os.path.join(args.out_dir, "history.json"), "w") as f:
        json.dump(history, f)
        f.write("\n")
    _write_config(args.out_dir, args, config, "train-individual")
    scales = np.exp(models["motion.log_scales"].data)
    print(f"trained models -> {args.out_dir} (noise scales "
          f"{', '.join(f'{s:.4f}' for s in scales)})")
    return 0


def cmd_collect(args) -> int:
    from resample_forge.localization import FilterModels, load_trajectories
    from resample_forge.training import collect_resampler_data

    config = _load_experiment_config(args)
    world, trajectories = load_trajectories(args.data)
    models = FilterModels.load(args.models)
    kind = ResamplerKind(args.baseline,
                         alpha=args.soft_alpha or config.filter.soft_alpha)
    inputs, targets = collect_resampler_data(world, trajectories, models, kind,
                                             _particle_count(args, config),
                                             RngStream(args.seed))
    os.makedirs(args.out_dir, exist_ok=True)
    save_particle_sets(os.path.join(args.out_dir, "train_inputs.pset"), inputs)
    save_particle_sets(os.path.join(args.out_dir, "train_targets.pset"), targets)
    _write_config(args.out_dir, args, config, "collect-resampler-data")
    print(f"collected {len(inputs)} set pairs to {args.out_dir}")
    return 0


def cmd_train_resampler(args) -> int:
    from resample_forge.training import train_resampler_individual

    config = _load_experiment_config(args)
    inputs = load_particle_sets(args.inputs)
    targets = load_particle_sets(args.targets) if args.targets else None
    eval_pair = None
    if args.eval_inputs and args.eval_targets:
        eval_pair = (load_particle_sets(args.eval_inputs),
                     load_particle_sets(args.eval_targets))
    train_config = _train_config(config, args)
    params = TransformerParams.load(args.resume) if args.resume else None
    params, history = train_resampler_individual(
        inputs, targets, train_config, RngStream(args.seed), params=params,
        latent=args.latent or config.model.latent,
        heads=args.heads or config.model.heads, eval_pair=eval_pair,
    )
    params.save(args.out)
    with open(f"{args.out}.history.json", "w") as f:
        json.dump(history, f)
        f.write("\n")
    _write_config(args.out, args, config, "train-resampler")
    print(f"trained resampler -> {args.out} "
          f"(final train loss {history['train'][-1]:.4f})")
    return 0


def cmd_train_e2e(args) -> int:
    from resample_forge.localization import FilterModels, load_trajectories
    from resample_forge.training import train_end_to_end

    config = _load_experiment_config(args)
    world, trajectories = load_trajectories(args.data)
    models = FilterModels.load(args.models)
    tparams = _maybe_transformer(args)
    kind = _resampler_kind(args, config)
    train_config = _train_config(config, args)
    log = train_end_to_end(world, trajectories, models, kind,
                           _particle_count(args, config), train_config,
                           RngStream(args.seed), tparams=tparams)
    os.makedirs(args.out_dir, exist_ok=True)
    models.save(os.path.join(args.out_dir, "models.ptchk"))
    if tparams is not None:
        tparams.save(os.path.join(args.out_dir, "resampler.ptchk"))
    rows = [{"step": r.step, "component": r.component,
             "pre_clip_norm": r.pre_clip_norm, "k": r.stop_period}
            for r in log]
    write_metrics_csv(os.path.join(args.out_dir, "grad_norms.csv"), rows,
                      NORM_COLUMNS)
    _write_config(args.out_dir, args, config, "train-e2e")
    print(f"end-to-end training done -> {args.out_dir} ({len(rows)} norm records)")
    return 0


def cmd_bptt_sweep(args) -> int:
    from resample_forge.localization import FilterModels, load_trajectories
    from resample_forge.training import bptt_sweep

    config = _load_experiment_config(args)
    world, train_trajs = load_trajectories(args.data)
    _, test_trajs = load_trajectories(args.test_data)
    models = FilterModels.load(args.models)
    tparams = TransformerParams.load(args.checkpoint)
    train_config = _train_config(config, args)
    freeze_values = tuple(bool(int(v)) for v in args.freeze_list.split(","))
    clip_values = tuple(bool(int(v)) for v in args.clip_list.split(","))
    metrics, norms = bptt_sweep(
        world, train_trajs, test_trajs, models, tparams,
        _particle_count(args, config),
        train_config, _parse_ints(args.k_list), RngStream(args.seed),
        freeze_values=freeze_values, clip_values=clip_values,
        clip_norm=args.clip_norm if args.clip_norm else 10.0,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    columns = ["k", "resampler_frozen", "clipped", "error_rate",
               "error_rate_se", "mse", "mse_se", "error"]
    write_metrics_csv(os.path.join(args.out_dir, "bptt_metrics.csv"),
                      metrics, columns)
    rows = [{"step": r.step, "component": r.component,
             "pre_clip_norm": r.pre_clip_norm, "k": r.stop_period}
            for r in norms]
    write_metrics_csv(os.path.join(args.out_dir, "grad_norms.csv"), rows,
                      NORM_COLUMNS)
    _write_config(args.out_dir, args, config, "bptt-sweep")
    print(f"swept {len(metrics)} cells -> {args.out_dir}")
    return 0


def cmd_run_filter(args) -> int:
    from resample_forge.localization import FilterModels, load_trajectories, run_filter

    config = _load_experiment_config(args)
    world, trajectories = load_trajectories(args.data)
    if not (0 <= args.trajectory < len(trajectories)):
        raise ValueError(
            f"--trajectory {args.trajectory} out of range [0, {len(trajectories)})"
        )
    models = FilterModels.load(args.models)
    kind = _resampler_kind(args, config)
    with ad.no_grad():
        run = run_filter(trajectories[args.trajectory], world, models, kind,
                         _particle_count(args, config), RngStream(args.seed),
                         transformer_params=_maybe_transformer(args),
                         log_particles=args.log_particles,
                         init_pos_std=config.filter.init_pos_std,
                         init_heading_std=config.filter.init_heading_std)
    os.makedirs(args.out_dir, exist_ok=True)
    truth = trajectories[args.trajectory].states
    rows = [{"step": t + 1,
             "est_x": run.estimates[0, t, 0], "est_y": run.estimates[0, t, 1],
             "est_theta": run.estimates[0, t, 2],
             "true_x": truth[t, 0], "true_y": truth[t, 1],
             "true_theta": truth[t, 2], "ess": run.ess[0, t]}
            for t in range(run.estimates.shape[1])]
    write_metrics_csv(os.path.join(args.out_dir, "estimates.csv"), rows)
    if args.log_particles:
        pre = [entry["pre"] for entry in run.particle_log]
        post = [entry["post"] for entry in run.particle_log]
        save_particle_sets(os.path.join(args.out_dir, "particles_pre.pset"), pre)
        save_particle_sets(os.path.join(args.out_dir, "particles_post.pset"), post)
        index = [{"trajectory": args.trajectory, "step": entry["step"],
                  "offset": i} for i, entry in enumerate(run.particle_log)]
        with open(os.path.join(args.out_dir, "particles_index.json"), "w") as f:
            json.dump(index, f)
            f.write("\n")
    _write_config(args.out_dir, args, config, "run-filter")
    print(f"filtered trajectory {args.trajectory} -> {args.out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    from resample_forge.localization import FilterModels, evaluate, load_trajectories

    config = _load_experiment_config(args)
    world, trajectories = load_trajectories(args.data)
    models = FilterModels.load(args.models)
    kind = _resampler_kind(args, config)
    tparams = _maybe_transformer(args)
    rows = []
    for trial in range(args.trials):
        result = evaluate(
            trajectories, world, models, kind, _particle_count(args, config),
            RngStream(args.seed).split(trial), transformer_params=tparams,
            error_threshold=args.threshold,
            init_pos_std=config.filter.init_pos_std,
            init_heading_std=config.filter.init_heading_std,
        )
        result["trial"] = trial
        rows.append(result)
    if args.trials > 1:
        rates = np.array([r["error_rate"] for r in rows])
        mses = np.array([r["mse"] for r in rows])
        rows.append({
            "resampler": kind.tag, "trial": "aggregate",
            "n_trajectories": len(trajectories) * args.trials,
            "error_rate": float(rates.mean()),
            "error_rate_se": float(rates.std(ddof=1) / np.sqrt(len(rates))),
            "mse": float(mses.mean()),
            "mse_se": float(mses.std(ddof=1) / np.sqrt(len(mses))),
            "error_threshold": args.threshold,
        })
    write_metrics_csv(args.out, rows, EVAL_COLUMNS)
    _write_config(args.out, args, config, "evaluate")
    last = rows[-1]
    print(f"{kind.tag}: error rate {last['error_rate']:.3f}, "
          f"MSE {last['mse']:.4f} -> {args.out}")
    return 0


def cmd_dump_particles(args) -> int:
    sets = load_particle_sets(args.file)
    if not (0 <= args.index < len(sets)):
        raise ValueError(f"--index {args.index} out of range [0, {len(sets)})")
    sys.stdout.write(particle_set_to_csv(sets[args.index]))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resample-forge",
        description="Particle filter toolkit with classic and learned resamplers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_dir=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="experiment config JSON")
        if out_dir:
            p.add_argument("--out-dir", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic benchmark sets")
    common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--split", required=True, help="train,eval counts")
    p.add_argument("--particles", type=int, default=32)
    p.add_argument("--reuse-inputs-as-targets", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("sweep", help="bandwidth sweep of a resampler's loss")
    common(p, out_dir=False)
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--dataset-split", default="eval", choices=["train", "eval"])
    p.add_argument("--resampler", required=True,
                   choices=["multinomial", "systematic", "soft", "transformer",
                            "none"])
    p.add_argument("--checkpoint", help="transformer checkpoint")
    p.add_argument("--soft-alpha", type=float)
    p.add_argument("--bandwidths", help="comma-separated bandwidths")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate", help="simulate localization trajectories")
    common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--steps", type=int, default=19)
    p.add_argument("--world-seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-individual",
                       help="fit motion and measurement models")
    common(p)
    p.add_argument("--data", required=True, help="trajectory directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.set_defaults(func=cmd_train_individual)

    p = sub.add_parser("collect-resampler-data",
                       help="log filter resampling events as training pairs")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--baseline", default="systematic",
                   choices=["multinomial", "systematic", "soft"])
    p.add_argument("--particles", type=int)
    p.add_argument("--soft-alpha", type=float)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train-resampler", help="train the learned resampler")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--inputs", required=True)
    p.add_argument("--targets")
    p.add_argument("--eval-inputs")
    p.add_argument("--eval-targets")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--latent", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--target-strategy", choices=["dataset", "identity"])
    p.set_defaults(func=cmd_train_resampler)

    p = sub.add_parser("train-e2e", help="end-to-end filter training")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--resampler", default="transformer",
                   choices=["multinomial", "systematic", "soft", "transformer",
                            "none"])
    p.add_argument("--particles", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--freeze", help="comma list of motion,measurement,resampler")
    p.add_argument("--soft-alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--bandwidth", type=float)
    p.set_defaults(func=cmd_train_e2e)

    p = sub.add_parser("bptt-sweep",
                       help="train/evaluate over (k, freeze, clip) cells")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k-list", default="1,3,5")
    p.add_argument("--freeze-list", default="0,1",
                   help="comma list of 0/1 resampler-frozen flags")
    p.add_argument("--clip-list", default="0,1",
                   help="comma list of 0/1 clipping flags")
    p.add_argument("--clip-norm", type=float, default=10.0)
    p.add_argument("--particles", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--bandwidth", type=float)
    p.set_defaults(func=cmd_bptt_sweep)

    p = sub.add_parser("run-filter", help="filter one trajectory")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--trajectory", type=int, default=0)
    p.add_argument("--resampler", default="systematic",
                   choices=["multinomial", "systematic", "soft", "transformer",
                            "none"])
    p.add_argument("--checkpoint")
    p.add_argument("--soft-alpha", type=float)
    p.add_argument("--particles", type=int)
    p.add_argument("--log-particles", action="store_true")
    p.set_defaults(func=cmd_run_filter)

    p = sub.add_parser("evaluate", help="error rate / MSE over trajectories")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--resampler", required=True,
                   choices=["multinomial", "systematic", "soft", "transformer",
                            "none"])
    p.add_argument("--checkpoint")
    p.add_argument("--soft-alpha", type=float)
    p.add_argument("--particles", type=int)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("dump-particles", help="print one stored set as CSV")
    p.add_argument("--file", required=True)
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(func=cmd_dump_particles)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_err:
        return int(exit_err.code or 0)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
