"""Training pipelines: individual model fitting, resampler-set
collection, learned-resampler training, and end-to-end filter training
with truncated gradient flow across time steps.

The recipe is staged: (1) fit motion noise scales and the measurement
network on their own objectives, (2) run the filter with a standard
resampler and collect its input/output particle sets, (3) train the
learned resampler on those pairs, (4) optimize everything jointly
through the unrolled filter, stopping gradients after resampling every
k steps and optionally clipping per-component gradient norms.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace

import numpy as np

from resample_forge import autodiff as ad
from resample_forge.autodiff import Adam, Tensor, clip_global_norm, global_grad_norm
from resample_forge.localization import (
    FilterDegeneracyError,
    FilterModels,
    Trajectory,
    WorldSpec,
    embed_states,
    evaluate,
    measurement_logits,
    predicted_ranges,
    run_filter_batch,
    wrap_angle,
)
from resample_forge.loss import resampling_loss_batch
from resample_forge.particles import ParticleSet
from resample_forge.resamplers import ResamplerKind
from resample_forge.rng import RngStream
from resample_forge.transformer import TransformerParams, transformer_resample_batch

COMPONENTS = ("motion", "measurement", "resampler")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_bandwidth: float = 0.5
    target_strategy: str = "dataset"  # dataset | identity
    stop_period: int = 1              # k: stop gradients after resampling when step % k == 0
    clip_norm: float | None = None    # 10.0 is the conventional choice when enabled
    freeze: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.stop_period < 1:
            raise ValueError("stop_period must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when enabled")
        for name in self.freeze:
            if name not in COMPONENTS:
                raise ValueError(f"unknown component to freeze: {name!r}")
        if self.target_strategy not in ("dataset", "identity"):
            raise ValueError(f"unknown target strategy {self.target_strategy!r}")


@dataclass
class GradNormRecord:
    step: int
    component: str
    pre_clip_norm: float
    stop_period: int
    post_clip_norm: float | None = None  # set only when clipping ran


def _check_finite(value: float, what: str, step: int) -> None:
    if not np.isfinite(value):
        raise RuntimeError(f"non-finite {what} at step {step}")


# ---------------------------------------------------------------------------
# step 1: individual motion / measurement training
# ---------------------------------------------------------------------------


def odometry_residuals(trajectories: list[Trajectory]) -> np.ndarray:
    """Body-frame differences between true per-step motion and the
    recorded odometry, (N, 3)."""
    rows = []
    for traj in trajectories:
        for t in range(1, traj.steps):
            prev, cur = traj.states[t - 1], traj.states[t]
            dx, dy = cur[0] - prev[0], cur[1] - prev[1]
            c, s = np.cos(prev[2]), np.sin(prev[2])
            true_body = np.array([
                c * dx + s * dy,
                -s * dx + c * dy,
                wrap_angle(cur[2] - prev[2]),
            ])
            rows.append(true_body - traj.actions[t])
    return np.asarray(rows)


def _fit_motion_scales(models: FilterModels, residuals: np.ndarray,
                       steps: int = 300, lr: float = 0.05) -> list[float]:
    """Maximize the Gaussian likelihood of the residuals over the noise
    scales (equivalently minimize 0.5 (r/s)^2 + log s per component)."""
    log_scales = models["motion.log_scales"]
    opt = Adam([log_scales], lr=lr)
    r = Tensor(residuals)
    history = []
    for i in range(steps):
        opt.zero_grad()
        scales = ad.exp(log_scales)
        z = r / scales
        nll = ad.mean(ad.sum_(z * z * 0.5, axis=1)) + ad.sum_(log_scales)
        _check_finite(nll.item(), "motion loss", i)
        nll.backward()
        opt.step()
        history.append(nll.item())
    return history


LOG_LIKELIHOOD_FLOOR = -30.0


def build_measurement_examples(world: WorldSpec, trajectories: list[Trajectory],
                               rng: RngStream, candidates: int = 8):
    """For each (trajectory, step): the observation plus a pack of
    candidate poses (the true one and perturbations at several scales),
    each labeled with its exact log-likelihood under the known
    observation noise. (obs (N, B), cand (N, C, 4), targets (N, C)).

    Targets are clamped below at LOG_LIKELIHOOD_FLOOR: particles that far
    off get effectively zero posterior weight either way, and the clamp
    keeps the regression conditioned near the region that matters.
    """
    pert_scales = np.array([0.02, 0.05, 0.1, 0.2, 0.4, 0.8])
    obs_rows, cand_rows, target_rows = [], [], []
    sigma = world.obs_noise_std
    log_norm = -np.log(sigma * np.sqrt(2 * np.pi))
    for i, traj in enumerate(trajectories):
        stream = rng.split(i)
        for t in range(traj.steps):
            state = traj.states[t]
            obs = traj.observations[t]
            cands = np.tile(state, (candidates, 1))
            scales = pert_scales[stream.integers(0, len(pert_scales),
                                                 candidates - 1)]
            cands[1:, :2] += stream.normal(0, 1, (candidates - 1, 2)) * scales[:, None]
            cands[1:, 2] = wrap_angle(
                cands[1:, 2] + stream.normal(0, 0.5, candidates - 1)
            )
            ranges = world.ranges(cands[:, :2])
            z = (obs[None, :] - ranges) / sigma
            targets = (-0.5 * z * z + log_norm).sum(axis=1)
            obs_rows.append(obs)
            cand_rows.append(embed_states(cands))
            target_rows.append(np.maximum(targets, LOG_LIKELIHOOD_FLOOR))
    return np.asarray(obs_rows), np.asarray(cand_rows), np.asarray(target_rows)


def _fit_measurement_net(models: FilterModels, world: WorldSpec,
                         trajectories: list[Trajectory], config: TrainConfig,
                         rng: RngStream) -> list[float]:
    obs, cands, targets = build_measurement_examples(world, trajectories,
                                                     rng.split(1))
    n_ex = len(obs)
    params = models.measurement_parameters()
    opt = Adam(params, lr=config.learning_rate, beta1=config.beta1,
               beta2=config.beta2, eps=config.adam_eps)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.split(2, epoch).permutation(n_ex)
        epoch_losses = []
        for start in range(0, n_ex, config.batch_size):
            idx = order[start:start + config.batch_size]
            with ad.no_grad():
                pred = predicted_ranges(Tensor(cands[idx]), world.beacons)
            logits = measurement_logits(models, obs[idx], Tensor(pred.data))
            diff = logits - Tensor(targets[idx])
            loss = ad.mean(diff * diff)
            _check_finite(loss.item(), "measurement loss", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
            step += 1
        history.append(float(np.mean(epoch_losses)))
    return history


def train_models_individually(world: WorldSpec, trajectories: list[Trajectory],
                              config: TrainConfig,
                              rng: RngStream) -> tuple[FilterModels, dict]:
    """Fit motion noise scales to odometry residuals and the measurement
    network to the known observation likelihood."""
    models = FilterModels.create(len(world.beacons), rng.split(0))
    motion_history = _fit_motion_scales(models, odometry_residuals(trajectories))
    measurement_history = _fit_measurement_net(models, world, trajectories,
                                               config, rng)
    return models, {"motion": motion_history, "measurement": measurement_history}


# ---------------------------------------------------------------------------
# step 2: collect resampler training sets from filter runs
# ---------------------------------------------------------------------------


def collect_resampler_data(world: WorldSpec, trajectories: list[Trajectory],
                           models: FilterModels, baseline: ResamplerKind,
                           n: int, rng: RngStream,
                           ) -> tuple[list[ParticleSet], list[ParticleSet]]:
    """Run the filter with a standard resampler; keep the pre-resampling
    set as the input and the post-resampling set as the target of every
    resampling event. Degenerate trajectories are skipped with a note."""
    if baseline.tag not in ("multinomial", "systematic", "soft"):
        raise ValueError(f"baseline resampler must be classic, got {baseline.tag!r}")
    inputs: list[ParticleSet] = []
    targets: list[ParticleSet] = []
    with ad.no_grad():
        for i, traj in enumerate(trajectories):
            try:
                run = run_filter_batch(world, [traj], models, baseline, n,
                                       rng.split(i), collect=True)
            except FilterDegeneracyError as err:
                print(f"collect: skipping trajectory {i}: {err}", file=sys.stderr)
                continue
            for pre, post in run.collected:
                inputs.append(pre)
                targets.append(post)
    return inputs, targets


# ---------------------------------------------------------------------------
# step 3: individual resampler training
# ---------------------------------------------------------------------------


def _stack_sets(sets: list[ParticleSet]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.positions.data for s in sets]),
            np.stack([s.weights.data for s in sets]))


def resampler_eval_loss(params: TransformerParams, inputs: list[ParticleSet],
                        targets: list[ParticleSet], bandwidth: float,
                        chunk: int = 256) -> float:
    losses = []
    with ad.no_grad():
        for start in range(0, len(inputs), chunk):
            in_pos, in_w = _stack_sets(inputs[start:start + chunk])
            tgt_pos, tgt_w = _stack_sets(targets[start:start + chunk])
            out = transformer_resample_batch(Tensor(in_pos), Tensor(in_w), params)
            uniform = Tensor(np.full(out.shape[:2], 1.0 / out.shape[1]))
            batch = resampling_loss_batch(out, uniform, tgt_pos, tgt_w, bandwidth)
            losses.append(batch.data)
    return float(np.concatenate(losses).mean())


def train_resampler_individual(inputs: list[ParticleSet],
                               targets: list[ParticleSet] | None,
                               config: TrainConfig, rng: RngStream, *,
                               params: TransformerParams | None = None,
                               latent: int = 256, heads: int = 8,
                               eval_pair: tuple[list[ParticleSet],
                                                list[ParticleSet]] | None = None,
                               ) -> tuple[TransformerParams, dict]:
    """Minimize the mean KDE cross-entropy loss over input/target pairs.

    With target_strategy "identity" the inputs double as targets (their
    weights become the target weights); otherwise a targets list of the
    same length is required.
    """
    if config.target_strategy == "identity":
        targets = inputs
    if targets is None or len(targets) != len(inputs):
        raise ValueError("need one target set per input set")
    n, d = inputs[0].n, inputs[0].d
    if params is None:
        params = TransformerParams.create(n, d, rng.split(0), latent=latent,
                                          heads=heads)
    in_pos, in_w = _stack_sets(inputs)
    tgt_pos, tgt_w = _stack_sets(targets)
    opt = Adam(params.parameters(), lr=config.learning_rate, beta1=config.beta1,
               beta2=config.beta2, eps=config.adam_eps)
    history = {"train": [], "eval": []}
    step = 0
    n_ex = len(inputs)
    for epoch in range(config.epochs):
        order = rng.split(1, epoch).permutation(n_ex)
        epoch_losses = []
        for start in range(0, n_ex, config.batch_size):
            idx = order[start:start + config.batch_size]
            out = transformer_resample_batch(Tensor(in_pos[idx]),
                                             Tensor(in_w[idx]), params)
            uniform = Tensor(np.full((len(idx), n), 1.0 / n))
            loss = ad.mean(resampling_loss_batch(out, uniform, tgt_pos[idx],
                                                 tgt_w[idx],
                                                 config.loss_bandwidth))
            _check_finite(loss.item(), "resampler loss", step)
            opt.zero_grad()
            loss.backward()
            if config.clip_norm is not None:
                clip_global_norm(params.parameters(), config.clip_norm)
            opt.step()
            epoch_losses.append(loss.item())
            step += 1
        history["train"].append(float(np.mean(epoch_losses)))
        if eval_pair is not None:
            history["eval"].append(resampler_eval_loss(
                params, eval_pair[0], eval_pair[1], config.loss_bandwidth))
    return params, history


# ---------------------------------------------------------------------------
# step 4: end-to-end training through the unrolled filter
# ---------------------------------------------------------------------------


def _component_params(models: FilterModels,
                      tparams: TransformerParams | None) -> dict[str, list[Tensor]]:
    groups = {
        "motion": models.motion_parameters(),
        "measurement": models.measurement_parameters(),
    }
    if tparams is not None:
        groups["resampler"] = tparams.parameters()
    return groups


def train_end_to_end(world: WorldSpec, trajectories: list[Trajectory],
                     models: FilterModels, kind: ResamplerKind, n: int,
                     config: TrainConfig, rng: RngStream, *,
                     tparams: TransformerParams | None = None,
                     ) -> list[GradNormRecord]:
    """Jointly optimize motion, measurement, and (when the resampler is
    the learned one) resampler parameters through the unrolled filter.

    The per-step loss is the negative KDE log-likelihood of the true
    state under the weighted posterior; gradients are stopped after
    resampling at steps where step % stop_period == 0, per-component
    gradient norms are logged before the optional clipping, and frozen
    components receive no updates. Mutates models/tparams in place.
    """
    if kind.tag == "transformer" and tparams is None:
        raise ValueError("end-to-end training with the learned resampler needs tparams")
    groups = _component_params(models, tparams)
    frozen_flags: list[tuple[Tensor, bool]] = []
    trainable: list[Tensor] = []
    for name, group in groups.items():
        if name in config.freeze:
            for p in group:
                frozen_flags.append((p, p.requires_grad))
                p.requires_grad = False
        else:
            trainable.extend(group)
    log: list[GradNormRecord] = []
    try:
        opt = Adam(trainable, lr=config.learning_rate, beta1=config.beta1,
                   beta2=config.beta2, eps=config.adam_eps)
        step = 0
        for epoch in range(config.epochs):
            order = rng.split(3, epoch).permutation(len(trajectories))
            for start in range(0, len(trajectories), config.batch_size):
                batch = [trajectories[j] for j in order[start:start + config.batch_size]]
                run = run_filter_batch(
                    world, batch, models, kind, n, rng.split(4, epoch, start),
                    transformer_params=tparams, stop_period=config.stop_period,
                    loss_bandwidth=config.loss_bandwidth,
                )
                total = run.step_losses[0]
                for part in run.step_losses[1:]:
                    total = total + part
                loss = ad.mean(total) / len(run.step_losses)
                _check_finite(loss.item(), "end-to-end loss", step)
                opt.zero_grad()
                loss.backward()
                for name, group in groups.items():
                    if name in config.freeze:
                        continue
                    norm = global_grad_norm(group)
                    _check_finite(norm, f"{name} gradient norm", step)
                    record = GradNormRecord(step, name, norm, config.stop_period)
                    if config.clip_norm is not None:
                        clip_global_norm(group, config.clip_norm)
                        record.post_clip_norm = global_grad_norm(group)
                    log.append(record)
                opt.step()
                step += 1
    finally:
        for p, flag in frozen_flags:
            p.requires_grad = flag
    return log


def bptt_sweep(world: WorldSpec, train_trajectories: list[Trajectory],
               test_trajectories: list[Trajectory], models: FilterModels,
               tparams: TransformerParams, n: int, base_config: TrainConfig,
               k_values: list[int], rng: RngStream, *,
               freeze_values: tuple[bool, ...] = (False, True),
               clip_values: tuple[bool, ...] = (False, True),
               clip_norm: float = 10.0,
               ) -> tuple[list[dict], list[GradNormRecord]]:
    """End-to-end train + evaluate one cell per (k, freeze, clip)
    combination, always starting from copies of the given components.
    Failed cells are recorded and the sweep continues."""
    metrics: list[dict] = []
    norms: list[GradNormRecord] = []
    kind = ResamplerKind("transformer")
    for k in k_values:
        for freeze in freeze_values:
            for clip in clip_values:
                cell_models = models.copy()
                cell_tparams = tparams.copy()
                config = replace(
                    base_config,
                    stop_period=k,
                    freeze=("resampler",) if freeze else (),
                    clip_norm=clip_norm if clip else None,
                )
                row = {"k": k, "resampler_frozen": freeze, "clipped": clip}
                try:
                    log = train_end_to_end(
                        world, train_trajectories, cell_models, kind, n,
                        config, rng.split(k, int(freeze), int(clip)),
                        tparams=cell_tparams,
                    )
                    norms.extend(log)
                    result = evaluate(
                        test_trajectories, world, cell_models, kind, n,
                        rng.split(77, k, int(freeze), int(clip)),
                        transformer_params=cell_tparams,
                    )
                    row.update({"error_rate": result["error_rate"],
                                "mse": result["mse"],
                                "error_rate_se": result["error_rate_se"],
                                "mse_se": result["mse_se"]})
                except Exception as err:  # cell failure must not kill the sweep
                    row["error"] = str(err)
                    print(f"bptt sweep cell k={k} freeze={freeze} clip={clip} "
                          f"failed: {err}", file=sys.stderr)
                metrics.append(row)
    return metrics, norms
