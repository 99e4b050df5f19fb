"""Simulated 2-D localization with a differentiable particle filter.

A robot random-walks inside a rectangular arena holding a few range
beacons. Each trajectory records ground truth, noisy body-frame odometry
(forward, lateral, heading deltas), and noisy beacon ranges. The filter
tracks the pose with particles embedded as (x, y, cos th, sin th), so the
heading lives on the unit circle and Gaussian kernels stay valid; every
update is built from autodiff ops, which makes the whole unrolled filter
differentiable for end-to-end training.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from resample_forge import autodiff as ad
from resample_forge.autodiff import Tensor
from resample_forge.particles import (
    ParticleSet,
    effective_sample_size,
    kde_log_density_batch,
)
from resample_forge.resamplers import ResamplerKind
from resample_forge.rng import RngStream
from resample_forge.transformer import transformer_resample_batch

STATE_DIM = 3      # x, y, theta
EMBED_DIM = 4      # x, y, cos theta, sin theta


class FilterDegeneracyError(RuntimeError):
    """All posterior weights underflowed to zero at some filter step."""

    def __init__(self, step: int):
        super().__init__(f"particle weights degenerated to zero at step {step}")
        self.step = step


def wrap_angle(theta):
    return np.mod(np.asarray(theta) + np.pi, 2 * np.pi) - np.pi


def embed_states(states: np.ndarray) -> np.ndarray:
    """(..., 3) poses -> (..., 4) with heading as (cos, sin)."""
    states = np.asarray(states, dtype=np.float64)
    return np.concatenate(
        [states[..., :2], np.cos(states[..., 2:3]), np.sin(states[..., 2:3])],
        axis=-1,
    )


def unembed_states(embedded: np.ndarray) -> np.ndarray:
    theta = np.arctan2(embedded[..., 3], embedded[..., 2])
    return np.concatenate([embedded[..., :2], theta[..., None]], axis=-1)


@dataclass(frozen=True)
class WorldSpec:
    """Rectangular arena with fixed range beacons."""

    width: float
    height: float
    beacons: np.ndarray           # (n_beacons, 2)
    obs_noise_std: float
    seed: int

    def __post_init__(self):
        if len(self.beacons) < 3:
            raise ValueError("need at least 3 beacons for pose observability")
        inside = (
            (self.beacons[:, 0] >= 0) & (self.beacons[:, 0] <= self.width)
            & (self.beacons[:, 1] >= 0) & (self.beacons[:, 1] <= self.height)
        )
        if not np.all(inside):
            raise ValueError("beacons must lie inside the arena")

    @classmethod
    def generate(cls, seed: int, n_beacons: int = 6, width: float = 10.0,
                 height: float = 10.0, obs_noise_std: float = 0.1) -> "WorldSpec":
        rng = RngStream(seed).split(909)
        margin = 0.5
        beacons = np.column_stack([
            rng.uniform(margin, width - margin, n_beacons),
            rng.uniform(margin, height - margin, n_beacons),
        ])
        return cls(width, height, beacons, obs_noise_std, seed)

    def ranges(self, xy: np.ndarray) -> np.ndarray:
        """Euclidean distances from (..., 2) positions to every beacon."""
        xy = np.asarray(xy, dtype=np.float64)
        diff = xy[..., None, :] - self.beacons
        return np.sqrt((diff * diff).sum(axis=-1))

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height,
            "beacons": self.beacons.tolist(),
            "obs_noise_std": self.obs_noise_std, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        return cls(d["width"], d["height"], np.asarray(d["beacons"], dtype=float),
                   d["obs_noise_std"], d["seed"])


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, wrap_angle(self.theta)])


@dataclass
class Trajectory:
    """T filter steps: states[0] is the start pose (actions[0] is zero),
    later entries hold the odometry that led to each state and the ranges
    observed there."""

    states: np.ndarray        # (T, 3)
    actions: np.ndarray       # (T, 3) odometry: forward, lateral, dtheta
    observations: np.ndarray  # (T, n_beacons)
    world_seed: int

    def __post_init__(self):
        if len(self.states) < 2:
            raise ValueError("trajectory needs at least 2 steps")

    @property
    def steps(self) -> int:
        return len(self.states)


DEFAULT_ODOMETRY_NOISE = (0.1, 0.05, 0.05)


def _apply_action(state: np.ndarray, action: np.ndarray) -> np.ndarray:
    x, y, theta = state
    f, l, dth = action
    return np.array([
        x + math.cos(theta) * f - math.sin(theta) * l,
        y + math.sin(theta) * f + math.cos(theta) * l,
        wrap_angle(theta + dth),
    ])


def simulate_trajectories(world: WorldSpec, count: int, steps: int,
                          rng: RngStream,
                          odometry_noise_std=DEFAULT_ODOMETRY_NOISE) -> list[Trajectory]:
    """Random-walk policy with wall avoidance; odometry and observations
    get Gaussian noise. Deterministic per (seed, trajectory index)."""
    noise_std = np.asarray(odometry_noise_std, dtype=np.float64)
    margin = 0.8
    trajectories = []
    for i in range(count):
        stream = rng.split(i)
        state = np.array([
            stream.uniform(margin, world.width - margin),
            stream.uniform(margin, world.height - margin),
            stream.uniform(-np.pi, np.pi),
        ])
        states = [state]
        actions = [np.zeros(3)]
        for _ in range(steps - 1):
            action = np.array([
                stream.uniform(0.15, 0.5),
                stream.uniform(-0.1, 0.1),
                stream.uniform(-0.6, 0.6),
            ])
            nxt = _apply_action(state, action)
            if not (margin < nxt[0] < world.width - margin
                    and margin < nxt[1] < world.height - margin):
                # steer toward the arena center and slow down
                center_bearing = math.atan2(world.height / 2 - state[1],
                                            world.width / 2 - state[0])
                action = np.array([
                    0.2, 0.0,
                    np.clip(wrap_angle(center_bearing - state[2]), -0.8, 0.8),
                ])
                nxt = _apply_action(state, action)
            state = nxt
            states.append(state)
            actions.append(action + stream.normal(0.0, 1.0, 3) * noise_std)
        states = np.asarray(states)
        obs = world.ranges(states[:, :2])
        obs = obs + stream.normal(0.0, 1.0, obs.shape) * world.obs_noise_std
        trajectories.append(Trajectory(states, np.asarray(actions), obs,
                                       world.seed))
    return trajectories


def save_trajectories(dir_path, world: WorldSpec, trajectories: list[Trajectory]) -> None:
    """One JSON file per trajectory plus the world description."""
    os.makedirs(dir_path, exist_ok=True)
    with open(os.path.join(dir_path, "world.json"), "w") as f:
        json.dump(world.to_dict(), f, indent=2)
        f.write("\n")
    for i, traj in enumerate(trajectories):
        record = {
            "world_seed": traj.world_seed,
            "steps": traj.steps,
            "states": traj.states.tolist(),
            "actions": traj.actions.tolist(),
            "observations": traj.observations.tolist(),
        }
        with open(os.path.join(dir_path, f"traj_{i:05d}.json"), "w") as f:
            json.dump(record, f)
            f.write("\n")


def load_trajectories(dir_path) -> tuple[WorldSpec, list[Trajectory]]:
    with open(os.path.join(dir_path, "world.json")) as f:
        world = WorldSpec.from_dict(json.load(f))
    trajectories = []
    names = sorted(n for n in os.listdir(dir_path)
                   if n.startswith("traj_") and n.endswith(".json"))
    for name in names:
        with open(os.path.join(dir_path, name)) as f:
            rec = json.load(f)
        trajectories.append(Trajectory(
            np.asarray(rec["states"]), np.asarray(rec["actions"]),
            np.asarray(rec["observations"]), rec["world_seed"],
        ))
    return world, trajectories


# ---------------------------------------------------------------------------
# learnable filter models
# ---------------------------------------------------------------------------


class FilterModels:
    """Motion noise scales (positive via exp of free parameters) and a
    small feed-forward network scoring (observation, predicted ranges)
    pairs into unnormalized log-weights."""

    def __init__(self, n_beacons: int, hidden: int = 64,
                 range_scale: float = 10.0,
                 tensors: dict[str, Tensor] | None = None):
        self.n_beacons = n_beacons
        self.hidden = hidden
        self.range_scale = range_scale  # normalizes raw range features
        self.tensors = tensors if tensors is not None else {}

    @classmethod
    def create(cls, n_beacons: int, rng: RngStream, hidden: int = 64,
               range_scale: float = 10.0,
               initial_noise: float = 0.2) -> "FilterModels":
        models = cls(n_beacons, hidden, range_scale)
        feat = 3 * n_beacons  # observation, prediction, difference
        models.tensors["motion.log_scales"] = Tensor(
            np.full(3, math.log(initial_noise)), requires_grad=True
        )

        def dense(name, fan_in, fan_out):
            models.tensors[f"{name}.w"] = Tensor(
                rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)),
                requires_grad=True,
            )
            models.tensors[f"{name}.b"] = Tensor(np.zeros(fan_out),
                                                 requires_grad=True)

        dense("meas.l1", feat, hidden)
        dense("meas.l2", hidden, hidden)
        dense("meas.l3", hidden, 1)
        return models

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def noise_scales(self) -> Tensor:
        return ad.exp(self.tensors["motion.log_scales"])

    def motion_parameters(self) -> list[Tensor]:
        return [self.tensors["motion.log_scales"]]

    def measurement_parameters(self) -> list[Tensor]:
        return [v for k, v in self.tensors.items() if k.startswith("meas.")]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def copy(self) -> "FilterModels":
        tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                   for k, v in self.tensors.items()}
        return FilterModels(self.n_beacons, self.hidden, self.range_scale, tensors)

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.tensors)
        with open(f"{path}.json", "w") as f:
            json.dump({"n_beacons": self.n_beacons, "hidden": self.hidden,
                       "range_scale": self.range_scale}, f)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "FilterModels":
        with open(f"{path}.json") as f:
            hyper = json.load(f)
        arrays = ad.load_checkpoint(path)
        tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(hyper["n_beacons"], hyper["hidden"],
                   hyper.get("range_scale", 10.0), tensors)


def predicted_ranges(positions: Tensor, beacons: np.ndarray) -> Tensor:
    """Beacon distances for (B, n, 4) particle tensors -> (B, n, n_beacons).
    The small epsilon keeps the square root differentiable if a particle
    sits exactly on a beacon."""
    px, py = ad.split(positions, 4, axis=-1)[:2]
    dx = px - Tensor(beacons[:, 0])
    dy = py - Tensor(beacons[:, 1])
    return (dx * dx + dy * dy + 1e-12) ** 0.5


def measurement_logits(models: FilterModels, observation: np.ndarray,
                       pred: Tensor) -> Tensor:
    """Score each particle's predicted ranges against the observation:
    observation (B, n_beacons), pred (B, n, n_beacons) -> logits (B, n).

    Raw ranges are divided by range_scale so features sit near unit
    magnitude; the range differences, which carry most of the signal,
    are fed unscaled.
    """
    B, n = pred.shape[0], pred.shape[1]
    obs = ad.broadcast_to(
        Tensor(np.asarray(observation, dtype=np.float64).reshape(B, 1, -1)),
        pred.shape,
    )
    inv = 1.0 / models.range_scale
    x = ad.concatenate([obs * inv, pred * inv, obs - pred], axis=-1)
    x = ad.relu(ad.matmul(x, models["meas.l1.w"]) + models["meas.l1.b"])
    x = ad.relu(ad.matmul(x, models["meas.l2.w"]) + models["meas.l2.b"])
    x = ad.matmul(x, models["meas.l3.w"]) + models["meas.l3.b"]
    return ad.reshape(x, (B, n))


def motion_update_core(positions: Tensor, action: np.ndarray,
                       log_scales: Tensor, eps: np.ndarray) -> Tensor:
    """Advance (B, n, 4) particles by a body-frame action plus scaled
    noise; eps is a fixed standard-normal draw (B, n, 3) so gradients
    w.r.t. the noise scales flow by reparameterization."""
    B = positions.shape[0]
    scales = ad.exp(log_scales)
    noise = Tensor(eps) * scales
    nf, nl, nth = ad.split(noise, 3, axis=-1)
    action = np.asarray(action, dtype=np.float64).reshape(B, 1, 3)
    df = nf + action[:, :, 0:1]
    dl = nl + action[:, :, 1:2]
    dth = nth + action[:, :, 2:3]
    x, y, c, s = ad.split(positions, 4, axis=-1)
    x2 = x + c * df - s * dl
    y2 = y + s * df + c * dl
    cd, sd = ad.cos(dth), ad.sin(dth)
    c2 = c * cd - s * sd
    s2 = s * cd + c * sd
    return ad.concatenate([x2, y2, c2, s2], axis=-1)


def measurement_update_core(weights: Tensor, logits: Tensor, step: int) -> Tensor:
    """Multiply weights by exp(logits) and renormalize per row, with a
    detached max shift for stability. Raises FilterDegeneracyError if a
    row's posterior mass underflows to zero."""
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    u = weights * ad.exp(logits - shift)
    z = ad.sum_(u, axis=1, keepdims=True)
    if np.any(z.data <= 0.0) or not np.all(np.isfinite(z.data)):
        raise FilterDegeneracyError(step)
    return u / z


def normalize_heading(positions: Tensor) -> Tensor:
    """Project the (cos, sin) columns back onto the unit circle (needed
    after the learned resampler, which outputs free coordinates)."""
    x, y, c, s = ad.split(positions, 4, axis=-1)
    norm = (c * c + s * s + 1e-12) ** 0.5
    return ad.concatenate([x, y, c / norm, s / norm], axis=-1)


def motion_update(particles: ParticleSet, action, models: FilterModels,
                  rng: RngStream) -> ParticleSet:
    """Single-set motion update; draws the noise from rng."""
    eps = rng.normal(0.0, 1.0, (1, particles.n, 3))
    pos = ad.reshape(particles.positions, (1, particles.n, EMBED_DIM))
    out = motion_update_core(pos, np.asarray(action).reshape(1, 3),
                             models["motion.log_scales"], eps)
    return ParticleSet(ad.reshape(out, (particles.n, EMBED_DIM)),
                       particles.weights)


def measurement_update(particles: ParticleSet, observation,
                       models: FilterModels, world: WorldSpec,
                       step: int = 0) -> ParticleSet:
    """Single-set measurement update: reweight by the learned likelihood."""
    pos = ad.reshape(particles.positions, (1, particles.n, EMBED_DIM))
    pred = predicted_ranges(pos, world.beacons)
    logits = measurement_logits(models, np.asarray(observation).reshape(1, -1),
                                pred)
    w = ad.reshape(particles.weights, (1, particles.n))
    out = measurement_update_core(w, logits, step)
    return ParticleSet(particles.positions, ad.reshape(out, (particles.n,)))


# ---------------------------------------------------------------------------
# the filter
# ---------------------------------------------------------------------------


@dataclass
class FilterRun:
    estimates: np.ndarray                     # (B, T, 3)
    ess: np.ndarray                           # (B, T)
    step_losses: list[Tensor] = field(default_factory=list)
    collected: list[tuple[ParticleSet, ParticleSet]] = field(default_factory=list)
    particle_log: list[dict] = field(default_factory=list)


def init_particles(states0: np.ndarray, n: int, streams: list[RngStream],
                   pos_std: float = 0.5, heading_std: float = 0.3) -> np.ndarray:
    """Gaussian prior around the true start pose, embedded; stands in for
    a learned initializer."""
    B = len(states0)
    out = np.empty((B, n, EMBED_DIM))
    for b, stream in enumerate(streams):
        x = states0[b, 0] + stream.normal(0.0, pos_std, n)
        y = states0[b, 1] + stream.normal(0.0, pos_std, n)
        th = states0[b, 2] + stream.normal(0.0, heading_std, n)
        out[b] = np.column_stack([x, y, np.cos(th), np.sin(th)])
    return out


def _estimate(positions: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted mean position plus circular-mean heading, (B, 3)."""
    w = weights[..., None]
    xy = (positions[..., :2] * w).sum(axis=1)
    c = (positions[..., 2] * weights).sum(axis=1)
    s = (positions[..., 3] * weights).sum(axis=1)
    return np.column_stack([xy, np.arctan2(s, c)])


def _resample_batch(kind: ResamplerKind, positions: Tensor, weights: Tensor,
                    streams: list[RngStream], transformer_params) -> tuple[Tensor, Tensor]:
    B, n, _ = positions.shape
    if kind.tag == "none":
        return positions, weights
    if kind.tag == "transformer":
        if transformer_params is None:
            raise ValueError("transformer resampler selected but no parameters loaded")
        out = transformer_resample_batch(positions, weights, transformer_params)
        return normalize_heading(out), Tensor(np.full((B, n), 1.0 / n))
    if kind.tag in ("multinomial", "systematic"):
        idx = np.empty((B, n), dtype=np.intp)
        for b, stream in enumerate(streams):
            w = weights.data[b]
            if kind.tag == "multinomial":
                idx[b] = stream.choice(n, size=n, p=w / w.sum())
            else:
                from resample_forge.resamplers import systematic_ancestors

                idx[b] = systematic_ancestors(w / w.sum(),
                                              float(stream.uniform(0, 1.0 / n)))
        return ad.gather_rows(positions, idx), Tensor(np.full((B, n), 1.0 / n))
    if kind.tag == "soft":
        q = weights * kind.alpha + (1.0 - kind.alpha) / n
        idx = np.empty((B, n), dtype=np.intp)
        for b, stream in enumerate(streams):
            p = q.data[b] / q.data[b].sum()
            idx[b] = stream.choice(n, size=n, p=p)
        new_pos = ad.gather_rows(positions, idx)
        raw = ad.gather_rows(weights, idx) / ad.gather_rows(q, idx)
        new_w = raw / ad.sum_(raw, axis=1, keepdims=True)
        return new_pos, new_w
    raise ValueError(f"unknown resampler {kind.tag!r}")


def run_filter_batch(world: WorldSpec, trajectories: list[Trajectory],
                     models: FilterModels, kind: ResamplerKind, n: int,
                     rng: RngStream, *, transformer_params=None,
                     stop_period: int | None = None,
                     loss_bandwidth: float | None = None,
                     collect: bool = False, log_particles: bool = False,
                     init_pos_std: float = 0.5,
                     init_heading_std: float = 0.3) -> FilterRun:
    """Filter a batch of equal-length trajectories in lockstep.

    Per step: motion update (from step 2), measurement update, estimate
    and optional truth-likelihood loss, then resampling (from step 2).
    When stop_period = k is set, the resampled set is detached at steps
    where step % k == 0, truncating gradient flow across time.
    """
    B = len(trajectories)
    T = trajectories[0].steps
    if any(t.steps != T for t in trajectories):
        raise ValueError("batched trajectories must share the step count")
    states = np.stack([t.states for t in trajectories])        # (B, T, 3)
    actions = np.stack([t.actions for t in trajectories])
    observations = np.stack([t.observations for t in trajectories])
    streams = [rng.split(b) for b in range(B)]

    positions = Tensor(init_particles(states[:, 0], n, streams,
                                      init_pos_std, init_heading_std))
    weights = Tensor(np.full((B, n), 1.0 / n))
    run = FilterRun(estimates=np.zeros((B, T, STATE_DIM)), ess=np.zeros((B, T)))

    for t in range(T):
        step = t + 1
        if t > 0:
            eps = np.stack([s.normal(0.0, 1.0, (n, 3)) for s in streams])
            positions = motion_update_core(positions, actions[:, t],
                                           models["motion.log_scales"], eps)
        pred = predicted_ranges(positions, world.beacons)
        logits = measurement_logits(models, observations[:, t], pred)
        weights = measurement_update_core(weights, logits, step)

        run.estimates[:, t] = _estimate(positions.data, weights.data)
        for b in range(B):
            run.ess[b, t] = effective_sample_size(weights.data[b])
        if loss_bandwidth is not None:
            truth = embed_states(states[:, t]).reshape(B, 1, EMBED_DIM)
            log_q = kde_log_density_batch(positions, weights, Tensor(truth),
                                          loss_bandwidth)
            run.step_losses.append(-ad.reshape(log_q, (B,)))

        if t >= 1:
            if collect or log_particles:
                pre = [ParticleSet(positions.data[b].copy(),
                                   weights.data[b] / weights.data[b].sum())
                       for b in range(B)]
            if stop_period is not None and step % stop_period == 0:
                # Truncate gradient flow across time: the posterior being
                # resampled is detached, so this resampling event opens a
                # fresh gradient window. Resampling itself stays inside
                # the next window; with k=1 every component still gets
                # its within-window gradient, but nothing crosses stops.
                positions = positions.detach()
                weights = weights.detach()
            positions, weights = _resample_batch(kind, positions, weights,
                                                 streams, transformer_params)
            if collect or log_particles:
                post = [ParticleSet(positions.data[b].copy(),
                                    weights.data[b] / weights.data[b].sum())
                        for b in range(B)]
                if collect:
                    run.collected.extend(zip(pre, post))
                if log_particles:
                    for b in range(B):
                        run.particle_log.append({
                            "trajectory": b, "step": step,
                            "pre": pre[b], "post": post[b],
                        })
    return run


def run_filter(trajectory: Trajectory, world: WorldSpec, models: FilterModels,
               kind: ResamplerKind, n: int, rng: RngStream,
               transformer_params=None, log_particles: bool = False,
               init_pos_std: float = 0.5,
               init_heading_std: float = 0.3) -> FilterRun:
    """Filter a single trajectory (batch of one)."""
    return run_filter_batch(
        world, [trajectory], models, kind, n, rng,
        transformer_params=transformer_params, log_particles=log_particles,
        init_pos_std=init_pos_std, init_heading_std=init_heading_std,
    )


def evaluate(trajectories: list[Trajectory], world: WorldSpec,
             models: FilterModels, kind: ResamplerKind, n: int,
             rng: RngStream, *, transformer_params=None,
             error_threshold: float = 0.5,
             init_pos_std: float = 0.5, init_heading_std: float = 0.3) -> dict:
    """Error rate (final position error > threshold) and final-step MSE
    with standard errors over trajectories."""
    with ad.no_grad():
        run = run_filter_batch(
            world, trajectories, models, kind, n, rng,
            transformer_params=transformer_params,
            init_pos_std=init_pos_std, init_heading_std=init_heading_std,
        )
    truth = np.stack([t.states[-1] for t in trajectories])
    err = np.linalg.norm(run.estimates[:, -1, :2] - truth[:, :2], axis=1)
    B = len(trajectories)
    misses = err > error_threshold
    sq = err**2
    return {
        "resampler": kind.tag,
        "n_trajectories": B,
        "error_rate": float(misses.mean()),
        "error_rate_se": float(np.sqrt(misses.mean() * (1 - misses.mean()) / B)),
        "mse": float(sq.mean()),
        "mse_se": float(sq.std(ddof=1) / np.sqrt(B)) if B > 1 else 0.0,
        "error_threshold": error_threshold,
    }
