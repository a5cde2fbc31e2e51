"""Waypoint-conditioned soft actor-critic for the low-level evasive policy.

The actor outputs the mean and log-std of a 2-D Gaussian that is squashed by
tanh.  The squashed vector ``a`` is read as a planar velocity command: heading
``atan2(a_y, a_x)`` and speed fraction ``min(1, |a|)``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .diffusion import DiffusionModel, PathConstraint, sample_paths
from .env import EvaderAction, RewardConstants, StepEvents, WorldConfig, observation_slices, reward
from .errors import ConfigError, TrainingError, UsageError
from .numerics import AdamState, DenseNet, adam_step, net_from_dict, net_to_dict
from .sim import Simulator

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
TANH_EPS = 1e-6
ACTION_DIM = 2
# waypoint offsets are a few hundredths of the map; rescale toward unit range
WAYPOINT_OFFSET_SCALE = 10.0


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    polyak: float = 0.005
    lr: float = 3e-4
    batch_size: int = 256
    replay_capacity: int = 200_000
    updates_per_step: int = 1
    target_entropy: float = -2.0
    hidden: tuple[int, ...] = (128, 128)
    init_temperature: float = 0.2
    random_steps: int = 2000
    update_after: int = 1000
    # detection penalty ramps linearly from 0 to full over this many env steps
    detection_warmup: int = 0


# -- replay -----------------------------------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity ring buffer of ``(obs, action, reward, next_obs, done)``."""

    def __init__(self, obs_dim: int, capacity: int, action_dim: int = ACTION_DIM):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, action_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.inserted = 0

    @property
    def size(self) -> int:
        return min(self.inserted, self.capacity)

    def __len__(self) -> int:
        return self.size

    def add(self, obs: np.ndarray, act: np.ndarray, rew: float, next_obs: np.ndarray, done: bool) -> None:
        k = self.inserted % self.capacity
        self.obs[k], self.act[k], self.rew[k], self.next_obs[k], self.done[k] = obs, act, rew, next_obs, float(done)
        self.inserted += 1

    def sample_indices(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.size, size=batch)

    def sample(self, batch: int, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
        i = self.sample_indices(batch, rng)
        return self.obs[i], self.act[i], self.rew[i], self.next_obs[i], self.done[i]


# -- waypoint tracking -------------------------------------------------------------------------


@dataclass
class WaypointTracker:
    waypoints: np.ndarray  # (N_w, 2)
    radius: float
    index: int = 0

    @property
    def current(self) -> np.ndarray:
        return self.waypoints[self.index]

    @property
    def final(self) -> bool:
        return self.index == len(self.waypoints) - 1


def tracker_advance(tracker: WaypointTracker, evader_pos: np.ndarray) -> tuple[WaypointTracker, bool]:
    """Move to the next waypoint when the current one is within the reached radius.

    At the final waypoint the index stays put but the flag still reports arrival.
    """
    w = tracker.waypoints[tracker.index]
    if math.hypot(evader_pos[0] - w[0], evader_pos[1] - w[1]) > tracker.radius:
        return tracker, False
    if tracker.index < len(tracker.waypoints) - 1:
        return WaypointTracker(tracker.waypoints, tracker.radius, tracker.index + 1), True
    return tracker, True


def augment_observation(obs: np.ndarray, tracker: WaypointTracker) -> np.ndarray:
    return np.concatenate([obs, tracker.current])


# -- agent --------------------------------------------------------------------------------------


@dataclass
class SacAgent:
    obs_dim: int
    config: SacConfig
    actor: DenseNet
    q1: DenseNet
    q2: DenseNet
    q1_target: DenseNet
    q2_target: DenseNet
    log_alpha: float
    actor_opt: AdamState
    q1_opt: AdamState
    q2_opt: AdamState
    alpha_opt: AdamState
    updates: int = 0
    meta: dict = field(default_factory=dict)
    evader_index: int | None = None

    @classmethod
    def create(cls, obs_dim: int, config: SacConfig | None = None, seed: int = 0,
               evader_index: int | None = None) -> "SacAgent":
        """``evader_index`` marks where the evader x, y sit in the observation.

        When given, the networks also see the offset from the evader to the
        waypoint stored in the last two observation entries.
        """
        cfg = config or SacConfig()
        rng = np.random.default_rng(seed)
        n_in = obs_dim + (ACTION_DIM if evader_index is not None else 0)
        actor = DenseNet.mlp([n_in, *cfg.hidden, 2 * ACTION_DIM], rng=rng, output_scale=0.1)
        q1 = DenseNet.mlp([n_in + ACTION_DIM, *cfg.hidden, 1], rng=rng)
        q2 = DenseNet.mlp([n_in + ACTION_DIM, *cfg.hidden, 1], rng=rng)
        return cls(
            obs_dim, cfg, actor, q1, q2, q1.copy(), q2.copy(), math.log(cfg.init_temperature),
            AdamState(actor.param_count, lr=cfg.lr), AdamState(q1.param_count, lr=cfg.lr),
            AdamState(q2.param_count, lr=cfg.lr), AdamState(1, lr=cfg.lr), evader_index=evader_index,
        )

    def features(self, obs: np.ndarray) -> np.ndarray:
        if self.evader_index is None:
            return obs
        i = self.evader_index
        offset = (obs[..., -2:] - obs[..., i:i + 2]) * WAYPOINT_OFFSET_SCALE
        return np.concatenate([obs, offset], axis=-1)

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    # -- policy ----------------------------------------------------------------------
    def policy_head(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, object]:
        out, tape = self.actor.forward(self.features(obs))
        mean, raw = out[..., :ACTION_DIM], out[..., ACTION_DIM:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, raw, tape

    def sample_action(self, obs: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Squashed action and its log-probability for a batch of observations."""
        mean, log_std, _, _ = self.policy_head(obs)
        z = rng.standard_normal(mean.shape)
        a = np.tanh(mean + np.exp(log_std) * z)
        return a, squashed_log_prob(z, log_std, a)

    # -- persistence -------------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "kind": "sac",
            "obs_dim": self.obs_dim,
            "config": {**asdict(self.config), "hidden": list(self.config.hidden)},
            "actor": net_to_dict(self.actor, self.actor_opt),
            "q1": net_to_dict(self.q1, self.q1_opt),
            "q2": net_to_dict(self.q2, self.q2_opt),
            "q1_target": net_to_dict(self.q1_target),
            "q2_target": net_to_dict(self.q2_target),
            "log_alpha": self.log_alpha,
            "alpha_opt": self.alpha_opt.to_dict(),
            "updates": self.updates,
            "meta": self.meta,
            "evader_index": self.evader_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SacAgent":
        if d.get("kind") != "sac":
            raise ConfigError("not a SAC checkpoint")
        cfg = SacConfig(**{**d["config"], "hidden": tuple(d["config"]["hidden"])})
        actor, a_opt = net_from_dict(d["actor"])
        q1, q1_opt = net_from_dict(d["q1"])
        q2, q2_opt = net_from_dict(d["q2"])
        q1t, _ = net_from_dict(d["q1_target"])
        q2t, _ = net_from_dict(d["q2_target"])
        obs_dim = int(d["obs_dim"])
        evader_index = d.get("evader_index")
        n_in = obs_dim + (ACTION_DIM if evader_index is not None else 0)
        if actor.n_in != n_in or q1.n_in != n_in + ACTION_DIM or actor.n_out != 2 * ACTION_DIM:
            raise ConfigError("SAC network shapes do not match the observation size")
        return cls(obs_dim, cfg, actor, q1, q2, q1t, q2t, float(d["log_alpha"]), a_opt, q1_opt, q2_opt,
                   AdamState.from_dict(d["alpha_opt"]), int(d.get("updates", 0)), dict(d.get("meta", {})),
                   None if evader_index is None else int(evader_index))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "SacAgent":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"agent checkpoint not found: {p}")
        return cls.from_dict(json.loads(p.read_text()))


def squashed_log_prob(z: np.ndarray, log_std: np.ndarray, a: np.ndarray) -> np.ndarray:
    return np.sum(-0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi) - np.log(1.0 - a * a + TANH_EPS), axis=-1)


def squashed_to_action(a: np.ndarray) -> EvaderAction:
    """Read a squashed 2-vector as (heading, speed fraction)."""
    return EvaderAction(math.atan2(a[1], a[0]), min(1.0, math.hypot(a[0], a[1])))


def action_to_squashed(action: EvaderAction) -> np.ndarray:
    return np.array([math.cos(action.heading), math.sin(action.heading)]) * action.speed


def sac_act(agent: SacAgent, obs_aug: np.ndarray, mode: str = "stochastic",
            rng: np.random.Generator | None = None) -> tuple[EvaderAction, np.ndarray]:
    """Action for one observation; also returns the raw squashed vector stored in replay."""
    if mode == "deterministic":
        mean, _, _, _ = agent.policy_head(obs_aug)
        a = np.tanh(mean)
    elif mode == "stochastic":
        if rng is None:
            raise UsageError("stochastic mode needs an rng")
        a, _ = agent.sample_action(obs_aug, rng)
    else:
        raise UsageError(f"unknown mode {mode!r}")
    return squashed_to_action(a), a


# -- update ---------------------------------------------------------------------------------------


@dataclass
class LossRecord:
    critic1: float
    critic2: float
    actor: float
    temperature: float
    alpha: float
    skipped: bool = False


def critic_targets(agent: SacAgent, rew: np.ndarray, next_obs: np.ndarray, done: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    a2, logp2 = agent.sample_action(next_obs, rng)
    x2 = np.concatenate([agent.features(next_obs), a2], axis=1)
    q_t = np.minimum(agent.q1_target(x2)[:, 0], agent.q2_target(x2)[:, 0])
    return rew + agent.config.gamma * (1.0 - done) * (q_t - agent.alpha * logp2)


def critic_loss_and_grad(net: DenseNet, obs: np.ndarray, act: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    q, tape = net.forward(np.concatenate([obs, act], axis=1))
    diff = q[:, 0] - y
    loss = float(np.mean(diff * diff))
    g, _ = net.backward(tape, (2.0 * diff / len(y))[:, None])
    return loss, g


def actor_loss_and_grad(agent: SacAgent, obs: np.ndarray, z: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Reparameterised actor loss ``mean(alpha * log pi - min Q)`` with noise ``z`` held fixed.

    Returns ``(loss, actor parameter gradient, log-probabilities)``.
    """
    mean, log_std, raw, tape = agent.policy_head(obs)
    std = np.exp(log_std)
    u = mean + std * z
    a = np.tanh(u)
    logp = squashed_log_prob(z, log_std, a)
    x = np.concatenate([agent.features(obs), a], axis=1)
    q1, t1 = agent.q1.forward(x)
    q2, t2 = agent.q2.forward(x)
    use1 = q1[:, 0] <= q2[:, 0]
    qmin = np.where(use1, q1[:, 0], q2[:, 0])
    alpha = agent.alpha
    loss = float(np.mean(alpha * logp - qmin))
    b = len(obs)
    # dQmin/da via input gradients of the selected critic
    _, gx1 = agent.q1.backward(t1, (use1 / b)[:, None].astype(float))
    _, gx2 = agent.q2.backward(t2, ((~use1) / b)[:, None].astype(float))
    dq_da = (gx1 + gx2)[:, -ACTION_DIM:]
    one_minus = 1.0 - a * a
    dlogp_du = 2.0 * a * one_minus / (one_minus + TANH_EPS)
    dl_du = alpha * dlogp_du / b - dq_da * one_minus
    dl_dmean = dl_du
    dl_dlogstd = -alpha / b + dl_du * std * z
    dl_dlogstd = dl_dlogstd * ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX))
    g, _ = agent.actor.backward(tape, np.concatenate([dl_dmean, dl_dlogstd], axis=1))
    return loss, g, logp


def polyak_update(target: DenseNet, online: DenseNet, rho: float) -> None:
    target.set_params((1.0 - rho) * target.params + rho * online.params)


def sac_update(agent: SacAgent, buffer: ReplayBuffer, rng: np.random.Generator) -> LossRecord:
    cfg = agent.config
    if buffer.size < cfg.batch_size:
        return LossRecord(math.nan, math.nan, math.nan, math.nan, agent.alpha, skipped=True)
    obs, act, rew, next_obs, done = buffer.sample(cfg.batch_size, rng)
    y = critic_targets(agent, rew, next_obs, done, rng)
    feats = agent.features(obs)
    l1, g1 = critic_loss_and_grad(agent.q1, feats, act, y)
    l2, g2 = critic_loss_and_grad(agent.q2, feats, act, y)
    if not (math.isfinite(l1) and math.isfinite(l2)):
        raise TrainingError("critic loss is not finite")
    agent.q1.set_params(adam_step(agent.q1_opt, agent.q1.params, g1))
    agent.q2.set_params(adam_step(agent.q2_opt, agent.q2.params, g2))

    z = rng.standard_normal((len(obs), ACTION_DIM))
    la, ga, logp = actor_loss_and_grad(agent, obs, z)
    if not math.isfinite(la):
        raise TrainingError("actor loss is not finite")
    agent.actor.set_params(adam_step(agent.actor_opt, agent.actor.params, ga))

    gap = logp + cfg.target_entropy
    lt = float(-agent.log_alpha * np.mean(gap))
    new_log_alpha = adam_step(agent.alpha_opt, np.array([agent.log_alpha]), np.array([-float(np.mean(gap))]))
    agent.log_alpha = float(np.clip(new_log_alpha[0], -20.0, 5.0))

    polyak_update(agent.q1_target, agent.q1, cfg.polyak)
    polyak_update(agent.q2_target, agent.q2, cfg.polyak)
    agent.updates += 1
    return LossRecord(l1, l2, la, lt, agent.alpha)


# -- training loops ------------------------------------------------------------------------------


@dataclass
class EpisodeStats:
    episode: int
    ret: float
    detections: int
    goal: bool
    steps: int


@dataclass
class TrainResult:
    agent: SacAgent
    curve: list[EpisodeStats]
    skipped_episodes: int = 0
    transitions: list[tuple] = field(default_factory=list)


def choose_training_hideout(hideouts: np.ndarray, start: np.ndarray, rng: np.random.Generator, rule: str) -> np.ndarray:
    if rule == "nearest":
        return hideouts[int(np.argmin(np.hypot(*(hideouts - start).T)))]
    return hideouts[int(rng.integers(len(hideouts)))]


def waypoint_reward(events: StepEvents, pos: np.ndarray, waypoint: np.ndarray, constants: RewardConstants,
                    advanced: bool) -> float:
    """Waypoint gain is paid when the tracker advances, or once on hideout capture."""
    return reward(events, pos, waypoint, constants, advanced or events.goal_reached)


def train_evader(config: WorldConfig, diffusion: DiffusionModel | None, sac_config: SacConfig | None = None,
                 seed: int = 0, total_steps: int = 50_000, hideout_rule: str = "random",
                 reward_constants: RewardConstants | None = None, record_transitions: bool = False,
                 progress: Callable[[EpisodeStats], None] | None = None) -> TrainResult:
    """Train the low-level policy under diffusion waypoints.

    With ``diffusion=None`` the agent is the flat SAC baseline: no waypoint in
    the observation and the episode score (goal +50, timeout -50, -1 per
    detected step) as reward; ``reward_constants`` then go unused.
    """
    cfg = sac_config or SacConfig()
    constants = reward_constants or config.reward
    hierarchical = diffusion is not None
    obs_dim = config.observation_size + (2 if hierarchical else 0)
    sl = observation_slices(config)
    agent = SacAgent.create(obs_dim, cfg, seed=seed, evader_index=sl["evader"].start if hierarchical else None)
    agent.meta = {"hierarchical": hierarchical, "config_digest": config.digest(), "seed": seed}
    buffer = ReplayBuffer(obs_dim, min(cfg.replay_capacity, max(total_steps, cfg.batch_size)))
    rng = np.random.default_rng([seed, 1])
    sim = Simulator(config)
    curve: list[EpisodeStats] = []
    transitions: list[tuple] = []
    skipped = 0
    steps = 0
    episode = 0
    while steps < total_steps:
        ep_seed = int(rng.integers(2**31))
        obs = sim.reset(ep_seed)
        state = sim.state
        tracker = None
        if hierarchical:
            goal = choose_training_hideout(state.hideouts, state.evader_pos, rng, hideout_rule)
            c = PathConstraint(state.evader_pos.copy(), goal.copy(), config.obstacles)
            try:
                res = sample_paths(diffusion, c, 1, rng)
            except Exception as exc:  # noqa: BLE001 - sampler failure skips the episode
                log.warning("diffusion sampling failed: %s", exc)
                skipped += 1
                episode += 1
                continue
            tracker, _ = tracker_advance(WaypointTracker(res.paths[0].points, config.waypoint_radius), state.evader_pos)
        ep_ret, ep_det, ep_len = 0.0, 0, 0
        while True:
            x = augment_observation(obs, tracker) if hierarchical else obs
            if steps < cfg.random_steps:
                a = rng.uniform(-1.0, 1.0, ACTION_DIM)
                action = squashed_to_action(a)
            else:
                action, a = sac_act(agent, x, "stochastic", rng)
            obs2, ev = sim.step(action)
            pos = obs2[sl["evader"]][:2]
            if hierarchical:
                new_tracker, _ = tracker_advance(tracker, pos)
                advanced = new_tracker.index != tracker.index
                ramp = min(1.0, steps / cfg.detection_warmup) if cfg.detection_warmup > 0 else 1.0
                step_constants = replace(constants, detection_penalty=constants.detection_penalty * ramp)
                r = waypoint_reward(ev, pos, tracker.current, step_constants, advanced)
                tracker = new_tracker
                x2 = augment_observation(obs2, tracker)
            else:
                r = score_reward(ev)
                x2 = obs2
            buffer.add(x, a, r, x2, ev.goal_reached)
            if record_transitions:
                transitions.append((x.copy(), a.copy(), r, ev.goal_reached))
            steps += 1
            ep_ret += r
            ep_det += ev.detection_count > 0
            ep_len += 1
            obs = obs2
            if steps >= cfg.update_after:
                for _ in range(cfg.updates_per_step):
                    sac_update(agent, buffer, rng)
            if sim.done or steps >= total_steps:
                break
        stats = EpisodeStats(episode, ep_ret, ep_det, bool(sim.state.events.goal_reached), ep_len)
        curve.append(stats)
        if progress:
            progress(stats)
        episode += 1
    return TrainResult(agent, curve, skipped, transitions)


def score_reward(events: StepEvents, goal_bonus: float = 50.0) -> float:
    """Per-step share of the evaluation score, used by the flat SAC baseline.

    A detected step costs 1 however many agents saw the evader, as in the score.
    """
    r = -1.0 if events.detected else 0.0
    if events.goal_reached:
        r += goal_bonus
    elif events.timed_out:
        r -= goal_bonus
    return r


def write_curve(path: str | Path, curve: list[EpisodeStats]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["episode", "return", "detections", "goal_reached", "steps"])
        for s in curve:
            w.writerow([s.episode, f"{s.ret:.6f}", s.detections, int(s.goal), s.steps])
