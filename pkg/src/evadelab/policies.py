"""Evader controllers for every benchmarked policy and a shared rollout loop.

A controller is built once per episode from the reset state and then maps
observations to actions. Learned controllers need their artifacts bundled in
:class:`PolicyArtifacts`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .costmap import Costmap, select_path
from .diffusion import DiffusionModel, PathConstraint, sample_paths
from .env import EvaderAction, StepEvents, WorldConfig, WorldState, observation_slices
from .errors import ConfigError, NoPathError, UsageError
from .evade_rl import SacAgent, WaypointTracker, augment_observation, sac_act, tracker_advance
from .planners import DensePath, RRTParams, ScriptedEvader, _steer, astar, rrt_star, vo_action
from .sim import Simulator

POLICIES = (
    "astar-heuristic",
    "rrtstar-heuristic",
    "vo",
    "sac-only",
    "diffusion-only",
    "diffusion-rl",
    "diffusion-rl-map",
)
LEARNED = {"sac-only", "diffusion-only", "diffusion-rl", "diffusion-rl-map"}


class Controller(Protocol):
    def act(self, observation: np.ndarray) -> EvaderAction: ...


@dataclass
class PolicyArtifacts:
    diffusion: DiffusionModel | None = None
    agent: SacAgent | None = None
    flat_agent: SacAgent | None = None
    costmap: Costmap | None = None
    map_samples: int = 30
    rrt_iterations: int = 1500
    action_mode: str = "deterministic"
    # "nearest" steers single-path policies to the closest active hideout, "random" to a uniform pick
    goal_rule: str = "nearest"


def nearest_hideout(state: WorldState) -> np.ndarray:
    d = np.hypot(*(state.hideouts - state.evader_pos).T)
    return state.hideouts[int(np.argmin(d))].copy()


class WaypointFollower:
    """Straight-line steering at full speed through a waypoint list."""

    def __init__(self, config: WorldConfig, points: np.ndarray):
        self.config = config
        self.tracker = WaypointTracker(np.asarray(points, float), config.waypoint_radius)
        self._ev = observation_slices(config)["evader"]

    def act(self, observation: np.ndarray) -> EvaderAction:
        pos = observation[self._ev][:2]
        self.tracker, _ = tracker_advance(self.tracker, pos)
        return _steer(pos, self.tracker.current, 1.0, self.config.evader_speed)


class HierarchicalController:
    """SAC low-level policy tracking a fixed waypoint list."""

    def __init__(self, config: WorldConfig, agent: SacAgent, points: np.ndarray, mode: str,
                 rng: np.random.Generator):
        self.agent = agent
        self.tracker = WaypointTracker(np.asarray(points, float), config.waypoint_radius)
        self.mode = mode
        self.rng = rng
        self._ev = observation_slices(config)["evader"]

    def act(self, observation: np.ndarray) -> EvaderAction:
        self.tracker, _ = tracker_advance(self.tracker, observation[self._ev][:2])
        action, _ = sac_act(self.agent, augment_observation(observation, self.tracker), self.mode, self.rng)
        return action


class FlatController:
    def __init__(self, agent: SacAgent, mode: str, rng: np.random.Generator):
        self.agent, self.mode, self.rng = agent, mode, rng

    def act(self, observation: np.ndarray) -> EvaderAction:
        action, _ = sac_act(self.agent, observation, self.mode, self.rng)
        return action


class VelocityObstacleController:
    """Avoids pursuer velocity obstacles while chasing a lookahead point on an A* path."""

    def __init__(self, config: WorldConfig, path: DensePath, lookahead: float = 0.08):
        self.config = config
        self.points = np.asarray(path.points, float)
        self.lookahead = lookahead
        self._ev = observation_slices(config)["evader"]

    def _carrot(self, pos: np.ndarray) -> np.ndarray:
        i = int(np.argmin(np.linalg.norm(self.points - pos, axis=1)))
        while i < len(self.points) - 1 and np.hypot(*(self.points[i] - pos)) < self.lookahead:
            i += 1
        return self.points[i]

    def act(self, observation: np.ndarray) -> EvaderAction:
        pos = observation[self._ev][:2]
        return vo_action(observation, self._carrot(pos), self.config)


def _require(value, what: str, policy: str):
    if value is None:
        raise ConfigError(f"policy {policy!r} needs a {what}")
    return value


def candidate_paths(diffusion: DiffusionModel, state: WorldState, config: WorldConfig, count: int,
                    rng: np.random.Generator) -> list:
    """Diffusion samples spread evenly over the active hideouts."""
    out = []
    n_h = len(state.hideouts)
    for j, goal in enumerate(state.hideouts):
        k = count // n_h + (1 if j < count % n_h else 0)
        if k == 0:
            continue
        c = PathConstraint(state.evader_pos.copy(), goal.copy(), config.obstacles)
        out.extend(sample_paths(diffusion, c, k, rng).paths)
    return out


def episode_goal(state: WorldState, rule: str, rng: np.random.Generator) -> np.ndarray:
    if rule == "nearest":
        return nearest_hideout(state)
    if rule == "random":
        return state.hideouts[int(rng.integers(len(state.hideouts)))].copy()
    raise UsageError(f"unknown goal rule {rule!r}")


def make_controller(policy: str, config: WorldConfig, state: WorldState, artifacts: PolicyArtifacts,
                    rng: np.random.Generator) -> Controller:
    if policy not in POLICIES:
        raise UsageError(f"unknown policy {policy!r}; choose from {', '.join(POLICIES)}")
    start = state.evader_pos.copy()
    goal = episode_goal(state, artifacts.goal_rule, rng)
    if policy == "astar-heuristic":
        return ScriptedEvader(config, astar(config, start, goal), rng)
    if policy == "rrtstar-heuristic":
        params = RRTParams(iterations=artifacts.rrt_iterations, clearance=0.02)
        seed = int(rng.integers(2**31))
        try:
            path = rrt_star(config, start, goal, seed=seed, params=params)
        except NoPathError:
            # fall back to the grid planner so the episode still runs
            path = astar(config, start, goal)
        return ScriptedEvader(config, path, rng)
    if policy == "vo":
        return VelocityObstacleController(config, astar(config, start, goal))
    if policy == "sac-only":
        return FlatController(_require(artifacts.flat_agent, "flat SAC checkpoint", policy), artifacts.action_mode, rng)
    diffusion = _require(artifacts.diffusion, "diffusion checkpoint", policy)
    if policy == "diffusion-rl-map":
        cmap = _require(artifacts.costmap, "costmap", policy)
        agent = _require(artifacts.agent, "hierarchical SAC checkpoint", policy)
        paths = candidate_paths(diffusion, state, config, artifacts.map_samples, rng)
        _, best = select_path(cmap, paths)
        return HierarchicalController(config, agent, best.points, artifacts.action_mode, rng)
    c = PathConstraint(start, goal, config.obstacles)
    points = sample_paths(diffusion, c, 1, rng).paths[0].points
    if policy == "diffusion-only":
        return WaypointFollower(config, points)
    agent = _require(artifacts.agent, "hierarchical SAC checkpoint", policy)
    return HierarchicalController(config, agent, points, artifacts.action_mode, rng)


StepHook = Callable[[WorldState, EvaderAction, StepEvents], None]


def rollout(config: WorldConfig, policy: str, seed: int, artifacts: PolicyArtifacts,
            on_step: StepHook | None = None) -> tuple[WorldState, Controller]:
    """Run one episode; ``on_step`` sees the post-step state, the action and its events."""
    sim = Simulator(config)
    obs = sim.reset(seed)
    rng = np.random.default_rng([seed, 7])
    controller = make_controller(policy, config, sim.state, artifacts, rng)
    while not sim.done:
        action = controller.act(obs)
        obs, events = sim.step(action)
        if on_step is not None:
            on_step(sim.state, action, events)
    return sim.state, controller
