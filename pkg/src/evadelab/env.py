"""Partially observable pursuit-evasion world on the unit square.

The world holds circular mountains, hidden cameras, candidate hideouts and a
team of dynamic pursuers.  All dynamics are deterministic given the reset
seed and the action sequence; randomness only enters through :func:`env_reset`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, UsageError

CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])


@dataclass(frozen=True)
class AgentType:
    name: str
    speed: float
    beta: float
    static: bool = False
    ground: bool = True


@dataclass(frozen=True)
class VisibilityBump:
    center: tuple[float, float]
    sigma: float
    depth: float


@dataclass(frozen=True)
class RewardConstants:
    waypoint_gain: float = 5.0
    distance_coef: float = 0.1
    detection_penalty: float = 1.0


@dataclass(frozen=True)
class PursuitParams:
    intercept_age: int = 5
    predict_age: int = 30
    vicinity_age: int = 120
    spiral_pitch: float = 0.02
    patrol: tuple[tuple[float, float], ...] = ((0.25, 0.25), (0.75, 0.25), (0.75, 0.75), (0.25, 0.75))


@dataclass(frozen=True)
class WorldConfig:
    name: str
    obstacles: np.ndarray  # (K, 3): x, y, radius
    cameras: np.ndarray  # (C, 2)
    hideouts: np.ndarray  # (H, 2) candidates
    agent_types: dict[str, AgentType]
    camera_type: str
    team: tuple[str, ...]  # dynamic pursuer type per slot
    hideouts_per_episode: int = 3
    evader_speed: float = 0.008
    alpha: float = 1.0
    eta: float = 0.02
    visibility: tuple[VisibilityBump, ...] = ()
    visibility_floor: float = 0.3
    max_steps: int = 500
    view_mode: str = "global"
    capture_radius: float = 0.03
    waypoint_radius: float = 0.04
    start_region: float = 0.15
    pursuer_min_start_distance: float = 0.0
    max_obstacles: int | None = None
    reward: RewardConstants = field(default_factory=RewardConstants)
    pursuit: PursuitParams = field(default_factory=PursuitParams)

    def __post_init__(self) -> None:
        self.validate()

    # -- validation ----------------------------------------------------------
    def validate(self) -> None:
        def inside(p: np.ndarray) -> bool:
            return bool(np.all((p >= 0.0) & (p <= 1.0)))

        if self.obstacles.size and (not inside(self.obstacles[:, :2]) or np.any(self.obstacles[:, 2] <= 0)):
            raise ConfigError("obstacles must lie in the unit square with positive radius")
        if self.cameras.size and not inside(self.cameras):
            raise ConfigError("cameras must lie in the unit square")
        if not inside(self.hideouts):
            raise ConfigError("hideouts must lie in the unit square")
        if self.hideouts_per_episode > len(self.hideouts) or self.hideouts_per_episode < 1:
            raise ConfigError("hideouts_per_episode exceeds the candidate count")
        if self.camera_type not in self.agent_types:
            raise ConfigError(f"unknown camera type {self.camera_type!r}")
        for name in self.team:
            t = self.agent_types.get(name)
            if t is None:
                raise ConfigError(f"unknown pursuer type {name!r}")
            if t.static:
                raise ConfigError(f"team member {name!r} is static")
            if t.speed <= self.evader_speed:
                raise ConfigError(f"pursuer type {name!r} must be faster than the evader")
        if self.view_mode not in ("global", "local"):
            raise ConfigError(f"view_mode must be 'global' or 'local', got {self.view_mode!r}")
        if min(self.capture_radius, self.waypoint_radius, self.start_region, self.evader_speed) <= 0:
            raise ConfigError("radii and speeds must be positive")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.max_obstacles is not None and self.max_obstacles < len(self.obstacles):
            raise ConfigError("max_obstacles smaller than the obstacle list")

    # -- derived quantities --------------------------------------------------
    @property
    def n_dynamic(self) -> int:
        return len(self.team)

    @property
    def obstacle_slots(self) -> int:
        return self.max_obstacles if self.max_obstacles is not None else len(self.obstacles)

    @property
    def observation_size(self) -> int:
        return 1 + 2 * self.hideouts_per_episode + 3 * self.obstacle_slots + 3 + 5 * self.n_dynamic

    def visibility_at(self, pos: np.ndarray) -> float:
        """Visibility field value in ``[floor, 1]`` at ``pos``."""
        v = 1.0
        for b in self.visibility:
            d2 = (pos[0] - b.center[0]) ** 2 + (pos[1] - b.center[1]) ** 2
            v -= b.depth * math.exp(-d2 / (2.0 * b.sigma * b.sigma))
        return min(1.0, max(self.visibility_floor, v))

    def start_corner(self) -> np.ndarray:
        """Map corner farthest from the candidate-hideout centroid."""
        centroid = self.hideouts.mean(axis=0)
        return CORNERS[int(np.argmax(np.linalg.norm(CORNERS - centroid, axis=1)))]

    def in_obstacle(self, p: np.ndarray, margin: float = 0.0) -> bool:
        if not self.obstacles.size:
            return False
        d = np.hypot(self.obstacles[:, 0] - p[0], self.obstacles[:, 1] - p[1])
        return bool(np.any(d < self.obstacles[:, 2] + margin))

    def base_detection_radius(self, type_name: str) -> float:
        """Detection radius of ``type_name`` against a full-speed evader at visibility 1."""
        t = self.agent_types[type_name]
        return detection_range(t.beta, 1.0, self.evader_speed, self.alpha, self.eta)

    def with_updates(self, **kw: Any) -> "WorldConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "obstacles": self.obstacles.tolist(),
            "cameras": self.cameras.tolist(),
            "hideouts": self.hideouts.tolist(),
            "agent_types": {
                k: {"speed": t.speed, "beta": t.beta, "static": t.static, "ground": t.ground}
                for k, t in self.agent_types.items()
            },
            "camera_type": self.camera_type,
            "team": list(self.team),
            "hideouts_per_episode": self.hideouts_per_episode,
            "evader_speed": self.evader_speed,
            "alpha": self.alpha,
            "eta": self.eta,
            "visibility": {
                "floor": self.visibility_floor,
                "bumps": [{"center": list(b.center), "sigma": b.sigma, "depth": b.depth} for b in self.visibility],
            },
            "max_steps": self.max_steps,
            "view_mode": self.view_mode,
            "capture_radius": self.capture_radius,
            "waypoint_radius": self.waypoint_radius,
            "start_region": self.start_region,
            "pursuer_min_start_distance": self.pursuer_min_start_distance,
            "max_obstacles": self.max_obstacles,
            "reward": vars(self.reward).copy(),
            "pursuit": {**vars(self.pursuit), "patrol": [list(p) for p in self.pursuit.patrol]},
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def config_from_dict(d: dict) -> WorldConfig:
    try:
        types = {
            k: AgentType(k, float(v["speed"]), float(v["beta"]), bool(v.get("static", False)), bool(v.get("ground", True)))
            for k, v in d["agent_types"].items()
        }
        vis = d.get("visibility", {})
        bumps = tuple(
            VisibilityBump((float(b["center"][0]), float(b["center"][1])), float(b["sigma"]), float(b["depth"]))
            for b in vis.get("bumps", [])
        )
        pursuit = d.get("pursuit", {})
        if "patrol" in pursuit:
            pursuit = {**pursuit, "patrol": tuple(tuple(map(float, p)) for p in pursuit["patrol"])}
        return WorldConfig(
            name=str(d.get("name", "world")),
            obstacles=np.asarray(d.get("obstacles", []), dtype=float).reshape(-1, 3),
            cameras=np.asarray(d.get("cameras", []), dtype=float).reshape(-1, 2),
            hideouts=np.asarray(d["hideouts"], dtype=float).reshape(-1, 2),
            agent_types=types,
            camera_type=str(d["camera_type"]),
            team=tuple(d["team"]),
            hideouts_per_episode=int(d.get("hideouts_per_episode", 3)),
            evader_speed=float(d.get("evader_speed", 0.008)),
            alpha=float(d.get("alpha", 1.0)),
            eta=float(d.get("eta", 0.02)),
            visibility=bumps,
            visibility_floor=float(vis.get("floor", 0.3)),
            max_steps=int(d.get("max_steps", 500)),
            view_mode=str(d.get("view_mode", "global")),
            capture_radius=float(d.get("capture_radius", 0.03)),
            waypoint_radius=float(d.get("waypoint_radius", 0.04)),
            start_region=float(d.get("start_region", 0.15)),
            pursuer_min_start_distance=float(d.get("pursuer_min_start_distance", 0.0)),
            max_obstacles=d.get("max_obstacles"),
            reward=RewardConstants(**d.get("reward", {})),
            pursuit=PursuitParams(**pursuit),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid world config: {exc}") from exc


def load_config(path_or_name: str | Path, **overrides: Any) -> WorldConfig:
    """Load a world config from a JSON file or a shipped preset name (``prisoner``, ``narco``)."""
    p = Path(path_or_name)
    if p.suffix == ".json" and p.exists():
        text = p.read_text()
    else:
        name = p.stem if p.suffix == ".json" else str(path_or_name)
        try:
            text = resources.files("evadelab.configs").joinpath(f"{name}.json").read_text()
        except FileNotFoundError as exc:
            raise ConfigError(f"no config file or preset named {path_or_name!r}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    d.update(overrides)
    return config_from_dict(d)


# -- detection model ------------------------------------------------------------


def detection_range(beta: float, visibility: float, speed: float, alpha: float, eta: float) -> float:
    """Radius ``alpha * (beta * visibility * speed + eta)`` inside which detection happens."""
    if speed < 0:
        raise UsageError("speed must be non-negative")
    if not 0.0 < visibility <= 1.0:
        raise UsageError("visibility must lie in (0, 1]")
    return alpha * (beta * visibility * speed + eta)


# -- state ----------------------------------------------------------------------


@dataclass(frozen=True)
class EvaderAction:
    heading: float
    speed: float  # fraction of max speed

    def clamped(self) -> "EvaderAction":
        h = float(self.heading)
        if not math.isfinite(h):
            h = 0.0
        h = max(-math.pi, min(math.pi, h))
        s = float(self.speed)
        s = 0.0 if not math.isfinite(s) else max(0.0, min(1.0, s))
        return EvaderAction(h, s)


@dataclass(frozen=True)
class StepEvents:
    detection_count: int = 0
    detected_by: tuple[str, ...] = ()
    goal_reached: bool = False
    timed_out: bool = False
    nearest_distance: float = math.inf
    nearest_visible: bool = False
    hideout_index: int = -1

    @property
    def detected(self) -> bool:
        return self.detection_count > 0


@dataclass(frozen=True)
class WorldState:
    t: int
    evader_pos: np.ndarray
    evader_speed: float  # last commanded speed (map units / step)
    pursuer_pos: np.ndarray  # (P, 2) dynamic pursuers
    pursuer_vel: np.ndarray  # (P, 2)
    hideouts: np.ndarray  # (hideouts_per_episode, 2)
    hideout_ids: tuple[int, ...]
    seed: int
    events: StepEvents = field(default_factory=StepEvents)

    @property
    def terminal(self) -> bool:
        return self.events.goal_reached or self.events.timed_out


def _free_point(config: WorldConfig, rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray,
                avoid: np.ndarray | None = None, min_dist: float = 0.0, tries: int = 1000) -> np.ndarray:
    for _ in range(tries):
        p = rng.uniform(lo, hi)
        if config.in_obstacle(p):
            continue
        if avoid is not None and min_dist > 0 and np.hypot(*(p - avoid)) < min_dist:
            continue
        return p
    raise ConfigError("could not find a free position in the requested region")


def start_region_bounds(config: WorldConfig) -> tuple[np.ndarray, np.ndarray]:
    corner = config.start_corner()
    s = config.start_region
    lo = np.where(corner > 0.5, 1.0 - s, 0.0)
    return lo, lo + s


def env_reset(config: WorldConfig, seed: int) -> WorldState:
    rng = np.random.default_rng(seed)
    lo, hi = start_region_bounds(config)
    evader = _free_point(config, rng, lo, hi)
    ids = rng.choice(len(config.hideouts), size=config.hideouts_per_episode, replace=False)
    pursuers = np.array(
        [
            _free_point(config, rng, np.zeros(2), np.ones(2), evader, config.pursuer_min_start_distance)
            for _ in config.team
        ]
    ).reshape(-1, 2)
    return WorldState(
        t=0,
        evader_pos=evader,
        evader_speed=0.0,
        pursuer_pos=pursuers,
        pursuer_vel=np.zeros_like(pursuers),
        hideouts=config.hideouts[ids].copy(),
        hideout_ids=tuple(int(i) for i in ids),
        seed=int(seed),
    )


def resolve_motion(config: WorldConfig, pos: np.ndarray, delta: np.ndarray, ground: bool = True) -> np.ndarray:
    """Move ``pos`` by ``delta``; slide out of mountains radially and clamp to the map."""
    new = np.clip(pos + delta, 0.0, 1.0)
    if ground and config.obstacles.size:
        for _ in range(4):
            moved = False
            for cx, cy, r in config.obstacles:
                dx, dy = new[0] - cx, new[1] - cy
                d = math.hypot(dx, dy)
                if d < r:
                    if d < 1e-12:
                        dx, dy, d = 1.0, 0.0, 1.0
                    scale = r * (1.0 + 1e-9) / d
                    new = np.array([cx + dx * scale, cy + dy * scale])
                    moved = True
            new = np.clip(new, 0.0, 1.0)
            if not moved:
                break
        if config.in_obstacle(new):
            # corner-clamping pushed us back in; stay put
            new = pos.copy()
    return new


def evaluate_detections(config: WorldConfig, evader: np.ndarray, speed: float, pursuers: np.ndarray) -> tuple[int, tuple[str, ...]]:
    vis = config.visibility_at(evader)
    count, kinds = 0, []
    cam = config.agent_types[config.camera_type]
    d_cam = detection_range(cam.beta, vis, speed, config.alpha, config.eta)
    for c in config.cameras:
        if math.hypot(c[0] - evader[0], c[1] - evader[1]) < d_cam:
            count += 1
            kinds.append(cam.name)
    for name, p in zip(config.team, pursuers):
        t = config.agent_types[name]
        if math.hypot(p[0] - evader[0], p[1] - evader[1]) < detection_range(t.beta, vis, speed, config.alpha, config.eta):
            count += 1
            kinds.append(name)
    return count, tuple(kinds)


def pursuer_visible(config: WorldConfig, evader: np.ndarray, pos: np.ndarray, vel: np.ndarray, type_name: str) -> bool:
    """Whether the evader sees a dynamic pursuer under the configured view mode."""
    if config.view_mode == "global":
        return True
    t = config.agent_types[type_name]
    d_e = detection_range(t.beta, config.visibility_at(pos), float(np.hypot(*vel)), config.alpha, config.eta)
    return math.hypot(pos[0] - evader[0], pos[1] - evader[1]) <= d_e


def env_step(config: WorldConfig, state: WorldState, action: EvaderAction,
             pursuit_actions: np.ndarray | None = None) -> tuple[WorldState, StepEvents]:
    if state.terminal:
        raise UsageError("cannot step a terminal state")
    a = action.clamped()
    speed = a.speed * config.evader_speed
    delta = np.array([math.cos(a.heading), math.sin(a.heading)]) * speed
    evader = resolve_motion(config, state.evader_pos, delta)

    n = config.n_dynamic
    cmds = np.zeros((n, 2)) if pursuit_actions is None else np.asarray(pursuit_actions, dtype=float).reshape(n, 2)
    new_pos = state.pursuer_pos.copy()
    new_vel = np.zeros_like(cmds)
    for k, name in enumerate(config.team):
        t = config.agent_types[name]
        v = cmds[k]
        norm = math.hypot(v[0], v[1])
        if norm > t.speed:
            v = v * (t.speed / norm)
        new_pos[k] = resolve_motion(config, state.pursuer_pos[k], v, ground=t.ground)
        new_vel[k] = v

    t_next = state.t + 1
    count, kinds = evaluate_detections(config, evader, speed, new_pos)
    d = np.hypot(*(state.hideouts - evader).T)
    goal = bool(np.any(d <= config.capture_radius))
    timeout = (not goal) and t_next >= config.max_steps
    nearest, visible = math.inf, False
    for k, name in enumerate(config.team):
        dk = math.hypot(new_pos[k][0] - evader[0], new_pos[k][1] - evader[1])
        if dk < nearest:
            nearest = dk
            visible = pursuer_visible(config, evader, new_pos[k], new_vel[k], name)
    events = StepEvents(count, kinds, goal, timeout, nearest, visible, int(np.argmin(d)) if goal else -1)
    new_state = replace(state, t=t_next, evader_pos=evader, evader_speed=speed,
                        pursuer_pos=new_pos, pursuer_vel=new_vel, events=events)
    return new_state, events


def observe(state: WorldState, config: WorldConfig) -> np.ndarray:
    """Flat evader observation; cameras never appear."""
    obs = np.zeros(config.observation_size)
    obs[0] = state.t / config.max_steps
    k = 1
    obs[k : k + 2 * len(state.hideouts)] = state.hideouts.ravel()
    k += 2 * config.hideouts_per_episode
    m = len(config.obstacles)
    obs[k : k + 3 * m] = config.obstacles.ravel()
    k += 3 * config.obstacle_slots
    obs[k : k + 2] = state.evader_pos
    obs[k + 2] = state.evader_speed / config.evader_speed
    k += 3
    for i, name in enumerate(config.team):
        pos, vel = state.pursuer_pos[i], state.pursuer_vel[i]
        if pursuer_visible(config, state.evader_pos, pos, vel, name):
            vmax = config.agent_types[name].speed
            obs[k : k + 5] = (1.0, pos[0], pos[1], vel[0] / vmax, vel[1] / vmax)
        k += 5
    return obs


def reward(events: StepEvents, evader_pos: Sequence[float], waypoint: Sequence[float],
           constants: RewardConstants, reached: bool) -> float:
    dist = math.hypot(evader_pos[0] - waypoint[0], evader_pos[1] - waypoint[1])
    return (constants.waypoint_gain * float(reached)
            - constants.distance_coef * dist
            - constants.detection_penalty * events.detection_count)


def observation_slices(config: WorldConfig) -> dict[str, slice]:
    k = 1 + 2 * config.hideouts_per_episode
    obst = slice(k, k + 3 * config.obstacle_slots)
    k += 3 * config.obstacle_slots
    return {
        "time": slice(0, 1),
        "hideouts": slice(1, 1 + 2 * config.hideouts_per_episode),
        "obstacles": obst,
        "evader": slice(k, k + 3),
        "pursuers": slice(k + 3, k + 3 + 5 * config.n_dynamic),
    }
