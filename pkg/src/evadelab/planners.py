"""Geometric planners and scripted evaders.

A* runs on an 8-connected occupancy grid rasterised from the mountain list;
RRT* runs in the continuous unit square.  Both return :class:`DensePath`
objects that :func:`downsample` turns into fixed-length :class:`WaypointPath`
records, the training corpus of the diffusion planner.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .env import EvaderAction, WorldConfig, detection_range, observation_slices, start_region_bounds
from .errors import NoPathError, UsageError

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class DensePath:
    points: np.ndarray  # (n, 2)

    @property
    def length(self) -> float:
        if len(self.points) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


@dataclass(frozen=True)
class WaypointPath:
    points: np.ndarray  # (N_w, 2)
    start: np.ndarray
    goal: np.ndarray
    obstacles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


# -- collision geometry -----------------------------------------------------------


def segment_clear(a: np.ndarray, b: np.ndarray, obstacles: np.ndarray, margin: float = 0.0) -> bool:
    """True when segment ``ab`` stays outside every circle (inflated by ``margin``)."""
    if not len(obstacles):
        return True
    c = obstacles[:, :2]
    r = obstacles[:, 2] + margin
    d = b - a
    dd = float(d @ d)
    if dd < 1e-18:
        t = np.zeros(len(c))
    else:
        t = np.clip(((c - a) @ d) / dd, 0.0, 1.0)
    closest = a + t[:, None] * d
    return bool(np.all(np.sum((closest - c) ** 2, axis=1) >= r * r))


def path_clear(points: np.ndarray, obstacles: np.ndarray, margin: float = 0.0) -> bool:
    return all(segment_clear(points[i], points[i + 1], obstacles, margin) for i in range(len(points) - 1))


def points_clear(points: np.ndarray, obstacles: np.ndarray) -> bool:
    if not len(obstacles):
        return True
    d = np.linalg.norm(points[:, None, :] - obstacles[None, :, :2], axis=2)
    return bool(np.all(d >= obstacles[None, :, 2]))


# -- A* ---------------------------------------------------------------------------

_MOVES = [(-1, -1, SQRT2), (-1, 0, 1.0), (-1, 1, SQRT2), (0, -1, 1.0), (0, 1, 1.0), (1, -1, SQRT2), (1, 0, 1.0), (1, 1, SQRT2)]


def astar_grid(blocked: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> tuple[list[tuple[int, int]], float]:
    """Cost-optimal 8-connected path on a boolean grid (``True`` = blocked).

    Returns ``(cells, cost)`` with straight moves costing 1 and diagonals sqrt(2).
    Diagonal moves may cut between two blocked orthogonal neighbours only if
    both are free.
    """
    n_r, n_c = blocked.shape
    for cell in (start, goal):
        if not (0 <= cell[0] < n_r and 0 <= cell[1] < n_c) or blocked[cell]:
            raise NoPathError(f"cell {cell} is blocked or outside the grid")
    if start == goal:
        return [start], 0.0

    def h(c: tuple[int, int]) -> float:
        dr, dc = abs(c[0] - goal[0]), abs(c[1] - goal[1])
        return (SQRT2 - 1.0) * min(dr, dc) + max(dr, dc)

    g = {start: 0.0}
    parent: dict[tuple[int, int], tuple[int, int]] = {}
    heap = [(h(start), 0.0, start)]
    closed = set()
    while heap:
        _, gc, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            cells = [cur]
            while cur in parent:
                cur = parent[cur]
                cells.append(cur)
            cells.reverse()
            return cells, path_cost_cells(cells)
        closed.add(cur)
        r, c = cur
        for dr, dc, w in _MOVES:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < n_r and 0 <= nc < n_c) or blocked[nr, nc]:
                continue
            if dr and dc and (blocked[r + dr, c] or blocked[r, c + dc]):
                continue
            nxt = (nr, nc)
            ng = gc + w
            if ng < g.get(nxt, math.inf) - 1e-12:
                g[nxt] = ng
                parent[nxt] = cur
                heapq.heappush(heap, (ng + h(nxt), ng, nxt))
    raise NoPathError("goal unreachable on grid", {"expanded": len(closed)})


def path_cost_cells(cells: list[tuple[int, int]]) -> float:
    """Path cost as (#straight) + (#diagonal) * sqrt(2), summed in a fixed order."""
    straight = sum(1 for a, b in zip(cells, cells[1:]) if abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1)
    diag = len(cells) - 1 - straight
    return straight + diag * SQRT2


def rasterize(config: WorldConfig, resolution: int = 64) -> np.ndarray:
    """Occupancy grid indexed ``[row=y, col=x]``; cells are inflated so that
    straight moves between free centres never touch a mountain."""
    h = 1.0 / resolution
    centers = (np.arange(resolution) + 0.5) * h
    xx, yy = np.meshgrid(centers, centers)
    blocked = np.zeros((resolution, resolution), dtype=bool)
    for cx, cy, r in config.obstacles:
        blocked |= np.hypot(xx - cx, yy - cy) < r + SQRT2 * 0.5 * h + 1e-9
    return blocked


def _to_cell(p: np.ndarray, resolution: int) -> tuple[int, int]:
    col = min(resolution - 1, max(0, int(p[0] * resolution)))
    row = min(resolution - 1, max(0, int(p[1] * resolution)))
    return row, col


def _nearest_free(blocked: np.ndarray, cell: tuple[int, int], p: np.ndarray, obstacles: np.ndarray) -> tuple[int, int]:
    if not blocked[cell]:
        return cell
    res = blocked.shape[0]
    free = np.argwhere(~blocked)
    centers = (free[:, ::-1] + 0.5) / res
    order = np.argsort(np.linalg.norm(centers - p, axis=1))
    for i in order[:64]:
        if segment_clear(p, centers[i], obstacles):
            return int(free[i, 0]), int(free[i, 1])
    return int(free[order[0], 0]), int(free[order[0], 1])


def astar(config: WorldConfig, start: np.ndarray, goal: np.ndarray, resolution: int = 64) -> DensePath:
    start, goal = np.asarray(start, float), np.asarray(goal, float)
    if config.in_obstacle(start) or config.in_obstacle(goal):
        raise NoPathError("start or goal inside a mountain")
    if np.allclose(start, goal):
        return DensePath(start[None, :].copy())
    blocked = rasterize(config, resolution)
    s = _nearest_free(blocked, _to_cell(start, resolution), start, config.obstacles)
    g = _nearest_free(blocked, _to_cell(goal, resolution), goal, config.obstacles)
    cells, _ = astar_grid(blocked, s, g)
    pts = np.array([[(c + 0.5) / resolution, (r + 0.5) / resolution] for r, c in cells])
    pts = np.vstack([start, pts, goal])
    return DensePath(_shortcut_ends(pts))


def _shortcut_ends(pts: np.ndarray) -> np.ndarray:
    keep = [pts[0]]
    for p in pts[1:]:
        if np.linalg.norm(p - keep[-1]) > 1e-12:
            keep.append(p)
    return np.array(keep)


# -- RRT* -------------------------------------------------------------------------


@dataclass(frozen=True)
class RRTParams:
    iterations: int = 1500
    step: float = 0.05
    goal_bias: float = 0.05
    gamma: float = 0.4
    goal_tolerance: float = 0.05
    clearance: float = 0.0


def rrt_star(config: WorldConfig, start: np.ndarray, goal: np.ndarray, iterations: int | None = None,
             seed: int = 0, params: RRTParams | None = None,
             region: tuple[np.ndarray, np.ndarray] | None = None) -> DensePath:
    """Continuous RRT* from ``start`` to ``goal`` inside the unit square.

    The rewiring radius is ``gamma * sqrt(log n / n)``, floored at one steering
    step so that rewiring never stops at large ``n``.
    """
    params = params or RRTParams()
    n_iter = params.iterations if iterations is None else iterations
    if n_iter < 1:
        raise UsageError("iterations must be >= 1")
    start, goal = np.asarray(start, float), np.asarray(goal, float)
    if config.in_obstacle(start) or config.in_obstacle(goal):
        raise NoPathError("start or goal inside a mountain")
    if np.allclose(start, goal):
        return DensePath(start[None, :].copy())
    obst = config.obstacles.copy()
    if params.clearance > 0 and len(obst):
        # inflate only as far as the endpoints allow
        gap = np.min(np.stack([np.hypot(*(obst[:, :2] - p).T) - obst[:, 2] for p in (start, goal)]), axis=0)
        obst[:, 2] += np.clip(np.minimum(params.clearance, gap - 1e-6), 0.0, None)
    rng = np.random.default_rng(seed)
    lo, hi = region if region is not None else (np.zeros(2), np.ones(2))

    cap = n_iter + 2
    nodes = np.empty((cap, 2))
    cost = np.empty(cap)
    parent = np.full(cap, -1, dtype=np.int64)
    nodes[0], cost[0] = start, 0.0
    n = 1
    for _ in range(n_iter):
        sample = goal if rng.random() < params.goal_bias else rng.uniform(lo, hi)
        d = np.sum((nodes[:n] - sample) ** 2, axis=1)
        near_i = int(np.argmin(d))
        dist = math.sqrt(d[near_i])
        if dist < 1e-12:
            continue
        new = nodes[near_i] + (sample - nodes[near_i]) * min(1.0, params.step / dist)
        if not segment_clear(nodes[near_i], new, obst):
            continue
        radius = max(params.gamma * math.sqrt(math.log(n + 1) / (n + 1)), params.step)
        dn = np.sqrt(np.sum((nodes[:n] - new) ** 2, axis=1))
        near = np.flatnonzero(dn <= radius)
        best_i, best_c = near_i, cost[near_i] + float(np.linalg.norm(new - nodes[near_i]))
        ok = {}
        for j in near[np.argsort(cost[near] + dn[near])]:
            cj = cost[j] + dn[j]
            if cj >= best_c:
                break
            clear = segment_clear(nodes[j], new, obst)
            ok[int(j)] = clear
            if clear:
                best_i, best_c = int(j), cj
                break
        nodes[n], cost[n], parent[n] = new, best_c, best_i
        for j in near:
            j = int(j)
            if j == best_i:
                continue
            cj = best_c + dn[j]
            if cj < cost[j] - 1e-12 and ok.get(j, None) is not False and segment_clear(new, nodes[j], obst):
                delta = cost[j] - cj
                parent[j] = n
                _propagate(parent, cost, j, delta, n)
        n += 1

    dg = np.sqrt(np.sum((nodes[:n] - goal) ** 2, axis=1))
    cand = np.flatnonzero(dg <= params.goal_tolerance + 1e-12)
    best, best_c = -1, math.inf
    for j in cand[np.argsort(cost[cand] + dg[cand])]:
        if segment_clear(nodes[j], goal, obst):
            best, best_c = int(j), cost[j] + dg[j]
            break
    if best < 0:
        raise NoPathError("RRT* did not connect to the goal", {"nodes": n, "iterations": n_iter})
    chain = [goal]
    j = best
    while j >= 0:
        chain.append(nodes[j].copy())
        j = int(parent[j])
    return DensePath(_shortcut_ends(np.array(chain[::-1])))


def _propagate(parent: np.ndarray, cost: np.ndarray, root: int, delta: float, n: int) -> None:
    cost[root] -= delta
    stack = [root]
    while stack:
        p = stack.pop()
        for k in np.flatnonzero(parent[:n] == p):
            cost[k] -= delta
            stack.append(int(k))


# -- downsampling -----------------------------------------------------------------


def downsample(path: DensePath, n_waypoints: int, obstacles: np.ndarray | None = None) -> WaypointPath:
    """Resample ``path`` at uniform arc-length fractions ``0, 1/(N-1), ..., 1``."""
    if n_waypoints < 2:
        raise UsageError("need at least two waypoints")
    pts = np.asarray(path.points, dtype=float)
    obstacles = np.zeros((0, 3)) if obstacles is None else obstacles
    if len(pts) == 1 or path.length < 1e-15:
        out = np.repeat(pts[:1], n_waypoints, axis=0)
        out[-1] = pts[-1]
        return WaypointPath(out, pts[0].copy(), pts[-1].copy(), obstacles)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, s[-1], n_waypoints)
    out = np.column_stack([np.interp(targets, s, pts[:, 0]), np.interp(targets, s, pts[:, 1])])
    out[0], out[-1] = pts[0], pts[-1]
    return WaypointPath(out, pts[0].copy(), pts[-1].copy(), obstacles)


# -- dataset generation -------------------------------------------------------------


def dataset_record(config: WorldConfig, index: int, seed: int, n_waypoints: int, iterations: int,
                   start_fraction: float = 0.8, clearance: float = 0.03, attempts: int = 5) -> dict:
    """One corpus record: RRT* between a start and a candidate hideout, downsampled.

    Planning uses mountains inflated by ``clearance`` so that the straight chords
    between downsampled waypoints stay clear; a record whose chords still clip a
    mountain is re-planned with a fresh seed.
    """
    rng = np.random.default_rng([seed, index])
    lo, hi = start_region_bounds(config)
    for _ in range(100):
        if rng.random() < start_fraction:
            p_s = rng.uniform(lo, hi)
        else:
            p_s = rng.uniform(0.0, 1.0, size=2)
        if not config.in_obstacle(p_s, margin=0.01):
            break
    else:  # pragma: no cover - config validated upstream
        raise NoPathError("no free start position")
    p_g = config.hideouts[int(rng.integers(len(config.hideouts)))]
    params = RRTParams(iterations=iterations, clearance=clearance)
    for _ in range(attempts):
        path = rrt_star(config, p_s, p_g, seed=int(rng.integers(2**31)), params=params)
        wp = downsample(path, n_waypoints, config.obstacles)
        if path_clear(wp.points, config.obstacles):
            break
    else:
        raise NoPathError("downsampled path clips a mountain", {"index": index})
    return {
        "index": index,
        "p_s": wp.start.tolist(),
        "p_g": wp.goal.tolist(),
        "obstacles": config.digest(),
        "waypoints": wp.points.tolist(),
    }


# -- velocity-obstacle baseline -------------------------------------------------------


def visible_pursuers(observation: np.ndarray, config: WorldConfig) -> list[tuple[np.ndarray, np.ndarray, str]]:
    sl = observation_slices(config)
    block = observation[sl["pursuers"]].reshape(-1, 5)
    out = []
    for (flag, x, y, vx, vy), name in zip(block, config.team):
        if flag > 0.5:
            vmax = config.agent_types[name].speed
            out.append((np.array([x, y]), np.array([vx, vy]) * vmax, name))
    return out


def _time_to_conflict(rel_pos: np.ndarray, rel_vel: np.ndarray, radius: float) -> np.ndarray:
    """Earliest t >= 0 with ``|rel_pos - rel_vel * t| <= radius`` for each candidate row."""
    a = np.sum(rel_vel * rel_vel, axis=1)
    b = -2.0 * (rel_vel @ rel_pos)
    c = float(rel_pos @ rel_pos) - radius * radius
    if c <= 0:
        # already inside: prefer velocities that leave fastest (larger separation rate)
        return 1e6 + b * 1e3
    disc = b * b - 4 * a * c
    t = np.full(len(rel_vel), np.inf)
    ok = (disc >= 0) & (a > 1e-18)
    root = (-b[ok] - np.sqrt(disc[ok])) / (2 * a[ok])
    t[ok] = np.where(root >= 0, root, np.inf)
    return t


def vo_candidates(n_headings: int = 64, speeds: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    headings = np.linspace(-math.pi, math.pi, n_headings, endpoint=False)
    hh, ss = np.meshgrid(headings, speeds, indexing="ij")
    return hh.ravel(), ss.ravel()


def vo_action(observation: np.ndarray, goal: np.ndarray, config: WorldConfig,
              n_headings: int = 64, speeds: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0),
              horizon: float = 40.0) -> EvaderAction:
    """Velocity closest to straight-to-goal outside every visible pursuer's velocity obstacle.

    Conflicts further than ``horizon`` steps away are ignored; when every
    candidate conflicts sooner, the one with the latest conflict wins.
    """
    sl = observation_slices(config)
    pos = observation[sl["evader"]][:2]
    to_goal = np.asarray(goal, float) - pos
    dist_goal = float(np.hypot(*to_goal))
    pref_heading = math.atan2(to_goal[1], to_goal[0]) if dist_goal > 1e-12 else 0.0
    pref = np.array([math.cos(pref_heading), math.sin(pref_heading)]) * config.evader_speed
    others = visible_pursuers(observation, config)
    if not others:
        return EvaderAction(pref_heading, 1.0)
    hh, ss = vo_candidates(n_headings, speeds)
    vel = np.column_stack([np.cos(hh), np.sin(hh)]) * (ss * config.evader_speed)[:, None]
    ttc = np.full(len(vel), np.inf)
    for p, v, name in others:
        t = config.agent_types[name]
        radius = detection_range(t.beta, 1.0, config.evader_speed, config.alpha, config.eta)
        ttc = np.minimum(ttc, _time_to_conflict(p - pos, vel - v, radius))
    feasible = ttc > horizon
    if np.any(feasible):
        idx = np.flatnonzero(feasible)
        k = int(idx[np.argmin(np.linalg.norm(vel[idx] - pref, axis=1))])
    else:
        best = np.max(ttc)
        idx = np.flatnonzero(ttc >= best - 1e-9)
        k = int(idx[np.argmin(np.linalg.norm(vel[idx] - pref, axis=1))])
    return EvaderAction(float(hh[k]), float(ss[k]))


def vo_cone_half_angle(distance: float, radius: float) -> float:
    return math.asin(min(1.0, radius / distance))


# -- scripted adversarial path follower ---------------------------------------------------


class ScriptedEvader:
    """Follows a dense path at full speed; when a pursuer shows up inside the
    trigger radius it heads for the least visible nearby point at half speed
    for ``hold_steps`` steps, then rejoins the path."""

    def __init__(self, config: WorldConfig, path: DensePath, rng: np.random.Generator,
                 trigger_radius: float = 0.2, hold_steps: int = 15, hide_radius: float = 0.1,
                 hide_samples: int = 16, reach: float = 0.01):
        self.config = config
        self.points = np.asarray(path.points, float)
        self.rng = rng
        self.trigger_radius = trigger_radius
        self.hold_steps = hold_steps
        self.hide_radius = hide_radius
        self.hide_samples = hide_samples
        self.reach = reach
        self.index = 1 if len(self.points) > 1 else 0
        self.evading = 0
        self.hide_target: np.ndarray | None = None

    def act(self, observation: np.ndarray) -> EvaderAction:
        sl = observation_slices(self.config)
        pos = observation[sl["evader"]][:2]
        threat = any(np.hypot(*(p - pos)) <= self.trigger_radius for p, _, _ in visible_pursuers(observation, self.config))
        if threat:
            if self.evading == 0 or self.hide_target is None:
                self.hide_target = self._hide_point(pos)
            self.evading = self.hold_steps
        if self.evading > 0:
            self.evading -= 1
            if self.evading == 0:
                rest = self.points[self.index:]
                self.index += int(np.argmin(np.linalg.norm(rest - pos, axis=1)))
            return _steer(pos, self.hide_target, 0.5, self.config.evader_speed)
        while self.index < len(self.points) - 1 and np.hypot(*(self.points[self.index] - pos)) <= max(self.reach, 1e-9):
            self.index += 1
        return _steer(pos, self.points[self.index], 1.0, self.config.evader_speed)

    def _hide_point(self, pos: np.ndarray) -> np.ndarray:
        ang = self.rng.uniform(-math.pi, math.pi, self.hide_samples)
        rad = self.hide_radius * np.sqrt(self.rng.uniform(0.0, 1.0, self.hide_samples))
        cand = np.clip(pos + np.column_stack([np.cos(ang), np.sin(ang)]) * rad[:, None], 0.0, 1.0)
        cand = np.vstack([pos, cand])
        free = [c for c in cand if not self.config.in_obstacle(c)]
        vis = [self.config.visibility_at(c) for c in free]
        return free[int(np.argmin(vis))]


def scripted_evader_action(observation: np.ndarray, follower: ScriptedEvader) -> EvaderAction:
    return follower.act(observation)


def _steer(pos: np.ndarray, target: np.ndarray, fraction: float, vmax: float) -> EvaderAction:
    d = target - pos
    n = float(np.hypot(*d))
    if n < 1e-12:
        return EvaderAction(0.0, 0.0)
    return EvaderAction(math.atan2(d[1], d[0]), min(fraction, n / vmax))
