"""Detection-risk costmap built from close encounters, and path selection on it.

Grids are indexed ``[row, col] = [y, x]`` over the unit square with cell
centres at ``(i + 0.5) / R``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import WorldConfig
from .errors import AllForbiddenError, ConfigError, UsageError
from .planners import WaypointPath

log = logging.getLogger(__name__)

FORBIDDEN = "forbidden"
DEFAULT_RESOLUTION = 128
DEFAULT_SIGMA = 0.02
RISK_FACTOR = 1.5


@dataclass(frozen=True)
class Zone:
    """Ad-hoc overlay: ``circle`` with (cx, cy, r) or ``rectangle`` with (x0, y0, x1, y1)."""

    shape: str
    params: tuple[float, ...]
    value: float | str

    def __post_init__(self) -> None:
        if self.shape == "circle":
            if len(self.params) != 3:
                raise UsageError("circle zone needs (cx, cy, r)")
            cx, cy, r = self.params
            if r <= 0 or not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
                raise UsageError(f"circle zone outside the map extent: {self.params}")
        elif self.shape == "rectangle":
            if len(self.params) != 4:
                raise UsageError("rectangle zone needs (x0, y0, x1, y1)")
            x0, y0, x1, y1 = self.params
            if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
                raise UsageError(f"rectangle zone outside the map extent: {self.params}")
        else:
            raise UsageError(f"unknown zone shape {self.shape!r}")
        if self.value != FORBIDDEN:
            if isinstance(self.value, str) or not (float(self.value) >= 0.0 and math.isfinite(float(self.value))):
                raise UsageError(f"zone value must be a non-negative number or {FORBIDDEN!r}")

    def mask(self, resolution: int) -> np.ndarray:
        c = (np.arange(resolution) + 0.5) / resolution
        xx, yy = np.meshgrid(c, c)
        if self.shape == "circle":
            cx, cy, r = self.params
            return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        x0, y0, x1, y1 = self.params
        return (xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "params": list(self.params), "value": self.value}

    @classmethod
    def from_dict(cls, d: dict) -> "Zone":
        try:
            value = d["value"] if d["value"] == FORBIDDEN else float(d["value"])
            return cls(str(d["shape"]), tuple(float(v) for v in d["params"]), value)
        except (KeyError, TypeError) as exc:
            raise UsageError(f"malformed zone entry {d!r}") from exc


def load_zones(path: str | Path) -> list[Zone]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"zones file not found: {p}")
    data = json.loads(p.read_text())
    items = data["zones"] if isinstance(data, dict) else data
    return [Zone.from_dict(z) for z in items]


@dataclass
class Costmap:
    """Normalized base grid plus overlay zones; ``grid()`` gives the effective costs."""

    base: np.ndarray
    eps_risk: float
    sigma: float
    zones: tuple[Zone, ...] = ()
    deposits: int = 0
    episodes: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def resolution(self) -> int:
        return int(self.base.shape[0])

    @property
    def flagged(self) -> bool:
        """True when no deposit was made, so the base is identically zero."""
        return self.deposits == 0

    def grid(self) -> np.ndarray:
        """Base with zones written on top; forbidden cells hold ``inf``."""
        g = self.base.copy()
        for z in self.zones:
            g[z.mask(self.resolution)] = math.inf if z.value == FORBIDDEN else float(z.value)
        return g

    def scaled(self, factor: float) -> "Costmap":
        return Costmap(self.base * factor, self.eps_risk, self.sigma, self.zones, self.deposits, self.episodes,
                       dict(self.meta))

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "resolution": self.resolution,
            "extent": [0.0, 1.0, 0.0, 1.0],
            "values": [float(v) for v in self.base.ravel()],
            "zones": [z.to_dict() for z in self.zones],
            "eps_risk": self.eps_risk,
            "sigma": self.sigma,
            "deposits": self.deposits,
            "episodes": self.episodes,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Costmap":
        r = int(d["resolution"])
        values = np.asarray(d["values"], float)
        if values.size != r * r:
            raise ConfigError(f"costmap holds {values.size} values, expected {r * r}")
        return cls(values.reshape(r, r), float(d["eps_risk"]), float(d["sigma"]),
                   tuple(Zone.from_dict(z) for z in d.get("zones", [])), int(d.get("deposits", 0)),
                   int(d.get("episodes", 0)), dict(d.get("meta", {})))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Costmap":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"costmap not found: {p}")
        return cls.from_dict(json.loads(p.read_text()))


class DepositGrid:
    """Unnormalized sum of Gaussian deposits; grids merge by addition."""

    def __init__(self, resolution: int = DEFAULT_RESOLUTION, sigma: float = DEFAULT_SIGMA):
        if resolution < 2 or sigma <= 0:
            raise UsageError("resolution must be >= 2 and sigma positive")
        self.resolution = resolution
        self.sigma = sigma
        self.values = np.zeros((resolution, resolution))
        self.count = 0
        self._centres = (np.arange(resolution) + 0.5) / resolution
        # window half-width in cells; mass beyond 5 sigma is below 4e-6
        self._half = int(math.ceil(5.0 * sigma * resolution))

    def add(self, point: Sequence[float]) -> None:
        x, y = float(point[0]), float(point[1])
        r = self.resolution
        ci, cj = int(y * r), int(x * r)
        i0, i1 = max(0, ci - self._half), min(r, ci + self._half + 1)
        j0, j1 = max(0, cj - self._half), min(r, cj + self._half + 1)
        gy = np.exp(-((self._centres[i0:i1] - y) ** 2) / (2 * self.sigma**2))
        gx = np.exp(-((self._centres[j0:j1] - x) ** 2) / (2 * self.sigma**2))
        self.values[i0:i1, j0:j1] += np.outer(gy, gx)
        self.count += 1

    def merge(self, other: "DepositGrid") -> "DepositGrid":
        if other.resolution != self.resolution or other.sigma != self.sigma:
            raise UsageError("cannot merge deposit grids of different shape or sigma")
        out = DepositGrid(self.resolution, self.sigma)
        out.values = self.values + other.values
        out.count = self.count + other.count
        return out

    def finalize(self, eps_risk: float, episodes: int = 0, meta: dict | None = None) -> Costmap:
        peak = float(self.values.max())
        base = self.values / peak if peak > 0 else self.values.copy()
        return Costmap(base, eps_risk, self.sigma, (), self.count, episodes, dict(meta or {}))


def default_eps_risk(config: WorldConfig) -> float:
    """1.5 times the search-party detection radius at full evader speed in the open."""
    ground = [n for n in config.team if config.agent_types[n].ground] or list(config.team)
    return RISK_FACTOR * config.base_detection_radius(ground[0])


def build_costmap(config: WorldConfig, artifacts, episodes: int, eps_risk: float | None = None,
                  sigma: float = DEFAULT_SIGMA, seed: int = 0, resolution: int = DEFAULT_RESOLUTION,
                  mode: str = "stochastic", policy: str = "diffusion-rl") -> Costmap:
    """Roll out the learned hierarchy and deposit a Gaussian at the evader
    whenever the nearest dynamic pursuer is closer than ``eps_risk`` and in view.

    ``artifacts`` is a :class:`~evadelab.policies.PolicyArtifacts` carrying the
    diffusion model and low-level agent.
    """
    from dataclasses import replace

    from .policies import rollout

    if episodes < 0:
        raise UsageError("episode count must be >= 0")
    eps = default_eps_risk(config) if eps_risk is None else float(eps_risk)
    grid = DepositGrid(resolution, sigma)
    # construction episodes head for a uniformly drawn active hideout so the map covers
    # every route the selector may later choose between
    arts = replace(artifacts, action_mode=mode, goal_rule="random")
    seeds = np.random.default_rng([seed, 4]).integers(2**31, size=episodes)

    def hook(state, action, events) -> None:
        if events.nearest_distance < eps and events.nearest_visible:
            grid.add(state.evader_pos)

    for s in seeds:
        rollout(config, policy, int(s), arts, on_step=hook)
    if grid.count == 0:
        log.warning("costmap received no deposits over %d episodes", episodes)
    return grid.finalize(eps, episodes, {"config_digest": config.digest(), "seed": seed, "mode": mode})


def adjust(cmap: Costmap, zones: Sequence[Zone]) -> Costmap:
    """Return a copy with ``zones`` appended to the overlay list."""
    for z in zones:
        if not isinstance(z, Zone):
            raise UsageError("zones must be Zone instances")
    return Costmap(cmap.base.copy(), cmap.eps_risk, cmap.sigma, tuple(cmap.zones) + tuple(zones), cmap.deposits,
                   cmap.episodes, dict(cmap.meta))


def bilinear(grid: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Bilinear lookup at cell centres, clamped at the border.

    A sample touching an ``inf`` cell with positive weight evaluates to ``inf``.
    """
    r = grid.shape[0]
    u = np.clip(pts[:, 0] * r - 0.5, 0.0, r - 1.0)
    v = np.clip(pts[:, 1] * r - 0.5, 0.0, r - 1.0)
    j0 = np.minimum(np.floor(u).astype(int), r - 2)
    i0 = np.minimum(np.floor(v).astype(int), r - 2)
    fu, fv = u - j0, v - i0
    corners = ((i0, j0, (1 - fv) * (1 - fu)), (i0, j0 + 1, (1 - fv) * fu),
               (i0 + 1, j0, fv * (1 - fu)), (i0 + 1, j0 + 1, fv * fu))
    out = np.zeros(len(pts))
    for i, j, w in corners:
        g = grid[i, j]
        hit = w > 0
        out[hit] += np.where(np.isinf(g[hit]), np.inf, w[hit] * np.where(np.isinf(g[hit]), 0.0, g[hit]))
    return out


def path_samples(points: np.ndarray, step: float) -> tuple[np.ndarray, float]:
    """Midpoints of equal arc-length pieces no longer than ``step`` and the piece length."""
    pts = np.asarray(points, float)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = float(s[-1])
    if total <= 0:
        return pts[:1], 0.0
    n = max(1, int(math.ceil(total / step)))
    q = (np.arange(n) + 0.5) * (total / n)
    return np.column_stack([np.interp(q, s, pts[:, 0]), np.interp(q, s, pts[:, 1])]), total / n


def path_cost(cmap: Costmap, path: WaypointPath | np.ndarray, grid: np.ndarray | None = None) -> float:
    """Line integral of the effective grid along the polyline; ``inf`` through forbidden cells."""
    pts = path.points if isinstance(path, WaypointPath) else np.asarray(path, float)
    g = cmap.grid() if grid is None else grid
    samples, ds = path_samples(pts, 0.5 / cmap.resolution)
    vals = bilinear(g, samples)
    if np.any(np.isinf(vals)):
        return math.inf
    return float(np.sum(vals) * ds)


def select_path(cmap: Costmap, candidates: Sequence[WaypointPath]) -> tuple[int, WaypointPath]:
    """Lowest-cost candidate; the first one wins ties."""
    if len(candidates) == 0:
        raise UsageError("select_path needs at least one candidate")
    g = cmap.grid()
    costs = [path_cost(cmap, c, g) for c in candidates]
    k = int(np.argmin(costs))
    if math.isinf(costs[k]):
        raise AllForbiddenError("every candidate path crosses a forbidden zone")
    return k, candidates[k]


def camera_concentration(cmap: Costmap, cameras: np.ndarray, radius: float) -> float:
    """Share of base mass within ``radius`` of any camera over the share of area there.

    Returns 0 for an empty map.
    """
    r = cmap.resolution
    c = (np.arange(r) + 0.5) / r
    xx, yy = np.meshgrid(c, c)
    near = np.zeros((r, r), bool)
    for cx, cy in np.asarray(cameras, float):
        near |= (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius
    total = float(cmap.base.sum())
    if total <= 0 or not near.any():
        return 0.0
    return float(cmap.base[near].sum() / total) / float(near.mean())
