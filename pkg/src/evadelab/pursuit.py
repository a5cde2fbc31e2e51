"""Heuristic pursuit team: intercept, predicted-path search, vicinity spiral, patrol.

Mode is chosen from the age of the team's last detection:

* ``age < intercept_age``: head to the last detection at full speed.
* ``age < predict_age`` (with two or more detections on record): head to the
  point the evader would reach if it kept its last heading at full speed.
* ``age < vicinity_age``: sweep an Archimedean spiral around the last detection.
* otherwise, or with no detection at all: walk the patrol loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .env import WorldConfig

INTERCEPT, PREDICT, VICINITY, PATROL = "intercept", "predicted-path", "vicinity", "patrol"
HISTORY = 8


@dataclass
class PursuitMemory:
    last_detection: tuple[np.ndarray, int] | None = None
    history: list[tuple[int, np.ndarray]] = field(default_factory=list)
    modes: list[str] = field(default_factory=list)
    spiral_theta: list[float] = field(default_factory=list)
    patrol_index: list[int] = field(default_factory=list)

    @classmethod
    def fresh(cls, n_agents: int) -> "PursuitMemory":
        return cls(modes=[PATROL] * n_agents, spiral_theta=[0.0] * n_agents, patrol_index=[-1] * n_agents)

    def copy(self) -> "PursuitMemory":
        return PursuitMemory(
            None if self.last_detection is None else (self.last_detection[0].copy(), self.last_detection[1]),
            [(t, p.copy()) for t, p in self.history],
            list(self.modes),
            list(self.spiral_theta),
            list(self.patrol_index),
        )

    def record(self, pos: np.ndarray, t: int) -> None:
        pos = np.asarray(pos, dtype=float).copy()
        self.last_detection = (pos, t)
        if self.history and self.history[-1][0] == t:
            self.history[-1] = (t, pos)
        else:
            self.history.append((t, pos))
        del self.history[:-HISTORY]


def select_mode(memory: PursuitMemory, t: int, config: WorldConfig) -> str:
    if memory.last_detection is None:
        return PATROL
    age = t - memory.last_detection[1]
    p = config.pursuit
    if age < p.intercept_age:
        return INTERCEPT
    if age < p.predict_age and len(memory.history) >= 2:
        return PREDICT
    if age < p.vicinity_age:
        return VICINITY
    return PATROL


def predicted_target(memory: PursuitMemory, t: int, evader_speed: float) -> np.ndarray:
    """Last detection extrapolated along the most recent detection heading."""
    pos, t0 = memory.last_detection  # type: ignore[misc]
    prev = memory.history[-2][1]
    step = memory.history[-1][1] - prev
    n = math.hypot(step[0], step[1])
    if n < 1e-12:
        return pos.copy()
    target = pos + step / n * (t - t0) * evader_speed
    return np.clip(target, 0.0, 1.0)


def _toward(src: np.ndarray, dst: np.ndarray, vmax: float) -> np.ndarray:
    d = dst - src
    n = math.hypot(d[0], d[1])
    if n < 1e-12:
        return np.zeros(2)
    return d * (min(vmax, n) / n)


def pursuit_step(memory: PursuitMemory, positions: np.ndarray, detections: list[np.ndarray], t: int,
                 config: WorldConfig) -> tuple[np.ndarray, PursuitMemory]:
    """Velocity commands for every dynamic pursuer for the step after ``t``.

    ``detections`` holds the evader positions reported by any team member
    (cameras included) at timestep ``t``.
    """
    mem = memory.copy()
    for pos in detections:
        mem.record(pos, t)
    p = config.pursuit
    patrol = np.asarray(p.patrol, dtype=float)
    n = len(config.team)
    cmds = np.zeros((n, 2))
    mode = select_mode(mem, t, config)
    for k, name in enumerate(config.team):
        vmax = config.agent_types[name].speed
        q = positions[k]
        prev_mode = mem.modes[k]
        mem.modes[k] = mode
        if mode == INTERCEPT:
            target = mem.last_detection[0]  # type: ignore[index]
        elif mode == PREDICT:
            target = predicted_target(mem, t, config.evader_speed)
        elif mode == VICINITY:
            if prev_mode != VICINITY:
                mem.spiral_theta[k] = 0.0
            theta = mem.spiral_theta[k]
            b = p.spiral_pitch / (2.0 * math.pi)
            r = b * theta
            theta += vmax / math.sqrt(r * r + b * b)
            mem.spiral_theta[k] = theta
            phase = 2.0 * math.pi * k / n
            center = mem.last_detection[0]  # type: ignore[index]
            target = np.clip(center + b * theta * np.array([math.cos(theta + phase), math.sin(theta + phase)]), 0.0, 1.0)
        else:
            idx = mem.patrol_index[k]
            if idx < 0 or prev_mode != PATROL:
                idx = int(np.argmin(np.hypot(*(patrol - q).T)))
            if math.hypot(*(patrol[idx] - q)) <= vmax:
                idx = (idx + (1 if k % 2 == 0 else -1)) % len(patrol)
            mem.patrol_index[k] = idx
            target = patrol[idx]
        cmds[k] = _toward(q, target, vmax)
    return cmds, mem
