"""Stateful episode driver pairing the world with the pursuit heuristic."""

from __future__ import annotations

import numpy as np

from .env import EvaderAction, StepEvents, WorldConfig, WorldState, env_reset, env_step, observe
from .errors import UsageError
from .pursuit import PursuitMemory, pursuit_step


class Simulator:
    """Runs one episode at a time; ``reset`` must precede ``step``."""

    def __init__(self, config: WorldConfig):
        self.config = config
        self.state: WorldState | None = None
        self.memory: PursuitMemory | None = None
        self._commands: np.ndarray | None = None

    def reset(self, seed: int) -> np.ndarray:
        self.state = env_reset(self.config, seed)
        self.memory = PursuitMemory.fresh(self.config.n_dynamic)
        self._commands, self.memory = pursuit_step(self.memory, self.state.pursuer_pos, [], 0, self.config)
        return observe(self.state, self.config)

    @property
    def done(self) -> bool:
        return self.state is not None and self.state.terminal

    @property
    def modes(self) -> list[str]:
        return list(self.memory.modes) if self.memory else []

    def step(self, action: EvaderAction) -> tuple[np.ndarray, StepEvents]:
        if self.state is None:
            raise UsageError("call reset() before step()")
        self.state, events = env_step(self.config, self.state, action, self._commands)
        detections = [self.state.evader_pos] if events.detected else []
        self._commands, self.memory = pursuit_step(
            self.memory, self.state.pursuer_pos, detections, self.state.t, self.config
        )
        return observe(self.state, self.config), events
