"""Denoising diffusion model over fixed-length waypoint paths.

Paths live in map coordinates ``[0, 1]^2`` but the model sees them rescaled
to ``[-1, 1]``.  Sampling is ancestral with the fixed posterior variance and
re-applies the start/goal/mountain constraints after every denoising step.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, TrainingError, UsageError
from .numerics import AdamState, DenseNet, adam_step, net_from_dict, net_to_dict
from .planners import WaypointPath

log = logging.getLogger(__name__)

TIME_EMBED = 16
OBSTACLE_MARGIN = 0.05


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step terms indexed ``1..T``; index 0 holds the ``alpha_bar = 1`` boundary."""

    steps: int
    kind: str
    betas: np.ndarray  # length T + 1, betas[0] = 0
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_var: np.ndarray

    def to_dict(self) -> dict:
        return {"steps": self.steps, "kind": self.kind, "betas": self.betas[1:].tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return schedule_from_betas(np.asarray(d["betas"], dtype=float), d.get("kind", "custom"))


def schedule_from_betas(betas: Sequence[float], kind: str = "custom") -> NoiseSchedule:
    b = np.asarray(betas, dtype=float)
    if b.ndim != 1 or len(b) < 1:
        raise UsageError("need at least one diffusion step")
    if np.any(b <= 0) or np.any(b >= 1):
        raise UsageError("betas must lie in (0, 1)")
    betas_full = np.concatenate([[0.0], b])
    alphas = 1.0 - betas_full
    alpha_bars = np.cumprod(alphas)
    post = np.zeros_like(betas_full)
    post[1:] = betas_full[1:] * (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:])
    return NoiseSchedule(len(b), kind, betas_full, alphas, alpha_bars, post)


def make_schedule(steps: int, kind: str = "cosine", beta_start: float | None = None,
                  beta_end: float | None = None, offset: float = 0.008) -> NoiseSchedule:
    """Linear or squared-cosine noise schedule with ``steps`` denoising steps."""
    if steps < 1:
        raise UsageError("steps must be >= 1")
    if kind == "linear":
        scale = 1000.0 / steps
        lo = 1e-4 * scale if beta_start is None else beta_start
        hi = min(0.02 * scale, 0.999) if beta_end is None else beta_end
        betas = np.linspace(lo, hi, steps)
    elif kind == "cosine":
        i = np.arange(steps + 1, dtype=float)
        f = np.cos(((i / steps) + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
    else:
        raise UsageError(f"unknown schedule kind {kind!r}")
    return schedule_from_betas(betas, kind)


def forward_noise(tau0: np.ndarray, i: int | np.ndarray, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_i) * tau0 + sqrt(1 - abar_i) * eps``."""
    ab = schedule.alpha_bars[np.asarray(i)]
    if np.ndim(ab):
        ab = ab[:, None]
    return np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * eps


def forward_noise_abar(tau0: np.ndarray, abar: float, eps: np.ndarray) -> np.ndarray:
    return math.sqrt(abar) * np.asarray(tau0) + math.sqrt(1.0 - abar) * np.asarray(eps)


def time_embedding(i: np.ndarray | int, dim: int = TIME_EMBED) -> np.ndarray:
    i = np.atleast_1d(np.asarray(i, dtype=float))
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    arg = i[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


# -- constraints ---------------------------------------------------------------------


@dataclass(frozen=True)
class PathConstraint:
    start: np.ndarray
    goal: np.ndarray
    obstacles: np.ndarray  # (K, 3)


def apply_constraints(tau: np.ndarray, c: PathConstraint, margin: float = OBSTACLE_MARGIN,
                      segment_passes: int = 3) -> np.ndarray:
    """Pin the endpoints and push the path out of mountains.

    ``tau`` has shape ``(N_w, 2)`` or ``(B, N_w, 2)`` in map coordinates.  A waypoint
    strictly inside a circle moves radially to ``(1 + margin) * radius``; one at the
    exact centre moves along +x.  A segment that still cuts through a circle has its
    movable endpoints shifted along the outward normal at the segment's closest
    approach; if that does not clear the path, only the point projection is
    kept.  Feasible paths are returned unchanged.
    """
    x = np.array(tau, dtype=float, copy=True)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[-1] != 2 or x.shape[1] < 2:
        raise UsageError("expected waypoints of shape (..., N_w, 2)")
    x[:, 0, :] = c.start
    x[:, -1, :] = c.goal
    obst = np.asarray(c.obstacles, dtype=float).reshape(-1, 3)
    _project_points(x, obst, margin)
    if segment_passes and len(obst):
        projected = x.copy()
        for _ in range(segment_passes):
            if not _push_segments(x, obst, margin):
                break
            _project_points(x, obst, margin)
        # a path the pushes could not repair keeps its point projection, which keeps the map idempotent
        failed = constraint_violations(x, c)
        x[failed] = projected[failed]
    return x[0] if single else x


def _project_points(x: np.ndarray, obst: np.ndarray, margin: float) -> None:
    inner = x[:, 1:-1, :]
    for cx, cy, r in obst:
        dx = inner[..., 0] - cx
        dy = inner[..., 1] - cy
        d = np.hypot(dx, dy)
        hit = d < r
        if np.any(hit):
            zero = d < 1e-12
            safe = np.where(zero, 1.0, d)
            ux = np.where(zero, 1.0, dx / safe)
            uy = np.where(zero, 0.0, dy / safe)
            rr = r * (1.0 + margin)
            inner[..., 0] = np.where(hit, cx + rr * ux, inner[..., 0])
            inner[..., 1] = np.where(hit, cy + rr * uy, inner[..., 1])
    np.clip(inner, 0.0, 1.0, out=inner)


def _push_segments(x: np.ndarray, obst: np.ndarray, margin: float) -> bool:
    a = x[:, :-1, None, :]
    d = (x[:, 1:] - x[:, :-1])[:, :, None, :]
    centers = obst[None, None, :, :2]
    r = obst[None, None, :, 2]
    dd = np.sum(d * d, axis=-1)
    nz = dd > 1e-18
    t = np.clip(np.where(nz, np.sum((centers - a) * d, axis=-1) / np.where(nz, dd, 1.0), 0.0), 0.0, 1.0)
    closest = a + t[..., None] * d
    off = closest - centers
    dist = np.hypot(off[..., 0], off[..., 1])
    hit = dist < r
    if not np.any(hit):
        return False
    # outward normal; for a segment through the centre use its left perpendicular
    perp = np.stack([-d[..., 1], d[..., 0]], axis=-1) / np.sqrt(np.where(nz, dd, 1.0))[..., None]
    normal = np.where((dist > 1e-12)[..., None], off / np.where(dist > 1e-12, dist, 1.0)[..., None], perp)
    shift = np.where(hit, r * (1.0 + margin) - dist, 0.0)[..., None] * normal
    shift = shift.sum(axis=2)  # (B, S, 2)
    x[:, 1:-1, :] += shift[:, :-1, :] + shift[:, 1:, :]
    np.clip(x[:, 1:-1, :], 0.0, 1.0, out=x[:, 1:-1, :])
    return True


def constraint_violations(paths: np.ndarray, c: PathConstraint, atol: float = 0.0) -> np.ndarray:
    """Boolean per path: endpoints off, a waypoint inside a mountain, or a segment crossing one."""
    paths = np.asarray(paths, dtype=float)
    bad = np.any(np.abs(paths[:, 0] - c.start) > atol, axis=1) | np.any(np.abs(paths[:, -1] - c.goal) > atol, axis=1)
    if len(c.obstacles):
        a = paths[:, :-1, None, :]  # (B, S, 1, 2)
        d = (paths[:, 1:] - paths[:, :-1])[:, :, None, :]
        centers = c.obstacles[None, None, :, :2]
        r = c.obstacles[None, None, :, 2]
        dd = np.sum(d * d, axis=-1)
        t = np.where(dd > 1e-18, np.sum((centers - a) * d, axis=-1) / np.where(dd > 1e-18, dd, 1.0), 0.0)
        t = np.clip(t, 0.0, 1.0)
        closest = a + t[..., None] * d
        dist2 = np.sum((closest - centers) ** 2, axis=-1)
        bad |= np.any(dist2 < r * r, axis=(1, 2))
    return bad


# -- model -----------------------------------------------------------------------------


@dataclass
class DiffusionModel:
    net: DenseNet
    schedule: NoiseSchedule
    n_waypoints: int
    obstacle_slots: int
    optimizer: AdamState | None = None
    train_steps: int = 0
    loss_history: list[float] = field(default_factory=list)

    @classmethod
    def create(cls, n_waypoints: int = 10, obstacle_slots: int = 4, steps: int = 50, kind: str = "cosine",
               hidden: Sequence[int] = (128, 128, 128), seed: int = 0, lr: float = 1e-3) -> "DiffusionModel":
        rng = np.random.default_rng(seed)
        n_in = 2 * n_waypoints + TIME_EMBED + 4 + 3 * obstacle_slots
        net = DenseNet.mlp([n_in, *hidden, 2 * n_waypoints], rng=rng)
        return cls(net, make_schedule(steps, kind), n_waypoints, obstacle_slots, AdamState(net.param_count, lr=lr))

    @property
    def cond_size(self) -> int:
        return 4 + 3 * self.obstacle_slots

    def condition_vector(self, start: np.ndarray, goal: np.ndarray, obstacles: np.ndarray) -> np.ndarray:
        v = np.zeros(self.cond_size)
        v[0:2] = 2.0 * np.asarray(start) - 1.0
        v[2:4] = 2.0 * np.asarray(goal) - 1.0
        obs = np.asarray(obstacles, dtype=float).reshape(-1, 3)[: self.obstacle_slots]
        if len(obs):
            flat = np.column_stack([2.0 * obs[:, :2] - 1.0, 2.0 * obs[:, 2]]).ravel()
            v[4 : 4 + flat.size] = flat
        return v

    def predict_noise(self, tau: np.ndarray, i: np.ndarray, cond: np.ndarray) -> tuple[np.ndarray, object]:
        x = np.concatenate([tau, time_embedding(i), cond], axis=1)
        return self.net.forward(x)

    # -- persistence -------------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "kind": "diffusion",
            "net": net_to_dict(self.net, self.optimizer),
            "schedule": self.schedule.to_dict(),
            "n_waypoints": self.n_waypoints,
            "obstacle_slots": self.obstacle_slots,
            "train_steps": self.train_steps,
            "loss_history": self.loss_history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionModel":
        if d.get("kind") != "diffusion":
            raise ConfigError("not a diffusion checkpoint")
        net, opt = net_from_dict(d["net"])
        model = cls(net, NoiseSchedule.from_dict(d["schedule"]), int(d["n_waypoints"]), int(d["obstacle_slots"]),
                    opt, int(d.get("train_steps", 0)), list(d.get("loss_history", [])))
        if net.n_out != 2 * model.n_waypoints or net.n_in != 2 * model.n_waypoints + TIME_EMBED + model.cond_size:
            raise ConfigError("diffusion network shape does not match its layout")
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "DiffusionModel":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"diffusion checkpoint not found: {p}")
        return cls.from_dict(json.loads(p.read_text()))


# -- training ----------------------------------------------------------------------------


@dataclass
class TrainingBatch:
    tau0: np.ndarray  # (B, 2 N_w) in [-1, 1]
    cond: np.ndarray  # (B, cond)


def make_training_arrays(model: DiffusionModel, records: Iterable[dict], obstacles: np.ndarray) -> TrainingBatch:
    tau, cond = [], []
    for r in records:
        w = np.asarray(r["waypoints"], dtype=float)
        if w.shape != (model.n_waypoints, 2):
            raise UsageError(f"record has {w.shape[0]} waypoints, model expects {model.n_waypoints}")
        tau.append((2.0 * w - 1.0).ravel())
        cond.append(model.condition_vector(r["p_s"], r["p_g"], obstacles))
    if not tau:
        raise UsageError("empty training set")
    return TrainingBatch(np.array(tau), np.array(cond))


def diffusion_loss(model: DiffusionModel, tau0: np.ndarray, cond: np.ndarray, steps: np.ndarray,
                   eps: np.ndarray) -> tuple[float, np.ndarray, np.ndarray, object]:
    """Mean over the batch of ``||eps - eps_hat||^2``; returns (loss, eps_hat, dloss/deps_hat, tape)."""
    tau_i = forward_noise(tau0, steps, eps, model.schedule)
    eps_hat, tape = model.predict_noise(tau_i, steps, cond)
    diff = eps_hat - eps
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    grad = 2.0 * diff / len(eps)
    return loss, eps_hat, grad, tape


def train_step(model: DiffusionModel, tau0: np.ndarray, cond: np.ndarray, rng: np.random.Generator) -> float:
    """One optimizer step of score matching on the batch; returns the pre-update loss."""
    if len(tau0) == 0:
        raise UsageError("empty batch")
    steps = rng.integers(1, model.schedule.steps + 1, size=len(tau0))
    eps = rng.standard_normal(tau0.shape)
    loss, _, grad, tape = diffusion_loss(model, tau0, cond, steps, eps)
    if not math.isfinite(loss):
        raise TrainingError("diffusion loss is not finite")
    pgrad, _ = model.net.backward(tape, grad)
    if model.optimizer is None:
        model.optimizer = AdamState(model.net.param_count)
    model.net.set_params(adam_step(model.optimizer, model.net.params, pgrad))
    model.train_steps += 1
    return loss


def train(model: DiffusionModel, data: TrainingBatch, steps: int, batch_size: int = 128, seed: int = 0,
          lr_final_fraction: float = 0.1) -> list[float]:
    """Run ``steps`` optimizer steps with cosine learning-rate decay; returns per-step losses."""
    rng = np.random.default_rng([seed, model.train_steps])
    base_lr = model.optimizer.lr if model.optimizer else 1e-3
    losses = []
    for k in range(steps):
        frac = k / max(1, steps - 1)
        if model.optimizer is not None:
            model.optimizer.lr = base_lr * (lr_final_fraction + (1 - lr_final_fraction) * 0.5 * (1 + math.cos(math.pi * frac)))
        idx = rng.integers(0, len(data.tau0), size=min(batch_size, len(data.tau0)))
        losses.append(train_step(model, data.tau0[idx], data.cond[idx], rng))
    if model.optimizer is not None:
        model.optimizer.lr = base_lr
    model.loss_history.extend(losses)
    return losses


# -- sampling -----------------------------------------------------------------------------


@dataclass
class SampleResult:
    paths: list[WaypointPath]
    flagged: list[bool]  # True when the projected fallback was accepted
    retries: int


def _denoise(model: DiffusionModel, c: PathConstraint, count: int, rng: np.random.Generator) -> np.ndarray:
    sch = model.schedule
    n = 2 * model.n_waypoints
    cond = np.repeat(model.condition_vector(c.start, c.goal, c.obstacles)[None], count, axis=0)
    x = rng.standard_normal((count, n))
    for i in range(sch.steps, 0, -1):
        steps = np.full(count, i)
        eps_hat, _ = model.predict_noise(x, steps, cond)
        ab, ab_prev = sch.alpha_bars[i], sch.alpha_bars[i - 1]
        x0 = np.clip((x - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab), -1.0, 1.0)
        mean = (sch.betas[i] * math.sqrt(ab_prev) / (1.0 - ab)) * x0 + ((1.0 - ab_prev) * math.sqrt(sch.alphas[i]) / (1.0 - ab)) * x
        if i > 1:
            mean = mean + math.sqrt(sch.posterior_var[i]) * rng.standard_normal(mean.shape)
        pts = (mean.reshape(count, model.n_waypoints, 2) + 1.0) / 2.0
        pts = apply_constraints(pts, c)
        x = (2.0 * pts - 1.0).reshape(count, n)
    return apply_constraints((x.reshape(count, model.n_waypoints, 2) + 1.0) / 2.0, c)


def sample_paths(model: DiffusionModel, c: PathConstraint, count: int, seed: int | np.random.Generator,
                 max_retries: int = 10) -> SampleResult:
    """Draw ``count`` constrained paths, re-drawing any that cross a mountain."""
    if count < 1:
        raise UsageError("count must be >= 1")
    if model.net.n_out != 2 * model.n_waypoints:
        raise UsageError("model output does not match its waypoint count")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    paths = _denoise(model, c, count, rng)
    bad = constraint_violations(paths, c)
    retries = 0
    while np.any(bad) and retries < max_retries:
        retries += 1
        idx = np.flatnonzero(bad)
        redo = _denoise(model, c, len(idx), rng)
        paths[idx] = redo
        bad[idx] = constraint_violations(redo, c)
    if np.any(bad):
        log.warning("%d of %d diffusion samples accepted after projection only", int(bad.sum()), count)
    out = [WaypointPath(p, np.asarray(c.start, float).copy(), np.asarray(c.goal, float).copy(), c.obstacles) for p in paths]
    return SampleResult(out, [bool(b) for b in bad], retries)
