"""Benchmark harness: episode logs, scoring, metric tables, timing and rendering."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .costmap import Costmap
from .diffusion import DiffusionModel, PathConstraint, sample_paths
from .env import EvaderAction, StepEvents, WorldConfig, WorldState
from .errors import NoPathError, UsageError
from .planners import RRTParams, rrt_star
from .policies import POLICIES, PolicyArtifacts, rollout

GOAL_SCORE = 50.0
TIMING_COUNTS = (1, 10, 20, 30, 40, 50)


@dataclass
class StepRecord:
    t: int
    evader: tuple[float, float]
    speed: float
    pursuers: list[tuple[float, float]]
    detections: int
    reward: float

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "evader": [round(self.evader[0], 9), round(self.evader[1], 9)],
            "speed": round(self.speed, 9),
            "pursuers": [[round(x, 9), round(y, 9)] for x, y in self.pursuers],
            "detections": self.detections,
            "reward": self.reward,
        }


@dataclass
class EpisodeLog:
    seed: int
    policy: str
    steps: list[StepRecord]
    outcome: str  # "goal" or "timeout"
    detected_steps: int
    start: tuple[float, float] = (0.0, 0.0)
    hideouts: list[tuple[float, float]] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def goal(self) -> bool:
        return self.outcome == "goal"

    @property
    def detection_fraction(self) -> float:
        return self.detected_steps / self.length if self.length else 0.0

    def trajectory(self) -> np.ndarray:
        return np.array([self.start] + [s.evader for s in self.steps])

    def to_jsonl(self) -> str:
        head = {"seed": self.seed, "policy": self.policy, "outcome": self.outcome,
                "detected_steps": self.detected_steps, "length": self.length,
                "start": list(self.start), "hideouts": [list(h) for h in self.hideouts]}
        lines = [json.dumps(head)] + [json.dumps(s.to_dict()) for s in self.steps]
        return "\n".join(lines) + "\n"


def run_episode(config: WorldConfig, policy: str, seed: int, artifacts: PolicyArtifacts | None = None) -> EpisodeLog:
    arts = artifacts or PolicyArtifacts()
    records: list[StepRecord] = []
    detected = 0

    def hook(state: WorldState, action: EvaderAction, events: StepEvents) -> None:
        nonlocal detected
        detected += events.detected
        r = -float(events.detection_count)
        records.append(StepRecord(state.t, (float(state.evader_pos[0]), float(state.evader_pos[1])),
                                  float(state.evader_speed),
                                  [(float(x), float(y)) for x, y in state.pursuer_pos],
                                  events.detection_count, r))

    from .env import env_reset

    s0 = env_reset(config, seed)
    final, _ = rollout(config, policy, seed, arts, on_step=hook)
    outcome = "goal" if final.events.goal_reached else "timeout"
    return EpisodeLog(seed, policy, records, outcome, detected,
                      (float(s0.evader_pos[0]), float(s0.evader_pos[1])),
                      [(float(x), float(y)) for x, y in s0.hideouts])


def raw_score(log: EpisodeLog) -> float:
    """+50 on goal, -50 on timeout, minus one per detected step."""
    return (GOAL_SCORE if log.goal else -GOAL_SCORE) - log.detected_steps


@dataclass
class MetricRow:
    policy: str
    score_mean: float
    score_std: float
    detection_mean: float
    detection_std: float
    goal_mean: float
    goal_std: float
    normalized_score: float
    normalized_score_std: float
    episodes: int


@dataclass
class MetricTable:
    rows: list[MetricRow]
    score_range: tuple[float, float]

    def row(self, policy: str) -> MetricRow:
        for r in self.rows:
            if r.policy == policy:
                return r
        raise KeyError(policy)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["policy", "metric", "mean", "std"])
        for r in self.rows:
            w.writerow([r.policy, "raw_score", f"{r.score_mean:.6f}", f"{r.score_std:.6f}"])
            w.writerow([r.policy, "normalized_score", f"{r.normalized_score:.6f}", f"{r.normalized_score_std:.6f}"])
            w.writerow([r.policy, "detection", f"{r.detection_mean:.6f}", f"{r.detection_std:.6f}"])
            w.writerow([r.policy, "goal_reach", f"{r.goal_mean:.6f}", f"{r.goal_std:.6f}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"score_range": list(self.score_range), "rows": [r.__dict__ for r in self.rows]}


def _mean_std(xs: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(xs, float)
    return float(a.mean()), float(a.std())


def aggregate(logs: dict[str, list[EpisodeLog]]) -> MetricTable:
    """Per-policy means; the score is min-max scaled over every raw episode score in the set."""
    if not logs or any(len(v) == 0 for v in logs.values()):
        raise UsageError("aggregate needs at least one policy with at least one episode")
    counts = {len(v) for v in logs.values()}
    if len(counts) != 1:
        raise UsageError("all policies must have the same number of episodes")
    scores = {p: [raw_score(l) for l in v] for p, v in logs.items()}
    lo = min(min(s) for s in scores.values())
    hi = max(max(s) for s in scores.values())
    rows = []
    for p, v in logs.items():
        s = scores[p]
        # a degenerate range maps every score to 1
        norm = [1.0] * len(s) if hi == lo else [(x - lo) / (hi - lo) for x in s]
        sm, ss = _mean_std(s)
        dm, ds = _mean_std([l.detection_fraction for l in v])
        gm, gs = _mean_std([float(l.goal) for l in v])
        nm, ns = _mean_std(norm)
        rows.append(MetricRow(p, sm, ss, dm, ds, gm, gs, nm, ns, len(v)))
    return MetricTable(rows, (float(lo), float(hi)))


def evaluate(config: WorldConfig, policies: Iterable[str], seeds: Sequence[int],
             artifacts: PolicyArtifacts | None = None, workers: int = 1) -> dict[str, list[EpisodeLog]]:
    """Run every policy on the same seeds; results do not depend on ``workers``."""
    policies = list(policies)
    for p in policies:
        if p not in POLICIES:
            raise UsageError(f"unknown policy {p!r}; choose from {', '.join(POLICIES)}")
    jobs = [(p, int(s)) for p in policies for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            done = list(ex.map(_episode_job, [(config, p, s, artifacts) for p, s in jobs], chunksize=4))
    else:
        done = [run_episode(config, p, s, artifacts) for p, s in jobs]
    out: dict[str, list[EpisodeLog]] = {p: [] for p in policies}
    for (p, _), log in zip(jobs, done):
        out[p].append(log)
    return out


def _episode_job(args) -> EpisodeLog:
    return run_episode(*args)


# -- timing -----------------------------------------------------------------------------------


@dataclass
class TimingRow:
    count: int
    method: str
    mean: float
    std: float
    median: float
    repeats: int


def _time(fn, repeats: int) -> list[float]:
    fn()  # warm caches
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def _timed_rrt(config: WorldConfig, start: np.ndarray, goal: np.ndarray, seed: int, params: RRTParams) -> None:
    # a failed connection still spent the full iteration budget, which is what is being timed
    try:
        rrt_star(config, start, goal, seed=seed, params=params)
    except NoPathError:
        pass


def timing_study(config: WorldConfig, model: DiffusionModel, counts: Sequence[int] = TIMING_COUNTS,
                 repeats: int = 10, rrt_params: RRTParams | None = None, seed: int = 0,
                 start: Sequence[float] | None = None, goal: Sequence[float] | None = None) -> list[TimingRow]:
    """Wall-clock of batched diffusion sampling against sequential RRT* per path count."""
    if any(int(c) < 1 for c in counts):
        raise UsageError("timing counts must be >= 1")
    if repeats < 1:
        raise UsageError("repeats must be >= 1")
    params = rrt_params or RRTParams(iterations=300)
    p_s = np.asarray(start if start is not None else config.start_corner() * 0.9 + 0.05, float)
    p_g = np.asarray(goal if goal is not None else config.hideouts[0], float)
    c = PathConstraint(p_s, p_g, config.obstacles)
    rows = []
    for n in counts:
        rng = np.random.default_rng([seed, n])
        d = _time(lambda: sample_paths(model, c, n, rng), repeats)
        r = _time(lambda: [_timed_rrt(config, p_s, p_g, k, params) for k in range(n)], repeats)
        for name, xs in (("diffusion", d), ("rrtstar", r)):
            rows.append(TimingRow(int(n), name, statistics.fmean(xs), statistics.pstdev(xs), statistics.median(xs),
                                  repeats))
    return rows


def timing_csv(rows: Sequence[TimingRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["count", "method", "mean_s", "std_s", "median_s", "repeats"])
    for r in rows:
        w.writerow([r.count, r.method, f"{r.mean:.6f}", f"{r.std:.6f}", f"{r.median:.6f}", r.repeats])
    return buf.getvalue()


# -- rendering -----------------------------------------------------------------------------------

_BG = (236, 232, 214)
_MOUNTAIN = (120, 104, 90)
_CAMERA = (200, 40, 40)
_HIDEOUT = (40, 150, 60)
_START = (30, 80, 200)
_PATH = (20, 20, 20)
_SAMPLE = (70, 110, 200)


@dataclass
class RenderLayers:
    paths: list[np.ndarray] = field(default_factory=list)
    trajectory: np.ndarray | None = None
    pursuers: list[np.ndarray] = field(default_factory=list)
    start: Sequence[float] | None = None
    hideouts: np.ndarray | None = None
    costmap: Costmap | None = None
    show_cameras: bool = True


def _px(p: Sequence[float], size: int) -> tuple[float, float]:
    # y axis points up in the world, down in the image
    return (float(p[0]) * size, (1.0 - float(p[1])) * size)


def costmap_image(cmap: Costmap) -> Image.Image:
    """Grayscale raster of the effective grid; forbidden cells are drawn white."""
    g = cmap.grid()
    finite = np.where(np.isinf(g), 0.0, g)
    peak = float(finite.max()) if finite.size else 0.0
    v = finite / peak if peak > 0 else finite
    v = np.where(np.isinf(g), 1.0, v)
    return Image.fromarray(np.flipud(np.round(v * 255)).astype(np.uint8), mode="L")


def render(config: WorldConfig, layers: RenderLayers | None = None, size: int = 512) -> Image.Image:
    """World image with optional costmap underlay and path, trajectory and marker overlays."""
    lay = layers or RenderLayers()
    if lay.costmap is not None:
        cm = costmap_image(lay.costmap).resize((size, size), Image.NEAREST)
        base = Image.merge("RGB", (cm, cm, cm))
    else:
        base = Image.new("RGB", (size, size), _BG)
    d = ImageDraw.Draw(base)
    for x, y, r in config.obstacles:
        cx, cy = _px((x, y), size)
        d.ellipse([cx - r * size, cy - r * size, cx + r * size, cy + r * size], fill=_MOUNTAIN)
    if lay.show_cameras:
        for p in config.cameras:
            cx, cy = _px(p, size)
            d.rectangle([cx - 3, cy - 3, cx + 3, cy + 3], fill=_CAMERA)
    hideouts = config.hideouts if lay.hideouts is None else lay.hideouts
    for p in hideouts:
        cx, cy = _px(p, size)
        d.polygon([(cx, cy - 6), (cx - 5, cy + 4), (cx + 5, cy + 4)], fill=_HIDEOUT)
    for pts in lay.paths:
        d.line([_px(p, size) for p in np.asarray(pts)], fill=_SAMPLE, width=1)
    for pts in lay.pursuers:
        if len(pts) > 1:
            d.line([_px(p, size) for p in np.asarray(pts)], fill=_CAMERA, width=1)
    if lay.trajectory is not None and len(lay.trajectory) > 1:
        d.line([_px(p, size) for p in np.asarray(lay.trajectory)], fill=_PATH, width=2)
    if lay.start is not None:
        cx, cy = _px(lay.start, size)
        d.ellipse([cx - 5, cy - 5, cx + 5, cy + 5], outline=_START, width=2)
    return base


def png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def svg_overlay(config: WorldConfig, layers: RenderLayers | None = None, size: int = 512) -> str:
    lay = layers or RenderLayers()

    def pt(p):
        x, y = _px(p, size)
        return f"{x:.2f},{y:.2f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">']
    for x, y, r in config.obstacles:
        cx, cy = _px((x, y), size)
        out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{r * size:.2f}" fill="rgb{_MOUNTAIN}"/>')
    for pts in lay.paths:
        out.append(f'<polyline points="{" ".join(pt(p) for p in pts)}" fill="none" stroke="rgb{_SAMPLE}"/>')
    if lay.trajectory is not None:
        out.append(f'<polyline points="{" ".join(pt(p) for p in lay.trajectory)}" fill="none" '
                   f'stroke="rgb{_PATH}" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_episode(config: WorldConfig, log: EpisodeLog, costmap: Costmap | None = None, size: int = 512) -> Image.Image:
    pursuers = np.array([s.pursuers for s in log.steps]) if log.steps else np.zeros((0, 0, 2))
    tracks = [pursuers[:, k] for k in range(pursuers.shape[1])] if pursuers.size else []
    return render(config, RenderLayers(trajectory=log.trajectory(), pursuers=tracks, start=log.start,
                                       hideouts=np.array(log.hideouts), costmap=costmap), size)


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def summary(table: MetricTable, config: WorldConfig, seeds: Sequence[int], extra: dict | None = None) -> dict:
    return {"config": config.name, "config_digest": config.digest(), "seeds": [int(s) for s in seeds],
            "table": table.to_dict(), **(extra or {})}


def normalized_gap(table: MetricTable, policy: str, others: Iterable[str]) -> float:
    """How far ``policy`` sits above the best of ``others`` on normalized score."""
    best = max(table.row(o).normalized_score for o in others)
    return table.row(policy).normalized_score - best if not math.isnan(best) else math.nan
