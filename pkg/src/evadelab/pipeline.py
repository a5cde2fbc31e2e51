"""Artifact pipeline: dataset, diffusion model, low-level agents, costmap.

Each stage writes into a directory and is skipped when its output already
exists, so a profile can be resumed or shared between test sessions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .costmap import Costmap, build_costmap
from .diffusion import DiffusionModel, make_training_arrays, train
from .env import WorldConfig
from .errors import ConfigError, NoPathError, UsageError
from .evade_rl import SacAgent, SacConfig, train_evader, write_curve
from .planners import dataset_record
from .policies import PolicyArtifacts

log = logging.getLogger(__name__)

MAX_NOPATH_RATE = 0.05


@dataclass(frozen=True)
class Profile:
    """Budgets for one end-to-end run."""

    name: str
    dataset_count: int
    rrt_iterations: int
    n_waypoints: int
    diffusion_steps: int
    diffusion_batch: int
    sac_steps: int
    sac_batch: int
    flat_sac_steps: int
    detection_warmup: int
    costmap_episodes: int
    map_samples: int
    seed: int = 0


PROFILES = {
    "smoke": Profile("smoke", dataset_count=800, rrt_iterations=1000, n_waypoints=10, diffusion_steps=20000,
                     diffusion_batch=128, sac_steps=80000, sac_batch=128, flat_sac_steps=80000, detection_warmup=20000,
                     costmap_episodes=200, map_samples=90),
    # seconds-scale budget for wiring checks; learned policies are untrained
    "tiny": Profile("tiny", dataset_count=12, rrt_iterations=200, n_waypoints=10, diffusion_steps=20,
                    diffusion_batch=8, sac_steps=300, sac_batch=32, flat_sac_steps=300, detection_warmup=0,
                    costmap_episodes=2, map_samples=3),
}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise UsageError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}") from None


# -- dataset ---------------------------------------------------------------------------------


def _record_job(args) -> dict | dict[str, str]:
    config, index, seed, n_waypoints, iterations = args
    try:
        return dataset_record(config, index, seed, n_waypoints, iterations)
    except NoPathError as exc:
        return {"index": index, "error": str(exc)}


def generate_dataset(config: WorldConfig, count: int, seed: int, n_waypoints: int = 10, iterations: int = 1000,
                     workers: int = 1) -> tuple[list[dict], dict]:
    """Plan ``count`` records; raises NoPathError when more than 5% of them fail."""
    if count < 1:
        raise UsageError("count must be >= 1")
    jobs = [(config, i, seed, n_waypoints, iterations) for i in range(count)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_record_job, jobs, chunksize=8))
    else:
        results = [_record_job(j) for j in jobs]
    failures = [r for r in results if "error" in r]
    stats = {"requested": count, "failed": len(failures), "rate": len(failures) / count,
             "failed_indices": [r["index"] for r in failures][:20]}
    if stats["rate"] > MAX_NOPATH_RATE:
        raise NoPathError(f"{len(failures)} of {count} records found no path", stats)
    return [r for r in results if "error" not in r], stats


def write_dataset(path: Path, records: list[dict]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def read_dataset(path: str | Path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"dataset not found: {p}")
    out = []
    for i, line in enumerate(p.read_text().splitlines()):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{p}:{i + 1}: {exc}") from exc
    if not out:
        raise ConfigError(f"dataset {p} is empty")
    return out


def train_diffusion_model(records: list[dict], config: WorldConfig, steps: int, batch_size: int, seed: int,
                          resume: DiffusionModel | None = None, n_waypoints: int = 10) -> tuple[DiffusionModel, list[float]]:
    model = resume or DiffusionModel.create(n_waypoints=n_waypoints, obstacle_slots=config.obstacle_slots, seed=seed)
    data = make_training_arrays(model, records, config.obstacles)
    losses = train(model, data, steps, batch_size=batch_size, seed=seed)
    return model, losses


# -- end-to-end ----------------------------------------------------------------------------------


@dataclass
class PipelineArtifacts:
    directory: Path
    diffusion: DiffusionModel
    agent: SacAgent
    flat_agent: SacAgent
    costmap: Costmap

    def policy_artifacts(self, **kw) -> PolicyArtifacts:
        return PolicyArtifacts(self.diffusion, self.agent, self.flat_agent, self.costmap, **kw)


def _stage(path: Path, build: Callable[[], None]) -> None:
    if path.exists():
        log.info("reusing %s", path)
        return
    build()


def run_pipeline(config: WorldConfig, profile: Profile, directory: str | Path,
                 progress: Callable[[str], None] | None = None) -> PipelineArtifacts:
    """Build (or reuse) every learned artifact of ``profile`` under ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    say = progress or (lambda msg: log.info(msg))
    meta = out / "profile.json"
    stamp = {"profile": asdict(profile), "config_digest": config.digest()}
    if meta.exists() and json.loads(meta.read_text()) != stamp:
        raise ConfigError(f"{out} holds artifacts of a different profile or world")
    meta.write_text(json.dumps(stamp, indent=2))

    data_path = out / "dataset.jsonl"

    def gen() -> None:
        say("generating dataset")
        records, _ = generate_dataset(config, profile.dataset_count, profile.seed, profile.n_waypoints,
                                      profile.rrt_iterations)
        write_dataset(data_path, records)

    _stage(data_path, gen)

    diff_path = out / "diffusion.json"

    def fit() -> None:
        say("training diffusion model")
        model, _ = train_diffusion_model(read_dataset(data_path), config, profile.diffusion_steps,
                                         profile.diffusion_batch, profile.seed, n_waypoints=profile.n_waypoints)
        model.save(diff_path)

    _stage(diff_path, fit)
    diffusion = DiffusionModel.load(diff_path)

    sac = SacConfig(batch_size=profile.sac_batch, detection_warmup=profile.detection_warmup)
    agent_path = out / "agent.json"

    def fit_agent() -> None:
        say("training hierarchical agent")
        res = train_evader(config, diffusion, sac, seed=profile.seed, total_steps=profile.sac_steps)
        res.agent.save(agent_path)
        write_curve(out / "curve.csv", res.curve)

    _stage(agent_path, fit_agent)

    flat_path = out / "flat_agent.json"

    def fit_flat() -> None:
        say("training flat agent")
        res = train_evader(config, None, replace(sac, detection_warmup=0), seed=profile.seed,
                           total_steps=profile.flat_sac_steps)
        res.agent.save(flat_path)
        write_curve(out / "flat_curve.csv", res.curve)

    _stage(flat_path, fit_flat)
    agent = SacAgent.load(agent_path)
    flat = SacAgent.load(flat_path)

    map_path = out / "costmap.json"

    def fit_map() -> None:
        say("building costmap")
        arts = PolicyArtifacts(diffusion, agent, flat, None, profile.map_samples)
        build_costmap(config, arts, profile.costmap_episodes, seed=profile.seed).save(map_path)

    _stage(map_path, fit_map)
    return PipelineArtifacts(out, diffusion, agent, flat, Costmap.load(map_path))


def eval_seeds(seed: int, episodes: int) -> list[int]:
    """Episode seeds shared by every policy in a comparison."""
    return [int(s) for s in np.random.default_rng([seed, 11]).integers(2**31, size=episodes)]
