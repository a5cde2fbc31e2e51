"""``evadelab`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 runtime error.
Outputs go to ``--out-dir`` or, by default, to a fresh run directory under
``$EVADELAB_OUTPUT_ROOT`` (default ``./runs``) named by UTC time and config hash.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bench import (RenderLayers, aggregate, evaluate, png_bytes, render, render_episode, summary, svg_overlay,
                    timing_csv, timing_study)
from .costmap import Costmap, adjust, build_costmap, load_zones
from .diffusion import DiffusionModel, PathConstraint, sample_paths
from .env import WorldConfig, load_config
from .errors import ConfigError, EvadeLabError, NoPathError, TrainingError, UsageError
from .evade_rl import SacAgent, SacConfig, train_evader, write_curve
from .pipeline import (eval_seeds, generate_dataset, get_profile, read_dataset, run_pipeline, train_diffusion_model,
                       write_dataset)
from .planners import RRTParams
from .policies import POLICIES, PolicyArtifacts

log = logging.getLogger("evadelab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "EVADELAB_OUTPUT_ROOT"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2, which is our data-error code
        self.print_usage(sys.stderr)
        raise UsageError(message)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Output directory plus the manifest of consumed and produced files."""

    def __init__(self, command: str, args: argparse.Namespace, config: WorldConfig | None):
        self.command = command
        self.config = config
        self.config_path = getattr(args, "config", None) or getattr(args, "domain", None)
        self.seed = getattr(args, "seed", None)
        digest = config.digest() if config is not None else "noconfig"
        if args.out_dir:
            self.dir = Path(args.out_dir)
        else:
            root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
            stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
            self.dir = root / f"{command}-{stamp}-{digest[:8]}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.consumed: dict[str, Path] = {}
        self.produced: dict[str, Path] = {}
        self.t0 = time.perf_counter()
        self.argv = [a for a in sys.argv[1:]] if sys.argv else []

    def path(self, name: str) -> Path:
        return self.dir / name

    def consume(self, name: str, path: str | Path | None) -> None:
        if path is not None:
            self.consumed[name] = Path(path)

    def produce(self, name: str, path: Path) -> Path:
        self.produced[name] = path
        return path

    def write_manifest(self, extra: dict | None = None) -> Path:
        entry = lambda p: {"path": str(p), "sha256": sha256_file(p) if p.exists() else None}  # noqa: E731
        stable = {
            "command": self.command,
            "config": str(self.config_path) if self.config_path else None,
            "config_digest": self.config.digest() if self.config is not None else None,
            "seed": self.seed,
            "tool_version": __version__,
            "consumed": {k: entry(v)["sha256"] for k, v in sorted(self.consumed.items())},
            "produced": {k: entry(v)["sha256"] for k, v in sorted(self.produced.items())},
        }
        manifest = {
            **stable,
            "manifest_hash": hashlib.sha256(json.dumps(stable, sort_keys=True).encode()).hexdigest()[:16],
            "consumed_paths": {k: str(v) for k, v in sorted(self.consumed.items())},
            "produced_paths": {k: str(v) for k, v in sorted(self.produced.items())},
            "wall_clock_s": round(time.perf_counter() - self.t0, 3),
            **(extra or {}),
        }
        p = self.dir / "manifest.json"
        p.write_text(json.dumps(manifest, indent=2) + "\n")
        return p


def _config(args: argparse.Namespace) -> WorldConfig:
    if getattr(args, "config", None) and getattr(args, "domain", None):
        raise UsageError("pass either --config or --domain, not both")
    source = getattr(args, "config", None) or getattr(args, "domain", None) or "prisoner"
    overrides = {}
    if getattr(args, "view", None):
        overrides["view_mode"] = args.view
    return load_config(source, **overrides)


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


# -- commands ------------------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _config(args)
    run = Run("gen-data", args, config)
    try:
        records, stats = generate_dataset(config, args.count, args.seed, args.waypoints, args.iterations, args.workers)
    except NoPathError as exc:
        print(f"error: {exc}; statistics: {json.dumps(exc.stats)}", file=sys.stderr)
        return EXIT_DATA
    out = run.produce("dataset", run.path("dataset.jsonl"))
    write_dataset(out, records)
    run.write_manifest({"nopath": stats, "record_index_range": [0, args.count - 1]})
    print(out)
    return EXIT_OK


def cmd_train_diffusion(args: argparse.Namespace) -> int:
    config = _config(args)
    data = _require_file(args.dataset, "--dataset")
    run = Run("train-diffusion", args, config)
    run.consume("dataset", data)
    resume = None
    if args.resume:
        run.consume("resume", _require_file(args.resume, "--resume"))
        resume = DiffusionModel.load(args.resume)
    model, losses = train_diffusion_model(read_dataset(data), config, args.steps, args.batch_size, args.seed,
                                          resume=resume, n_waypoints=args.waypoints)
    out = run.produce("diffusion", run.path("diffusion.json"))
    model.save(out)
    loss_csv = run.produce("loss", run.path("loss.csv"))
    start = model.train_steps - len(losses)
    loss_csv.write_text("step,loss\n" + "".join(f"{start + i + 1},{v:.8f}\n" for i, v in enumerate(losses)))
    run.write_manifest({"train_steps": model.train_steps})
    print(out)
    return EXIT_OK


def cmd_train_rl(args: argparse.Namespace) -> int:
    config = _config(args)
    if args.flat and args.diffusion:
        raise UsageError("--flat trains the baseline without waypoints; drop --diffusion")
    diffusion = None
    if not args.flat:
        diffusion = DiffusionModel.load(_require_file(args.diffusion, "--diffusion"))
    run = Run("train-rl", args, config)
    run.consume("diffusion", args.diffusion)
    cfg = SacConfig(batch_size=args.batch_size, detection_warmup=0 if args.flat else args.detection_warmup)
    res = train_evader(config, diffusion, cfg, seed=args.seed, total_steps=args.steps)
    out = run.produce("agent", run.path("agent.json"))
    res.agent.save(out)
    write_curve(run.produce("curve", run.path("curve.csv")), res.curve)
    run.write_manifest({"skipped_episodes": res.skipped_episodes})
    print(out)
    return EXIT_OK


def _artifacts(args: argparse.Namespace, run: Run, need: set[str]) -> PolicyArtifacts:
    arts = PolicyArtifacts(map_samples=getattr(args, "map_samples", 90))
    if "diffusion" in need:
        p = _require_file(args.diffusion, "--diffusion")
        run.consume("diffusion", p)
        arts.diffusion = DiffusionModel.load(p)
    if "agent" in need:
        p = _require_file(args.agent, "--agent")
        run.consume("agent", p)
        arts.agent = SacAgent.load(p)
    if "flat" in need:
        p = _require_file(args.flat_agent, "--flat-agent")
        run.consume("flat_agent", p)
        arts.flat_agent = SacAgent.load(p)
    if "costmap" in need:
        p = _require_file(args.costmap, "--costmap")
        run.consume("costmap", p)
        arts.costmap = Costmap.load(p)
    return arts


def cmd_build_costmap(args: argparse.Namespace) -> int:
    config = _config(args)
    run = Run("build-costmap", args, config)
    if args.from_map:
        run.consume("base", _require_file(args.from_map, "--from-map"))
        base = Costmap.load(args.from_map)
    else:
        arts = _artifacts(args, run, {"diffusion", "agent"})
        base = build_costmap(config, arts, args.episodes, eps_risk=args.eps_risk, sigma=args.sigma, seed=args.seed,
                             mode=args.mode)
    if args.zones:
        run.consume("zones", _require_file(args.zones, "--zones"))
        base = adjust(base, load_zones(args.zones))
    out = run.produce("costmap", run.path("costmap.json"))
    base.save(out)
    png = run.produce("costmap_png", run.path("costmap.png"))
    png.write_bytes(png_bytes(render(config, RenderLayers(costmap=base), size=args.size)))
    run.write_manifest({"deposits": base.deposits, "flagged_empty": base.flagged})
    print(out)
    return EXIT_OK


def _needs(policies: Sequence[str]) -> set[str]:
    need: set[str] = set()
    for p in policies:
        if p == "sac-only":
            need.add("flat")
        if p.startswith("diffusion"):
            need.add("diffusion")
        if p in ("diffusion-rl", "diffusion-rl-map"):
            need.add("agent")
        if p == "diffusion-rl-map":
            need.add("costmap")
    return need


def cmd_evaluate(args: argparse.Namespace) -> int:
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    bad = [p for p in policies if p not in POLICIES]
    if bad or not policies:
        raise UsageError(f"unknown policies {bad}; choose from {', '.join(POLICIES)}")
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    config = _config(args)
    run = Run("evaluate", args, config)
    arts = _artifacts(args, run, _needs(policies))
    seeds = eval_seeds(args.seed, args.episodes)
    logs = evaluate(config, policies, seeds, arts, workers=args.workers)
    table = aggregate(logs)
    run.produce("metrics", run.path("metrics.csv")).write_text(table.to_csv())
    run.produce("summary", run.path("summary.json")).write_text(
        json.dumps(summary(table, config, seeds, {"policies": policies}), indent=2) + "\n")
    ep_dir = run.dir / "episodes"
    ep_dir.mkdir(exist_ok=True)
    for p, ls in logs.items():
        run.produce(f"episodes_{p}", ep_dir / f"{p}.jsonl").write_text("".join(l.to_jsonl() for l in ls))
    run.write_manifest()
    print(table.to_csv(), end="")
    return EXIT_OK


def cmd_timing(args: argparse.Namespace) -> int:
    counts = [int(c) for c in args.counts.split(",") if c.strip()]
    if not counts or min(counts) < 1:
        raise UsageError("--counts must list positive integers")
    config = _config(args)
    run = Run("timing", args, config)
    model = _artifacts(args, run, {"diffusion"}).diffusion
    rows = timing_study(config, model, counts, args.repeats, RRTParams(iterations=args.rrt_iterations), args.seed)
    out = run.produce("timing", run.path("timing.csv"))
    out.write_text(timing_csv(rows))
    run.write_manifest()
    print(out.read_text(), end="")
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    config = _config(args)
    run = Run("render", args, config)
    cmap = None
    if args.costmap:
        run.consume("costmap", _require_file(args.costmap, "--costmap"))
        cmap = Costmap.load(args.costmap)
    if args.episodes_log:
        p = _require_file(args.episodes_log, "--episodes-log")
        run.consume("episodes", p)
        from .bench import EpisodeLog, StepRecord

        lines = [json.loads(l) for l in p.read_text().splitlines() if l.strip()]
        if not lines or "policy" not in lines[0]:
            raise ConfigError(f"{p} is not an episode log")
        head, steps = lines[0], []
        for rec in lines[1:]:
            if "policy" in rec:
                break  # first episode only
            steps.append(StepRecord(rec["t"], tuple(rec["evader"]), rec["speed"],
                                    [tuple(q) for q in rec["pursuers"]], rec["detections"], rec["reward"]))
        log_ = EpisodeLog(head["seed"], head["policy"], steps, head["outcome"], head["detected_steps"],
                          tuple(head["start"]), [tuple(h) for h in head["hideouts"]])
        img = render_episode(config, log_, cmap, args.size)
        layers = RenderLayers(trajectory=log_.trajectory(), start=log_.start)
    else:
        paths = []
        if args.diffusion:
            run.consume("diffusion", _require_file(args.diffusion, "--diffusion"))
            model = DiffusionModel.load(args.diffusion)
            start = np.asarray(args.start if args.start else config.start_corner() * 0.9 + 0.05, float)
            goal = np.asarray(args.goal if args.goal else config.hideouts[0], float)
            c = PathConstraint(start, goal, config.obstacles)
            paths = [p.points for p in sample_paths(model, c, args.samples, np.random.default_rng(args.seed)).paths]
        layers = RenderLayers(paths=paths, costmap=cmap)
        img = render(config, layers, args.size)
    out = run.produce("image", run.path("render.png"))
    out.write_bytes(png_bytes(img))
    if args.svg:
        run.produce("svg", run.path("render.svg")).write_text(svg_overlay(config, layers, args.size))
    run.write_manifest()
    print(out)
    return EXIT_OK


def cmd_pipeline(args: argparse.Namespace) -> int:
    config = _config(args)
    profile = get_profile(args.profile)
    run = Run("pipeline", args, config)
    arts = run_pipeline(config, profile, run.dir, progress=lambda m: print(m, file=sys.stderr))
    for name in ("dataset.jsonl", "diffusion.json", "agent.json", "flat_agent.json", "costmap.json"):
        run.produce(name.split(".")[0], run.dir / name)
    run.write_manifest({"profile": profile.name})
    print(arts.directory)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evadelab", description="Diffusion-guided evasion: data, training, costmaps, benchmarks.")
    p.add_argument("--version", action="version", version=f"evadelab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp: argparse.ArgumentParser, workers: bool = False) -> None:
        sp.add_argument("--config", help="world config JSON file or preset name")
        sp.add_argument("--domain", choices=("prisoner", "narco"), help="shipped preset")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out-dir", help=f"output directory (default: run dir under ${OUTPUT_ROOT_ENV})")
        if workers:
            sp.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    s = sub.add_parser("gen-data", help="plan RRT* paths into a waypoint dataset")
    common(s, workers=True)
    s.add_argument("--count", type=int, default=800)
    s.add_argument("--iterations", type=int, default=1000)
    s.add_argument("--waypoints", type=int, default=10)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-diffusion", help="fit the waypoint denoiser")
    common(s)
    s.add_argument("--dataset", required=True)
    s.add_argument("--steps", type=int, default=20000)
    s.add_argument("--batch-size", type=int, default=128)
    s.add_argument("--waypoints", type=int, default=10)
    s.add_argument("--resume", help="continue from this checkpoint")
    s.set_defaults(func=cmd_train_diffusion)

    s = sub.add_parser("train-rl", help="train the low-level SAC evader")
    common(s)
    s.add_argument("--diffusion")
    s.add_argument("--flat", action="store_true", help="train the SAC-only baseline")
    s.add_argument("--steps", type=int, default=80000)
    s.add_argument("--batch-size", type=int, default=128)
    s.add_argument("--detection-warmup", type=int, default=20000)
    s.set_defaults(func=cmd_train_rl)

    s = sub.add_parser("build-costmap", help="roll out the hierarchy and accumulate close encounters")
    common(s)
    s.add_argument("--diffusion")
    s.add_argument("--agent")
    s.add_argument("--from-map", help="start from an existing costmap instead of rolling out")
    s.add_argument("--episodes", type=int, default=200)
    s.add_argument("--eps-risk", type=float)
    s.add_argument("--sigma", type=float, default=0.02)
    s.add_argument("--mode", choices=("stochastic", "deterministic"), default="stochastic")
    s.add_argument("--zones", help="JSON list of ad-hoc zones")
    s.add_argument("--map-samples", type=int, default=90)
    s.add_argument("--size", type=int, default=256)
    s.set_defaults(func=cmd_build_costmap)

    s = sub.add_parser("evaluate", help="benchmark policies on shared seeds")
    common(s, workers=True)
    s.add_argument("--policies", default=",".join(POLICIES))
    s.add_argument("--episodes", type=int, default=100)
    s.add_argument("--view", choices=("global", "local"))
    s.add_argument("--diffusion")
    s.add_argument("--agent")
    s.add_argument("--flat-agent")
    s.add_argument("--costmap")
    s.add_argument("--map-samples", type=int, default=90)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("timing", help="batched diffusion sampling against sequential RRT*")
    common(s)
    s.add_argument("--diffusion", required=True)
    s.add_argument("--counts", default="1,10,20,30,40,50")
    s.add_argument("--repeats", type=int, default=10)
    s.add_argument("--rrt-iterations", type=int, default=300)
    s.set_defaults(func=cmd_timing)

    s = sub.add_parser("render", help="draw the world with optional costmap, samples or an episode")
    common(s)
    s.add_argument("--costmap")
    s.add_argument("--diffusion")
    s.add_argument("--samples", type=int, default=20)
    s.add_argument("--start", type=float, nargs=2)
    s.add_argument("--goal", type=float, nargs=2)
    s.add_argument("--episodes-log", help="episode JSONL from evaluate; draws its first episode")
    s.add_argument("--size", type=int, default=512)
    s.add_argument("--svg", action="store_true", help="also write a vector overlay")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("pipeline", help="build every learned artifact of a budget profile")
    common(s)
    s.add_argument("--profile", default="smoke")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "render" and args.episodes_log and args.diffusion:
            raise UsageError("--episodes-log and --diffusion draw different scenes; pick one")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, NoPathError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, EvadeLabError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
