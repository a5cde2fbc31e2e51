import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from evadelab.bench import (EpisodeLog, RenderLayers, StepRecord, aggregate, costmap_image, evaluate, png_bytes,
                            raw_score, render, render_episode, run_episode, svg_overlay, timing_csv, timing_study)
from evadelab.costmap import DepositGrid
from evadelab.diffusion import DiffusionModel
from evadelab.errors import ConfigError, UsageError
from evadelab.planners import RRTParams
from evadelab.policies import PolicyArtifacts


def fake_log(goal: bool, detected: int, length: int = 100, seed: int = 0, policy: str = "p") -> EpisodeLog:
    steps = [StepRecord(t + 1, (0.1, 0.1), 0.0, [], int(t < detected), 0.0) for t in range(length)]
    return EpisodeLog(seed, policy, steps, "goal" if goal else "timeout", detected)


# -- scores --


@pytest.mark.parametrize("goal,detected,expected", [(True, 0, 50.0), (False, 20, -70.0), (True, 50, 0.0)])
def test_raw_score(goal, detected, expected):
    assert raw_score(fake_log(goal, detected)) == expected


def test_normalization_endpoints():
    table = aggregate({"a": [fake_log(True, 0)] * 3, "b": [fake_log(False, 20)] * 3})
    assert table.row("a").normalized_score == 1.0 and table.row("b").normalized_score == 0.0
    assert table.score_range == (-70.0, 50.0)


def test_degenerate_range_is_one():
    table = aggregate({"a": [fake_log(True, 5)] * 4})
    assert table.row("a").normalized_score == 1.0


def test_goal_reach_fraction():
    logs = [fake_log(True, 0), fake_log(False, 0), fake_log(True, 0), fake_log(True, 0)]
    assert aggregate({"a": logs}).row("a").goal_mean == 0.75


def test_aggregate_rejects_bad_input():
    with pytest.raises(UsageError):
        aggregate({})
    with pytest.raises(UsageError):
        aggregate({"a": []})
    with pytest.raises(UsageError):
        aggregate({"a": [fake_log(True, 0)], "b": [fake_log(True, 0)] * 2})


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 100)), min_size=2, max_size=12), st.randoms())
def test_aggregate_is_permutation_invariant(specs, rnd):
    logs = [fake_log(g, d) for g, d in specs]
    other = [fake_log(not g, d // 2) for g, d in specs]
    shuffled = list(logs)
    rnd.shuffle(shuffled)
    a = aggregate({"x": logs, "y": other})
    b = aggregate({"x": shuffled, "y": other})
    for p in ("x", "y"):
        assert a.row(p).score_mean == pytest.approx(b.row(p).score_mean)
        assert a.row(p).normalized_score == pytest.approx(b.row(p).normalized_score)
        assert 0.0 <= a.row(p).normalized_score <= 1.0


def test_metric_csv_layout():
    table = aggregate({"a": [fake_log(True, 3)], "b": [fake_log(False, 9)]})
    rows = list(csv.reader(io.StringIO(table.to_csv())))
    assert rows[0] == ["policy", "metric", "mean", "std"]
    assert len(rows) == 1 + 2 * 4
    assert {r[1] for r in rows[1:]} == {"raw_score", "normalized_score", "detection", "goal_reach"}


# -- episodes --


def test_run_episode_is_deterministic_and_consistent(world):
    a = run_episode(world, "vo", 4)
    b = run_episode(world, "vo", 4)
    assert a.to_jsonl() == b.to_jsonl()
    assert a.detected_steps == sum(s.detections > 0 for s in a.steps)
    assert a.outcome in ("goal", "timeout") and a.length == a.steps[-1].t


def test_scripted_baselines_run(world):
    logs = evaluate(world, ["astar-heuristic", "rrtstar-heuristic"], [1, 2], PolicyArtifacts(rrt_iterations=400))
    assert all(len(v) == 2 for v in logs.values())


def test_learned_policy_needs_checkpoint(world):
    for policy in ("sac-only", "diffusion-only", "diffusion-rl", "diffusion-rl-map"):
        with pytest.raises(ConfigError):
            run_episode(world, policy, 0)
    with pytest.raises(UsageError):
        evaluate(world, ["teleport"], [0])


def test_diffusion_only_follows_samples_at_full_speed(world, small_model):
    log = run_episode(world, "diffusion-only", 3, PolicyArtifacts(diffusion=small_model))
    speeds = np.array([s.speed for s in log.steps])
    assert np.mean(speeds == world.evader_speed) > 0.9


def test_parallel_evaluation_matches_serial(world):
    serial = evaluate(world, ["vo"], [5, 6], workers=1)
    parallel = evaluate(world, ["vo"], [5, 6], workers=2)
    assert [l.to_jsonl() for l in serial["vo"]] == [l.to_jsonl() for l in parallel["vo"]]


# -- timing --


def test_timing_rejects_zero_count(world, small_model):
    with pytest.raises(UsageError):
        timing_study(world, small_model, counts=[0])


def test_timing_table_shape(world, small_model):
    rows = timing_study(world, small_model, counts=[1, 2], repeats=2, rrt_params=RRTParams(iterations=100))
    assert [(r.count, r.method) for r in rows] == [(1, "diffusion"), (1, "rrtstar"), (2, "diffusion"), (2, "rrtstar")]
    assert timing_csv(rows).splitlines()[0] == "count,method,mean_s,std_s,median_s,repeats"


# -- rendering --


def test_render_is_byte_deterministic(world):
    log = run_episode(world, "vo", 1)
    a = png_bytes(render_episode(world, log))
    b = png_bytes(render_episode(world, log))
    assert a == b and a[:8] == b"\x89PNG\r\n\x1a\n"


def test_empty_overlays_give_base_image(world):
    img = render(world, RenderLayers(), size=128)
    plain = render(world, size=128)
    assert png_bytes(img) == png_bytes(plain)
    assert img.size == (128, 128)


def test_costmap_brightest_pixel_is_argmax():
    g = DepositGrid(64, 0.03)
    g.add((0.7, 0.2))
    cm = g.finalize(0.1)
    img = np.asarray(costmap_image(cm))
    i, j = np.unravel_index(np.argmax(cm.base), cm.base.shape)
    assert img[63 - i, j] == 255 == img.max()


def test_trajectory_render_has_markers(world):
    log = run_episode(world, "vo", 2)
    img = np.asarray(render_episode(world, log, size=256))
    colours = {tuple(c) for c in img.reshape(-1, 3)}
    assert (30, 80, 200) in colours  # start marker
    assert (40, 150, 60) in colours  # hideouts
    assert (20, 20, 20) in colours  # trajectory
    svg = svg_overlay(world, RenderLayers(trajectory=log.trajectory()))
    assert svg.startswith("<svg") and "polyline" in svg
