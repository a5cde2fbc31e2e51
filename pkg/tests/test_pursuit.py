import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evadelab.env import load_config
from evadelab.pursuit import (INTERCEPT, PATROL, PREDICT, VICINITY, PursuitMemory, predicted_target, pursuit_step,
                              select_mode)


def memory_with(world, points):
    mem = PursuitMemory.fresh(world.n_dynamic)
    for t, p in points:
        mem.record(np.array(p), t)
    return mem


def test_no_detection_means_patrol(world):
    mem = PursuitMemory.fresh(world.n_dynamic)
    assert select_mode(mem, 10, world) == PATROL
    cmds, mem2 = pursuit_step(mem, np.full((3, 2), 0.5), [], 10, world)
    assert mem2.modes == [PATROL] * 3
    assert mem.modes == [PATROL] * 3 and mem.patrol_index == [-1] * 3  # input memory untouched


@pytest.mark.parametrize("age,single,mode", [
    (0, True, INTERCEPT), (4, True, INTERCEPT), (5, False, PREDICT), (29, False, PREDICT),
    (5, True, VICINITY), (30, False, VICINITY), (119, False, VICINITY), (120, False, PATROL),
])
def test_mode_by_detection_age(world, age, single, mode):
    pts = [(100, (0.5, 0.5))] if single else [(99, (0.49, 0.5)), (100, (0.5, 0.5))]
    assert select_mode(memory_with(world, pts), 100 + age, world) == mode


def test_intercept_heads_to_detection_at_full_speed(world):
    pos = np.array([[0.1, 0.5], [0.5, 0.1], [0.9, 0.9]])
    cmds, mem = pursuit_step(PursuitMemory.fresh(3), pos, [np.array([0.5, 0.5])], 7, world)
    assert mem.modes == [INTERCEPT] * 3
    for k, name in enumerate(world.team):
        speed = world.agent_types[name].speed
        assert math.hypot(*cmds[k]) == pytest.approx(speed)
        direction = (np.array([0.5, 0.5]) - pos[k]) / np.hypot(*(np.array([0.5, 0.5]) - pos[k]))
        assert np.allclose(cmds[k] / speed, direction)


def test_prediction_extrapolates_heading(world):
    mem = memory_with(world, [(10, (0.4, 0.5)), (11, (0.41, 0.5))])
    target = predicted_target(mem, 21, 0.01)
    assert target == pytest.approx([0.51, 0.5])


def test_near_target_stops_exactly(world):
    pos = np.array([[0.5, 0.505], [0.1, 0.1], [0.9, 0.9]])
    cmds, _ = pursuit_step(PursuitMemory.fresh(3), pos, [np.array([0.5, 0.5])], 0, world)
    assert cmds[0] == pytest.approx([0.0, -0.005])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=3, max_size=3),
       st.lists(st.tuples(st.integers(0, 200), st.floats(0, 1), st.floats(0, 1)), max_size=6),
       st.integers(0, 400))
def test_commands_respect_speed_limits(pos, dets, t):
    world = load_config("prisoner")
    mem = PursuitMemory.fresh(3)
    for td, x, y in sorted(dets):
        if td <= t:
            mem.record(np.array([x, y]), td)
    cmds, _ = pursuit_step(mem, np.array(pos), [], t, world)
    for k, name in enumerate(world.team):
        assert math.hypot(*cmds[k]) <= world.agent_types[name].speed + 1e-12


def test_repeated_detections_close_the_gap(world):
    pos = np.array([[0.1, 0.9], [0.9, 0.1], [0.9, 0.9]])
    target = np.array([0.3, 0.3])
    mem = PursuitMemory.fresh(3)
    gaps = [np.hypot(*(pos - target).T)]
    for t in range(20):
        cmds, mem = pursuit_step(mem, pos, [target], t, world)
        pos = pos + cmds
        gaps.append(np.hypot(*(pos - target).T))
    gaps = np.array(gaps)
    assert np.all(np.diff(gaps, axis=0) <= 1e-12)
    assert gaps[-1, 2] == pytest.approx(gaps[0, 2] - 20 * world.agent_types["helicopter"].speed)
