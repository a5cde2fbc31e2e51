import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evadelab.diffusion import (DiffusionModel, PathConstraint, apply_constraints, constraint_violations,
                                diffusion_loss, forward_noise, forward_noise_abar, make_schedule, sample_paths,
                                schedule_from_betas, time_embedding, train_step)
from evadelab.errors import ConfigError, TrainingError, UsageError
from evadelab.planners import astar, downsample


def instance(world):
    return PathConstraint(np.array([0.08, 0.1]), world.hideouts[0].copy(), world.obstacles)


# -- schedules --


@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("steps", [1, 2, 10, 50, 200])
def test_schedule_monotone(kind, steps):
    s = make_schedule(steps, kind)
    assert s.alpha_bars[0] == 1.0
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all(s.posterior_var >= 0)
    assert s.alpha_bars[1] < 1.0


def test_linear_schedule_product():
    s = schedule_from_betas([0.1, 0.2], "linear")
    assert s.alpha_bars[1:] == pytest.approx([0.9, 0.72])
    assert make_schedule(2, "linear", beta_start=0.1, beta_end=0.2).alpha_bars[1:] == pytest.approx([0.9, 0.72])


def test_cosine_endpoint():
    # closed form: f(t) = cos^2(((t/T) + s) / (1 + s) * pi / 2), abar_T = f(T) / f(0) with s = 0.008
    f = lambda t: math.cos(((t / 50) + 0.008) / 1.008 * math.pi / 2) ** 2
    abar_t = f(50) / f(0)
    assert abar_t < 0.01
    assert make_schedule(50, "cosine").alpha_bars[50] == pytest.approx(max(abar_t, 0.0), abs=1e-6)


def test_schedule_errors():
    with pytest.raises(UsageError):
        make_schedule(0)
    with pytest.raises(UsageError):
        make_schedule(10, "quadratic")


# -- forward process --


def test_forward_noise_limits():
    tau0, eps = np.array([1.0, 0.0]), np.array([0.0, 2.0])
    assert forward_noise_abar(tau0, 1.0, eps) == pytest.approx(tau0)
    assert forward_noise_abar(tau0, 0.0, eps) == pytest.approx(eps)
    assert forward_noise_abar(tau0, 0.25, eps) == pytest.approx([0.5, math.sqrt(3)])


def test_forward_noise_variance():
    s = make_schedule(50)
    rng = np.random.default_rng(0)
    tau0 = np.array([0.3, -0.6])
    i = 20
    draws = forward_noise(np.tile(tau0, (100_000, 1)), np.full(100_000, i), rng.standard_normal((100_000, 2)), s)
    var = np.mean((draws - math.sqrt(s.alpha_bars[i]) * tau0) ** 2, axis=0)
    assert var == pytest.approx(np.full(2, 1 - s.alpha_bars[i]), rel=0.05)


def test_time_embedding_shape():
    e = time_embedding(np.array([1, 2, 3]))
    assert e.shape == (3, 16)
    assert np.all(np.abs(e) <= 1)


# -- loss --


def test_loss_zero_when_prediction_matches_noise(monkeypatch):
    model = DiffusionModel.create(n_waypoints=4, obstacle_slots=1, seed=0)
    rng = np.random.default_rng(1)
    eps = rng.standard_normal((5, 8))
    monkeypatch.setattr(model, "predict_noise", lambda tau, i, c: (eps.copy(), None))
    loss, *_ = diffusion_loss(model, np.zeros((5, 8)), np.zeros((5, model.cond_size)), np.ones(5, int), eps)
    assert loss == 0.0


def test_loss_of_zero_predictor_is_noise_second_moment():
    model = DiffusionModel.create(n_waypoints=10, obstacle_slots=2, seed=0)
    model.net.set_params(np.zeros(model.net.param_count))
    rng = np.random.default_rng(2)
    n = 4000
    eps = rng.standard_normal((n, 20))
    loss, *_ = diffusion_loss(model, np.zeros((n, 20)), np.zeros((n, model.cond_size)), rng.integers(1, 51, n), eps)
    assert loss == pytest.approx(20.0, rel=0.03)


def test_loss_matches_manual_recomputation():
    model = DiffusionModel.create(n_waypoints=3, obstacle_slots=1, seed=4, hidden=(8,))
    rng = np.random.default_rng(3)
    tau0 = rng.uniform(-1, 1, (4, 6))
    cond = rng.uniform(-1, 1, (4, model.cond_size))
    steps = np.array([1, 7, 25, 50])
    eps = rng.standard_normal((4, 6))
    loss, eps_hat, _, _ = diffusion_loss(model, tau0, cond, steps, eps)
    manual = 0.0
    for b in range(4):
        ab = model.schedule.alpha_bars[steps[b]]
        x = math.sqrt(ab) * tau0[b] + math.sqrt(1 - ab) * eps[b]
        inp = np.concatenate([x, time_embedding(steps[b])[0], cond[b]])
        out = model.net(inp[None])[0]
        manual += sum((e - o) ** 2 for e, o in zip(eps[b], out))
    assert loss == pytest.approx(manual / 4, rel=1e-12)


def test_train_step_rejects_nan_and_empty():
    model = DiffusionModel.create(n_waypoints=3, obstacle_slots=1, seed=0, hidden=(8,))
    rng = np.random.default_rng(0)
    with pytest.raises(UsageError):
        train_step(model, np.zeros((0, 6)), np.zeros((0, model.cond_size)), rng)
    with pytest.raises(TrainingError):
        train_step(model, np.full((2, 6), np.nan), np.zeros((2, model.cond_size)), rng)


def test_training_loss_decreases(small_model):
    losses = np.array(small_model.loss_history)
    k = max(1, len(losses) // 10)
    assert np.median(losses[-k:]) < 0.5 * np.median(losses[:k])


# -- constraints --


def test_constraints_pin_endpoints(world):
    c = instance(world)
    tau = np.linspace([0.5, 0.0], [0.0, 0.5], 6)
    out = apply_constraints(tau, c)
    assert np.array_equal(out[0], c.start) and np.array_equal(out[-1], c.goal)


def test_constraints_leave_feasible_path_alone():
    c = PathConstraint(np.array([0.1, 0.1]), np.array([0.9, 0.1]), np.array([[0.5, 0.6, 0.1]]))
    tau = np.linspace(c.start, c.goal, 5)
    assert np.array_equal(apply_constraints(tau, c), tau)


def test_constraints_center_tie_break():
    c = PathConstraint(np.array([0.1, 0.5]), np.array([0.9, 0.5]), np.array([[0.5, 0.5, 0.1]]))
    tau = np.array([[0.1, 0.5], [0.5, 0.5], [0.9, 0.5]])
    out = apply_constraints(tau, c, segment_passes=0)
    assert out[1] == pytest.approx([0.5 + 0.1 * 1.05, 0.5])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=6, max_size=6))
def test_constraints_idempotent(pts):
    c = PathConstraint(np.array([0.05, 0.05]), np.array([0.95, 0.9]), np.array([[0.45, 0.48, 0.09], [0.74, 0.28, 0.08]]))
    once = apply_constraints(np.array(pts), c)
    assert np.allclose(apply_constraints(once, c), once, atol=1e-12)
    assert np.all((once >= 0) & (once <= 1))


# -- sampling --


def test_sampling_is_reproducible_with_exact_endpoints(world, small_model):
    c = instance(world)
    a = sample_paths(small_model, c, 1, seed=3).paths[0]
    b = sample_paths(small_model, c, 1, seed=3).paths[0]
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.points[0], c.start) and np.array_equal(a.points[-1], c.goal)


def test_sampled_paths_respect_constraints(world, small_model):
    c = instance(world)
    res = sample_paths(small_model, c, 30, seed=0)
    pts = np.stack([p.points for p in res.paths])
    assert len(res.paths) == 30
    assert np.all(pts[:, 0] == c.start) and np.all(pts[:, -1] == c.goal)
    assert not np.any(constraint_violations(pts, c)[~np.array(res.flagged)])


def test_different_seeds_give_different_paths(world, small_model):
    c = instance(world)
    a = sample_paths(small_model, c, 1, seed=1).paths[0].points
    b = sample_paths(small_model, c, 1, seed=2).paths[0].points
    assert np.max(np.abs(a[1:-1] - b[1:-1])) > 0


def test_diffusion_paths_more_diverse_than_astar(world, small_model):
    c = instance(world)
    diff = np.stack([p.points.ravel() for p in sample_paths(small_model, c, 20, seed=0).paths])
    ref = np.stack([downsample(astar(world, c.start, c.goal), 10).points.ravel() for _ in range(20)])

    def spread(x):
        d = np.linalg.norm(x[:, None] - x[None], axis=-1)
        return d[np.triu_indices(len(x), 1)].mean()

    assert spread(diff) > spread(ref)


def test_batched_sampling_scales(world, small_model):
    c = instance(world)
    sample_paths(small_model, c, 1, seed=0)

    def best(n):
        times = []
        for r in range(5):
            t0 = time.perf_counter()
            sample_paths(small_model, c, n, seed=r)
            times.append(time.perf_counter() - t0)
        return min(times)

    assert best(50) <= 8 * best(1)


def test_sampling_errors(world, small_model):
    with pytest.raises(UsageError):
        sample_paths(small_model, instance(world), 0, seed=0)


def test_checkpoint_round_trip(tmp_path, world, small_model):
    path = tmp_path / "m.json"
    small_model.save(path)
    loaded = DiffusionModel.load(path)
    c = instance(world)
    assert np.array_equal(sample_paths(loaded, c, 2, seed=9).paths[1].points,
                          sample_paths(small_model, c, 2, seed=9).paths[1].points)
    bad = loaded.to_dict()
    bad["n_waypoints"] = 7
    path.write_text(__import__("json").dumps(bad))
    with pytest.raises(ConfigError):
        DiffusionModel.load(path)
    with pytest.raises(ConfigError):
        DiffusionModel.load(tmp_path / "missing.json")
