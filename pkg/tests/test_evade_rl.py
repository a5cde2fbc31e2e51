import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_difference, relative_error
from evadelab.diffusion import DiffusionModel
from evadelab.env import StepEvents, env_reset
from evadelab.errors import ConfigError, TrainingError, UsageError
from evadelab.evade_rl import (ReplayBuffer, SacAgent, SacConfig, WaypointTracker, action_to_squashed,
                               actor_loss_and_grad, augment_observation, choose_training_hideout,
                               critic_loss_and_grad, polyak_update, sac_act, sac_update, score_reward,
                               squashed_to_action, tracker_advance, train_evader, write_curve)
from evadelab.numerics import DenseNet

# chi-square 0.99 quantile with 19 degrees of freedom (scipy.stats.chi2.ppf(0.99, 19)), frozen
CHI2_99_DF19 = 36.19086912927004


def small_agent(obs_dim=6, seed=0, **kw):
    cfg = SacConfig(hidden=(16, 16), batch_size=8, **kw)
    return SacAgent.create(obs_dim, cfg, seed=seed, evader_index=0)


def filled_buffer(agent, n=32, seed=0, reward=None):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(agent.obs_dim, 64)
    for _ in range(n):
        r = rng.normal() if reward is None else reward
        buf.add(rng.uniform(-1, 1, agent.obs_dim), rng.uniform(-1, 1, 2), r, rng.uniform(-1, 1, agent.obs_dim),
                rng.random() < 0.1)
    return buf


def zero_output(net: DenseNet):
    w, b = net.layer_views(len(net.layers) - 1)
    w[...] = 0.0
    b[...] = 0.0


# -- waypoints --


def test_augment_observation():
    wp = np.array([[0.1, 0.1], [0.5, 0.5], [0.9, 0.8]])
    obs = np.arange(5.0)
    tr = WaypointTracker(wp, 0.04)
    assert augment_observation(obs, tr).shape == (7,)
    assert augment_observation(obs, WaypointTracker(wp, 0.04, 2))[-2:] == pytest.approx([0.9, 0.8])
    tr2, hit = tracker_advance(tr, np.array([0.1, 0.1]))
    assert hit and tr2.index == 1
    assert augment_observation(obs, tr2)[-2:] == pytest.approx([0.5, 0.5])


def test_tracker_radius_edges():
    wp = np.array([[0.0, 0.0], [0.5, 0.0]])
    tr = WaypointTracker(wp, 0.04)
    same, hit = tracker_advance(tr, np.array([0.04 + 1e-9, 0.0]))
    assert not hit and same.index == 0
    last = WaypointTracker(wp, 0.04, 1)
    stay, hit = tracker_advance(last, np.array([0.5, 0.01]))
    assert hit and stay.index == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=40))
def test_tracker_index_never_decreases(positions):
    tr = WaypointTracker(np.linspace([0, 0], [1, 1], 6), 0.2)
    for p in positions:
        new, _ = tracker_advance(tr, np.array(p))
        assert tr.index <= new.index < 6
        tr = new


# -- acting --


def test_action_mapping_round_trip():
    for h, s in [(0.3, 1.0), (-2.0, 0.5), (3.0, 0.0)]:
        a = squashed_to_action(action_to_squashed(squashed_to_action(np.array([math.cos(h), math.sin(h)]) * s)))
        assert a.speed == pytest.approx(s)
        if s:
            assert a.heading == pytest.approx(h)


def test_deterministic_action_is_repeatable():
    agent = small_agent()
    x = np.linspace(-1, 1, 6)
    a1, raw1 = sac_act(agent, x, "deterministic")
    a2, raw2 = sac_act(agent, x, "deterministic")
    assert a1 == a2 and np.array_equal(raw1, raw2)
    with pytest.raises(UsageError):
        sac_act(agent, x, "stochastic")
    with pytest.raises(UsageError):
        sac_act(agent, x, "greedy")


def test_stochastic_actions_stay_in_bounds():
    agent = small_agent()
    rng = np.random.default_rng(0)
    obs = np.tile(np.linspace(-1, 1, 6), (10_000, 1))
    a, logp = agent.sample_action(obs, rng)
    assert np.all(np.abs(a) < 1) and np.all(np.isfinite(logp))


def test_entropy_falls_with_log_std():
    agent = small_agent()
    rng = np.random.default_rng(1)
    obs = np.zeros((20_000, 6))

    def entropy(bias):
        w, b = agent.actor.layer_views(len(agent.actor.layers) - 1)
        w[:, 2:] = 0.0
        b[2:] = bias
        _, logp = agent.sample_action(obs, rng)
        return -float(np.mean(logp))

    assert entropy(-3.0) < entropy(-1.0) < entropy(0.5)


# -- replay --


def test_replay_capacity_and_uniform_sampling():
    buf = ReplayBuffer(3, 20)
    for k in range(45):
        buf.add(np.full(3, k), np.zeros(2), float(k), np.zeros(3), False)
    assert len(buf) == 20 and buf.inserted == 45
    assert set(buf.rew) == set(range(25, 45))
    idx = buf.sample_indices(40_000, np.random.default_rng(0))
    counts = np.bincount(idx, minlength=20)
    expected = 40_000 / 20
    assert float(np.sum((counts - expected) ** 2 / expected)) < CHI2_99_DF19


# -- updates --


def test_update_skips_on_small_buffer():
    agent = small_agent()
    rec = sac_update(agent, filled_buffer(agent, n=3), np.random.default_rng(0))
    assert rec.skipped and agent.updates == 0


def test_perfect_critics_on_zero_reward():
    agent = small_agent(gamma=0.0)
    zero_output(agent.q1)
    zero_output(agent.q2)
    rec = sac_update(agent, filled_buffer(agent, reward=0.0), np.random.default_rng(0))
    assert rec.critic1 == 0.0 and rec.critic2 == 0.0


def test_full_polyak_copies_online():
    agent = small_agent(polyak=1.0)
    sac_update(agent, filled_buffer(agent), np.random.default_rng(0))
    assert np.array_equal(agent.q1_target.params, agent.q1.params)
    assert np.array_equal(agent.q2_target.params, agent.q2.params)


def test_polyak_recursion_closed_form():
    online = DenseNet.mlp([1, 1], rng=np.random.default_rng(0))
    target = DenseNet.mlp([1, 1], rng=np.random.default_rng(1))
    start = target.params.copy()
    rho = 0.1
    for k in range(1, 30):
        polyak_update(target, online, rho)
        expected = online.params + (1 - rho) ** k * (start - online.params)
        assert target.params == pytest.approx(expected, rel=1e-12, abs=1e-15)


def test_critic_gradient_matches_finite_differences():
    agent = small_agent()
    rng = np.random.default_rng(2)
    obs, act, y = rng.uniform(-1, 1, (8, 8)), rng.uniform(-1, 1, (8, 2)), rng.normal(size=8)
    net = agent.q1
    base = net.params.copy()
    _, g = critic_loss_and_grad(net, obs, act, y)

    def loss(p):
        net.set_params(p)
        return critic_loss_and_grad(net, obs, act, y)[0]

    fd = central_difference(loss, base, h=1e-6)
    net.set_params(base)
    assert relative_error(g, fd) < 1e-4


def test_actor_gradient_matches_finite_differences():
    agent = small_agent()
    rng = np.random.default_rng(3)
    obs = rng.uniform(-1, 1, (8, 6))
    z = rng.standard_normal((8, 2))
    base = agent.actor.params.copy()
    _, g, _ = actor_loss_and_grad(agent, obs, z)

    def loss(p):
        agent.actor.set_params(p)
        return actor_loss_and_grad(agent, obs, z)[0]

    fd = central_difference(loss, base, h=1e-6)
    agent.actor.set_params(base)
    assert relative_error(g, fd) < 1e-4


def test_non_finite_reward_aborts():
    agent = small_agent()
    with pytest.raises(TrainingError):
        sac_update(agent, filled_buffer(agent, reward=math.nan), np.random.default_rng(0))


def test_many_updates_stay_finite():
    agent = small_agent()
    buf = filled_buffer(agent, n=64)
    rng = np.random.default_rng(4)
    for _ in range(300):
        rec = sac_update(agent, buf, rng)
    assert all(math.isfinite(v) for v in (rec.critic1, rec.critic2, rec.actor, rec.alpha))
    a, _ = agent.sample_action(rng.uniform(-1, 1, (100, 6)), rng)
    assert np.all(np.abs(a) <= 1)


# -- rewards and training loop --


def test_score_reward():
    assert score_reward(StepEvents(goal_reached=True)) == 50.0
    assert score_reward(StepEvents(timed_out=True, detection_count=2)) == -51.0
    assert score_reward(StepEvents(detection_count=1)) == -1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["nearest", "random"]))
def test_training_hideout_is_active(seed, rule):
    from evadelab.env import load_config

    world = load_config("prisoner")
    s = env_reset(world, seed)
    h = choose_training_hideout(s.hideouts, s.evader_pos, np.random.default_rng(seed), rule)
    assert any(np.array_equal(h, x) for x in s.hideouts)


def test_training_is_deterministic(world, tmp_path):
    model = DiffusionModel.create(n_waypoints=6, obstacle_slots=world.obstacle_slots, steps=5, hidden=(16,), seed=0)
    cfg = SacConfig(hidden=(16,), batch_size=16, random_steps=100, update_after=50)
    runs = [train_evader(world, model, cfg, seed=3, total_steps=400, record_transitions=True) for _ in range(2)]
    assert len(runs[0].transitions) == 400
    for (o1, a1, r1, d1), (o2, a2, r2, d2) in zip(runs[0].transitions, runs[1].transitions):
        assert np.array_equal(o1, o2) and np.array_equal(a1, a2) and r1 == r2 and d1 == d2
    assert np.array_equal(runs[0].agent.actor.params, runs[1].agent.actor.params)
    assert runs[0].transitions[0][0].shape == (world.observation_size + 2,)
    write_curve(tmp_path / "c.csv", runs[0].curve)
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "episode,return,detections,goal_reached,steps"


def test_checkpoint_round_trip(tmp_path):
    agent = small_agent()
    sac_update(agent, filled_buffer(agent), np.random.default_rng(0))
    agent.save(tmp_path / "a.json")
    loaded = SacAgent.load(tmp_path / "a.json")
    x = np.linspace(-1, 1, 6)
    assert sac_act(loaded, x, "deterministic")[0] == sac_act(agent, x, "deterministic")[0]
    assert loaded.evader_index == 0 and loaded.updates == 1
    d = agent.to_dict()
    d["obs_dim"] = 9
    (tmp_path / "b.json").write_text(__import__("json").dumps(d))
    with pytest.raises(ConfigError):
        SacAgent.load(tmp_path / "b.json")
