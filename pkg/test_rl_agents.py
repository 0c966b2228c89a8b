#!/usr/bin/env python3
"""
Test script for the heuristic-scoring agents

Covers state encoding, returns and surrogate helpers, the epoch protocol
and finite-difference checks of every hand-derived loss gradient.
"""

import numpy as np
import pytest
from dotenv import load_dotenv

from hyper_heuristic import Scoreboard, SearchConfig, epoch_update, update_measures
from rl_agents import (
    A2CAgent,
    AgentConfig,
    Batch,
    PPOAgent,
    ReplayBuffer,
    SACAgent,
    Transition,
    UnknownVariantError,
    clipped_surrogate,
    encode_state,
    make_agent,
    soft_update_target,
    standardize_returns,
)

# Load environment variables
load_dotenv()

N = 3
SMALL = AgentConfig(hidden=(8, 8), window=2, sigma=0.3)


def _batch(agent, size=5, seed=0, terminal=True) -> Batch:
    rng = np.random.default_rng(seed)
    transitions = [
        Transition(rng.normal(size=agent.state_dim), rng.normal(size=agent.n), float(rng.normal()),
                   rng.normal(size=agent.state_dim), terminal and i == size - 1)
        for i in range(size)
    ]
    return Batch.of(transitions)


def _finite_difference(params, loss, h=1e-5):
    grads = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + h
            up = loss()
            p[idx] = keep - h
            down = loss()
            p[idx] = keep
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def _max_relative_error(analytic, numeric, floor=1e-4):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor))))
    return worst


def _history(n, epochs, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(epochs):
        rows = rng.random((3, n))
        out.append(rows / rows.sum(axis=1, keepdims=True))
    return out


def test_state_encoding_shape_and_padding():
    print("🧪 Testing state encoding")
    state = encode_state([], 2, 1)
    assert state.shape == (1, 3, 2)
    assert np.all(state == 0.0)
    history = _history(2, 3)
    state = encode_state(history, 2, 5)
    assert state.shape == (5, 3, 2)
    assert np.all(state[:2] == 0.0)
    assert np.array_equal(state[-1], history[-1])


def test_history_slices_are_distributions():
    sb = Scoreboard.fresh(4)
    config = SearchConfig()
    update_measures(sb, 0, 2.0, 1.0)
    update_measures(sb, 3, -1.0, 2.0)
    epoch_update(sb, config, True)
    epoch_update(sb, config, False)
    for entry in sb.history:
        for row in entry:
            assert abs(row.sum() - 1.0) <= 1e-12 or row.sum() == 0.0


def test_zero_actor_without_noise_is_uniform():
    print("🧪 Testing uniform agent scores")
    agent = A2CAgent(N, AgentConfig(hidden=(8, 8), window=2, sigma=0.0), seed=0)
    agent.net.actor.zero_()
    s2 = agent.agent_epoch_step(_history(N, 2), 0.0, np.random.default_rng(0))
    assert np.allclose(s2, 1.0 / N, rtol=0, atol=1e-15)


def test_agent_scores_sum_to_one():
    for variant in ("a2c", "ppo", "sac"):
        agent = make_agent(variant, N, SMALL, seed=1)
        rng = np.random.default_rng(1)
        for epoch in range(6):
            s2 = agent.agent_epoch_step(_history(N, epoch + 1), float(epoch), rng)
            assert abs(s2.sum() - 1.0) <= 1e-12
            assert np.all(s2 >= 0)


def test_standardized_returns():
    print("🧪 Testing return standardisation")
    out = standardize_returns([1.0, 2.0, 3.0])
    assert out == pytest.approx([-1.2247449, 0.0, 1.2247449], abs=1e-6)
    assert np.all(standardize_returns([5.0, 5.0, 5.0]) == 0.0)
    assert np.all(standardize_returns([7.0]) == 0.0)
    x = standardize_returns(np.random.default_rng(2).normal(3.0, 4.0, size=50))
    assert abs(x.mean()) <= 1e-9
    assert abs(x.std() - 1.0) <= 1e-6


def test_myopic_advantage_is_reward():
    agent = A2CAgent(N, AgentConfig(hidden=(8, 8), window=2, gamma=0.0), seed=3)
    agent.net.critic.zero_()
    batch = _batch(agent, size=4, terminal=False)
    targets = agent.prepare(batch)
    expected = standardize_returns(batch.rewards)
    assert np.allclose(targets['advantages'], expected, rtol=0, atol=1e-12)
    assert np.allclose(targets['returns'], expected, rtol=0, atol=1e-12)


def test_bootstrap_uses_critic_unless_terminal():
    agent = A2CAgent(N, AgentConfig(hidden=(8, 8), window=2, gamma=0.5), seed=4)
    open_batch = _batch(agent, size=3, seed=4, terminal=False)
    closed = Batch(open_batch.states, open_batch.actions, open_batch.rewards, open_batch.next_states,
                   np.array([False, False, True]))
    _mu, v_next = agent.net.forward(open_batch.next_states[-1:])
    gap = agent.prepare(open_batch)['returns'][-1] - agent.prepare(closed)['returns'][-1]
    assert gap == pytest.approx(0.5 * v_next[0], rel=1e-12, abs=1e-15)


def test_clipped_surrogate_examples():
    print("🧪 Testing clipped surrogate")
    assert clipped_surrogate(np.array([2.0]), np.array([1.0]), 0.2)[0] == pytest.approx(1.2)
    assert clipped_surrogate(np.array([0.5]), np.array([-1.0]), 0.2)[0] == pytest.approx(-0.8)
    assert clipped_surrogate(np.array([1.0]), np.array([0.7]), 0.2)[0] == pytest.approx(0.7)


def test_ppo_ratio_is_one_at_collection():
    agent = PPOAgent(N, SMALL, seed=5)
    batch = _batch(agent, seed=5)
    ratio = agent.ratio(batch, agent.prepare(batch))
    assert np.max(np.abs(ratio - 1.0)) <= 1e-10


def test_soft_update_target():
    print("🧪 Testing target network averaging")
    agent = SACAgent(N, SMALL, seed=6)
    agent.v_net.set_flat(agent.v_net.flat() + 1.0)
    soft_update_target(agent.v_target, agent.v_net, 1.0)
    assert np.array_equal(agent.v_target.flat(), agent.v_net.flat())

    agent.v_net.set_flat(agent.v_net.flat() + 1.0)
    distance = np.linalg.norm(agent.v_target.flat() - agent.v_net.flat())
    for _ in range(200):
        soft_update_target(agent.v_target, agent.v_net, 0.05)
    after = np.linalg.norm(agent.v_target.flat() - agent.v_net.flat())
    assert after == pytest.approx(distance * 0.95 ** 200, rel=1e-6)


def test_sac_value_target_without_temperature():
    agent = SACAgent(N, AgentConfig(hidden=(8, 8), window=2, sigma=0.3, alpha_h=0.0), seed=7)
    batch = _batch(agent, seed=7)
    xi = np.random.default_rng(7).standard_normal((len(batch), N))
    mu = agent.policy.forward(batch.states)
    q = agent.q_net.forward(np.hstack([batch.states, mu + 0.3 * xi]))[:, 0]
    assert np.allclose(agent.value_target(batch, xi), q, rtol=0, atol=1e-12)


def test_a2c_gradients_match_finite_differences():
    print("🧪 Testing A2C loss gradient")
    for seed in range(5):
        agent = A2CAgent(N, SMALL, seed=seed)
        batch = _batch(agent, seed=seed)
        targets = agent.prepare(batch)
        _loss, grads = agent.loss_and_grads(batch, targets)
        numeric = _finite_difference(agent.parameters(), lambda: agent.loss_and_grads(batch, targets)[0])
        assert _max_relative_error(grads, numeric) <= 1e-4


def test_ppo_gradients_match_finite_differences():
    print("🧪 Testing PPO loss gradient")
    for seed in range(5):
        agent = PPOAgent(N, SMALL, seed=seed)
        batch = _batch(agent, seed=seed + 10)
        targets = agent.prepare(batch)
        _loss, grads = agent.loss_and_grads(batch, targets)
        numeric = _finite_difference(agent.parameters(), lambda: agent.loss_and_grads(batch, targets)[0])
        assert _max_relative_error(grads, numeric) <= 1e-4


def test_sac_gradients_match_finite_differences():
    print("🧪 Testing SAC loss gradients")
    for seed in range(5):
        agent = SACAgent(N, SMALL, seed=seed)
        batch = _batch(agent, seed=seed + 20)
        xi = np.random.default_rng(seed).standard_normal((len(batch), N))
        rewards = standardize_returns(batch.rewards)

        _loss, grads = agent.value_loss_and_grads(batch, xi)
        numeric = _finite_difference(agent.v_net.parameters(), lambda: agent.value_loss_and_grads(batch, xi)[0])
        assert _max_relative_error(grads, numeric) <= 1e-4

        _loss, grads = agent.q_loss_and_grads(batch, rewards)
        numeric = _finite_difference(agent.q_net.parameters(), lambda: agent.q_loss_and_grads(batch, rewards)[0])
        assert _max_relative_error(grads, numeric) <= 1e-4

        _loss, grads = agent.policy_loss_and_grads(batch, xi)
        numeric = _finite_difference(agent.policy.parameters(), lambda: agent.policy_loss_and_grads(batch, xi)[0])
        assert _max_relative_error(grads, numeric) <= 1e-4


def test_update_period():
    print("🧪 Testing update cadence")
    agent = A2CAgent(N, AgentConfig(hidden=(8, 8), window=2, update_period=5), seed=11)
    rng = np.random.default_rng(11)
    counts = []
    for epoch in range(10):
        agent.agent_epoch_step(_history(N, epoch + 1), 1.0, rng)
        counts.append(agent.updates)
    assert counts == [0, 0, 0, 0, 1, 1, 1, 1, 1, 2]
    agent.end_episode(_history(N, 11), 1.0)
    assert agent.updates == 3


def test_episode_closed_on_epoch_boundary():
    print("🧪 Testing episode end on an epoch boundary")
    agent = A2CAgent(N, AgentConfig(hidden=(8, 8), window=2, update_period=100), seed=14)
    rng = np.random.default_rng(14)
    for epoch in range(5):
        agent.agent_epoch_step(_history(N, epoch + 1), float(epoch), rng)
    assert len(agent.buffer) == 4
    last = agent.buffer.buffer[-1]
    agent.end_episode(_history(N, 5), 0.0, open_epoch=False)
    assert len(agent.buffer) == 4
    assert last.done
    assert not any(t.done for t in list(agent.buffer.buffer)[:-1])
    assert agent.updates == 1


def test_episode_closed_mid_epoch():
    agent = A2CAgent(N, AgentConfig(hidden=(8, 8), window=2, update_period=100), seed=15)
    rng = np.random.default_rng(15)
    for epoch in range(3):
        agent.agent_epoch_step(_history(N, epoch + 1), 1.0, rng)
    agent.end_episode(_history(N, 3), 2.5)
    assert len(agent.buffer) == 3
    assert agent.buffer.buffer[-1].done and agent.buffer.buffer[-1].reward == 2.5
    assert agent.last_transition is None


def test_frozen_agent_is_constant():
    for variant in ("a2c", "ppo", "sac"):
        config = AgentConfig(hidden=(8, 8), window=2, sigma=0.0, actor_lr=0.0, critic_lr=0.0,
                             update_period=1, batch_size=2)
        agent = make_agent(variant, N, config, seed=12)
        history = _history(N, 2, seed=12)
        rng = np.random.default_rng(12)
        first = agent.agent_epoch_step(history, 1.0, rng)
        for reward in (3.0, -2.0, 0.5, 8.0):
            assert np.allclose(agent.agent_epoch_step(history, reward, rng), first, rtol=0, atol=1e-15)


def test_sac_waits_for_a_full_batch():
    agent = SACAgent(N, AgentConfig(hidden=(8, 8), window=2, batch_size=4, update_period=1), seed=13)
    before = agent.policy.flat().copy()
    rng = np.random.default_rng(13)
    for epoch in range(3):
        agent.agent_epoch_step(_history(N, epoch + 1), 1.0, rng)
    assert np.array_equal(agent.policy.flat(), before)
    for epoch in range(3, 6):
        agent.agent_epoch_step(_history(N, epoch + 1), float(epoch), rng)
    assert not np.array_equal(agent.policy.flat(), before)


def test_replay_buffer_drops_oldest():
    buffer = ReplayBuffer(3)
    for i in range(5):
        buffer.append(Transition(np.zeros(2), np.zeros(1), float(i), np.zeros(2)))
    assert len(buffer) == 3
    assert [t.reward for t in buffer.buffer] == [2.0, 3.0, 4.0]
    batch = buffer.sample(2, np.random.default_rng(0))
    assert len(batch) == 2


def test_checkpoint_round_trip(tmp_path):
    print("🧪 Testing agent checkpoints")
    for variant in ("a2c", "ppo", "sac"):
        agent = make_agent(variant, N, SMALL, seed=14)
        path = agent.save(tmp_path / f"{variant}.bin")
        fresh = make_agent(variant, N, SMALL, seed=99, checkpoint=str(path))
        for name, net in agent.networks().items():
            assert np.array_equal(fresh.networks()[name].flat(), net.flat())


def test_checkpoint_variant_mismatch(tmp_path):
    path = make_agent("a2c", N, SMALL, seed=0).save(tmp_path / "a2c.bin")
    with pytest.raises(ValueError):
        make_agent("ppo", N, SMALL, seed=0).load(path)
    with pytest.raises(ValueError):
        make_agent("a2c", N + 1, SMALL, seed=0).load(path)


def test_variant_lookup():
    assert make_agent("baseline", N) is None
    assert isinstance(make_agent("PPO", N, SMALL), PPOAgent)
    with pytest.raises(UnknownVariantError):
        make_agent("dqn", N)


def test_invalid_agent_config():
    with pytest.raises(ValueError):
        AgentConfig(gamma=1.5)
    with pytest.raises(ValueError):
        AgentConfig(sigma=-0.1)
    with pytest.raises(ValueError):
        AgentConfig(hidden=())


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    passed = 0
    for name, fn in tests:
        try:
            if fn.__code__.co_argcount:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(Path(tmp))
            else:
                fn()
            print(f"✅ {name}")
            passed += 1
        except Exception as e:
            print(f"❌ {name}: {e}")
    print(f"\nOverall: {passed}/{len(tests)} tests passed")
