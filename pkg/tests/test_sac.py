import math

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from oracles import fd_check
from hbrl.sac import (LOG_STD_MIN, Batch, Mlp, ReplayBuffer, SacAgent, bc_pretrain, squashed_gaussian,
                      squashed_log_prob)

S, A = 3, 1


def tiny_agent(seed=0, **kw):
    kw.setdefault("reward_scale", 1.0)
    return SacAgent(S, A, (8, 8), rng=np.random.default_rng(seed), dtype=np.float64, **kw)


def random_batch(rng, n=16, s=S, a=A):
    return Batch(rng.normal(size=(n, s)), rng.uniform(-0.9, 0.9, (n, a)), rng.normal(size=n),
                 rng.normal(size=(n, s)), (rng.random(n) < 0.3).astype(float))


class TestMlp:
    def test_zero_net(self, rng):
        net = Mlp((4, 6, 6, 2))
        out, cache = net.forward(rng.normal(size=(5, 4)))
        assert not np.any(out) and not any(np.any(h) for h in cache[1:])

    def test_backward_matches_fd(self, rng):
        net = Mlp((3, 7, 6, 2), rng)
        assert net.n_params <= 200
        x = rng.normal(size=(10, 3))
        w = rng.normal(size=(10, 2))
        out, cache = net.forward(x)
        grads, dx = net.backward(cache, w)
        assert fd_check(net.params, grads, lambda: float(np.sum(w * net(x)))) <= 1e-4
        fd = np.empty_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += 1e-5
            xm[idx] -= 1e-5
            fd[idx] = (np.sum(w * net(xp)) - np.sum(w * net(xm))) / 2e-5
        np.testing.assert_allclose(dx, fd, atol=1e-7)

    def test_deterministic(self):
        a, b = Mlp((3, 5, 1), np.random.default_rng(1)), Mlp((3, 5, 1), np.random.default_rng(1))
        x = np.ones((2, 3))
        ga, _ = a.backward(a.forward(x)[1], np.ones((2, 1)))
        gb, _ = b.backward(b.forward(x)[1], np.ones((2, 1)))
        for p, q in zip(ga, gb):
            np.testing.assert_array_equal(p, q)


class TestSquashedGaussian:
    def test_quadrature(self):
        n = 10_000
        a = -1 + (np.arange(n) + 0.5) * (2.0 / n)
        for mean, log_std in [(0.3, -0.5), (-1.0, 0.2), (0.0, -2.0)]:
            dens = np.exp(squashed_log_prob(np.full((n, 1), mean), np.full((n, 1), log_std), a[:, None]))
            assert dens.sum() * (2.0 / n) == pytest.approx(1.0, abs=1e-3)

    def test_zero_noise_limit(self, rng):
        mean = rng.normal(size=(20, 2))
        act, _ = squashed_gaussian(mean, np.full_like(mean, LOG_STD_MIN), rng.normal(size=(20, 2)))
        np.testing.assert_allclose(act, np.tanh(mean), atol=1e-7)

    def test_sample_logp_matches_density(self, rng):
        mean, log_std = rng.normal(size=(50, 2)), rng.uniform(-1, 0.5, (50, 2))
        act, logp = squashed_gaussian(mean, log_std, rng.normal(size=(50, 2)))
        np.testing.assert_allclose(logp, squashed_log_prob(mean, log_std, act), rtol=1e-6, atol=1e-6)

    def test_actions_inside(self, rng):
        agent = tiny_agent()
        act, logp = agent.sample(rng.normal(size=(500, S)) * 10, rng)
        assert np.all(np.abs(act) <= 1.0) and np.all(np.isfinite(logp))


class TestCritic:
    def test_gradient(self, rng):
        agent = tiny_agent(1)
        assert agent.q1.n_params <= 200
        batch = random_batch(rng)
        eps = rng.normal(size=(16, A))
        loss, grads, _ = agent.critic_loss(batch, eps)
        params = agent.q1.params + agent.q2.params
        assert fd_check(params, grads, lambda: agent.critic_loss(batch, eps)[0]) <= 1e-4

    def test_terminal_target(self, rng):
        agent = tiny_agent()
        b = random_batch(rng)
        b = b._replace(dones=np.ones(16))
        np.testing.assert_allclose(agent.critic_target(b, rng.normal(size=(16, A))), b.rewards, rtol=1e-15)

    def test_myopic_target(self, rng):
        agent = tiny_agent(gamma=0.0)
        b = random_batch(rng)
        np.testing.assert_allclose(agent.critic_target(b, rng.normal(size=(16, A))), b.rewards, rtol=1e-15)

    def test_reward_scale(self, rng):
        agent = tiny_agent(reward_scale=0.25, gamma=0.0)
        b = random_batch(rng)
        np.testing.assert_allclose(agent.critic_target(b, rng.normal(size=(16, A))), 0.25 * b.rewards)

    def test_hand_built_batch(self):
        agent = SacAgent(1, 1, (2,), rng=None, dtype=np.float64, gamma=0.5, reward_scale=1.0)
        for net in (agent.actor, agent.q1, agent.q2, agent.q1_target, agent.q2_target):
            for p in net.params:
                p[...] = 0.0
        agent.q1.params[-1][0] = 1.0
        agent.q2.params[-1][0] = 2.0
        agent.q1_target.params[-1][0] = 3.0
        agent.q2_target.params[-1][0] = 4.0
        b = Batch(np.zeros((2, 1)), np.zeros((2, 1)), np.array([1.0, -2.0]), np.zeros((2, 1)), np.array([0.0, 1.0]))
        eps = np.array([[0.5], [0.0]])
        # mean 0, log-std 0: u = eps, logp = -eps^2/2 - log sqrt(2 pi) - log(1 - tanh(eps)^2)
        logp0 = -0.125 - 0.5 * math.log(2 * math.pi) - math.log(1 - math.tanh(0.5) ** 2)
        y = [1.0 + 0.5 * (3.0 - logp0), -2.0]
        want = sum(((c - y[0]) ** 2 + (c - y[1]) ** 2) / 2 for c in (1.0, 2.0))
        loss, _, target = agent.critic_loss(b, eps)
        np.testing.assert_allclose(target, y, rtol=1e-14)
        assert loss == pytest.approx(want, rel=1e-14)

    def test_clipped_double_q(self, rng):
        agent = tiny_agent(3)
        for p in agent.q2_target.params:
            p += rng.normal(scale=0.3, size=p.shape)
        b = random_batch(rng)
        eps = rng.normal(size=(16, A))
        a2, logp2, _ = agent.policy(b.next_states, eps)
        sa2 = np.concatenate([b.next_states, a2], axis=1)
        q1, q2 = agent.q1_target(sa2)[:, 0], agent.q2_target(sa2)[:, 0]
        assert np.any(q1 < q2) and np.any(q2 < q1)
        want = b.rewards + agent.gamma * (1 - b.dones) * (np.minimum(q1, q2) - agent.alpha * logp2)
        np.testing.assert_allclose(agent.critic_target(b, eps), want, rtol=1e-12)

    def test_no_gradient_through_target(self, rng):
        agent = tiny_agent()
        b = random_batch(rng)
        eps = rng.normal(size=(16, A))
        before = [p.copy() for p in agent.q1_target.params + agent.actor.params]
        agent.critic_update(b, rng)
        for p, q in zip(before, agent.q1_target.params + agent.actor.params):
            np.testing.assert_array_equal(p, q)


class QuadCritic:
    """Stand-in critic Q(s, a) = -sum(a^2) with the Mlp forward/backward interface."""

    def __init__(self, state_dim):
        self.state_dim = state_dim

    def forward(self, sa):
        a = sa[:, self.state_dim:]
        return -np.sum(a**2, axis=1, keepdims=True), [sa]

    def __call__(self, sa):
        return self.forward(sa)[0]

    def backward(self, cache, dout, param_grads=True):
        sa = cache[0]
        dx = np.zeros_like(sa)
        dx[:, self.state_dim:] = -2.0 * sa[:, self.state_dim:] * dout
        return [], dx


class TestActor:
    def test_gradient(self, rng):
        agent = tiny_agent(2)
        assert agent.actor.n_params <= 200
        agent.log_alpha[0] = math.log(0.3)
        states = rng.normal(size=(12, S))
        eps = rng.normal(size=(12, A))
        _, grads, _ = agent.actor_loss(states, eps)
        assert fd_check(agent.actor.params, grads, lambda: agent.actor_loss(states, eps)[0]) <= 1e-4

    def test_critics_untouched(self, rng):
        agent = tiny_agent()
        before = [p.copy() for p in agent.q1.params + agent.q2.params]
        agent.actor_update(rng.normal(size=(8, S)), rng)
        for p, q in zip(before, agent.q1.params + agent.q2.params):
            np.testing.assert_array_equal(p, q)

    def test_zero_alpha_constant_critic(self, rng):
        agent = tiny_agent()
        agent.log_alpha[0] = -np.inf
        for q in (agent.q1, agent.q2):
            for p in q.params:
                p[...] = 0.0
            q.params[-1][0] = 5.0
        loss, grads, _ = agent.actor_loss(rng.normal(size=(8, S)), rng.normal(size=(8, A)))
        assert loss == -5.0 and all(not np.any(g) for g in grads)

    def test_toward_quadratic_optimum(self, rng):
        agent = SacAgent(1, 1, (8,), rng=np.random.default_rng(0), lr=1e-2, dtype=np.float64)
        agent.q1 = agent.q2 = QuadCritic(1)
        agent.log_alpha[0] = math.log(1e-3)
        agent.actor.params[-1][0] = 1.0
        s = np.ones((64, 1))
        start = agent.mean_log_std(s[:1])[0][0, 0]
        for _ in range(300):
            agent.actor_update(s, rng)
        end = agent.mean_log_std(s[:1])[0][0, 0]
        assert abs(end) < 0.1 * abs(start)


class TestTemperature:
    def test_gradient(self, rng):
        agent = tiny_agent()
        logp = rng.normal(size=30)
        _, g = agent.temperature_loss(logp)
        h = 1e-6
        base = agent.log_alpha[0]
        agent.log_alpha[0] = base + h
        up = agent.temperature_loss(logp)[0]
        agent.log_alpha[0] = base - h
        down = agent.temperature_loss(logp)[0]
        assert abs((up - down) / (2 * h) - g[0]) <= 1e-4 * max(abs(g[0]), 1e-8)

    def test_stationary(self):
        agent = tiny_agent()
        _, g = agent.temperature_loss(np.full(5, -agent.target_entropy))
        assert g[0] == 0.0

    def test_low_entropy_raises_alpha(self):
        agent = tiny_agent()
        a0 = agent.alpha
        agent.temperature_update(np.full(8, 3.0))
        assert agent.alpha > a0
        agent.temperature_update(np.full(8, -10.0))
        agent.temperature_update(np.full(8, -10.0))
        agent.temperature_update(np.full(8, -10.0))
        assert agent.alpha < a0

    @pytest.mark.slow
    def test_positive_after_many_updates(self):
        agent = tiny_agent()
        rng = np.random.default_rng(0)
        draws = rng.normal(scale=50.0, size=1_000_000) - 25.0
        for x in draws:
            agent.temperature_update(np.array([x]))
        assert agent.alpha > 0 and np.isfinite(agent.alpha)

    @hsettings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200))
    def test_positive_fuzz(self, values):
        agent = tiny_agent()
        for v in values:
            agent.temperature_update(np.array([v]))
        assert agent.alpha > 0


class TestPolyak:
    def test_endpoints(self, rng):
        agent = tiny_agent(polyak=1.0)
        for p in agent.q1.params:
            p += 1.0
        agent.polyak_update()
        for p, q in zip(agent.q1.params, agent.q1_target.params):
            np.testing.assert_array_equal(p, q)
        agent = tiny_agent(polyak=0.0)
        before = [p.copy() for p in agent.q1_target.params]
        for p in agent.q1.params:
            p += 1.0
        agent.polyak_update()
        for p, q in zip(before, agent.q1_target.params):
            np.testing.assert_array_equal(p, q)

    def test_geometric(self):
        agent = tiny_agent(polyak=0.005)
        start = [p.copy() for p in agent.q1_target.params]
        for p in agent.q1.params:
            p += 2.0
        for _ in range(100):
            agent.polyak_update()
        for p, t, s0 in zip(agent.q1.params, agent.q1_target.params, start):
            np.testing.assert_allclose(t, p + (1 - 0.005) ** 100 * (s0 - p), rtol=1e-12, atol=1e-12)

    def test_targets_start_equal(self):
        agent = tiny_agent()
        for p, q in zip(agent.q2.params, agent.q2_target.params):
            np.testing.assert_array_equal(p, q)
            assert p is not q


class TestBuffer:
    def push(self, buf, i, rng=None):
        return buf.push(np.full(2, i), np.full(1, i), float(i), np.full(2, i + 1), i % 2, rng=rng)

    def test_fifo(self):
        buf = ReplayBuffer(5, 2, 1)
        for i in range(7):
            self.push(buf, i)
        assert len(buf) == 5
        np.testing.assert_array_equal(buf.ordered().rewards, [2, 3, 4, 5, 6])

    def test_no_thinning_keeps_all(self):
        buf = ReplayBuffer(100, 2, 1)
        assert all(self.push(buf, i) for i in range(50)) and len(buf) == 50

    def test_thinning_rate(self):
        rng = np.random.default_rng(11)
        buf = ReplayBuffer(10, 2, 1, p_loss=0.8)
        kept = sum(self.push(buf, i, rng) for i in range(100_000))
        assert kept / 100_000 == pytest.approx(0.2, abs=0.01)
        assert buf.accepted == kept and buf.offered == 100_000

    def test_thinning_requires_rng(self):
        with pytest.raises(ValueError):
            self.push(ReplayBuffer(10, 2, 1, p_loss=0.5), 0)

    def test_empty_sample(self, rng):
        with pytest.raises(ValueError):
            ReplayBuffer(10, 2, 1).sample(4, rng)

    def test_sample_with_replacement(self, rng):
        buf = ReplayBuffer(10, 2, 1)
        for i in range(3):
            self.push(buf, i)
        b = buf.sample(256, rng)
        assert b.states.shape == (256, 2) and set(b.rewards) == {0.0, 1.0, 2.0}

    def test_extend(self, rng):
        buf = ReplayBuffer(10, S, A)
        batch = random_batch(rng, n=4)
        buf.extend(batch)
        for x, y in zip(buf.ordered(), batch):
            np.testing.assert_array_equal(x, y)


class TestBehaviorCloning:
    def test_fixed_point(self, rng):
        agent = tiny_agent()
        s = np.tile(rng.normal(size=(1, S)), (64, 1))
        a = np.full((64, A), 0.5)
        bc_pretrain(agent, s, a, epochs=400, lr=1e-2, rng=rng)
        mean, _ = agent.mean_log_std(s[:1])
        assert mean[0, 0] == pytest.approx(math.atanh(0.5), abs=1e-2)

    def test_zero_epochs(self, rng):
        agent = tiny_agent()
        before = [p.copy() for p in agent.actor.params]
        hist = bc_pretrain(agent, rng.normal(size=(10, S)), rng.uniform(-1, 1, (10, A)), 0, 1e-3, rng)
        assert len(hist) == 1
        for p, q in zip(before, agent.actor.params):
            np.testing.assert_array_equal(p, q)

    def test_nll_non_increasing(self, rng):
        agent = tiny_agent()
        s = rng.normal(size=(32, S))
        a = np.tanh(s[:, :1] * 0.5)
        hist = bc_pretrain(agent, s, a, epochs=60, lr=1e-4, rng=rng, batch_size=64)
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))
        assert hist[-1] < hist[0]

    def test_boundary_actions(self, rng):
        agent = tiny_agent()
        hist = bc_pretrain(agent, rng.normal(size=(8, S)), np.ones((8, A)), 3, 1e-3, rng)
        assert all(np.isfinite(hist))

    def test_empty(self, rng):
        with pytest.raises(ValueError):
            bc_pretrain(tiny_agent(), np.zeros((0, S)), np.zeros((0, A)), 1, 1e-3, rng)


class TestAgent:
    def test_update_deterministic(self):
        agents = []
        for _ in range(2):
            agent = tiny_agent(5)
            rng = np.random.default_rng(9)
            for _ in range(5):
                agent.update(random_batch(rng), rng)
            agents.append(agent)
        for p, q in zip(agents[0].actor.params + agents[0].q1.params, agents[1].actor.params + agents[1].q1.params):
            np.testing.assert_array_equal(p, q)

    def test_non_finite_batch_skipped(self, rng):
        agent = tiny_agent()
        b = random_batch(rng)
        b.rewards[0] = np.nan
        before = [p.copy() for p in agent.q1.params]
        info = agent.update(b, rng)
        assert info.skipped and agent.skipped == 1 and agent.updates == 0
        for p, q in zip(before, agent.q1.params):
            np.testing.assert_array_equal(p, q)

    def test_checkpoint_round_trip(self, tmp_path, rng):
        agent = SacAgent(S, A, (8, 8), rng=np.random.default_rng(0), dtype=np.float32, reward_scale=0.1)
        for _ in range(3):
            agent.update(random_batch(rng), rng)
        agent.save(tmp_path / "a.npz")
        other = SacAgent.load(tmp_path / "a.npz")
        assert other.dtype is np.float32 and other.reward_scale == pytest.approx(0.1)
        for (k, x), (_, y) in zip(agent._named_arrays().items(), other._named_arrays().items()):
            np.testing.assert_array_equal(x, y, err_msg=k)
        b = random_batch(rng)
        agent.update(b, np.random.default_rng(1))
        other.update(b, np.random.default_rng(1))
        for p, q in zip(agent.actor.params, other.actor.params):
            np.testing.assert_array_equal(p, q)

    def test_float32_path(self, rng):
        agent = SacAgent(S, A, (16, 16), rng=np.random.default_rng(0), dtype=np.float32)
        agent.update(random_batch(rng, n=32), rng)
        assert all(p.dtype == np.float32 for p in agent.actor.params + agent.q1.params)
        assert agent.act(np.zeros(S), rng).shape == (A,)
