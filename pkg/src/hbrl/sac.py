"""Soft actor-critic in plain numpy.

Networks are small ReLU MLPs with hand-written backward passes; every loss
exposes a ``*_loss`` method that takes its noise explicitly so gradients
can be checked against finite differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1


class Mlp:
    """Fully connected net, ReLU on hidden layers, linear output.

    ``params`` is a flat list ``[W0, b0, W1, b1, ...]`` with ``W`` of shape
    (fan_in, fan_out).
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None, dtype=np.float64):
        self.sizes = tuple(int(s) for s in sizes)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            if rng is None:
                w = np.zeros((fan_in, fan_out), dtype=dtype)
                b = np.zeros(fan_out, dtype=dtype)
            else:
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
                b = rng.uniform(-bound, bound, size=fan_out).astype(dtype)
            self.params += [w, b]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        cache = [x]
        h = x
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
                cache.append(h)
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: list[np.ndarray], dout: np.ndarray,
                 param_grads: bool = True) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(dout * output)`` w.r.t. params and input.

        With ``param_grads=False`` only the input gradient is computed.
        """
        n_layers = len(self.params) // 2
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        delta = dout
        for i in reversed(range(n_layers)):
            inp = cache[i]
            if param_grads:
                grads[2 * i] = inp.T @ delta
                grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ self.params[2 * i].T
            if i > 0:
                delta = delta * (inp > 0)
        return grads, delta

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.sizes = self.sizes
        other.params = [p.copy() for p in self.params]
        return other

    def load_from(self, other: "Mlp") -> None:
        for mine, theirs in zip(self.params, other.params):
            mine[...] = theirs


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _log1m_tanh2(u: np.ndarray) -> np.ndarray:
    """log(1 - tanh(u)^2), computed without cancellation."""
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


class PolicyCache(NamedTuple):
    net_cache: list
    raw_log_std: np.ndarray
    std: np.ndarray
    eps: np.ndarray
    pre_tanh: np.ndarray
    action: np.ndarray


def squashed_gaussian(mean: np.ndarray, log_std: np.ndarray, eps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reparameterized tanh-Gaussian sample and its log-density (summed over dims)."""
    u = mean + np.exp(log_std) * eps
    logp = np.sum(-0.5 * eps**2 - log_std - HALF_LOG_2PI - _log1m_tanh2(u), axis=-1)
    return np.tanh(u), logp


def squashed_log_prob(mean: np.ndarray, log_std: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Log-density of ``action`` in (-1, 1)^d under the squashed Gaussian."""
    u = np.arctanh(action)
    z = (u - mean) / np.exp(log_std)
    return np.sum(-0.5 * z**2 - log_std - HALF_LOG_2PI - _log1m_tanh2(u), axis=-1)


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray


class ReplayBuffer:
    """FIFO transition store with optional Bernoulli thinning on insertion."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, p_loss: float = 0.0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not 0.0 <= p_loss < 1.0:
            raise ValueError("p_loss must lie in [0, 1)")
        self.capacity, self.state_dim, self.action_dim, self.p_loss = capacity, state_dim, action_dim, p_loss
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.dones = np.zeros(capacity)
        self.size = 0
        self._next = 0
        self.offered = 0
        self.accepted = 0

    def __len__(self) -> int:
        return self.size

    def _store(self, s, a, r, s2, d) -> None:
        i = self._next
        self.states[i], self.actions[i], self.rewards[i] = s, a, r
        self.next_states[i], self.dones[i] = s2, float(d)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push(self, state, action, reward, next_state, done, rng: np.random.Generator | None = None) -> bool:
        """Insert with probability ``1 - p_loss``; returns whether it was kept."""
        self.offered += 1
        if self.p_loss > 0.0 or rng is not None:
            if rng is None:
                raise ValueError("thinning requires an rng")
            if rng.random() < self.p_loss:
                return False
        self._store(state, action, reward, next_state, done)
        self.accepted += 1
        return True

    def extend(self, batch: Batch) -> None:
        """Append every transition of ``batch`` (no thinning), oldest first."""
        for row in zip(*batch):
            self._store(*row)

    def ordered(self) -> Batch:
        """All stored transitions, oldest first."""
        if self.size < self.capacity:
            idx = np.arange(self.size)
        else:
            idx = (np.arange(self.capacity) + self._next) % self.capacity
        return self._gather(idx)

    def _gather(self, idx: np.ndarray) -> Batch:
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.dones[idx])

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return self._gather(rng.integers(0, self.size, size=batch_size))


@dataclass
class UpdateInfo:
    critic_loss: float = math.nan
    actor_loss: float = math.nan
    alpha_loss: float = math.nan
    alpha: float = math.nan
    entropy: float = math.nan
    skipped: bool = False


class SacAgent:
    """Squashed-Gaussian actor, twin critics with Polyak targets, learned temperature."""

    def __init__(self, state_dim: int, action_dim: int, hidden: Sequence[int] = (256, 256), *,
                 lr: float = 3e-4, gamma: float = 0.99, polyak: float = 0.005, reward_scale: float = 1.0,
                 target_entropy: float | None = None, init_alpha: float = 1.0,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.state_dim, self.action_dim = state_dim, action_dim
        self.gamma, self.polyak, self.reward_scale = gamma, polyak, reward_scale
        self.target_entropy = float(-action_dim if target_entropy is None else target_entropy)
        self.dtype = np.dtype(dtype).type
        hidden = tuple(hidden)
        self.actor = Mlp((state_dim, *hidden, 2 * action_dim), rng, dtype)
        self.q1 = Mlp((state_dim + action_dim, *hidden, 1), rng, dtype)
        self.q2 = Mlp((state_dim + action_dim, *hidden, 1), rng, dtype)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.log_alpha = np.array([math.log(init_alpha)])  # kept in float64
        self.lr = lr
        self.actor_opt = Adam(self.actor.params, lr)
        self.critic_opt = Adam(self.q1.params + self.q2.params, lr)
        self.alpha_opt = Adam([self.log_alpha], lr)
        self.updates = 0
        self.skipped = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    # policy ------------------------------------------------------------
    def policy(self, states: np.ndarray, eps: np.ndarray) -> tuple[np.ndarray, np.ndarray, PolicyCache]:
        out, net_cache = self.actor.forward(np.asarray(states, dtype=self.dtype))
        eps = np.asarray(eps, dtype=self.dtype)
        A = self.action_dim
        mean, raw = out[:, :A], out[:, A:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        std = np.exp(log_std)
        u = mean + std * eps
        action = np.tanh(u)
        logp = np.sum(-0.5 * eps**2 - log_std - HALF_LOG_2PI - _log1m_tanh2(u), axis=-1)
        return action, logp, PolicyCache(net_cache, raw, std, eps, u, action)

    def policy_backward(self, cache: PolicyCache, d_action: np.ndarray, d_logp: np.ndarray) -> list[np.ndarray]:
        """Actor parameter gradients given upstream grads on actions and log-probs."""
        d_logp = d_logp[:, None]
        d_u = d_action * (1.0 - cache.action**2) + d_logp * 2.0 * np.tanh(cache.pre_tanh)
        d_log_std = d_u * cache.std * cache.eps - d_logp
        d_log_std = d_log_std * ((cache.raw_log_std >= LOG_STD_MIN) & (cache.raw_log_std <= LOG_STD_MAX))
        grads, _ = self.actor.backward(cache.net_cache, np.concatenate([d_u, d_log_std], axis=1))
        return grads

    def sample(self, states: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        states = np.atleast_2d(states)
        eps = rng.standard_normal((states.shape[0], self.action_dim))
        action, logp, _ = self.policy(states, eps)
        return action, logp

    def act(self, state: np.ndarray, rng: np.random.Generator, deterministic: bool = False) -> np.ndarray:
        if deterministic:
            out = self.actor(np.atleast_2d(state).astype(self.dtype))
            return np.tanh(out[0, :self.action_dim])
        return self.sample(state, rng)[0][0]

    def mean_log_std(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.actor(np.atleast_2d(states).astype(self.dtype))
        return out[:, :self.action_dim], np.clip(out[:, self.action_dim:], LOG_STD_MIN, LOG_STD_MAX)

    # losses ------------------------------------------------------------
    @staticmethod
    def _sa(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.concatenate([states, actions], axis=1)

    def _cast(self, batch: Batch) -> Batch:
        return Batch(*(np.asarray(x, dtype=self.dtype) for x in batch))

    def critic_target(self, batch: Batch, eps_next: np.ndarray) -> np.ndarray:
        batch = self._cast(batch)
        a2, logp2, _ = self.policy(batch.next_states, eps_next)
        sa2 = self._sa(batch.next_states, a2)
        q_next = np.minimum(self.q1_target(sa2), self.q2_target(sa2))[:, 0]
        soft = q_next - self.dtype(self.alpha) * logp2
        return self.dtype(self.reward_scale) * batch.rewards + self.dtype(self.gamma) * (1 - batch.dones) * soft

    def critic_loss(self, batch: Batch, eps_next: np.ndarray) -> tuple[float, list[np.ndarray], np.ndarray]:
        """Summed soft Bellman residual of both critics, grads for q1 + q2 params, and the target."""
        y = self.critic_target(batch, eps_next)
        batch = self._cast(batch)
        sa = self._sa(batch.states, batch.actions)
        n = len(y)
        loss = 0.0
        grads: list[np.ndarray] = []
        for q in (self.q1, self.q2):
            out, cache = q.forward(sa)
            resid = out[:, 0] - y
            loss += float(np.mean(resid**2))
            g, _ = q.backward(cache, self.dtype(2.0 / n) * resid[:, None])
            grads += g
        return loss, grads, y

    def actor_loss(self, states: np.ndarray, eps: np.ndarray) -> tuple[float, list[np.ndarray], np.ndarray]:
        """Entropy-regularized policy loss, actor grads, and the sampled log-probs."""
        states = np.asarray(states, dtype=self.dtype)
        action, logp, cache = self.policy(states, eps)
        sa = self._sa(states, action)
        q1, c1 = self.q1.forward(sa)
        q2, c2 = self.q2.forward(sa)
        n = len(logp)
        use1 = q1[:, 0] <= q2[:, 0]
        q_min = np.where(use1, q1[:, 0], q2[:, 0])
        alpha = self.alpha
        loss = float(np.mean(alpha * logp - q_min))
        w = self.dtype(-1.0 / n)
        _, dx1 = self.q1.backward(c1, np.where(use1, w, 0)[:, None].astype(self.dtype), param_grads=False)
        _, dx2 = self.q2.backward(c2, np.where(use1, 0, w)[:, None].astype(self.dtype), param_grads=False)
        d_action = (dx1 + dx2)[:, self.state_dim:]
        grads = self.policy_backward(cache, d_action, np.full(n, alpha / n, dtype=self.dtype))
        return loss, grads, logp

    def temperature_loss(self, logp: np.ndarray) -> tuple[float, np.ndarray]:
        """Loss mean(-alpha (log pi + target entropy)) and its gradient w.r.t. log alpha."""
        m = float(np.mean(logp + self.target_entropy))
        alpha = self.alpha
        return -alpha * m, np.array([-alpha * m])

    # updates -----------------------------------------------------------
    def critic_update(self, batch: Batch, rng: np.random.Generator) -> float:
        eps = rng.standard_normal((len(batch.rewards), self.action_dim))
        loss, grads, _ = self.critic_loss(batch, eps)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise FloatingPointError("non-finite critic loss")
        self.critic_opt.step(self.q1.params + self.q2.params, grads)
        return loss

    def actor_update(self, states: np.ndarray, rng: np.random.Generator) -> tuple[float, np.ndarray]:
        eps = rng.standard_normal((len(states), self.action_dim))
        loss, grads, logp = self.actor_loss(states, eps)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise FloatingPointError("non-finite actor loss")
        self.actor_opt.step(self.actor.params, grads)
        return loss, logp

    def temperature_update(self, logp: np.ndarray) -> float:
        loss, grad = self.temperature_loss(logp)
        self.alpha_opt.step([self.log_alpha], [grad])
        return self.alpha

    def polyak_update(self) -> None:
        tau = self.polyak
        for net, target in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            for p, tp in zip(net.params, target.params):
                tp *= 1.0 - tau
                tp += tau * p

    def update(self, batch: Batch, rng: np.random.Generator) -> UpdateInfo:
        """One full step: critics, actor, temperature, targets.

        Non-finite losses skip the batch (counted in ``self.skipped``).
        """
        info = UpdateInfo()
        try:
            info.critic_loss = self.critic_update(batch, rng)
            info.actor_loss, logp = self.actor_update(batch.states, rng)
        except FloatingPointError as exc:
            self.skipped += 1
            info.skipped = True
            log.warning("skipping SAC batch: %s", exc)
            return info
        info.alpha_loss = self.temperature_loss(logp)[0]
        info.alpha = self.temperature_update(logp)
        info.entropy = float(-np.mean(logp))
        self.polyak_update()
        self.updates += 1
        return info

    # persistence -------------------------------------------------------
    def _named_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"log_alpha": self.log_alpha}
        nets = {"actor": self.actor, "q1": self.q1, "q2": self.q2, "q1_target": self.q1_target,
                "q2_target": self.q2_target}
        for name, net in nets.items():
            for i, p in enumerate(net.params):
                out[f"{name}.{i}"] = p
        for name, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt),
                          ("alpha_opt", self.alpha_opt)):
            for i, (m, v) in enumerate(zip(opt.m, opt.v)):
                out[f"{name}.m{i}"] = m
                out[f"{name}.v{i}"] = v
            out[f"{name}.t"] = np.array([opt.t])
        return out

    def save(self, path: str | Path) -> None:
        arrays = self._named_arrays()
        meta = np.array([CHECKPOINT_VERSION, self.state_dim, self.action_dim], dtype=np.int64)
        hyper = np.array([self.gamma, self.polyak, self.reward_scale, self.target_entropy, self.lr])
        sizes = np.array(self.actor.sizes[1:-1], dtype=np.int64)
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=meta, __hyper__=hyper, __hidden__=sizes,
                     __dtype__=np.array(np.dtype(self.dtype).name), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "SacAgent":
        with np.load(path) as data:
            version, sdim, adim = (int(v) for v in data["__meta__"])
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            gamma, polyak, scale, target, lr = (float(v) for v in data["__hyper__"])
            agent = cls(sdim, adim, tuple(int(h) for h in data["__hidden__"]), lr=lr, gamma=gamma,
                        polyak=polyak, reward_scale=scale, target_entropy=target,
                        dtype=np.dtype(str(data["__dtype__"])))
            for name, arr in agent._named_arrays().items():
                if name.endswith(".t"):
                    continue
                arr[...] = data[name]
            for name, opt in (("actor_opt", agent.actor_opt), ("critic_opt", agent.critic_opt),
                              ("alpha_opt", agent.alpha_opt)):
                opt.t = int(data[f"{name}.t"][0])
        return agent


def bc_pretrain(agent: SacAgent, states: np.ndarray, actions: np.ndarray, epochs: int, lr: float,
                rng: np.random.Generator, batch_size: int = 256, nudge: float = 1e-6) -> list[float]:
    """Fit the actor to demonstrations by maximum likelihood.

    Returns the mean negative log-likelihood over the whole demo set before
    training and after every epoch. The optimizer used here is discarded.
    """
    states = np.asarray(states, dtype=agent.dtype)
    actions = np.clip(np.asarray(actions, dtype=agent.dtype), -1.0 + nudge, 1.0 - nudge)
    if len(states) == 0:
        raise ValueError("empty demonstration set")
    target_u = np.arctanh(actions)
    A = agent.action_dim

    def nll() -> float:
        mean, log_std = agent.mean_log_std(states)
        return float(-np.mean(squashed_log_prob(mean, log_std, actions)))

    history = [nll()]
    opt = Adam(agent.actor.params, lr)
    n = len(states)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out, cache = agent.actor.forward(states[idx])
            mean, raw = out[:, :A], out[:, A:]
            log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
            z = (target_u[idx] - mean) * np.exp(-log_std)
            m = len(idx)
            d_mean = -z * np.exp(-log_std) / m
            d_log_std = (1.0 - z**2) / m
            d_log_std = d_log_std * ((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX))
            grads, _ = agent.actor.backward(cache, np.concatenate([d_mean, d_log_std], axis=1))
            opt.step(agent.actor.params, grads)
        history.append(nll())
    return history
