"""Two-phase protocol: planner-driven exploration, then warm-started SAC.

Also hosts the evaluation metrics (correlation, convergence episode) and
the ablation suites. Every run is a pure function of (config, seed).
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import rng as rngs
from .belief import BeliefState, NumericalFailure
from .config import RunConfig
from .env import ServiceEnv
from .planner import (LawnmowerState, PlannerSettings, select_lawnmower_action, select_pathmi_action,
                      select_random_action, select_ucb_action)
from .sac import Batch, ReplayBuffer, SacAgent, bc_pretrain

log = logging.getLogger(__name__)

CHANNELS = {
    "none": (False, False),
    "belief": (True, False),
    "buffer": (False, True),
    "both": (True, True),
}


@dataclass
class RunMetrics:
    """Per-episode traces for one (config, seed, arm) run."""

    label: str
    seed: int
    rewards: list[float] = field(default_factory=list)
    mean_variance: list[float] = field(default_factory=list)
    correlation: list[float] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    initial_summary: list[np.ndarray] = field(default_factory=list, repr=False)
    newton_failures: int = 0
    skipped_updates: int = 0
    buffer_start: int = 0

    @property
    def episodes(self) -> int:
        return len(self.rewards)

    def final_reward(self, window: int = 20) -> float:
        return float(np.mean(self.rewards[-window:]))

    def convergence(self, window: int = 20, smoothing: int = 5) -> int:
        return convergence_episode(self.rewards, window, smoothing)


@dataclass
class PhaseOneResult:
    final_belief: BeliefState
    demonstrations: Batch
    metrics: RunMetrics
    episode_beliefs: list[BeliefState] = field(default_factory=list, repr=False)
    episode_truths: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def n_demonstrations(self) -> int:
        return len(self.demonstrations.rewards)


def planner_settings(config: RunConfig) -> PlannerSettings:
    return PlannerSettings(config.horizon, config.directions, config.staleness_weight, config.staleness_norm,
                           config.ucb_kappa, config.planner_eps, config.normalize_diagonals)


def pearson_correlation(x, y) -> float:
    """Sample Pearson correlation; NaN when either input is constant."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("inputs must have the same length")
    if x.size < 2:
        return math.nan
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0.0 or syy == 0.0:
        return math.nan
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def belief_correlation(env: ServiceEnv, source: str = "observed") -> float:
    """Correlation of the belief's intensity map with the true density, operational cells only."""
    b = env.belief
    est = b.observed_intensity if source == "observed" else b.intensity
    mask = env.operational
    return pearson_correlation(est[mask], env.ground_truth()[mask])


def convergence_episode(rewards: Sequence[float], window: int = 20, smoothing: int = 5) -> int:
    """First episode whose trailing ``smoothing``-mean reaches 95% of the final level.

    The final level is the mean of the last ``window`` rewards. "95%" means
    within 5% of its magnitude, which also covers negative finals. Returns
    ``len(rewards)`` if the threshold is never met.
    """
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("empty reward trace")
    final = float(r[-window:].mean())
    threshold = final - 0.05 * abs(final)
    csum = np.concatenate([[0.0], np.cumsum(r)])
    for i in range(r.size):
        lo = max(0, i + 1 - smoothing)
        if (csum[i + 1] - csum[lo]) / (i + 1 - lo) >= threshold:
            return i
    return int(r.size)


def _check_finite(state: np.ndarray, reward: float) -> None:
    if not (np.isfinite(reward) and np.all(np.isfinite(state))):
        raise NumericalFailure("non-finite reward or state")


# ----------------------------------------------------------------------
# Phase 1

def _planner_policy(env: ServiceEnv, config: RunConfig, strategy: str, rng: np.random.Generator):
    settings = planner_settings(config)
    r_c, d_max, grid = config.sensing_radius, config.d_max, env.grid
    if strategy == "lawnmower":
        sweeps = [LawnmowerState.for_region(reg, grid, r_c, env.initial_positions[i])
                  for i, reg in enumerate(env.regions)]

        def act() -> np.ndarray:
            return np.concatenate([select_lawnmower_action(sw, ag.position, d_max)
                                   for sw, ag in zip(sweeps, env.agents)])
        return act
    if strategy == "random":
        return lambda: np.concatenate([select_random_action(rng) for _ in env.agents])
    select = {"pathmi": select_pathmi_action, "ucb": select_ucb_action}[strategy]

    def act() -> np.ndarray:
        return np.concatenate([select(ag.position, env.belief, settings, d_max, r_c, grid, env.region_masks[i])
                               for i, ag in enumerate(env.agents)])
    return act


def run_phase1(config: RunConfig, seed: int, strategy: str | None = None, episodes: int | None = None,
               record_beliefs: bool = False) -> PhaseOneResult:
    """Planner-driven exploration for ``warm_episodes`` episodes from the prior.

    Every transition is offered to the demonstration store (thinned by
    ``p_loss``); the last episode's terminal belief is returned alongside.
    """
    strategy = strategy or config.strategy
    episodes = config.warm_episodes if episodes is None else episodes
    env = ServiceEnv(config, seed, phase=1)
    policy_rng = rngs.stream(seed, "policy", 1)
    thin_rng = rngs.stream(seed, "replay", 1)
    T = config.episode_length
    demos = ReplayBuffer(max(episodes * T, 1), env.state_dim, env.action_dim, config.p_loss)
    metrics = RunMetrics(f"phase1-{strategy}", seed)
    beliefs, truths = [], []
    for _ in range(episodes):
        t0 = time.perf_counter()
        s = env.reset()
        metrics.initial_summary.append(s[2 * env.n_agents:2 * env.n_agents + 3].copy())
        act = _planner_policy(env, config, strategy, policy_rng)
        total = 0.0
        while not env.done:
            env.begin_step()
            a = act()
            out = env.step(a)
            _check_finite(out.next_state, out.reward)
            demos.push(s, a, out.reward, out.next_state, out.terminal, thin_rng)
            total += out.reward
            s = out.next_state
        metrics.rewards.append(total)
        metrics.mean_variance.append(float(env.belief.variance[env.operational].mean()))
        metrics.correlation.append(belief_correlation(env, config.correlation_source))
        metrics.wall_clock.append(time.perf_counter() - t0)
        if record_beliefs:
            beliefs.append(env.belief.copy())
            truths.append(env.ground_truth())
    metrics.newton_failures = env.engine.failures
    return PhaseOneResult(env.belief.copy(), demos.ordered(), metrics, beliefs, truths)


# ----------------------------------------------------------------------
# Phase 2

def make_agent(config: RunConfig, seed: int) -> SacAgent:
    return SacAgent(config.state_dim, config.action_dim, (config.hidden, config.hidden), lr=config.lr,
                    gamma=config.gamma, polyak=config.polyak, reward_scale=config.learner_reward_scale,
                    rng=rngs.stream(seed, "network"), dtype=np.dtype(config.net_dtype))


def run_phase2(config: RunConfig, seed: int, phase1: PhaseOneResult | None = None,
               agent: SacAgent | None = None, label: str | None = None,
               channels: tuple[bool, bool] | None = None) -> tuple[RunMetrics, SacAgent]:
    """SAC training with optional belief and replay-buffer transfer.

    ``channels`` = (belief, buffer) overrides the config toggles. The
    transferred belief initializes only the first episode; later episodes
    start from the prior.
    """
    use_belief, use_buffer = channels if channels is not None else (config.transfer_belief, config.transfer_buffer)
    if (use_belief or use_buffer) and phase1 is None:
        raise ValueError("transfer channel enabled without a phase-1 result")
    env = ServiceEnv(config, seed, phase=2)
    agent = agent if agent is not None else make_agent(config, seed)
    buffer = ReplayBuffer(config.buffer_size, env.state_dim, env.action_dim, config.p_loss)
    if use_buffer:
        buffer.extend(phase1.demonstrations)
    policy_rng = rngs.stream(seed, "policy", 2)
    thin_rng = rngs.stream(seed, "replay", 2)
    sample_rng = rngs.stream(seed, "sampling", 2)
    metrics = RunMetrics(label or _channel_label(use_belief, use_buffer), seed, buffer_start=len(buffer))
    for ep in range(config.phase2_episodes):
        t0 = time.perf_counter()
        s = env.reset(phase1.final_belief if (use_belief and ep == 0) else None)
        metrics.initial_summary.append(s[2 * env.n_agents:2 * env.n_agents + 3].copy())
        total = 0.0
        while not env.done:
            a = agent.act(s, policy_rng)
            out = env.step(a)
            _check_finite(out.next_state, out.reward)
            buffer.push(s, a, out.reward, out.next_state, out.terminal, thin_rng)
            if len(buffer) >= config.learning_starts:
                agent.update(buffer.sample(config.batch_size, sample_rng), sample_rng)
            total += out.reward
            s = out.next_state
        metrics.rewards.append(total)
        metrics.mean_variance.append(float(env.belief.variance[env.operational].mean()))
        metrics.correlation.append(belief_correlation(env, config.correlation_source))
        metrics.wall_clock.append(time.perf_counter() - t0)
    metrics.newton_failures = env.engine.failures
    metrics.skipped_updates = agent.skipped
    return metrics, agent


def _channel_label(use_belief: bool, use_buffer: bool) -> str:
    return {v: k for k, v in CHANNELS.items()}[(use_belief, use_buffer)]


def run_bc_baseline(config: RunConfig, seed: int, phase1: PhaseOneResult) -> tuple[RunMetrics, SacAgent]:
    """Behaviour cloning on the demonstrations, then SAC from an empty buffer."""
    if phase1 is None or phase1.n_demonstrations == 0:
        raise ValueError("behaviour cloning needs phase-1 demonstrations")
    agent = make_agent(config, seed)
    if config.bc_epochs > 0:
        bc_pretrain(agent, phase1.demonstrations.states, phase1.demonstrations.actions, config.bc_epochs,
                    config.lr, rngs.stream(seed, "sampling", 3), config.bc_batch)
    return run_phase2(config, seed, phase1, agent=agent, label="bc", channels=(False, False))


def run_method(config: RunConfig, seed: int, method: str,
               phase1: PhaseOneResult | None = None) -> tuple[RunMetrics, PhaseOneResult | None]:
    """Run one arm: a channel setting from CHANNELS, or "bc"."""
    needs_phase1 = method == "bc" or any(CHANNELS.get(method, (False, False)))
    if needs_phase1 and phase1 is None:
        phase1 = run_phase1(config, seed)
    if method == "bc":
        return run_bc_baseline(config, seed, phase1)[0], phase1
    if method not in CHANNELS:
        raise ValueError(f"unknown method {method!r}")
    return run_phase2(config, seed, phase1, channels=CHANNELS[method])[0], phase1


# ----------------------------------------------------------------------
# Suites

@dataclass(frozen=True)
class Arm:
    name: str
    changes: tuple[tuple[str, object], ...] = ()
    method: str = "both"

    def config(self, base: RunConfig) -> RunConfig:
        return base.replace(**dict(self.changes))


def _arms(values: Iterable, key: str, fmt: str = "{}={}") -> list[Arm]:
    return [Arm(fmt.format(key, v), ((key, v),)) for v in values]


def suite_arms(name: str) -> list[Arm]:
    if name == "warm-start":
        return _arms([10, 20, 30, 50], "warm_episodes")
    if name == "horizon":
        return _arms([1, 3, 5, 7, 9], "horizon")
    if name == "uav-scaling":
        return _arms([2, 3, 4], "n_agents")
    if name == "penalty":
        return [Arm(f"{mode}/{layout}", (("penalty_mode", mode), ("overlap", layout)))
                for mode in ("variance", "fixed", "none") for layout in ("disjoint", "partial", "high")]
    if name == "decay":
        return [Arm("decay-on", (("variance_growth", 0.002),)), Arm("decay-off", (("variance_growth", 0.0),))]
    if name == "weights":
        arms = [Arm("baseline")]
        for key, values in (("w_service", (2.5, 10.0)), ("w_explore", (0.25, 1.0)), ("w_coord", (0.5, 2.0))):
            arms += _arms(values, key)
        return arms
    if name == "experience-loss":
        return _arms([0.0, 0.2, 0.4, 0.6, 0.8], "p_loss")
    if name == "channels":
        return [Arm(m, (), m) for m in ("none", "belief", "buffer", "both", "bc")]
    raise ValueError(f"unknown suite {name!r}; expected one of {SUITES}")


SUITES = ("warm-start", "horizon", "uav-scaling", "penalty", "decay", "weights", "experience-loss", "channels")


@dataclass
class ArmResult:
    arm: str
    method: str
    seed: int
    metrics: RunMetrics | None
    error: str = ""

    @property
    def aborted(self) -> bool:
        return self.metrics is None


def _run_arm_job(job: tuple[RunConfig, int, Arm]) -> ArmResult:
    base, seed, arm = job
    try:
        metrics, _ = run_method(arm.config(base), seed, arm.method)
        return ArmResult(arm.name, arm.method, seed, metrics)
    except NumericalFailure as exc:
        log.error("arm %s seed %d aborted: %s", arm.name, seed, exc)
        return ArmResult(arm.name, arm.method, seed, None, str(exc))


def _run_channels_seed(job: tuple[RunConfig, int, list[Arm]]) -> list[ArmResult]:
    """All channel arms for one seed, sharing a single phase-1 result."""
    config, seed, arms = job
    try:
        phase1 = run_phase1(config, seed)
    except NumericalFailure as exc:
        return [ArmResult(a.name, a.method, seed, None, str(exc)) for a in arms]
    out = []
    for arm in arms:
        try:
            metrics, _ = run_method(arm.config(config), seed, arm.method, phase1)
            out.append(ArmResult(arm.name, arm.method, seed, metrics))
        except NumericalFailure as exc:
            out.append(ArmResult(arm.name, arm.method, seed, None, str(exc)))
    return out


def _map(fn: Callable, jobs: list, workers: int, progress: Callable[[str], None] | None) -> list:
    if workers <= 1:
        results = []
        for i, job in enumerate(jobs):
            results.append(fn(job))
            if progress:
                progress(f"job {i + 1}/{len(jobs)} done")
        return results
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = []
        for i, res in enumerate(pool.map(fn, jobs)):
            results.append(res)
            if progress:
                progress(f"job {i + 1}/{len(jobs)} done")
        return results


def run_ablation(suite: str, base: RunConfig, seeds: Sequence[int] | None = None, workers: int = 1,
                 arms: Sequence[Arm] | None = None,
                 progress: Callable[[str], None] | None = None) -> list[ArmResult]:
    """Run every arm of ``suite`` on the same seeds; results in (arm, seed) order.

    The channel suite reuses one phase-1 result per seed across its arms.
    """
    arms = list(arms) if arms is not None else suite_arms(suite)
    seeds = list(base.seeds if seeds is None else seeds)
    if suite == "channels":
        per_seed = _map(_run_channels_seed, [(base, s, arms) for s in seeds], workers, progress)
        by_key = {(r.arm, r.seed): r for rows in per_seed for r in rows}
        return [by_key[(a.name, s)] for a in arms for s in seeds]
    jobs = [(base, s, a) for a in arms for s in seeds]
    return _map(_run_arm_job, jobs, workers, progress)


def arm_summary(results: Sequence[ArmResult], window: int = 20, smoothing: int = 5) -> list[dict]:
    """Per-arm medians of final reward and convergence episode, in first-seen arm order."""
    out = []
    for arm in dict.fromkeys(r.arm for r in results):
        rows = [r for r in results if r.arm == arm]
        done = [r.metrics for r in rows if r.metrics is not None]
        out.append({
            "arm": arm,
            "method": rows[0].method,
            "runs": len(rows),
            "aborted": sum(r.aborted for r in rows),
            "median_final_reward": float(np.median([m.final_reward(window) for m in done])) if done else math.nan,
            "median_convergence": float(np.median([m.convergence(window, smoothing) for m in done]))
            if done else math.nan,
        })
    return out


# ----------------------------------------------------------------------
# Strategy comparison

@dataclass
class StrategyRun:
    strategy: str
    seed: int
    correlation: float
    runtime: float
    mean_variance: float


def run_appendix_a(config: RunConfig, seeds: Sequence[int] | None = None,
                   strategies: Sequence[str] = ("pathmi", "ucb", "lawnmower", "random"),
                   progress: Callable[[str], None] | None = None) -> list[StrategyRun]:
    """One exploration episode per (strategy, seed); correlation with the truth at its end."""
    seeds = list(config.seeds if seeds is None else seeds)
    out = []
    for strategy in strategies:
        for seed in seeds:
            t0 = time.perf_counter()
            res = run_phase1(config, seed, strategy=strategy, episodes=1)
            out.append(StrategyRun(strategy, seed, res.metrics.correlation[-1], time.perf_counter() - t0,
                                   res.metrics.mean_variance[-1]))
            if progress:
                progress(f"{strategy} seed {seed}: r={out[-1].correlation:.3f}")
    return out


def median_by(runs: Sequence[StrategyRun], attr: str = "correlation") -> dict[str, float]:
    out = {}
    for strategy in dict.fromkeys(r.strategy for r in runs):
        vals = [getattr(r, attr) for r in runs if r.strategy == strategy]
        vals = [v for v in vals if not math.isnan(v)]
        out[strategy] = float(np.median(vals)) if vals else math.nan
    return out
