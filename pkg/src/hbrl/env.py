"""Compressed-state multi-agent environment with the three-term reward."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngs
from .belief import (BeliefEngine, BeliefState, PrecisionOperator, SolverSettings, belief_summary,
                     increment_staleness, reset_staleness)
from .config import PENALTY_MODES, RunConfig
from .world import (AgentState, GridSpec, density_at, drift_hotspots, footprint, make_demand_field, make_regions,
                    reset_demand, sample_observations, step_agent)


@dataclass(frozen=True)
class RewardWeights:
    service: float = 5.0
    explore: float = 0.5
    coord: float = 1.0
    travel_scale: float = 1.0

    def __post_init__(self) -> None:
        if min(self.service, self.explore, self.coord, self.travel_scale) < 0:
            raise ValueError("reward weights must be non-negative")


@dataclass(frozen=True)
class RewardBreakdown:
    service: float
    explore: float
    overlap: float
    travel: float

    def total(self, w: RewardWeights) -> float:
        return w.service * self.service + w.explore * self.explore - w.coord * (self.overlap + self.travel)


@dataclass(frozen=True)
class StepOutcome:
    next_state: np.ndarray
    reward: float
    breakdown: RewardBreakdown
    terminal: bool
    telemetry: dict = field(default_factory=dict)


def overlap_penalty(multiplicity: np.ndarray, predicted: np.ndarray, var_max: float, mode: str) -> float:
    shared = multiplicity >= 2
    if mode == "none" or not np.any(shared):
        return 0.0
    if mode == "fixed":
        return float(shared.sum())
    if mode == "variance":
        return float(np.sum(1.0 - predicted[shared] / var_max))
    raise ValueError(f"unknown penalty mode {mode!r}")


def compute_reward(covered: np.ndarray, multiplicity: np.ndarray, n_requests: int, predicted: np.ndarray,
                   updated: np.ndarray, positions: np.ndarray, previous: np.ndarray, weights: RewardWeights,
                   var_max: float, mode: str = "variance") -> tuple[float, RewardBreakdown]:
    """Service, exploration gain, overlap and travel terms for one step.

    ``covered`` is the joint-coverage mask, ``multiplicity`` the number of
    footprints containing each cell, ``positions``/``previous`` are (N, 2).
    """
    explore = float(np.sum(predicted[covered] - updated[covered]))
    travel = weights.travel_scale * float(np.linalg.norm(positions - previous, axis=1).sum())
    parts = RewardBreakdown(
        service=float(n_requests),
        explore=explore,
        overlap=overlap_penalty(multiplicity, predicted, var_max, mode),
        travel=travel,
    )
    return parts.total(weights), parts


class ServiceEnv:
    """Ground truth + belief engine behind the (3N + 4)-dimensional state.

    ``phase`` selects independent per-episode random streams while the
    scenario (hotspot bases) depends on ``seed`` alone, so both phases of a
    run, and every arm of a paired comparison, see the same demand layout.
    """

    def __init__(self, config: RunConfig, seed: int, phase: int = 2):
        self.config = config
        self.seed = int(seed)
        self.grid = GridSpec(config.length_x, config.length_y, config.resolution)
        self.n_agents = config.n_agents
        self.regions = make_regions(self.grid, config.n_agents, config.overlap)
        self.region_masks = np.array([r.mask(self.grid) for r in self.regions])
        self.operational = self.region_masks.any(axis=0)
        if config.spawn == "corner":
            self.initial_positions = np.array([r.corner(self.grid, config.sensing_radius) for r in self.regions])
        else:
            self.initial_positions = np.array([r.centroid(self.grid) for r in self.regions])
        self.demand = make_demand_field(
            self.grid, rngs.stream(seed, "demand"),
            hotspots=(config.hotspots_min, config.hotspots_max),
            spreads=(config.spread_min, config.spread_max),
            drift_rate=config.drift_rate, drift_bound=config.drift_bound,
            trials=config.trials, request_prob=config.request_prob,
        )
        self._obs_rng = rngs.stream(seed, "observation", phase)
        self._drift_rng = rngs.stream(seed, "drift", phase)
        self._reset_rng = rngs.stream(seed, "reset", phase)
        self.engine = BeliefEngine(
            PrecisionOperator(config.tau, config.beta, self.grid),
            SolverSettings(config.newton_iters, config.pcg_iters, config.pcg_tol, config.log_intensity_clamp),
            growth_rate=config.variance_growth, var_max=config.var_max, var_min=config.var_min,
            degree_aware=config.degree_aware_update,
        )
        self.weights = RewardWeights(config.w_service, config.w_explore, config.w_coord, config.travel_weight)
        self.penalty_mode = config.penalty_mode
        self.horizon = config.episode_length
        self.belief: BeliefState = self.engine.prior()
        self.agents: list[AgentState] = []
        self.t = 0
        self.done = True
        self._stale_bumped = False

    # ------------------------------------------------------------------
    @property
    def positions(self) -> np.ndarray:
        return np.array([a.position for a in self.agents])

    @property
    def state_dim(self) -> int:
        return 3 * self.n_agents + 4

    @property
    def action_dim(self) -> int:
        return 2 * self.n_agents

    def footprints(self) -> list[np.ndarray]:
        """Per-agent covered cells, restricted to the operational grid."""
        out = []
        for agent in self.agents:
            cells = footprint(agent.position, self.config.sensing_radius, self.grid)
            out.append(cells[self.operational[cells]])
        return out

    def ground_truth(self) -> np.ndarray:
        """Per-cell normalized density at the current hotspot positions."""
        return density_at(self.grid.centers, self.demand)

    # ------------------------------------------------------------------
    def reset(self, transfer_belief: BeliefState | None = None) -> np.ndarray:
        reset_demand(self.demand, self.grid, self._reset_rng, self.config.reset_perturbation)
        n = self.grid.n_cells
        if transfer_belief is None:
            self.belief = self.engine.prior()
        else:
            if transfer_belief.n_cells != n:
                raise ValueError(f"transferred belief has {transfer_belief.n_cells} cells, grid has {n}")
            self.belief = transfer_belief.copy()
            self.belief.exposure[:] = False
            self.belief.predicted = self.belief.variance.copy()
        self.agents = []
        for i, p in enumerate(self.initial_positions):
            self.agents.append(AgentState(p.copy(), p.copy(), np.zeros(n, dtype=bool)))
        for i, cells in enumerate(self.footprints()):
            self.agents[i].visited[cells[self.region_masks[i][cells]]] = True
        self.t = 0
        self.done = False
        self._stale_bumped = False
        return self.build_state()

    def build_state(self) -> np.ndarray:
        dims = np.array([self.config.length_x, self.config.length_y])
        pos = (2.0 * self.positions / dims - 1.0).ravel()
        phi = belief_summary(self.belief, self.operational)
        progress = np.array([a.visited[m].mean() for a, m in zip(self.agents, self.region_masks)])
        return np.concatenate([pos, phi, progress, [self.t / self.horizon]])

    def begin_step(self) -> None:
        """Start-of-step staleness increment; call before planning on this step."""
        if self.done:
            raise RuntimeError("episode is terminal; call reset()")
        if not self._stale_bumped:
            increment_staleness(self.belief)
            self._stale_bumped = True

    def step(self, joint_action, penalty_mode: str | None = None) -> StepOutcome:
        mode = penalty_mode or self.penalty_mode
        if mode not in PENALTY_MODES:
            raise ValueError(f"unknown penalty mode {mode!r}")
        a = np.asarray(joint_action, dtype=float).ravel()
        if a.shape != (self.action_dim,):
            raise ValueError(f"expected action of dimension {self.action_dim}, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("action must be finite")
        self.begin_step()

        previous = self.positions
        self.agents = [step_agent(ag, a[2 * i:2 * i + 2], self.config.d_max, self.grid)
                       for i, ag in enumerate(self.agents)]
        per_agent = self.footprints()
        multiplicity = np.zeros(self.grid.n_cells, dtype=np.int64)
        for cells in per_agent:
            multiplicity[cells] += 1
        covered = multiplicity > 0
        counts, n_req = sample_observations(np.flatnonzero(covered), self.demand, self.grid, self._obs_rng)

        report = self.engine.update(self.belief, counts, covered)
        reward, parts = compute_reward(covered, multiplicity, n_req, self.belief.predicted, self.belief.variance,
                                       self.positions, previous, self.weights, self.config.var_max, mode)
        for i, cells in enumerate(per_agent):
            self.agents[i].visited[cells[self.region_masks[i][cells]]] = True

        gain = self.belief.predicted[covered] - self.belief.variance[covered]
        telemetry = {
            "n_requests": n_req,
            "mean_variance": float(self.belief.variance[self.operational].mean()),
            "overlap_cells": int((multiplicity >= 2).sum()),
            "covered_cells": int(covered.sum()),
            "negative_explore_cells": int((gain < 0).sum()),
            "newton_failed": bool(report.failed),
        }
        self.t += 1
        terminal = self.t == self.horizon
        next_state = self.build_state()
        reset_staleness(self.belief, covered)
        drift_hotspots(self.demand, self._drift_rng)
        self._stale_bumped = False
        self.done = terminal
        return StepOutcome(next_state, reward, parts, terminal, telemetry)

