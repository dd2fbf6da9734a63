"""Phase-1 action selection: PathMI lookahead and the baseline strategies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .belief import BeliefState
from .world import GridSpec, OperationalRegion, footprint

# Fixed order doubles as the tie-break: E, W, N, S, NE, NW, SE, SW.
DIRECTIONS = np.array([
    (1, 0), (-1, 0), (0, 1), (0, -1),
    (1, 1), (-1, 1), (1, -1), (-1, -1),
], dtype=float)
DIRECTION_NAMES = ("E", "W", "N", "S", "NE", "NW", "SE", "SW")


@dataclass(frozen=True)
class PlannerSettings:
    horizon: int = 5
    directions: int = 8
    staleness_weight: float = 0.1
    staleness_norm: float = 200.0
    ucb_kappa: float = 2.0
    epsilon: float = 1e-6
    normalize_diagonals: bool = False

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.staleness_norm <= 0:
            raise ValueError("need horizon >= 1 and staleness_norm > 0")
        if self.directions != 8:
            raise ValueError("only the 8-neighbourhood is supported")


@dataclass
class CandidatePath:
    direction: np.ndarray
    waypoints: np.ndarray  # (L, 2)
    covered_cells: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    score: float = 0.0


def _direction_vectors(settings: PlannerSettings) -> np.ndarray:
    if not settings.normalize_diagonals:
        return DIRECTIONS
    return DIRECTIONS / np.linalg.norm(DIRECTIONS, axis=1, keepdims=True)


def candidate_paths(position, settings: PlannerSettings, d_max: float, grid: GridSpec) -> list[CandidatePath]:
    p = np.asarray(position, dtype=float)
    steps = np.arange(1, settings.horizon + 1, dtype=float)[:, None]
    paths = []
    for d in _direction_vectors(settings):
        waypoints = grid.clip(p + steps * d_max * d)
        paths.append(CandidatePath(d.copy(), waypoints))
    return paths


def path_coverage(path: CandidatePath, radius: float, grid: GridSpec) -> np.ndarray:
    cells = [footprint(w, radius, grid) for w in path.waypoints]
    return np.unique(np.concatenate(cells)) if cells else np.empty(0, dtype=np.int64)


def cell_weights(belief: BeliefState, settings: PlannerSettings) -> np.ndarray:
    """Per-cell PathMI contribution: variance scaled by novelty and staleness."""
    xi = 1.0 / (1.0 + belief.obs_count)
    stale = np.minimum(belief.staleness / settings.staleness_norm, 1.0)
    return (xi + settings.staleness_weight * stale) * belief.variance


def pathmi_score(cells: np.ndarray, belief: BeliefState, settings: PlannerSettings) -> float:
    return float(cell_weights(belief, settings)[cells].sum())


def _toward(position: np.ndarray, target: np.ndarray, eps: float) -> np.ndarray:
    delta = target - position
    return np.clip(delta / max(float(np.linalg.norm(delta)), eps), -1.0, 1.0)


def _argmax_first(scores: list[float]) -> int:
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


def select_pathmi_action(position, belief: BeliefState, settings: PlannerSettings, d_max: float,
                         radius: float, grid: GridSpec, mask: np.ndarray | None = None) -> np.ndarray:
    """Score the 8 straight candidate paths and head for the best one's first waypoint.

    ``mask`` restricts scored cells (the operational grid); ``None`` scores all.
    """
    p = np.asarray(position, dtype=float)
    weights = cell_weights(belief, settings)
    if mask is not None:
        weights = np.where(mask, weights, 0.0)
    paths = candidate_paths(p, settings, d_max, grid)
    for path in paths:
        path.covered_cells = path_coverage(path, radius, grid)
        path.score = float(weights[path.covered_cells].sum())
    best = paths[_argmax_first([path.score for path in paths])]
    return _toward(p, best.waypoints[0], settings.epsilon)


def select_ucb_action(position, belief: BeliefState, settings: PlannerSettings, d_max: float,
                      radius: float, grid: GridSpec, mask: np.ndarray | None = None) -> np.ndarray:
    """One-step greedy on sum(exp(u) + kappa * sigma) over the next footprint."""
    p = np.asarray(position, dtype=float)
    weights = belief.intensity + settings.ucb_kappa * np.sqrt(belief.variance)
    if mask is not None:
        weights = np.where(mask, weights, 0.0)
    targets = [grid.clip(p + d_max * d) for d in _direction_vectors(settings)]
    scores = [float(weights[footprint(t, radius, grid)].sum()) for t in targets]
    return _toward(p, targets[_argmax_first(scores)], settings.epsilon)


def select_random_action(rng: np.random.Generator) -> np.ndarray:
    d = DIRECTIONS[rng.integers(len(DIRECTIONS))]
    return d / np.linalg.norm(d)


@dataclass
class LawnmowerState:
    """Serpentine sweep over a rectangle: legs along x, lanes stepping in +y.

    Lanes sit at ``y0 + r, y0 + 3r, ...`` (spacing ``2r``), the last one no
    higher than ``y1 - r``. Legs turn ``r`` inside the region edges, since
    the footprint already reaches the boundary from there. After the last
    lane the sweep restarts from the first one.
    """

    x0: float
    x1: float
    y0: float
    y1: float
    lane_spacing: float
    lane: int = 0
    heading: int = 1

    @classmethod
    def for_region(cls, region: OperationalRegion, grid: GridSpec, radius: float,
                   position=None) -> "LawnmowerState":
        x0, x1, y0, y1 = region.bounds_m(grid)
        inset = min(radius, (x1 - x0) / 2.0)
        state = cls(x0 + inset, x1 - inset, y0, y1, lane_spacing=max(2.0 * radius, grid.resolution))
        if position is not None:
            lanes = [abs(state.lane_y(k) - float(position[1])) for k in range(state.n_lanes)]
            state.lane = int(np.argmin(lanes))
        return state

    @property
    def n_lanes(self) -> int:
        return max(int(np.ceil((self.y1 - self.y0) / self.lane_spacing)), 1)

    def lane_y(self, lane: int) -> float:
        top = max(self.y1 - 0.5 * self.lane_spacing, 0.5 * (self.y0 + self.y1))
        return min(self.y0 + (lane + 0.5) * self.lane_spacing, top)


def _approach(delta: float, d_max: float) -> float:
    """Signed action fraction covering ``delta`` without overshooting."""
    return float(np.sign(delta)) * min(1.0, abs(delta) / d_max)


def select_lawnmower_action(state: LawnmowerState, position, d_max: float, tol: float = 1e-6) -> np.ndarray:
    """Advance the sweep state machine and return the current leg's action.

    Full legs are unit vectors; the last step of a leg or lane change is
    shortened so the agent lands exactly on the turn point.
    """
    x, y = float(position[0]), float(position[1])
    dy = state.lane_y(state.lane) - y
    if abs(dy) > tol:
        return np.array([0.0, _approach(dy, d_max)])
    end_x = state.x1 if state.heading > 0 else state.x0
    if (end_x - x) * state.heading <= tol:
        # lane finished: turn onto the next one, wrapping to the first
        state.lane = (state.lane + 1) % state.n_lanes
        state.heading = -state.heading
        dy = state.lane_y(state.lane) - y
        if abs(dy) > tol:
            return np.array([0.0, _approach(dy, d_max)])
        end_x = state.x1 if state.heading > 0 else state.x0
    return np.array([_approach(end_x - x, d_max), 0.0])
