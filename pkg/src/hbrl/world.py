"""Ground truth: grid geometry, hotspot demand, agent kinematics, sensing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    length_x: float
    length_y: float
    resolution: float

    def __post_init__(self) -> None:
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.cells_x < 1 or self.cells_y < 1:
            raise ValueError("grid must contain at least one cell per axis")

    @property
    def cells_x(self) -> int:
        return int(math.floor(self.length_x / self.resolution))

    @property
    def cells_y(self) -> int:
        return int(math.floor(self.length_y / self.resolution))

    @property
    def shape(self) -> tuple[int, int]:
        """(rows, cols) = (cells_y, cells_x); flat index is iy * cells_x + ix."""
        return self.cells_y, self.cells_x

    @property
    def n_cells(self) -> int:
        return self.cells_x * self.cells_y

    def flat_index(self, ix: int, iy: int) -> int:
        if not (0 <= ix < self.cells_x and 0 <= iy < self.cells_y):
            raise IndexError(f"cell ({ix}, {iy}) outside {self.cells_x}x{self.cells_y} grid")
        return iy * self.cells_x + ix

    def cell_coords(self, flat: int) -> tuple[int, int]:
        if not 0 <= flat < self.n_cells:
            raise IndexError(f"flat cell {flat} outside grid of {self.n_cells} cells")
        return flat % self.cells_x, flat // self.cells_x

    @cached_property
    def centers(self) -> np.ndarray:
        """All cell centers, shape (n_cells, 2), in flat-index order."""
        xs = (np.arange(self.cells_x) + 0.5) * self.resolution
        ys = (np.arange(self.cells_y) + 0.5) * self.resolution
        gx, gy = np.meshgrid(xs, ys)
        out = np.column_stack([gx.ravel(), gy.ravel()])
        out.flags.writeable = False
        return out

    def clip(self, position: np.ndarray) -> np.ndarray:
        return np.clip(position, 0.0, [self.length_x, self.length_y])


def cell_center(cell: tuple[int, int], grid: GridSpec) -> np.ndarray:
    ix, iy = cell
    grid.flat_index(ix, iy)  # bounds check
    return np.array([(ix + 0.5) * grid.resolution, (iy + 0.5) * grid.resolution])


def footprint(position, radius: float, grid: GridSpec) -> np.ndarray:
    """Flat indices (ascending) of cells whose centers lie within ``radius``."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    x, y = float(position[0]), float(position[1])
    d = grid.resolution
    # candidate window; centres sit at (i + 0.5) * d
    ix0 = max(int(math.floor((x - radius) / d - 0.5)), 0)
    ix1 = min(int(math.ceil((x + radius) / d - 0.5)), grid.cells_x - 1)
    iy0 = max(int(math.floor((y - radius) / d - 0.5)), 0)
    iy1 = min(int(math.ceil((y + radius) / d - 0.5)), grid.cells_y - 1)
    if ix0 > ix1 or iy0 > iy1:
        return np.empty(0, dtype=np.int64)
    ix = np.arange(ix0, ix1 + 1)
    iy = np.arange(iy0, iy1 + 1)
    dx2 = ((ix + 0.5) * d - x) ** 2
    dy2 = ((iy + 0.5) * d - y) ** 2
    inside = dy2[:, None] + dx2[None, :] <= radius * radius
    rows, cols = np.nonzero(inside)
    return (iy[rows] * grid.cells_x + ix[cols]).astype(np.int64)


@dataclass
class DemandField:
    """Mixture of Gaussian hotspots; centers drift in a box around their bases."""

    base_centers: np.ndarray  # (J, 2)
    spreads: np.ndarray  # (J,)
    drift_rate: float
    drift_bound: float
    trials: int
    request_prob: float
    centers: np.ndarray = None  # type: ignore[assignment]
    normalizer: float = 1.0

    def __post_init__(self) -> None:
        self.base_centers = np.asarray(self.base_centers, dtype=float).reshape(-1, 2)
        self.spreads = np.asarray(self.spreads, dtype=float).ravel()
        if self.centers is None:
            self.centers = self.base_centers.copy()
        if np.any(self.spreads <= 0):
            raise ValueError("hotspot spreads must be positive")
        if not 0 < self.request_prob <= 1 or self.trials < 1:
            raise ValueError("need 0 < request_prob <= 1 and trials >= 1")

    @property
    def n_hotspots(self) -> int:
        return len(self.spreads)

    def unnormalized(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d2 = ((pts[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=-1)
        return np.exp(-d2 / (2.0 * self.spreads**2)).sum(axis=1)

    def normalize_on(self, grid: GridSpec) -> None:
        """Set the normalizer to the mixture maximum over cell centers."""
        self.normalizer = float(self.unnormalized(grid.centers).max())
        if not self.normalizer > 0:
            raise ValueError("demand field vanishes on every cell center")

    def copy(self) -> "DemandField":
        return DemandField(self.base_centers.copy(), self.spreads.copy(), self.drift_rate,
                           self.drift_bound, self.trials, self.request_prob,
                           self.centers.copy(), self.normalizer)


def make_demand_field(grid: GridSpec, rng: np.random.Generator, *, hotspots: tuple[int, int] = (3, 5),
                      spreads: tuple[float, float] = (100.0, 200.0), drift_rate: float = 1.0,
                      drift_bound: float = 75.0, trials: int = 100, request_prob: float = 0.05) -> DemandField:
    """Random scenario: J ~ U{lo..hi}, centers uniform over the area, spreads uniform."""
    n = int(rng.integers(hotspots[0], hotspots[1] + 1))
    centers = rng.uniform([0.0, 0.0], [grid.length_x, grid.length_y], size=(n, 2))
    widths = rng.uniform(spreads[0], spreads[1], size=n)
    demand = DemandField(centers, widths, drift_rate, drift_bound, trials, request_prob)
    demand.normalize_on(grid)
    return demand


def reset_demand(demand: DemandField, grid: GridSpec, rng: np.random.Generator, perturbation: float = 0.05) -> None:
    """Return centers to base plus a small uniform jitter, then renormalize."""
    half = perturbation * demand.drift_bound
    demand.centers = demand.base_centers + rng.uniform(-half, half, size=demand.base_centers.shape)
    demand.normalize_on(grid)


def density_at(points, demand: DemandField) -> np.ndarray:
    if demand.normalizer <= 0:
        raise ValueError("normalizer must be positive")
    return np.clip(demand.unnormalized(points) / demand.normalizer, 0.0, 1.0)


def cell_density(cells, demand: DemandField, grid: GridSpec) -> np.ndarray:
    """Cell-average density, approximated by the value at each cell center."""
    cells = np.atleast_1d(np.asarray(cells, dtype=np.int64))
    return density_at(grid.centers[cells], demand)


def drift_hotspots(demand: DemandField, rng: np.random.Generator) -> DemandField:
    """One bounded random-walk step for every hotspot center (in place)."""
    eps = rng.standard_normal(demand.centers.shape)
    lo = demand.base_centers - demand.drift_bound
    hi = demand.base_centers + demand.drift_bound
    demand.centers = np.clip(demand.centers + demand.drift_rate * eps, lo, hi)
    return demand


def sample_observations(covered, demand: DemandField, grid: GridSpec,
                        rng: np.random.Generator, tol: float = 1e-9) -> tuple[np.ndarray, int]:
    """Binomial request counts on covered cells; returns (per-cell counts, total)."""
    covered = np.asarray(covered, dtype=np.int64)
    counts = np.zeros(grid.n_cells, dtype=np.int64)
    if covered.size == 0:
        return counts, 0
    p = demand.request_prob * cell_density(covered, demand, grid)
    if np.any(p < -tol) or np.any(p > 1 + tol) or not np.all(np.isfinite(p)):
        raise ValueError("success probability outside [0, 1]")
    counts[covered] = rng.binomial(demand.trials, np.clip(p, 0.0, 1.0))
    return counts, int(counts[covered].sum())


@dataclass
class AgentState:
    position: np.ndarray
    previous_position: np.ndarray
    visited: np.ndarray = field(repr=False)  # bool per flat cell, restricted to the agent's region


def step_agent(agent: AgentState, action, d_max: float, grid: GridSpec) -> AgentState:
    a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
    new = grid.clip(agent.position + a * d_max)
    return AgentState(new, agent.position.copy(), agent.visited)


@dataclass(frozen=True)
class OperationalRegion:
    """Axis-aligned rectangle of cells [ix0, ix1) x [iy0, iy1)."""

    agent_id: int
    ix0: int
    ix1: int
    iy0: int
    iy1: int

    def __post_init__(self) -> None:
        if self.ix1 <= self.ix0 or self.iy1 <= self.iy0:
            raise ValueError("operational region must be non-empty")

    def mask(self, grid: GridSpec) -> np.ndarray:
        if self.ix1 > grid.cells_x or self.iy1 > grid.cells_y or self.ix0 < 0 or self.iy0 < 0:
            raise ValueError("operational region exceeds the grid")
        m = np.zeros(grid.shape, dtype=bool)
        m[self.iy0:self.iy1, self.ix0:self.ix1] = True
        return m.ravel()

    def bounds_m(self, grid: GridSpec) -> tuple[float, float, float, float]:
        d = grid.resolution
        return self.ix0 * d, self.ix1 * d, self.iy0 * d, self.iy1 * d

    def centroid(self, grid: GridSpec) -> np.ndarray:
        x0, x1, y0, y1 = self.bounds_m(grid)
        return np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])

    def corner(self, grid: GridSpec, inset: float) -> np.ndarray:
        """South-west corner moved ``inset`` inward (at most to the centroid)."""
        x0, x1, y0, y1 = self.bounds_m(grid)
        return np.array([x0 + min(inset, (x1 - x0) / 2.0), y0 + min(inset, (y1 - y0) / 2.0)])


OVERLAP_FRACTIONS = {"disjoint": 0.0, "partial": 0.25, "high": 0.75}


def make_regions(grid: GridSpec, n_agents: int, layout: str = "disjoint") -> list[OperationalRegion]:
    """Equal vertical strips, each widened by ``f * strip`` on both sides.

    Two neighbouring strips then share ``2 f`` strip widths; for two agents
    that is a fraction ``f`` of the grid width.
    """
    f = OVERLAP_FRACTIONS[layout]
    width = grid.cells_x / n_agents
    regions = []
    for i in range(n_agents):
        lo = math.floor(i * width - f * width + 0.5)
        hi = math.floor((i + 1) * width + f * width + 0.5)
        lo, hi = max(lo, 0), min(hi, grid.cells_x)
        regions.append(OperationalRegion(i, lo, max(hi, lo + 1), 0, grid.cells_y))
    return regions
