"""Online LGCP belief on a lattice GMRF.

The log-intensity mode is tracked by a few damped Newton steps per time
step (each solved with diagonally preconditioned CG) and the per-cell
uncertainty is a separately persisted variance field that grows while a
cell goes unobserved and is overwritten by the diagonal Laplace proxy when
the cell is observed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .world import GridSpec

log = logging.getLogger(__name__)


class NumericalFailure(FloatingPointError):
    """A solver produced non-finite values."""


@dataclass(frozen=True)
class PrecisionOperator:
    """Matrix-free ``Q = tau I + beta L`` with the 4-neighbour graph Laplacian.

    Boundary cells use their actual degree (2 at corners, 3 on edges).
    """

    tau: float
    beta: float
    grid: GridSpec

    def __post_init__(self) -> None:
        if self.tau <= 0 or self.beta < 0:
            raise ValueError("need tau > 0 and beta >= 0")

    @property
    def degree(self) -> np.ndarray:
        ny, nx = self.grid.shape
        deg = np.full((ny, nx), 4.0)
        deg[0, :] -= 1
        deg[-1, :] -= 1
        deg[:, 0] -= 1
        deg[:, -1] -= 1
        return deg.ravel()

    @property
    def diagonal(self) -> np.ndarray:
        return self.tau + self.beta * self.degree

    def laplacian_apply(self, v: np.ndarray) -> np.ndarray:
        g = v.reshape(self.grid.shape)
        nb = np.zeros_like(g)
        nb[1:, :] += g[:-1, :]
        nb[:-1, :] += g[1:, :]
        nb[:, 1:] += g[:, :-1]
        nb[:, :-1] += g[:, 1:]
        return (self.degree.reshape(g.shape) * g - nb).ravel()

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.grid.n_cells,):
            raise ValueError(f"expected vector of length {self.grid.n_cells}, got {v.shape}")
        return self.tau * v + self.beta * self.laplacian_apply(v)


def precision_apply(op: PrecisionOperator, v: np.ndarray) -> np.ndarray:
    return op.apply(v)


@dataclass(frozen=True)
class SolverSettings:
    newton_iters: int = 3
    pcg_iters: int = 8
    pcg_tolerance: float = 1e-6
    log_intensity_clamp: float = 10.0
    max_halvings: int = 4
    jacobi_start: bool = True

    def __post_init__(self) -> None:
        if self.newton_iters < 1 or self.pcg_iters < 1 or self.pcg_tolerance <= 0:
            raise ValueError("invalid solver settings")


@dataclass
class BeliefState:
    log_intensity: np.ndarray
    variance: np.ndarray
    exposure: np.ndarray
    obs_count: np.ndarray
    staleness: np.ndarray
    predicted: np.ndarray  # variance after this step's growth, before the update
    observed_intensity: np.ndarray = field(repr=False)  # mean of exp(u) over each cell's observations

    @classmethod
    def prior(cls, n_cells: int, var_max: float = 1.0) -> "BeliefState":
        return cls(
            log_intensity=np.zeros(n_cells),
            variance=np.full(n_cells, float(var_max)),
            exposure=np.zeros(n_cells, dtype=bool),
            obs_count=np.zeros(n_cells, dtype=np.int64),
            staleness=np.zeros(n_cells, dtype=np.int64),
            predicted=np.full(n_cells, float(var_max)),
            observed_intensity=np.ones(n_cells),
        )

    @property
    def n_cells(self) -> int:
        return self.log_intensity.size

    @property
    def intensity(self) -> np.ndarray:
        return np.exp(self.log_intensity)

    def copy(self) -> "BeliefState":
        return BeliefState(*(np.array(getattr(self, f)) for f in self.__dataclass_fields__))


def log_posterior(u: np.ndarray, counts: np.ndarray, exposure: np.ndarray, op: PrecisionOperator) -> float:
    """Unnormalized log-posterior: masked Poisson log-likelihood plus GMRF prior."""
    e = exposure.astype(float)
    return float(np.sum(e * (counts * u - np.exp(u))) - 0.5 * u @ op.apply(u))


def log_posterior_gradient(u: np.ndarray, counts: np.ndarray, exposure: np.ndarray,
                           op: PrecisionOperator) -> np.ndarray:
    e = exposure.astype(float)
    return e * (counts - np.exp(u)) - op.apply(u)


def hessian_diagonal(u: np.ndarray, exposure: np.ndarray, op: PrecisionOperator) -> np.ndarray:
    return exposure.astype(float) * np.exp(u) + op.diagonal


def hessian_apply(u: np.ndarray, exposure: np.ndarray, op: PrecisionOperator) -> Callable[[np.ndarray], np.ndarray]:
    w = exposure.astype(float) * np.exp(u)
    return lambda v: w * v + op.apply(v)


def pcg_solve(apply_h: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray, diag: np.ndarray,
              max_iter: int, tol: float) -> tuple[np.ndarray, int]:
    """Jacobi-preconditioned CG for an SPD operator.

    Stops after ``max_iter`` iterations or once ``|r| <= tol * |rhs|``.
    Returns the solution and the number of iterations used.
    """
    x = np.zeros_like(rhs, dtype=float)
    r = np.array(rhs, dtype=float)
    bnorm = np.linalg.norm(r)
    if bnorm == 0.0:
        return x, 0
    inv_m = 1.0 / diag
    z = inv_m * r
    p = z.copy()
    rz = r @ z
    it = 0
    for it in range(1, max_iter + 1):
        hp = apply_h(p)
        curv = p @ hp
        if not np.isfinite(curv) or curv <= 0:
            raise NumericalFailure("PCG lost positive curvature")
        alpha = rz / curv
        x += alpha * p
        r -= alpha * hp
        if np.linalg.norm(r) <= tol * bnorm:
            break
        z = inv_m * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if not np.all(np.isfinite(x)):
        raise NumericalFailure("PCG produced non-finite values")
    return x, it


@dataclass
class NewtonReport:
    steps: int = 0
    halvings: int = 0
    pcg_iterations: int = 0
    failed: bool = False
    objective: list[float] = field(default_factory=list)  # negative log-posterior per accepted iterate


def jacobi_sweep(u: np.ndarray, counts: np.ndarray, exposure: np.ndarray, op: PrecisionOperator, clamp: float,
                 iters: int = 30) -> np.ndarray:
    """One nonlinear Jacobi sweep: each cell's 1-D mode with its neighbours held at ``u``.

    Cheap (elementwise scalar Newton) and it removes most of the exp()
    nonlinearity, which plain Newton from a cold start handles poorly.
    """
    e = exposure.astype(float)
    d = op.diagonal
    off = op.apply(u) - d * u
    v = u.copy()
    for _ in range(iters):
        lam = np.exp(v)
        v = np.clip(v + (e * (counts - lam) - off - d * v) / (e * lam + d), -clamp, clamp)
    return v


def laplace_mode(u0: np.ndarray, counts: np.ndarray, exposure: np.ndarray, op: PrecisionOperator,
                 settings: SolverSettings) -> tuple[np.ndarray, NewtonReport]:
    """Damped Newton from ``u0`` on the per-step log-posterior.

    With ``jacobi_start`` the iteration begins from a Jacobi sweep of ``u0``
    when that has the lower objective. A step that raises the negative
    log-posterior is halved up to ``max_halvings`` times; if none of the
    trial points improves on the current iterate the iterate is kept and the
    loop stops.
    """
    clamp = settings.log_intensity_clamp
    u = np.clip(np.asarray(u0, dtype=float), -clamp, clamp)
    report = NewtonReport()
    f = -log_posterior(u, counts, exposure, op)
    report.objective.append(f)
    if settings.jacobi_start and np.any(exposure):
        v = jacobi_sweep(u, counts, exposure, op, clamp)
        fv = -log_posterior(v, counts, exposure, op)
        if np.all(np.isfinite(v)) and fv < f:
            u, f = v, fv
            report.objective.append(f)
    for _ in range(settings.newton_iters):
        g = log_posterior_gradient(u, counts, exposure, op)
        if not np.any(g):
            break
        try:
            step, iters = pcg_solve(hessian_apply(u, exposure, op), g, hessian_diagonal(u, exposure, op),
                                    settings.pcg_iters, settings.pcg_tolerance)
        except NumericalFailure:
            report.failed = True
            return np.array(u0, dtype=float), report
        report.pcg_iterations += iters
        best_u, best_f = u, f
        scale = 1.0
        for h in range(settings.max_halvings + 1):
            trial = np.clip(u + scale * step, -clamp, clamp)
            f_trial = -log_posterior(trial, counts, exposure, op)
            if np.isfinite(f_trial) and f_trial < best_f:
                best_u, best_f = trial, f_trial
            if np.isfinite(f_trial) and f_trial <= f:
                break
            report.halvings += 1
            scale *= 0.5
        if best_u is u:
            break
        u, f = best_u, best_f
        report.steps += 1
        report.objective.append(f)
    return u, report


def laplace_update(belief: BeliefState, counts: np.ndarray, exposure: np.ndarray, op: PrecisionOperator,
                   settings: SolverSettings) -> tuple[BeliefState, NewtonReport]:
    """Functional form of :meth:`BeliefEngine.laplace_update` (returns a new state)."""
    u, report = laplace_mode(belief.log_intensity, counts, exposure, op, settings)
    out = belief.copy()
    if not report.failed:
        out.log_intensity = u
    return out, report


def variance_proxy(u: np.ndarray, exposure: np.ndarray, op: PrecisionOperator) -> np.ndarray:
    return 1.0 / hessian_diagonal(u, exposure, op)


def predict_variances(variance: np.ndarray, growth_rate: float, ceiling: float) -> np.ndarray:
    return np.minimum(variance * (1.0 + growth_rate), ceiling)


def update_variances(predicted: np.ndarray, covered: np.ndarray, log_intensity: np.ndarray,
                     op: PrecisionOperator, floor: float, degree_aware: bool = True) -> np.ndarray:
    """Overwrite covered cells with the proxy at the converged intensity.

    ``covered`` is a boolean mask. With ``degree_aware=False`` every covered
    cell uses the interior diagonal ``tau + 4 beta``.
    """
    q = op.diagonal if degree_aware else np.full(predicted.shape, op.tau + 4.0 * op.beta)
    post = np.maximum(1.0 / (np.exp(log_intensity) + q), floor)
    return np.where(covered, post, predicted)


def increment_staleness(belief: BeliefState) -> None:
    belief.staleness += 1


def record_observations(belief: BeliefState, covered: np.ndarray) -> None:
    belief.exposure = covered.copy()
    belief.obs_count += covered


def record_intensity(belief: BeliefState, covered: np.ndarray) -> None:
    """Fold the current exp(u) of covered cells into their running means.

    The per-step mode only sees the current counts, so this average is what
    retains a map of everything observed so far.
    """
    n = np.maximum(belief.obs_count, 1)
    step = (belief.intensity - belief.observed_intensity) / n
    belief.observed_intensity = np.where(covered, belief.observed_intensity + step, belief.observed_intensity)


def reset_staleness(belief: BeliefState, covered: np.ndarray) -> None:
    belief.staleness[covered] = 0


def belief_summary(belief: BeliefState, operational: np.ndarray) -> np.ndarray:
    """[mean intensity, mean variance, mean observation count] over the operational mask."""
    if not np.any(operational):
        raise ValueError("operational set is empty")
    return np.array([
        belief.intensity[operational].mean(),
        belief.variance[operational].mean(),
        belief.obs_count[operational].mean(),
    ])


@dataclass
class BeliefEngine:
    """Predict/update filter over a BeliefState for one environment."""

    op: PrecisionOperator
    settings: SolverSettings = SolverSettings()
    growth_rate: float = 0.002
    var_max: float = 1.0
    var_min: float = 0.01
    degree_aware: bool = True
    failures: int = 0

    def prior(self) -> BeliefState:
        return BeliefState.prior(self.op.grid.n_cells, self.var_max)

    def laplace_update(self, belief: BeliefState, counts: np.ndarray, exposure: np.ndarray) -> NewtonReport:
        """Newton-track the mode in place; on failure the mode is left unchanged."""
        u, report = laplace_mode(belief.log_intensity, counts, exposure, self.op, self.settings)
        if report.failed:
            self.failures += 1
            log.warning("Newton step failed; keeping previous mode")
        else:
            belief.log_intensity = u
        return report

    def update(self, belief: BeliefState, counts: np.ndarray, covered: np.ndarray) -> NewtonReport:
        """Observation counts, variance growth, mode update, variance overwrite."""
        record_observations(belief, covered)
        belief.predicted = predict_variances(belief.variance, self.growth_rate, self.var_max)
        report = self.laplace_update(belief, counts, covered)
        belief.variance = update_variances(belief.predicted, covered, belief.log_intensity, self.op,
                                           self.var_min, self.degree_aware)
        record_intensity(belief, covered)
        return report
