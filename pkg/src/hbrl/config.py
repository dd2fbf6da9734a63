"""Run configuration: defaults, plain-text loading, and canonical dumps.

The on-disk format is one ``key = value`` pair per line; ``#`` starts a
comment. Lists (``seeds``) are comma-separated. Unknown keys are rejected.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Mapping

STRATEGIES = ("pathmi", "ucb", "lawnmower", "random")
PENALTY_MODES = ("variance", "fixed", "none")
OVERLAP_LAYOUTS = ("disjoint", "partial", "high")
EPISODE_POLICIES = ("fixed-total", "fixed-phase2")
SPAWNS = ("centroid", "corner")


class ConfigError(ValueError):
    """Invalid configuration file, override, or field value."""


@dataclass
class RunConfig:
    # service area and grid
    length_x: float = 2000.0
    length_y: float = 2000.0
    resolution: float = 20.0
    n_agents: int = 2
    sensing_radius: float = 100.0
    d_max: float = 15.0
    overlap: str = "disjoint"
    spawn: str = "centroid"  # or "corner": sweep origin, r_c inside the region's south-west corner

    # demand field
    hotspots_min: int = 3
    hotspots_max: int = 5
    spread_min: float = 100.0
    spread_max: float = 200.0
    drift_rate: float = 1.0
    drift_bound: float = 75.0
    reset_perturbation: float = 0.05  # fraction of drift_bound
    trials: int = 100
    request_prob: float = 0.05

    # belief engine
    tau: float = 1.0
    beta: float = 0.2
    newton_iters: int = 3
    pcg_iters: int = 8
    pcg_tol: float = 1e-6
    log_intensity_clamp: float = 10.0
    variance_growth: float = 0.002
    var_max: float = 1.0
    var_min: float = 0.01
    degree_aware_update: bool = True

    # planner
    strategy: str = "pathmi"
    horizon: int = 5
    directions: int = 8
    staleness_weight: float = 0.1
    s_max: float = 0.0  # 0 means "use episode_length"
    ucb_kappa: float = 2.0
    planner_eps: float = 1e-6
    normalize_diagonals: bool = False

    # reward
    w_service: float = 5.0
    w_explore: float = 0.5
    w_coord: float = 1.0
    travel_scale: float = 0.0  # 0 means 1 / (N * d_max * sqrt(2))
    penalty_mode: str = "variance"

    # episodes
    episodes: int = 200
    warm_episodes: int = 10
    episode_length: int = 200
    episode_policy: str = "fixed-total"

    # SAC
    hidden: int = 256
    net_dtype: str = "float32"
    lr: float = 3e-4
    buffer_size: int = 10_000
    batch_size: int = 256
    gamma: float = 0.99
    polyak: float = 0.005
    learning_starts: int = 100
    reward_scale: float = 0.0  # 0 means derived from the service ceiling
    p_loss: float = 0.0
    bc_epochs: int = 50
    bc_batch: int = 256

    # transfer channels
    transfer_belief: bool = True
    transfer_buffer: bool = True

    # evaluation
    correlation_source: str = "observed"
    convergence_window: int = 20
    smoothing_window: int = 5

    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def __post_init__(self) -> None:
        self.validate()

    # derived quantities -------------------------------------------------
    @property
    def staleness_norm(self) -> float:
        return self.s_max if self.s_max > 0 else float(self.episode_length)

    @property
    def travel_weight(self) -> float:
        if self.travel_scale > 0:
            return self.travel_scale
        return 1.0 / (self.n_agents * self.d_max * math.sqrt(2.0))

    @property
    def learner_reward_scale(self) -> float:
        if self.reward_scale > 0:
            return self.reward_scale
        cells = math.pi * (self.sensing_radius / self.resolution) ** 2
        ceiling = self.w_service * self.trials * self.request_prob * self.n_agents * max(cells, 1.0)
        return 1.0 / ceiling

    @property
    def phase2_episodes(self) -> int:
        if self.episode_policy == "fixed-total":
            return self.episodes - self.warm_episodes
        return self.episodes

    @property
    def state_dim(self) -> int:
        return 3 * self.n_agents + 4

    @property
    def action_dim(self) -> int:
        return 2 * self.n_agents

    def validate(self) -> None:
        def need(ok: bool, name: str, why: str) -> None:
            if not ok:
                raise ConfigError(f"{name}: {why}")

        need(self.resolution > 0, "resolution", "must be > 0")
        need(self.length_x >= self.resolution and self.length_y >= self.resolution,
             "length_x", "area must hold at least one cell")
        need(self.n_agents >= 1, "n_agents", "must be >= 1")
        need(self.sensing_radius >= 0, "sensing_radius", "must be >= 0")
        need(self.d_max > 0, "d_max", "must be > 0")
        need(self.overlap in OVERLAP_LAYOUTS, "overlap", f"one of {OVERLAP_LAYOUTS}")
        need(self.spawn in SPAWNS, "spawn", f"one of {SPAWNS}")
        need(1 <= self.hotspots_min <= self.hotspots_max, "hotspots_min", "1 <= min <= max")
        need(0 < self.spread_min <= self.spread_max, "spread_min", "0 < min <= max")
        need(self.drift_rate >= 0 and self.drift_bound >= 0, "drift_rate", "must be >= 0")
        need(self.trials >= 1, "trials", "must be >= 1")
        need(0 < self.request_prob <= 1, "request_prob", "must lie in (0, 1]")
        need(self.tau > 0, "tau", "must be > 0")
        need(self.beta >= 0, "beta", "must be >= 0")
        need(self.newton_iters >= 1, "newton_iters", "must be >= 1")
        need(self.pcg_iters >= 1, "pcg_iters", "must be >= 1")
        need(self.pcg_tol > 0, "pcg_tol", "must be > 0")
        need(self.variance_growth >= 0, "variance_growth", "must be >= 0")
        need(0 < self.var_min <= self.var_max, "var_min", "0 < var_min <= var_max")
        need(self.strategy in STRATEGIES, "strategy", f"one of {STRATEGIES}")
        need(self.horizon >= 1, "horizon", "must be >= 1")
        need(self.directions == 8, "directions", "only the 8-neighbourhood is supported")
        need(self.s_max >= 0, "s_max", "must be >= 0")
        need(self.penalty_mode in PENALTY_MODES, "penalty_mode", f"one of {PENALTY_MODES}")
        for name in ("w_service", "w_explore", "w_coord", "travel_scale"):
            need(getattr(self, name) >= 0, name, "must be >= 0")
        need(self.episode_length >= 1, "episode_length", "must be >= 1")
        need(self.warm_episodes >= 0, "warm_episodes", "must be >= 0")
        need(self.warm_episodes < self.episodes, "warm_episodes", "must be < episodes")
        need(self.episode_policy in EPISODE_POLICIES, "episode_policy", f"one of {EPISODE_POLICIES}")
        need(self.hidden >= 1, "hidden", "must be >= 1")
        need(self.net_dtype in ("float32", "float64"), "net_dtype", "float32 or float64")
        need(self.lr > 0, "lr", "must be > 0")
        need(self.buffer_size >= 1 and self.batch_size >= 1, "buffer_size", "must be >= 1")
        need(0 <= self.gamma < 1, "gamma", "must lie in [0, 1)")
        need(0 <= self.polyak <= 1, "polyak", "must lie in [0, 1]")
        need(0 <= self.p_loss < 1, "p_loss", "must lie in [0, 1)")
        need(self.bc_epochs >= 0, "bc_epochs", "must be >= 0")
        need(self.correlation_source in ("observed", "mode"), "correlation_source", "observed or mode")
        need(self.convergence_window >= 1 and self.smoothing_window >= 1,
             "convergence_window", "must be >= 1")
        need(len(self.seeds) >= 1, "seeds", "at least one seed")

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: copy.copy(getattr(self, f.name)) for f in fields(self)}


def _field_types() -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(RunConfig)}


def _parse_value(name: str, raw: str, kind: str) -> Any:
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        value = float(raw)
        if not value.is_integer():
            raise ValueError(f"not an integer: {raw!r}")
        return int(value)
    if kind == "float":
        return float(raw)
    if kind == "str":
        return raw
    if kind.startswith("list"):
        return [int(part) for part in raw.replace(" ", "").split(",") if part]
    raise ValueError(f"unsupported field type {kind}")


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines into typed values (no validation yet)."""
    kinds = _field_types()
    values: dict[str, Any] = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in text.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, raw, kinds[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {key}: {exc}") from None
    return values


def load_config(path: str | Path | None = None, overrides: Iterable[str] | Mapping[str, Any] = (),
                base: RunConfig | None = None) -> RunConfig:
    """Build a RunConfig from an optional file plus overrides (overrides win).

    Values not set by either come from ``base`` (the documented defaults when
    omitted). ``path`` may also point at a JSON run manifest, whose ``config``
    block is used verbatim.
    """
    values: dict[str, Any] = base.to_dict() if base is not None else {}
    if path is not None:
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".json":
            raw = json.loads(text).get("config", {})
            unknown = set(raw) - set(_field_types())
            if unknown:
                raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
            values.update(raw)
        else:
            values.update(parse_pairs(text.splitlines(), str(path)))
    if isinstance(overrides, Mapping):
        unknown = set(overrides) - set(_field_types())
        if unknown:
            raise ConfigError(f"unknown override keys {sorted(unknown)}")
        values.update(overrides)
    else:
        values.update(parse_pairs(list(overrides), "<override>"))
    return RunConfig(**values)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


def dump_config(config: RunConfig) -> str:
    """Canonical ``key = value`` text; round-trips through load_config."""
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in config.to_dict().items())


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(dump_config(config).encode()).hexdigest()[:16]


def full_scenario(**changes: Any) -> RunConfig:
    """Full-scale scenario as documented (defaults)."""
    return RunConfig(**changes)


def appendix_scenario(**changes: Any) -> RunConfig:
    """Strategy-comparison scenario at desk scale: 1000 m square, 40x40 grid."""
    base = dict(
        length_x=1000.0, length_y=1000.0, resolution=25.0, n_agents=2,
        sensing_radius=100.0, hotspots_min=2, hotspots_max=2, spawn="corner",
        episode_length=150, episodes=2, warm_episodes=1,
        seeds=list(range(10)),
    )
    base.update(changes)
    return RunConfig(**base)


def desk_scenario(**changes: Any) -> RunConfig:
    """Reduced two-phase scenario: 40x40 grid, N=2, T=100, K=80, K_w=10."""
    base = dict(
        length_x=1000.0, length_y=1000.0, resolution=25.0, n_agents=2,
        episode_length=100, episodes=80, warm_episodes=10,
        seeds=list(range(5)),
    )
    base.update(changes)
    return RunConfig(**base)
