"""On-disk formats: metric CSVs, belief grids, transition records, manifests.

Everything written here is a deterministic function of its inputs (no
timestamps, floats via ``repr``) so identical runs give identical bytes.
Wall-clock figures live in separate timing files for the same reason.

Transition file layout (``transitions.bin``): a flat sequence of records,
each ``8N + 10`` little-endian float64 values::

    state (3N + 4) | action (2N) | reward | next_state (3N + 4) | done
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .belief import BeliefState
from .config import RunConfig, config_hash, load_config
from .pipeline import PhaseOneResult, RunMetrics
from .sac import Batch
from .world import GridSpec

FORMAT_VERSION = 1
BELIEF_FIELDS = ("log_intensity", "variance", "observed_intensity", "obs_count", "staleness")


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]], chash: str) -> Path:
    """Write a CSV whose first column is the config hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_hash", *header])
        for row in rows:
            w.writerow([chash, *(_cell(v) for v in row)])
    return path


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def transition_record_length(n_agents: int) -> int:
    return 8 * n_agents + 10


def write_transitions(path: str | Path, batch: Batch) -> int:
    rows = np.column_stack([batch.states, batch.actions, batch.rewards, batch.next_states, batch.dones])
    rows.astype("<f8").tofile(path)
    return len(rows)


def read_transitions(path: str | Path, n_agents: int) -> Batch:
    width = transition_record_length(n_agents)
    flat = np.fromfile(path, dtype="<f8")
    if flat.size % width:
        raise ValueError(f"{path}: size is not a multiple of the record length {width}")
    rows = flat.reshape(-1, width).astype(float)
    s = 3 * n_agents + 4
    a = 2 * n_agents
    return Batch(rows[:, :s], rows[:, s:s + a], rows[:, s + a], rows[:, s + a + 1:2 * s + a + 1], rows[:, -1])


def write_grid(path: str | Path, values: np.ndarray, grid: GridSpec, chash: str) -> Path:
    """Row-major grid CSV (one row per y index), preceded by a hash comment."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    g = np.asarray(values).reshape(grid.shape)
    with open(path, "w") as fh:
        fh.write(f"# config_hash={chash}\n")
        for row in g:
            fh.write(",".join(_cell(v) for v in row) + "\n")
    return path


def read_grid(path: str | Path) -> tuple[np.ndarray, str | None]:
    chash = None
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("# config_hash="):
                chash = line.strip().split("=", 1)[1]
            elif line.strip():
                rows.append([float(v) for v in line.strip().split(",")])
    return np.array(rows), chash


def write_belief(directory: str | Path, belief: BeliefState, grid: GridSpec, chash: str,
                 prefix: str = "belief") -> list[Path]:
    directory = Path(directory)
    return [write_grid(directory / f"{prefix}_{name}.csv", getattr(belief, name), grid, chash)
            for name in BELIEF_FIELDS]


def read_belief(directory: str | Path, prefix: str = "belief") -> tuple[BeliefState, str | None]:
    directory = Path(directory)
    values = {}
    hashes = set()
    for name in BELIEF_FIELDS:
        g, chash = read_grid(directory / f"{prefix}_{name}.csv")
        values[name] = g.ravel()
        hashes.add(chash)
    if len(hashes) != 1:
        raise ValueError(f"{directory}: belief grids carry different config hashes")
    n = values["log_intensity"].size
    belief = BeliefState.prior(n)
    belief.log_intensity = values["log_intensity"]
    belief.variance = values["variance"]
    belief.predicted = values["variance"].copy()
    belief.observed_intensity = values["observed_intensity"]
    belief.obs_count = values["obs_count"].astype(np.int64)
    belief.staleness = values["staleness"].astype(np.int64)
    return belief, hashes.pop()


def write_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def file_digest(paths: Iterable[str | Path]) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def write_manifest(path: str | Path, config: RunConfig, kind: str, files: Sequence[str | Path],
                   extra: dict | None = None) -> Path:
    """JSON manifest: resolved config, its hash, seeds and a digest of the outputs."""
    payload = {
        "format_version": FORMAT_VERSION,
        "artifact_version": f"hbrl-{__version__}+{file_digest(files)}",
        "kind": kind,
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "seeds": list(config.seeds),
        "files": sorted(Path(f).name for f in files),
    }
    if extra:
        payload.update(extra)
    return write_json(path, payload)


def read_manifest_config(path: str | Path) -> RunConfig:
    return load_config(path)


def save_phase1(directory: str | Path, result: PhaseOneResult, config: RunConfig, seed: int) -> list[Path]:
    """Persist a PhaseOneResult: belief grids, transition records, metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    grid = GridSpec(config.length_x, config.length_y, config.resolution)
    chash = config_hash(config)
    files = write_belief(directory, result.final_belief, grid, chash)
    n = write_transitions(directory / "transitions.bin", result.demonstrations)
    files.append(directory / "transitions.bin")
    m = result.metrics
    files.append(write_csv(directory / "phase1_metrics.csv", ["seed", "episode", "reward", "mean_variance",
                                                              "correlation"],
                           [(seed, k, r, v, c) for k, (r, v, c) in enumerate(zip(m.rewards, m.mean_variance,
                                                                                  m.correlation))], chash))
    meta = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "config_hash": chash,
        "seed": int(seed),
        "n_agents": config.n_agents,
        "record_length": transition_record_length(config.n_agents),
        "n_transitions": n,
        "layout": "state(3N+4) action(2N) reward next_state(3N+4) done, little-endian float64",
    }
    files.append(write_json(directory / "meta.json", meta))
    return files


def load_phase1(directory: str | Path) -> tuple[PhaseOneResult, RunConfig, int]:
    """Inverse of :func:`save_phase1`; returns (PhaseOneResult, RunConfig, seed)."""
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{directory}: no phase-1 result (meta.json missing)")
    meta = json.loads(meta_path.read_text())
    config = load_config(meta_path)
    if config_hash(config) != meta["config_hash"]:
        raise ValueError(f"{meta_path}: config hash does not match its config block")
    belief, chash = read_belief(directory)
    if chash != meta["config_hash"]:
        raise ValueError(f"{directory}: belief grids were written under a different config")
    demos = read_transitions(directory / "transitions.bin", meta["n_agents"])
    if len(demos.rewards) != meta["n_transitions"]:
        raise ValueError(f"{directory}: expected {meta['n_transitions']} transitions, found {len(demos.rewards)}")
    metrics = RunMetrics(f"phase1-{config.strategy}", meta["seed"])
    for row in read_csv(directory / "phase1_metrics.csv"):
        metrics.rewards.append(float(row["reward"]))
        metrics.mean_variance.append(float(row["mean_variance"]))
        metrics.correlation.append(float(row["correlation"]) if row["correlation"] else math.nan)
    return PhaseOneResult(belief, demos, metrics), config, int(meta["seed"])
