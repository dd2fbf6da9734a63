"""Named, independent random streams derived from one master seed."""

from __future__ import annotations

import numpy as np

# Stable ids: adding a stream must never renumber the existing ones.
STREAM_IDS = {
    "demand": 0,
    "observation": 1,
    "drift": 2,
    "reset": 3,
    "policy": 4,
    "replay": 5,
    "network": 6,
    "planner": 7,
    "sampling": 8,
}


def stream(seed: int, name: str, *context: int) -> np.random.Generator:
    """Generator for subsystem ``name`` under ``seed``.

    Extra integer ``context`` (e.g. a phase number) yields further independent
    streams for the same subsystem.
    """
    return np.random.default_rng([int(seed), STREAM_IDS[name], *map(int, context)])


def streams(seed: int, *context: int) -> dict[str, np.random.Generator]:
    return {name: stream(seed, name, *context) for name in STREAM_IDS}
