"""Checkpoints: a saved model plus training metadata (step, generator state)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..netgraph import CheckpointError, load_model, save_model


@dataclass
class Checkpoint:
    spec: object
    params: object
    step: int = 0
    rng: np.random.Generator | None = None
    metadata: dict = field(default_factory=dict)


def save_checkpoint(directory, spec, params, step=0, rng=None, metadata=None):
    meta = dict(metadata or {})
    meta["step"] = int(step)
    if rng is not None:
        meta["rng_state"] = rng.bit_generator.state
    save_model(directory, spec, params, meta)


def load_checkpoint(directory):
    spec, params, meta = load_model(directory)
    rng = None
    state = meta.get("rng_state")
    if state is not None:
        try:
            bitgen = getattr(np.random, state["bit_generator"])()
            bitgen.state = state
        except (AttributeError, KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"bad generator state: {e}") from e
        rng = np.random.Generator(bitgen)
    return Checkpoint(spec, params, int(meta.get("step", 0)), rng, meta)
