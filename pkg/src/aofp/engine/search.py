"""Per-layer Binary Filter Search state machine and isolated-damage scoring."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..netgraph import EmptyLayerError
from ..netgraph.graph import apply_layer
from ..tensor import kernels

SEARCHING = "searching"
FINISHED = "finished"
MIN_NORM = 1e-12


class MissingSamples(RuntimeError):
    """A filter in the search space has no damage record yet."""


def half(n):
    return max(1, n // 2)


@dataclass
class LayerPruningState:
    layer: int
    base_mask: np.ndarray  # u, 1 = alive
    scoring_mask: np.ndarray  # v
    search_space: list  # A, ascending filter indices
    picked: list | None = None  # B from the last refinement
    records: dict = field(default_factory=dict)  # filter -> list of t
    samples: int = 0  # recorded batches since the last decision
    phase: str = SEARCHING
    history: list = field(default_factory=list)  # (H, t) of the current search step

    @classmethod
    def fresh(cls, layer, width):
        u = np.ones(width, np.float32)
        state = cls(layer, u, u.copy(), list(range(width)))
        if width < 2:
            state.phase = FINISHED
        return state

    @property
    def remaining(self):
        return [int(j) for j in np.flatnonzero(self.base_mask)]

    def clear_records(self):
        self.records = {j: [] for j in self.search_space}
        self.samples = 0
        self.history = []

    def restart(self):
        """Start a new move over every surviving filter."""
        self.search_space = self.remaining
        self.picked = None
        self.clear_records()
        self.phase = SEARCHING if len(self.search_space) > 1 else FINISHED

    def ready(self, phi):
        return self.samples >= phi and all(self.records.get(j) for j in self.search_space)

    def record(self, ablated, t):
        for j in ablated:
            self.records.setdefault(int(j), []).append(t)
        self.samples += 1
        self.history.append((tuple(int(j) for j in ablated), t))


@dataclass
class Decision:
    kind: str  # "pruned" | "refined" | "layer_finished"
    picked: list
    p: float


def sample_ablation(search_space, rng):
    """Uniform random subset of size max(1, floor(|A|/2)), sorted."""
    a = np.asarray(search_space, dtype=np.int64)
    if a.size == 0:
        raise ValueError("empty search space")
    return np.sort(rng.choice(a, size=half(a.size), replace=False))


def isolated_damage(base_out, scored_out, per_example=False):
    """||base - scored||^2 / ||base||^2, or None when the base output is all zero.

    ``per_example`` averages the ratio over the leading axis instead of
    pooling the whole batch.
    """
    if base_out.shape != scored_out.shape:
        raise ValueError(f"shape mismatch {base_out.shape} vs {scored_out.shape}")
    if not per_example:
        num, den = kernels.sq_dist_ratio(base_out, scored_out)
        return None if den < MIN_NORM else num / den
    ts = []
    for b, s in zip(base_out, scored_out):
        num, den = kernels.sq_dist_ratio(b, s)
        if den >= MIN_NORM:
            ts.append(num / den)
    return float(np.mean(ts)) if ts else None


def estimate_importance(state):
    """Mean recorded damage per filter of the search space."""
    est = {}
    for j in state.search_space:
        rec = state.records.get(j)
        if not rec:
            raise MissingSamples(f"filter {j} of layer {state.layer} has no samples")
        est[j] = float(np.mean(rec))
    return est


def refine_step(state, theta, estimates=None):
    """One binary-search decision over the current search space."""
    est = estimate_importance(state) if estimates is None else estimates
    order = sorted(state.search_space, key=lambda j: (est[j], j))
    picked = sorted(order[: half(len(order))])
    p = max(est[j] for j in picked)
    if p < theta:
        if len(picked) >= len(state.remaining):
            raise EmptyLayerError(f"pruning {picked} would empty layer {state.layer}")
        state.base_mask[picked] = 0
        state.scoring_mask[picked] = 0
        state.picked = picked
        state.search_space = state.remaining
        state.clear_records()
        if len(state.search_space) < 2:
            state.phase = FINISHED
        return Decision("pruned", picked, p)
    if len(picked) > 1:
        state.picked = picked
        state.search_space = picked
        state.clear_records()
        return Decision("refined", picked, p)
    state.phase = FINISHED
    state.picked = picked
    return Decision("layer_finished", picked, p)


# --------------------------------------------------------------------------
# scoring path


def successor_chain(spec, conv):
    """Node ids the scoring path re-executes: path ops, the successor, its BN/ReLU."""
    topo = spec.topology[conv]
    nodes = list(topo.path) + [topo.successor]
    succ = spec[topo.successor]
    if succ.kind == "conv":
        end = spec.topology[succ.id].block_end
        cur = succ.id
        while cur != end:
            cur = spec.consumers[cur][0]
            nodes.append(cur)
    return nodes


def scored_output(spec, params, tape, conv, scoring_mask, chain=None, bn_from_base=True):
    """Successor output when ``conv``'s block output is masked by ``scoring_mask``.

    Starts from the base path's activations in ``tape``. BN layers reuse the
    base path's normalization statistics unless ``bn_from_base`` is False.
    """
    chain = successor_chain(spec, conv) if chain is None else chain
    topo = spec.topology[conv]
    v = np.asarray(scoring_mask, dtype=tape.outputs[topo.block_end].dtype)
    # base output already carries u; v <= u elementwise
    x = tape.outputs[topo.block_end] * v
    for nid in chain:
        layer = spec[nid]
        override = tape.bn_stats(nid) if layer.kind == "bn" and bn_from_base else None
        x, _, _ = apply_layer(layer, [x], params, tape.mode, override)
        m = tape.node_masks.get(nid)
        if m is not None:
            x = x * m.reshape((1,) * (x.ndim - 1) + (-1,))
    return x, tape.outputs[chain[-1]]


def scoring_pass(spec, params, state, tape, rng, chain=None, bn_from_base=True, per_example=False):
    """Ablate a random half of the search space on the scoring path and record t.

    Returns ``(H, t)``; ``t`` is None (and nothing is recorded) when the base
    successor output is identically zero.
    """
    if state.phase != SEARCHING:
        raise RuntimeError(f"layer {state.layer} is not searching")
    ablated = sample_ablation(state.search_space, rng)
    state.scoring_mask[:] = state.base_mask
    state.scoring_mask[ablated] = 0
    scored, base = scored_output(spec, params, tape, state.layer, state.scoring_mask, chain, bn_from_base)
    t = isolated_damage(base, scored, per_example)
    if t is not None:
        state.record(ablated, t)
    return ablated, t
