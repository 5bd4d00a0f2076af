"""Simultaneous multi-layer pruning with a shared base path and per-layer scoring paths."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import netgraph as ng
from ..netgraph.serialize import atomic_write
from ..tensor import softmax_xent, softmax_xent_backward
from ..trainer import SGD, TrainConfig, TrainingDiverged, apply_bn_updates, batches, finetune
from .search import FINISHED, SEARCHING, LayerPruningState, refine_step, scoring_pass, successor_chain

log = logging.getLogger(__name__)

GLOBAL = "global"
PER_LAYER = "per-layer"


@dataclass
class AofpConfig:
    theta: float = 0.01  # refinement threshold
    phi: int = 2000  # batches per refinement step
    target_flops_drop: float = 0.4
    mode: str = GLOBAL
    seed: int = 0
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64
    max_steps: int = 200_000
    layers: list | None = None  # defaults to every prunable conv
    bn_from_base: bool = True
    per_example_damage: bool = False
    scoring: bool = True
    trajectory_every: int = 200
    finetune_steps: int = 1000
    finetune_lr: float = 0.02  # decayed x0.1 at 50% and 75% of the finetune
    finetune_weight_decay: float = 1e-4

    def __post_init__(self):
        if self.theta < 0 or self.phi < 1:
            raise ValueError("theta must be >= 0 and phi >= 1")
        if not 0 < self.target_flops_drop <= 1:
            raise ValueError("target FLOPs reduction must lie in (0, 1]")
        if self.mode not in (GLOBAL, PER_LAYER):
            raise ValueError(f"mode must be {GLOBAL!r} or {PER_LAYER!r}")


@dataclass
class MoveRecord:
    layer: int
    pruned: list
    granularity: int
    p: float
    step: int
    flops_effective: int


@dataclass
class AofpResult:
    spec: ng.NetworkSpec  # reconstructed
    params: ng.ModelParams  # reconstructed and finetuned
    masked_params: ng.ModelParams  # end of pruning, before reconstruction
    base_masks: dict
    moves: list
    trajectory: list  # (step, layer, remaining_width, move_granularity, p, flops_effective)
    base_flops: int
    final_flops: int
    reached: bool
    steps: int
    decisions: list = field(default_factory=list)  # (step, layer, kind, |B|, p)

    @property
    def reduction(self):
        return 1.0 - self.final_flops / self.base_flops

    def write_trajectory(self, path):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["step", "layer", "remaining_width", "move_granularity", "p", "flops_effective"])
        for row in self.trajectory:
            step, layer, width, g, p, fl = row
            w.writerow([step, layer, width, g, "" if p is None else f"{p:.6g}", fl])
        atomic_write(path, buf.getvalue())

    def write_moves(self, path):
        doc = {
            "base_flops": self.base_flops,
            "final_flops": self.final_flops,
            "reduction": self.reduction,
            "reached_target": self.reached,
            "steps": self.steps,
            "moves": [asdict(m) for m in self.moves],
        }
        atomic_write(path, json.dumps(doc, indent=1))


def finetune_config(cfg):
    """Recovery schedule used after reconstruction: the training step schedule, shorter."""
    return TrainConfig.desk(max(cfg.finetune_steps, 1), cfg.finetune_lr, batch_size=cfg.batch_size,
                            momentum=cfg.momentum, weight_decay=cfg.finetune_weight_decay, seed=cfg.seed)


def _freeze(opt, spec, conv, picked):
    """Clear optimizer momentum for filters that were just masked out."""
    topo = spec.topology[conv]
    opt.zero_slice(f"{conv}.kernel", (Ellipsis, picked))
    opt.zero_slice(f"{conv}.bias", picked)
    if topo.bn is not None:
        opt.zero_slice(f"{topo.bn}.gamma", picked)
        opt.zero_slice(f"{topo.bn}.beta", picked)
    if spec[topo.successor].kind == "conv":
        opt.zero_slice(f"{topo.successor}.kernel", (slice(None), slice(None), picked))


def aofp_run(spec, params, train_set, cfg, finetune_set=None, on_step=None):
    """Prune every target layer at once until effective FLOPs drop by the target.

    Each batch: one base-path forward with all base masks, one scoring pass per
    searching layer on that forward's activations, then the base-path
    backward/update. Every ``phi`` recorded batches a layer takes a
    binary-search decision. Stops right after the move that reaches the
    target, reconstructs the slim network and finetunes it.
    """
    layers = list(cfg.layers) if cfg.layers is not None else spec.prunable
    for i in layers:
        if i not in spec.prunable:
            raise ng.MaskError(f"layer {i} is not prunable")
        if spec[i].width < 2:
            raise ValueError(f"layer {i} has width {spec[i].width}; need at least 2 filters")
    params = params.copy()
    opt = SGD(cfg.momentum, 0.0)
    data_rng = np.random.default_rng(cfg.seed)
    score_rng = np.random.default_rng([cfg.seed, 1])
    stream = batches(len(train_set), cfg.batch_size, data_rng)
    states = {i: LayerPruningState.fresh(i, spec[i].width) for i in layers}
    chains = {i: successor_chain(spec, i) for i in layers}
    masks = {i: states[i].base_mask for i in layers}
    base_flops = ng.flops_of(spec)
    flops = base_flops
    target_flops = base_flops * (1.0 - cfg.target_flops_drop)
    moves, trajectory, decisions = [], [], []
    reached = False
    step = 0

    def snapshot(step):
        for i in layers:
            trajectory.append((step, i, len(states[i].remaining), 0, None, flops))

    snapshot(0)
    while step < cfg.max_steps and not reached:
        idx = next(stream)
        xb, yb = train_set.x[idx], train_set.y[idx]
        tape = ng.run(spec, params, xb, masks, "train", keep=True)
        loss, _ = softmax_xent(tape.logits, yb)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at pruning step {step}")
        if cfg.scoring:
            for i in layers:
                if states[i].phase == SEARCHING:
                    scoring_pass(spec, params, states[i], tape, score_rng, chains[i],
                                 cfg.bn_from_base, cfg.per_example_damage)
        grads, _ = ng.backward(spec, params, tape, softmax_xent_backward(tape.logits, yb))
        apply_bn_updates(params, tape)
        opt.step(params, grads, cfg.lr)
        step += 1
        if on_step is not None:
            on_step(step, params, states)

        for i in layers:
            st = states[i]
            if st.phase != SEARCHING or not st.ready(cfg.phi):
                continue
            d = refine_step(st, cfg.theta)
            decisions.append((step, i, d.kind, len(d.picked), d.p))
            if d.kind == "pruned":
                _freeze(opt, spec, i, d.picked)
                flops = ng.effective_flops(spec, masks)
                moves.append(MoveRecord(i, d.picked, len(d.picked), d.p, step, flops))
                trajectory.append((step, i, len(st.remaining), len(d.picked), d.p, flops))
                log.info("step %d: layer %d pruned %d filters (p=%.4g), FLOPs %.1f%% of base",
                         step, i, len(d.picked), d.p, 100.0 * flops / base_flops)
                if flops <= target_flops:
                    reached = True
                    break
            elif d.kind == "layer_finished" and cfg.mode == GLOBAL:
                st.restart()
        if not reached and step % cfg.trajectory_every == 0:
            snapshot(step)
        if all(states[i].phase == FINISHED for i in layers):
            break

    snapshot(step)
    masked_params = params
    base_masks = {i: states[i].base_mask.copy() for i in layers}
    slim_spec, slim_params = ng.reconstruct(spec, params, base_masks)
    if finetune_set is not None and cfg.finetune_steps > 0:
        slim_params = finetune(slim_spec, slim_params, finetune_set, finetune_config(cfg))
    if not reached:
        log.warning("target reduction %.3f not reached; achieved %.3f",
                    cfg.target_flops_drop, 1 - flops / base_flops)
    return AofpResult(slim_spec, slim_params, masked_params, base_masks, moves, trajectory,
                      base_flops, ng.flops_of(slim_spec), reached, step, decisions)
