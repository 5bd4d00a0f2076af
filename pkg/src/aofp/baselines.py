"""Reference filter-importance metrics and the single-layer pruning-curve protocol."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import netgraph as ng
from .netgraph.serialize import atomic_write
from .tensor import softmax_xent, softmax_xent_backward

METHODS = ("oracle", "oracle_10x", "degraded", "magnitude", "apoz", "taylor", "index", "aofp_single_layer")


@dataclass
class EvalCounter:
    """Counts forward evaluations of the assessment set."""

    masked: int = 0  # evaluations with a candidate filter ablated
    reference: int = 0  # evaluations of the unablated network
    examples: int = 0  # total examples pushed through either kind


@dataclass
class PruningCurve:
    method: str
    points: list  # (filters_pruned, top1)
    gamma: int  # assessment examples used for scoring
    order: list = field(default_factory=list)  # filters in the order they were masked

    def __post_init__(self):
        xs = [k for k, _ in self.points]
        if not xs or xs[0] != 0 or any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("filters_pruned must start at 0 and strictly increase")

    def auc(self):
        """Trapezoid area under top1 vs fraction pruned; 1.0 for a perfect flat curve."""
        xs = np.array([k for k, _ in self.points], dtype=np.float64)
        ys = np.array([a for _, a in self.points], dtype=np.float64)
        if len(xs) == 1:
            return float(ys[0])
        xs = xs / xs[-1]
        return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["method", "filters_pruned", "top1"])
        for k, a in self.points:
            w.writerow([self.method, k, f"{a:.6f}"])
        return buf.getvalue()

    def write_csv(self, path):
        atomic_write(path, self.to_csv())


def _mask(width, off):
    m = np.ones(width, np.float32)
    m[list(off)] = 0
    return m


def _loss_sum(spec, params, data, masks, batch_size=500):
    """Summed per-example cross-entropy, eval mode."""
    total = 0.0
    for i in range(0, len(data), batch_size):
        logits = ng.forward(spec, params, data.x[i : i + batch_size], masks)[0]
        total += float(np.sum(softmax_xent(logits, data.y[i : i + batch_size])[1]))
    return total


def _check_layer(spec, layer):
    if spec[layer].kind != "conv" or layer not in spec.prunable:
        raise ng.MaskError(f"layer {layer} is not a prunable conv")


# --------------------------------------------------------------------------
# metrics


def oracle_score(spec, params, layer, assess, removed=(), counter=None):
    """Exact loss increase over ``assess`` when each surviving filter is ablated.

    ``removed`` filters are masked in every evaluation, including the reference.
    """
    _check_layer(spec, layer)
    counter = EvalCounter() if counter is None else counter
    width = spec[layer].width
    removed = set(int(j) for j in removed)
    ref = _loss_sum(spec, params, assess, {layer: _mask(width, removed)})
    counter.reference += 1
    counter.examples += len(assess)
    scores = {}
    for j in range(width):
        if j in removed:
            continue
        scores[j] = _loss_sum(spec, params, assess, {layer: _mask(width, removed | {j})}) - ref
        counter.masked += 1
        counter.examples += len(assess)
    return scores


def _ascending(scores):
    return [j for j, _ in sorted(scores.items(), key=lambda kv: (kv[1], kv[0]))]


def oracle_prune(spec, params, layer, q, assess, rescore=True, counter=None):
    """Greedy least-damage pruning of ``q`` filters; the degraded variant scores once."""
    width = spec[layer].width
    if not 0 < q < width:
        raise ValueError(f"q must lie in [1, {width - 1}]")
    if not rescore:
        return _ascending(oracle_score(spec, params, layer, assess, (), counter))[:q]
    order = []
    for _ in range(q):
        scores = oracle_score(spec, params, layer, assess, order, counter)
        order.append(_ascending(scores)[0])
    return order


def magnitude_score(params, layer):
    k = params[f"{layer}.kernel"]
    s = np.abs(k.astype(np.float64)).sum(axis=(0, 1, 2))
    return {j: float(v) for j, v in enumerate(s)}


def apoz_score(spec, params, layer, assess, batch_size=500):
    """Fraction of zeros per channel of the layer's activated output; higher means less important."""
    _check_layer(spec, layer)
    end = spec.topology[layer].block_end
    zeros = np.zeros(spec[layer].width, np.float64)
    count = 0
    for i in range(0, len(assess), batch_size):
        out = ng.forward(spec, params, assess.x[i : i + batch_size], record=[end])[1][end]
        zeros += (out == 0).reshape(-1, out.shape[-1]).sum(axis=0)
        count += out.size // out.shape[-1]
    return {j: float(v) for j, v in enumerate(zeros / count)}


def taylor_score(spec, params, layer, assess, batch_size=500):
    """|mean over examples and positions of dL/dM * M| for the layer's activated output M.

    dL/dM is the per-example loss gradient, so ``score * N * H * W`` is the
    first-order estimate of the summed loss change from ablating the channel.
    """
    _check_layer(spec, layer)
    end = spec.topology[layer].block_end
    acc = np.zeros(spec[layer].width, np.float64)
    positions = 0
    for i in range(0, len(assess), batch_size):
        xb, yb = assess.x[i : i + batch_size], assess.y[i : i + batch_size]
        tape = ng.run(spec, params, xb, None, "eval", keep=True)
        # gradient of the summed loss, i.e. per-example gradients stacked
        g = softmax_xent_backward(tape.logits, yb) * len(yb)
        _, cap = ng.backward(spec, params, tape, g, capture=[end])
        m = tape.outputs[end]
        acc += (cap[end].astype(np.float64) * m).reshape(-1, m.shape[-1]).sum(axis=0)
        positions += m.size // m.shape[-1]
    return {j: float(abs(v) / positions) for j, v in enumerate(acc)}


def index_order(width):
    return list(range(width))


# --------------------------------------------------------------------------
# search driven by final loss, for the single-layer comparison


def bfs_final_loss_order(spec, params, layer, assess, q, rng, budget_factor=1.0, batch_size=64,
                         counter=None):
    """Binary filter search that samples the final loss instead of isolated damage.

    Each move spends the example budget the greedy oracle would spend on the
    same number of surviving filters (``n * gamma``), split evenly over the
    halving steps, and always refines down to a single filter.
    """
    width = spec[layer].width
    counter = EvalCounter() if counter is None else counter
    gamma = len(assess)
    b = min(batch_size, gamma)
    removed = []
    for _ in range(q):
        space = [j for j in range(width) if j not in removed]
        n = len(space)
        rounds = max(1, math.ceil(math.log2(n)))
        phi = max(1, int(budget_factor * n * gamma) // (rounds * b))
        while len(space) > 1:
            records = {j: [] for j in space}
            draws = 0
            while draws < phi or any(not r for r in records.values()):
                h = rng.choice(space, size=max(1, len(space) // 2), replace=False)
                idx = rng.choice(gamma, size=b, replace=False)
                logits = ng.forward(spec, params, assess.x[idx], {layer: _mask(width, removed + list(h))})[0]
                loss = softmax_xent(logits, assess.y[idx])[0]
                counter.masked += 1
                counter.examples += b
                for j in h:
                    records[int(j)].append(loss)
                draws += 1
            means = {j: float(np.mean(r)) for j, r in records.items()}
            space = sorted(_ascending(means)[: max(1, len(space) // 2)])
        removed.append(space[0])
    return removed


# --------------------------------------------------------------------------


def pruning_curve(spec, params, layer, method, assess, eval_set, assess_large=None, seed=0,
                  max_pruned=None):
    """Mask filters of ``layer`` one at a time in ``method``'s order; no finetuning.

    Point k is eval top1 with the first k filters of the order masked.
    ``oracle_10x`` scores on ``assess_large``, which should hold ten times as
    many training examples as ``assess``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    _check_layer(spec, layer)
    width = spec[layer].width
    q = width - 1 if max_pruned is None else min(max_pruned, width - 1)
    gamma = len(assess)
    if method == "oracle":
        order = oracle_prune(spec, params, layer, q, assess, rescore=True)
    elif method == "oracle_10x":
        if assess_large is None:
            raise ValueError("oracle_10x needs a larger assessment set")
        order = oracle_prune(spec, params, layer, q, assess_large, rescore=True)
        gamma = len(assess_large)
    elif method == "degraded":
        order = oracle_prune(spec, params, layer, q, assess, rescore=False)
    elif method == "magnitude":
        order = _ascending(magnitude_score(params, layer))
    elif method == "apoz":
        s = apoz_score(spec, params, layer, assess)
        order = _ascending({j: -v for j, v in s.items()})
    elif method == "taylor":
        order = _ascending(taylor_score(spec, params, layer, assess))
    elif method == "index":
        order = index_order(width)
    else:
        order = bfs_final_loss_order(spec, params, layer, assess, q, np.random.default_rng(seed))
    order = order[:q]
    points = []
    for k in range(q + 1):
        masks = {layer: _mask(width, order[:k])}
        logits = ng.predict(spec, params, eval_set.x, masks)
        points.append((k, float(np.mean(logits.argmax(axis=1) == eval_set.y))))
    return PruningCurve(method, points, gamma, [int(j) for j in order])
