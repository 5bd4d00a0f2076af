"""Forward/backward execution through a layer graph with per-conv channel masks.

A mask for conv ``i`` multiplies the output of that conv's block (the last
BN/ReLU directly after it), i.e. the feature map its successor consumes.
Surviving channels are never rescaled.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from .spec import INPUT, SpecError


class MaskError(ValueError):
    pass


@dataclass
class Tape:
    mode: str
    outputs: dict = field(default_factory=dict)
    caches: dict = field(default_factory=dict)
    in_shapes: dict = field(default_factory=dict)
    node_masks: dict = field(default_factory=dict)  # block_end id -> mask vector
    bn_updates: dict = field(default_factory=dict)  # bn id -> (running_mean, running_var)

    @property
    def logits(self):
        return self.outputs[max(self.outputs)]

    def bn_stats(self, bn_id):
        c = self.caches[bn_id]
        return c.mean, c.var


def node_masks(spec, masks, dtype=np.float32):
    """Translate ``{conv id: mask}`` into ``{block_end id: mask}``."""
    out = {}
    for cid, m in (masks or {}).items():
        if cid < 0 or cid >= len(spec.layers) or spec[cid].kind != "conv":
            raise MaskError(f"mask given for non-conv layer {cid}")
        m = np.asarray(m, dtype=dtype)
        if m.shape != (spec[cid].width,):
            raise MaskError(f"mask for layer {cid} has length {m.shape}, layer width is {spec[cid].width}")
        out[spec.topology[cid].block_end] = m
    return out


def apply_layer(layer, inputs, params, mode="eval", bn_override=None, keep=False):
    """Run one node; returns ``(output, cache, bn_update)``."""
    kind = layer.kind
    x = inputs[0]
    cache = None
    update = None
    if kind == "conv":
        y, cols = T.ops.conv2d_forward_cached(x, params.conv(layer))
        cache = cols if keep else None
    elif kind == "bn":
        p = params.bn(layer.id)
        y, c = T.batchnorm_forward(x, p, "train" if mode == "train" else "eval", bn_override)
        if c.batch_stats:
            update = (c.running_mean, c.running_var)
        cache = c
    elif kind == "relu":
        y = T.relu_forward(x)
        cache = x if keep else None
    elif kind == "maxpool":
        y, arg = T.maxpool2d_forward(x, layer.kernel, layer.stride or layer.kernel)
        cache = arg if keep else None
    elif kind == "gap":
        y = T.global_avgpool_forward(x)
    elif kind == "flatten":
        y = x.reshape(x.shape[0], -1)
    elif kind == "fc":
        y = T.fc_forward(x, params[f"{layer.id}.weight"], params[f"{layer.id}.bias"])
        cache = x if keep else None
    elif kind == "add":
        y = inputs[0] + inputs[1]
        for extra in inputs[2:]:
            y = y + extra
    else:  # pragma: no cover - validate() rejects unknown kinds
        raise SpecError(kind)
    return y, cache, update


def run(spec, params, x, masks=None, mode="eval", keep=False, bn_override=None):
    """Execute the whole graph on a batch ``x`` of shape (N, H, W, C).

    ``mode="train"`` uses batch statistics in BN and reports the EMA
    running-stat updates on the tape without touching ``params``.
    """
    x = np.asarray(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise SpecError(f"batch shape {x.shape} does not match input {spec.input_shape}")
    tape = Tape(mode)
    tape.node_masks = node_masks(spec, masks, x.dtype)
    vals = {INPUT: x}
    bn_override = bn_override or {}
    for l in spec.layers:
        ins = [vals[p] for p in l.predecessors]
        if keep:
            tape.in_shapes[l.id] = ins[0].shape
        y, cache, upd = apply_layer(l, ins, params, mode, bn_override.get(l.id), keep)
        if l.id in tape.node_masks:
            y = y * tape.node_masks[l.id].reshape((1,) * (y.ndim - 1) + (-1,))
        vals[l.id] = y
        if cache is not None:
            tape.caches[l.id] = cache
        if upd is not None:
            tape.bn_updates[l.id] = upd
    del vals[INPUT]
    tape.outputs = vals
    return tape


def forward(spec, params, batch, masks=None, mode="eval", record=()):
    """Returns ``(logits, {layer id: feature map})`` for the ids in ``record``."""
    tape = run(spec, params, batch, masks, mode)
    return tape.logits, {i: tape.outputs[i] for i in record}


def backward(spec, params, tape, grad_logits, capture=()):
    """Back-propagate ``grad_logits`` through a tape recorded with ``keep=True``.

    Returns ``(grads, captured)``: parameter gradients by tensor name, and the
    gradient w.r.t. the (masked) output of each node listed in ``capture``.
    """
    grads = {}
    captured = {}
    pending = {spec.layers[-1].id: grad_logits}
    for l in reversed(spec.layers):
        g = pending.pop(l.id, None)
        if g is None:
            continue
        if l.id in capture:
            captured[l.id] = g
        m = tape.node_masks.get(l.id)
        if m is not None:
            g = g * m.reshape((1,) * (g.ndim - 1) + (-1,))
        need_input = any(p != INPUT for p in l.predecessors)
        kind = l.kind
        if kind == "conv":
            p = params.conv(l)
            gx, gk, gb = T.ops.conv2d_backward_cached(tape.in_shapes[l.id], tape.caches[l.id], p, g)
            grads[f"{l.id}.kernel"], grads[f"{l.id}.bias"] = gk, gb
            gin = [gx]
        elif kind == "bn":
            gx, gg, gbeta = T.batchnorm_backward(g, tape.caches[l.id], params[f"{l.id}.gamma"])
            grads[f"{l.id}.gamma"], grads[f"{l.id}.beta"] = gg, gbeta
            gin = [gx]
        elif kind == "relu":
            gin = [T.relu_backward(tape.caches[l.id], g)]
        elif kind == "maxpool":
            gin = [T.maxpool2d_backward(tape.in_shapes[l.id], tape.caches[l.id], g,
                                        l.kernel, l.stride or l.kernel)]
        elif kind == "gap":
            gin = [T.global_avgpool_backward(tape.in_shapes[l.id], g)]
        elif kind == "flatten":
            gin = [g.reshape(tape.in_shapes[l.id])]
        elif kind == "fc":
            gx, gw, gb = T.fc_backward(tape.caches[l.id], params[f"{l.id}.weight"], g)
            grads[f"{l.id}.weight"], grads[f"{l.id}.bias"] = gw, gb
            gin = [gx]
        elif kind == "add":
            gin = [g] * len(l.predecessors)
        if not need_input:
            continue
        for pred, gi in zip(l.predecessors, gin):
            if pred == INPUT:
                continue
            if pred in pending:
                pending[pred] = pending[pred] + gi
            else:
                pending[pred] = gi
    return grads, captured


def predict(spec, params, X, masks=None, batch_size=500):
    """Eval-mode logits for a whole array, in chunks."""
    out = [run(spec, params, X[i : i + batch_size], masks).logits for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, spec.classes), np.float32)
