"""Multiply-accumulate counting (one MAC = one FLOP)."""
import numpy as np


def layer_flops(spec, widths=None):
    """Per conv/fc layer cost, optionally with overridden conv widths."""
    shapes = spec.shapes(widths)
    out = {}
    for l in spec.layers:
        if l.kind == "conv":
            cin = shapes[l.predecessors[0]][2]
            h, w, cout = shapes[l.id]
            out[l.id] = h * w * l.kernel * l.kernel * cin * cout
        elif l.kind == "fc":
            out[l.id] = shapes[l.predecessors[0]][0] * l.width
    return out


def flops_of(spec, widths=None):
    return int(sum(layer_flops(spec, widths).values()))


def effective_flops(spec, base_masks):
    """FLOPs with every masked conv counted at its surviving width."""
    widths = {i: int(np.count_nonzero(m)) for i, m in base_masks.items()}
    return flops_of(spec, widths)
