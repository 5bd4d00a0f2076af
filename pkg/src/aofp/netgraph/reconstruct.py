"""Physically remove masked filters and the matching successor input channels."""
import numpy as np

from .graph import MaskError
from .params import ModelParams


class EmptyLayerError(ValueError):
    """A mask would remove every filter of a layer."""


def reconstruct(spec, params, base_masks):
    """Slice every masked conv down to its surviving filters.

    Returns ``(new_spec, new_params)``; inputs are left untouched.
    """
    new_params = params.copy()
    shapes = spec.shapes()
    widths = {}
    for cid, mask in sorted(base_masks.items()):
        if cid < 0 or cid >= len(spec.layers) or spec[cid].kind != "conv":
            raise MaskError(f"mask given for non-conv layer {cid}")
        if not spec[cid].prunable:
            raise MaskError(f"layer {cid} is not prunable")
        mask = np.asarray(mask)
        if mask.shape != (spec[cid].width,):
            raise MaskError(f"mask for layer {cid} has wrong length")
        keep = np.flatnonzero(mask)
        if keep.size == 0:
            raise EmptyLayerError(f"layer {cid} would lose all of its filters")
        if keep.size == spec[cid].width:
            continue
        topo = spec.topology[cid]
        new_params[f"{cid}.kernel"] = new_params[f"{cid}.kernel"][..., keep]
        new_params[f"{cid}.bias"] = new_params[f"{cid}.bias"][keep]
        if topo.bn is not None:
            for name in ("gamma", "beta", "running_mean", "running_var"):
                key = f"{topo.bn}.{name}"
                new_params[key] = new_params[key][keep]
        succ = spec[topo.successor]
        if succ.kind == "conv":
            key = f"{succ.id}.kernel"
            new_params[key] = new_params[key][:, :, keep, :]
        else:
            key = f"{succ.id}.weight"
            w = new_params[key]
            flat = [n for n in topo.path if spec[n].kind == "flatten"]
            if flat:
                # flattened features are ordered (h, w, c)
                h, wd, c = shapes[spec[flat[0]].predecessors[0]]
                w = w.reshape(h, wd, c, -1)[:, :, keep, :].reshape(-1, w.shape[-1])
            else:
                w = w[keep]
            new_params[key] = w
        widths[cid] = int(keep.size)
    for k in new_params:
        new_params[k] = np.ascontiguousarray(new_params[k])
    return spec.replace_widths(widths), ModelParams(new_params)

