"""Parameter storage keyed by ``"<layer id>.<name>"``."""
from __future__ import annotations

import numpy as np

from ..tensor import BNParams, ConvParams
from .spec import SpecError

RUNNING = ("running_mean", "running_var")


class ModelParams(dict):
    """Mapping of tensor name to float32 array.

    Conv layers own ``kernel`` and ``bias``, fc layers ``weight`` and ``bias``,
    BN layers ``gamma``, ``beta`` and the two running statistics.
    """

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.items()})

    def conv(self, layer):
        return ConvParams(self[f"{layer.id}.kernel"], self[f"{layer.id}.bias"], layer.stride, layer.padding)

    def bn(self, layer_id):
        return BNParams(
            self[f"{layer_id}.gamma"],
            self[f"{layer_id}.beta"],
            self[f"{layer_id}.running_mean"],
            self[f"{layer_id}.running_var"],
        )

    def trainable(self):
        return [k for k in self if k.rsplit(".", 1)[1] not in RUNNING]

    def equal(self, other):
        return self.keys() == other.keys() and all(np.array_equal(self[k], other[k]) for k in self)


def init_params(spec, seed=0, dtype=np.float32):
    """He-normal kernels, zero biases, identity BN."""
    rng = np.random.default_rng(seed)
    shapes = spec.shapes()
    p = ModelParams()
    for l in spec.layers:
        x = shapes[l.predecessors[0]]
        if l.kind == "conv":
            fan_in = l.kernel * l.kernel * x[2]
            p[f"{l.id}.kernel"] = (rng.standard_normal((l.kernel, l.kernel, x[2], l.width))
                                   * np.sqrt(2.0 / fan_in)).astype(dtype)
            p[f"{l.id}.bias"] = np.zeros(l.width, dtype)
        elif l.kind == "fc":
            p[f"{l.id}.weight"] = (rng.standard_normal((x[0], l.width)) * np.sqrt(1.0 / x[0])).astype(dtype)
            p[f"{l.id}.bias"] = np.zeros(l.width, dtype)
        elif l.kind == "bn":
            c = x[-1]
            p[f"{l.id}.gamma"] = np.ones(c, dtype)
            p[f"{l.id}.beta"] = np.zeros(c, dtype)
            p[f"{l.id}.running_mean"] = np.zeros(c, dtype)
            p[f"{l.id}.running_var"] = np.ones(c, dtype)
    return p


def check_params(spec, params):
    """Raise SpecError unless every tensor shape agrees with the spec widths."""
    expected = init_params(spec, dtype=np.float32)
    if expected.keys() != params.keys():
        raise SpecError(f"parameter names differ: {sorted(set(expected) ^ set(params))}")
    for k, v in expected.items():
        if params[k].shape != v.shape:
            raise SpecError(f"{k}: shape {params[k].shape}, spec implies {v.shape}")
