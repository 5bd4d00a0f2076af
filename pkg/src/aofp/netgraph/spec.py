"""Declarative architecture graphs and the queries the pruner needs from them."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property

KINDS = ("conv", "bn", "relu", "maxpool", "gap", "fc", "add", "flatten")
INPUT = -1

# ops that keep the channel layout of their input and sit between a conv and its consumer
_ELEMENTWISE = ("bn", "relu")
_CHANNEL_PRESERVING = ("maxpool", "gap", "flatten", "relu", "bn")


class SpecError(ValueError):
    """Malformed or inconsistent network description."""


@dataclass
class LayerSpec:
    id: int
    kind: str
    width: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    predecessors: list = field(default_factory=list)
    prunable: bool = False


@dataclass
class NetworkSpec:
    layers: list
    input_shape: tuple
    classes: int

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        validate(self)

    def __getitem__(self, i):
        return self.layers[i]

    def __eq__(self, other):
        return (
            isinstance(other, NetworkSpec)
            and self.layers == other.layers
            and self.input_shape == other.input_shape
            and self.classes == other.classes
        )

    @property
    def convs(self):
        return [l.id for l in self.layers if l.kind == "conv"]

    @property
    def prunable(self):
        return [l.id for l in self.layers if l.prunable]

    @property
    def widths(self):
        return {l.id: l.width for l in self.layers if l.kind == "conv"}

    @cached_property
    def consumers(self):
        out = {l.id: [] for l in self.layers}
        out[INPUT] = []
        for l in self.layers:
            for p in l.predecessors:
                out[p].append(l.id)
        return out

    @cached_property
    def topology(self):
        return {c: conv_topology(self, c) for c in self.convs}

    def shapes(self, widths=None):
        """Output shape of every layer, optionally with overridden conv widths."""
        return infer_shapes(self, widths)

    def replace_widths(self, widths):
        layers = [LayerSpec(**asdict(l)) for l in self.layers]
        for i, w in widths.items():
            if layers[i].kind != "conv":
                raise SpecError(f"layer {i} is not a conv layer")
            layers[i].width = int(w)
        return NetworkSpec(layers, self.input_shape, self.classes)

    def to_dict(self):
        return {
            "layers": [asdict(l) for l in self.layers],
            "input_shape": list(self.input_shape),
            "classes": self.classes,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d):
        layers = [LayerSpec(**{k: v for k, v in l.items()}) for l in d["layers"]]
        for l in layers:
            l.predecessors = list(l.predecessors)
        return cls(layers, tuple(d["input_shape"]), int(d["classes"]))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ConvTopology:
    """Where a conv's channels flow: its BN, the node carrying its mask, and its consumer."""

    conv: int
    bn: int | None
    block_end: int  # the mask multiplies this node's output
    successor: int | None  # next conv/fc, None if the channels reach an add or the logits
    path: tuple  # nodes strictly between block_end and successor


def _sole_consumer(spec, i):
    c = spec.consumers[i]
    return c[0] if len(c) == 1 else None


def conv_topology(spec, conv):
    bn = None
    end = conv
    nxt = _sole_consumer(spec, end)
    while nxt is not None and spec[nxt].kind in _ELEMENTWISE:
        if spec[nxt].kind == "bn" and bn is None and end == conv:
            bn = nxt
        end = nxt
        nxt = _sole_consumer(spec, end)
    path = []
    cur = end
    successor = None
    while True:
        nxt = _sole_consumer(spec, cur)
        if nxt is None:
            break
        kind = spec[nxt].kind
        if kind in ("conv", "fc"):
            successor = nxt
            break
        if kind not in _CHANNEL_PRESERVING:
            break
        path.append(nxt)
        cur = nxt
    return ConvTopology(conv, bn, end, successor, tuple(path))


def infer_shapes(spec, widths=None):
    widths = widths or {}
    shapes = {INPUT: tuple(spec.input_shape)}
    for l in spec.layers:
        ins = [shapes[p] for p in l.predecessors]
        if not ins:
            raise SpecError(f"layer {l.id} has no inputs")
        x = ins[0]
        if l.kind == "conv":
            if len(x) != 3:
                raise SpecError(f"conv {l.id} needs a spatial input")
            h = (x[0] + 2 * l.padding - l.kernel) // l.stride + 1
            w = (x[1] + 2 * l.padding - l.kernel) // l.stride + 1
            if h < 1 or w < 1:
                raise SpecError(f"conv {l.id} kernel exceeds its input")
            shapes[l.id] = (h, w, int(widths.get(l.id, l.width)))
        elif l.kind == "maxpool":
            stride = l.stride or l.kernel
            shapes[l.id] = ((x[0] - l.kernel) // stride + 1, (x[1] - l.kernel) // stride + 1, x[2])
        elif l.kind == "gap":
            shapes[l.id] = (x[2],)
        elif l.kind == "flatten":
            shapes[l.id] = (math.prod(x),)
        elif l.kind == "fc":
            shapes[l.id] = (l.width,)
        elif l.kind == "add":
            if any(s != x for s in ins):
                raise SpecError(f"add {l.id} inputs disagree: {ins}")
            shapes[l.id] = x
        else:
            shapes[l.id] = x
    return shapes


def validate(spec):
    """Structural checks. An empty layer list is accepted as a placeholder spec with no forward."""
    if not spec.layers:
        return
    seen = {INPUT}
    for pos, l in enumerate(spec.layers):
        if l.id != pos:
            raise SpecError(f"layer at position {pos} has id {l.id}")
        if l.kind not in KINDS:
            raise SpecError(f"unknown layer kind {l.kind!r}")
        if not l.predecessors or any(p not in seen for p in l.predecessors):
            raise SpecError(f"layer {l.id} must follow its predecessors")
        if l.kind == "add" and len(l.predecessors) < 2:
            raise SpecError(f"add {l.id} needs two inputs")
        if l.kind != "add" and len(l.predecessors) != 1:
            raise SpecError(f"layer {l.id} ({l.kind}) takes exactly one input")
        if l.kind in ("conv", "fc") and l.width < 1:
            raise SpecError(f"layer {l.id} width must be positive")
        if l.kind in ("conv", "maxpool") and l.kernel < 1:
            raise SpecError(f"layer {l.id} needs a kernel size")
        if l.prunable and l.kind != "conv":
            raise SpecError(f"only conv layers can be prunable (layer {l.id})")
        seen.add(l.id)
    if spec.layers[-1].kind != "fc" or spec.layers[-1].width != spec.classes:
        raise SpecError("network must end in an fc layer with one output per class")
    shapes = infer_shapes(spec)
    for l in spec.layers:
        if l.kind == "fc" and len(shapes[l.predecessors[0]]) != 1:
            raise SpecError(f"fc {l.id} needs a flattened input")
        if l.prunable:
            topo = conv_topology(spec, l.id)
            if topo.successor is None:
                raise SpecError(f"prunable conv {l.id} must feed exactly one conv/fc (not a residual add)")


# --------------------------------------------------------------------------
# builders

VGG16_WIDTHS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
VGG16_STAGES = (2, 2, 3, 3, 3)
REDESIGNED_VGG16_WIDTHS = (44, 80, 160, 180, 360, 360, 256, 224, 192, 56, 80, 192, 192)
VGG_SMALL_WIDTHS = (16, 16, 32, 32, 64, 64, 64, 64)
VGG_SMALL_STAGES = (2, 2, 2, 2)


class _Builder:
    def __init__(self):
        self.layers = []

    def add(self, kind, preds, **kw):
        l = LayerSpec(len(self.layers), kind, predecessors=list(preds), **kw)
        self.layers.append(l)
        return l.id

    def conv_bn(self, pred, width, kernel=3, stride=1, relu=True, prunable=False):
        c = self.add("conv", [pred], width=width, kernel=kernel, stride=stride,
                     padding=kernel // 2, prunable=prunable)
        out = self.add("bn", [c])
        if relu:
            out = self.add("relu", [out])
        return out


def build_vgg_cifar(widths=VGG16_WIDTHS, stages=None, input_shape=(32, 32, 3), classes=10):
    """Plain conv-BN-ReLU stacks with 2x2 max pooling after each stage.

    ``stages`` gives the conv count per stage; it defaults to the 13-layer
    layout when 13 widths are given. Pooling is skipped once the map is 1x1.
    """
    widths = [int(w) for w in widths]
    if stages is None:
        if len(widths) != len(VGG16_WIDTHS):
            raise SpecError("pass stages= for width lists other than 13 entries")
        stages = VGG16_STAGES
    if sum(stages) != len(widths):
        raise SpecError(f"{len(widths)} widths do not fill stages {tuple(stages)}")
    if any(w < 1 for w in widths):
        raise SpecError("widths must be positive")
    b = _Builder()
    cur, h = INPUT, input_shape[0]
    it = iter(widths)
    for n in stages:
        for _ in range(n):
            cur = b.conv_bn(cur, next(it), prunable=True)
        if h >= 2:
            cur = b.add("maxpool", [cur], kernel=2, stride=2)
            h //= 2
    cur = b.add("flatten", [cur])
    b.add("fc", [cur], width=classes)
    return NetworkSpec(b.layers, input_shape, classes)


def build_vgg_small(widths=VGG_SMALL_WIDTHS, input_shape=(8, 8, 1), classes=10):
    return build_vgg_cifar(widths, VGG_SMALL_STAGES, input_shape, classes)


def build_small_resnet(block_widths=(16, 32, 64), input_shape=(8, 8, 1), classes=10,
                       internal_widths=None):
    """Stem conv plus one basic residual block per stage, stride 2 between stages.

    Only the first conv of each block is prunable; the second conv, the stem and
    the projection shortcuts feed a residual add directly.
    """
    block_widths = [int(w) for w in block_widths]
    internal = list(internal_widths) if internal_widths is not None else list(block_widths)
    if len(internal) != len(block_widths):
        raise SpecError("one internal width per stage")
    if any(w < 1 for w in block_widths + internal):
        raise SpecError("widths must be positive")
    b = _Builder()
    cur = b.conv_bn(INPUT, block_widths[0])
    for s, (w, wi) in enumerate(zip(block_widths, internal)):
        stride = 1 if s == 0 else 2
        x = b.conv_bn(cur, wi, stride=stride, prunable=True)
        x = b.conv_bn(x, w, relu=False)
        short = cur
        prev_w = block_widths[s - 1] if s else block_widths[0]
        if stride != 1 or prev_w != w:
            short = b.conv_bn(cur, w, kernel=1, stride=stride, relu=False)
        cur = b.add("add", [x, short])
        cur = b.add("relu", [cur])
    cur = b.add("gap", [cur])
    b.add("fc", [cur], width=classes)
    return NetworkSpec(b.layers, input_shape, classes)


PRESETS = {
    "vgg16-cifar": lambda: build_vgg_cifar(VGG16_WIDTHS),
    "vgg16-redesigned": lambda: build_vgg_cifar(REDESIGNED_VGG16_WIDTHS),
    "vgg-small": build_vgg_small,
    "resnet-small": build_small_resnet,
    "conv3-toy": lambda: build_vgg_cifar((16, 16, 16), (1, 1, 1), (8, 8, 1), 10),
}


def preset(name, **kw):
    try:
        factory = PRESETS[name]
    except KeyError:
        raise SpecError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**kw) if kw else factory()


def scale_widths(spec, factor):
    """Scale every prunable conv width by ``factor`` (nearest integer, ties up, min 1)."""
    if factor <= 0:
        raise SpecError("scale factor must be positive")
    new = {i: max(1, math.floor(spec[i].width * factor + 0.5)) for i in spec.prunable}
    return spec.replace_widths(new)
