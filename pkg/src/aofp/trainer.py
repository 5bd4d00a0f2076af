"""SGD training, finetuning and evaluation shared by every pipeline."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import netgraph as ng
from .netgraph.serialize import atomic_write
from .tensor import softmax_xent, softmax_xent_backward

DECAYED = ("kernel", "weight")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Dataset:
    x: np.ndarray  # (N, H, W, C) float32
    y: np.ndarray  # (N,) int

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return Dataset(self.x[idx], self.y[idx])


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr_schedule: list = field(default_factory=lambda: [(0, 0.05)])
    momentum: float = 0.9
    weight_decay: float = 1e-4
    max_steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.lr_schedule = [(int(s), float(lr)) for s, lr in self.lr_schedule]
        steps = [s for s, _ in self.lr_schedule]
        if not steps or steps[0] != 0 or any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("lr schedule steps must start at 0 and strictly increase")
        if self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("batch_size and max_steps must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must lie in [0, 1) and weight decay be non-negative")

    @classmethod
    def desk(cls, max_steps=3000, lr=0.05, **kw):
        """Step schedule decayed by 0.1 at 50% and 75% of the run."""
        sched = [(0, lr)]
        for step, rate in ((max_steps // 2, lr * 0.1), (max_steps * 3 // 4, lr * 0.01)):
            if step > sched[-1][0]:  # very short runs collapse the decay points
                sched.append((step, rate))
        return cls(lr_schedule=sched, max_steps=max_steps, **kw)

    def lr_at(self, step):
        lr = self.lr_schedule[0][1]
        for s, v in self.lr_schedule:
            if step >= s:
                lr = v
        return lr


@dataclass
class EvalReport:
    top1: float
    loss: float
    count: int

    def to_dict(self):
        return {"top1": self.top1, "loss": self.loss, "count": self.count}


class SGD:
    """Momentum SGD; decay applies to kernels and fc weights only."""

    def __init__(self, momentum=0.9, weight_decay=0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, params, grads, lr):
        for k, g in grads.items():
            if self.weight_decay and k.rsplit(".", 1)[1] in DECAYED:
                g = g + self.weight_decay * params[k]
            if self.momentum:
                v = self.velocity.get(k)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[k] = v
                g = v
            params[k] -= (lr * g).astype(params[k].dtype)

    def zero_slice(self, key, index):
        """Drop the accumulated velocity of ``key[index]`` (e.g. a pruned filter)."""
        v = self.velocity.get(key)
        if v is not None:
            v[index] = 0


def batches(n, batch_size, rng):
    """Endless stream of index batches, reshuffled every epoch; drops no example."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i : i + batch_size]


def apply_bn_updates(params, tape):
    for bid, (rm, rv) in tape.bn_updates.items():
        params[f"{bid}.running_mean"] = rm
        params[f"{bid}.running_var"] = rv


def sgd_step(spec, params, opt, xb, yb, lr, masks=None, step=0):
    """One forward/backward/update on a batch. Returns ``(loss, top1, tape)``."""
    tape = ng.run(spec, params, xb, masks, "train", keep=True)
    loss, _ = softmax_xent(tape.logits, yb)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss} at step {step}")
    grads, _ = ng.backward(spec, params, tape, softmax_xent_backward(tape.logits, yb))
    apply_bn_updates(params, tape)
    opt.step(params, grads, lr)
    top1 = float(np.mean(tape.logits.argmax(axis=1) == yb))
    return loss, top1, tape


def train(spec, params, dataset, cfg, masks=None, log_path=None, log_every=50):
    """Train a copy of ``params`` (fresh init from ``cfg.seed`` when None)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    params = ng.init_params(spec, cfg.seed) if params is None else params.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(cfg.momentum, cfg.weight_decay)
    stream = batches(len(dataset), cfg.batch_size, rng)
    rows = []
    for step in range(cfg.max_steps):
        idx = next(stream)
        lr = cfg.lr_at(step)
        loss, top1, _ = sgd_step(spec, params, opt, dataset.x[idx], dataset.y[idx], lr, masks, step)
        if log_path is not None and (step % log_every == 0 or step == cfg.max_steps - 1):
            rows.append((step, lr, loss, top1))
    if log_path is not None:
        write_log(log_path, rows)
    return params


def finetune(spec, params, dataset, cfg, masks=None, log_path=None):
    if params is None:
        raise ValueError("finetune needs starting parameters")
    return train(spec, params, dataset, cfg, masks, log_path)


def write_log(path, rows):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["step", "lr", "loss", "top1"])
    for step, lr, loss, top1 in rows:
        w.writerow([step, f"{lr:.6g}", f"{loss:.6f}", f"{top1:.4f}"])
    atomic_write(path, buf.getvalue())


def evaluate(spec, params, dataset, masks=None, batch_size=500):
    """Eval-mode accuracy and mean cross-entropy; never touches ``params``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    logits = ng.predict(spec, params, dataset.x, masks, batch_size)
    loss, _ = softmax_xent(logits, dataset.y)
    top1 = float(np.mean(logits.argmax(axis=1) == dataset.y))
    return EvalReport(top1, loss, len(dataset))
