"""Command-line entry point: ``aofp <pipeline> [--config run.json] [--key value ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import netgraph as ng
from ..baselines import pruning_curve
from ..engine import aofp_run, finetune_config
from ..netgraph.serialize import atomic_write
from ..trainer import TrainingDiverged, evaluate, finetune, train
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PIPELINES, ConfigError, load_config
from .data import DataFormatError, load_dataset

log = logging.getLogger("aofp")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class PipelineError(RuntimeError):
    pass


class Outputs:
    """Writes artifacts atomically and remembers them for failure reports."""

    def __init__(self, root):
        self.root = Path(root)
        self.written = []

    def path(self, name):
        return self.root / name

    def text(self, name, data):
        atomic_write(self.path(name), data)
        self.written.append(name)

    def json(self, name, doc):
        self.text(name, json.dumps(doc, indent=1, sort_keys=True) + "\n")

    def model(self, name, spec, params, **meta):
        save_checkpoint(self.path(name), spec, params, **meta)
        self.written.append(name)


def _spec_for(cfg):
    spec = ng.preset(cfg.preset)
    if cfg.widths is not None:
        if len(cfg.widths) != len(spec.prunable):
            raise ConfigError(f"widths needs {len(spec.prunable)} entries, got {len(cfg.widths)}")
        spec = spec.replace_widths(dict(zip(spec.prunable, cfg.widths)))
    return spec


def _needs_checkpoint(cfg):
    if cfg.checkpoint is None:
        raise ConfigError(f"{cfg.pipeline} needs --checkpoint <model dir>")
    ckpt = load_checkpoint(cfg.checkpoint)
    return ckpt.spec, ckpt.params


def _check_input(spec, splits):
    shape = splits.train.x.shape[1:]
    if tuple(shape) != tuple(spec.input_shape):
        raise ConfigError(f"dataset images are {tuple(shape)} but the network expects {spec.input_shape}")


def _widths(spec):
    return [spec[i].width for i in spec.prunable]


# --------------------------------------------------------------------------
# pipelines


def run_train(cfg, out):
    spec = _spec_for(cfg)
    splits = load_dataset(cfg.dataset)
    _check_input(spec, splits)
    params = train(spec, None, splits.train, cfg.train, log_path=out.path("train_log.csv"))
    out.written.append("train_log.csv")
    out.model("model", spec, params, step=cfg.train.max_steps, metadata={"preset": cfg.preset})
    report = {"eval": evaluate(spec, params, splits.eval).to_dict(), "flops": ng.flops_of(spec),
              "widths": _widths(spec)}
    out.json("report.json", report)
    return report


def _prune(spec, params, splits, acfg, out, prefix=""):
    result = aofp_run(spec, params, splits.train, acfg)
    probe = splits.eval.x[:100]
    a, _ = ng.forward(spec, result.masked_params, probe, result.base_masks)
    b, _ = ng.forward(result.spec, result.params, probe)
    gap = float(np.max(np.abs(a - b)))
    if gap > 1e-5:
        raise PipelineError(f"reconstructed model deviates from the masked one by {gap:.3g}")
    before = evaluate(result.spec, result.params, splits.eval).to_dict()
    params = result.params
    if acfg.finetune_steps > 0:
        params = finetune(result.spec, params, splits.train, finetune_config(acfg),
                          log_path=out.path(prefix + "finetune_log.csv"))
        out.written.append(prefix + "finetune_log.csv")
    result.write_trajectory(out.path(prefix + "trajectory.csv"))
    result.write_moves(out.path(prefix + "moves.json"))
    out.written += [prefix + "trajectory.csv", prefix + "moves.json"]
    report = {
        "base_flops": result.base_flops,
        "final_flops": result.final_flops,
        "reduction": result.reduction,
        "reached_target": result.reached,
        "steps": result.steps,
        "moves": len(result.moves),
        "widths": _widths(result.spec),
        "reconstruction_max_abs_diff": gap,
        "eval_before_finetune": before,
        "eval": evaluate(result.spec, params, splits.eval).to_dict(),
    }
    return result.spec, params, report


def run_prune(cfg, out):
    spec, params = _needs_checkpoint(cfg)
    splits = load_dataset(cfg.dataset)
    _check_input(spec, splits)
    base = evaluate(spec, params, splits.eval).to_dict()
    slim, slim_params, report = _prune(spec, params, splits, cfg.aofp, out)
    report["eval_base"] = base
    out.model("model", slim, slim_params, step=report["steps"])
    out.json("report.json", report)
    if not report["reached_target"]:
        log.warning("target FLOPs reduction was not reached")
    return report


def run_prune_baseline(cfg, out):
    spec, params = _needs_checkpoint(cfg)
    splits = load_dataset(cfg.dataset)
    _check_input(spec, splits)
    layer = spec.convs[0] if cfg.layer is None else cfg.layer
    large = None
    if "oracle_10x" in cfg.methods:
        n = 10 * cfg.dataset.n_assess
        if n > len(splits.train):
            raise ConfigError(f"oracle_10x needs {n} training examples, have {len(splits.train)}")
        large = splits.train.subset(np.sort(np.random.default_rng(cfg.seed).choice(len(splits.train), n, replace=False)))
    curves = [pruning_curve(spec, params, layer, m, splits.assess, splits.eval, large, cfg.seed, cfg.max_pruned)
              for m in cfg.methods]
    lines = [curves[0].to_csv().splitlines()[0]]
    for c in curves:
        lines += c.to_csv().splitlines()[1:]
    out.text("curves.csv", "\n".join(lines) + "\n")
    report = {"layer": layer, "auc": {c.method: c.auc() for c in curves},
              "order": {c.method: c.order for c in curves}, "gamma": {c.method: c.gamma for c in curves}}
    out.json("report.json", report)
    return report


def run_redesign(cfg, out):
    base_spec = _spec_for(cfg)
    scaled = ng.scale_widths(base_spec, cfg.scale)
    splits = load_dataset(cfg.dataset)
    _check_input(base_spec, splits)
    base_flops, scaled_flops = ng.flops_of(base_spec), ng.flops_of(scaled)
    if scaled_flops <= base_flops:
        raise ConfigError("scale must enlarge the network")
    params = train(scaled, None, splits.train, cfg.train, log_path=out.path("train_log.csv"))
    out.written.append("train_log.csv")
    acfg = cfg.aofp
    acfg.target_flops_drop = 1.0 - base_flops / scaled_flops
    slim, slim_params, report = _prune(scaled, params, splits, acfg, out)
    out.model("model", slim, slim_params, step=report["steps"])
    report.update({
        "original_flops": base_flops,
        "scaled_flops": scaled_flops,
        "flops_ratio": report["final_flops"] / base_flops,
        "original_widths": _widths(base_spec),
        "scaled_widths": _widths(scaled),
        "scaled_eval": evaluate(scaled, params, splits.eval).to_dict(),
    })
    out.json("report.json", report)
    return report


def run_flops(cfg, out):
    spec = load_checkpoint(cfg.checkpoint).spec if cfg.checkpoint else _spec_for(cfg)
    total = ng.flops_of(spec)
    report = {"flops": total, "mflops": round(total / 1e6, 2),
              "layers": {str(k): v for k, v in ng.layer_flops(spec).items()}}
    return report


def run_eval(cfg, out):
    spec, params = _needs_checkpoint(cfg)
    splits = load_dataset(cfg.dataset)
    _check_input(spec, splits)
    report = evaluate(spec, params, splits.eval).to_dict()
    out.json("eval.json", report)
    return report


RUNNERS = {
    "train": run_train,
    "prune": run_prune,
    "prune-baseline": run_prune_baseline,
    "redesign": run_redesign,
    "flops": run_flops,
    "eval": run_eval,
}


# --------------------------------------------------------------------------


def _fail(code, exc, out=None):
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if out is not None:
        doc["partial_outputs"] = list(out.written)
        if out.written:
            try:
                out.json("FAILED.json", doc)
            except OSError:
                pass
    print(json.dumps(doc), file=sys.stderr)
    return code


def main(argv=None):
    parser = argparse.ArgumentParser(prog="aofp", description="Training-time filter pruning pipelines.")
    parser.add_argument("pipeline", choices=PIPELINES)
    parser.add_argument("--config", help="run configuration JSON")
    parser.add_argument("-v", "--verbose", action="store_true")
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = None
    try:
        cfg = load_config(args.config, ["--pipeline", args.pipeline, *rest])
        out = Outputs(cfg.output_dir)
        report = RUNNERS[cfg.pipeline](cfg, out)
    except (ConfigError, ng.SpecError, ng.MaskError) as e:
        return _fail(EXIT_USAGE, e, out)
    except (DataFormatError, ng.CheckpointError) as e:
        return _fail(EXIT_DATA, e, out)
    except TrainingDiverged as e:
        return _fail(EXIT_DIVERGED, e, out)
    except Exception as e:  # noqa: BLE001 - every failure gets a structured report
        log.debug("pipeline failed", exc_info=True)
        return _fail(1, e, out)
    print(json.dumps(report, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
