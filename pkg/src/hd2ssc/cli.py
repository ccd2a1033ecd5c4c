"""Command-line entry point: gen, train, eval, gradcheck, export.

Exit codes are shared by every command: 0 success, 1 usage, 2 input or IO
problem, 3 numeric failure (divergence, non-finite gradient probe).
Logging goes to stderr and is controlled by HD2_LOG=quiet|info|debug.
"""
import argparse
import json
import logging
import math
import os
import sys
import time

import numpy as np

from . import __version__
from . import pipeline as pl
from .checkpoint import load_checkpoint, save_checkpoint
from .dataio.config import KEYS, ModelConfig, parse_config, parse_config_text, parse_override
from .dataio.grid import VoxelGrid, write_sscv
from .dataio.labels import SYNTHETIC
from .dataio.store import read_dataset, sample_dir, write_sample
from .dataio.synthetic import generate_synthetic
from .errors import CheckpointError, ConfigError, HD2Error, NumericDomainError
from .gradcheck import GRADCHECK_CONFIG, LOSS_TERMS, THRESHOLD, check_losses
from .metrics import accumulate, report_csv, scene_iou, semantic_miou

log = logging.getLogger("hd2ssc")

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _timestamp():
    # wall-clock time would break byte-identical reruns, so only honour
    # an explicitly pinned epoch
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is None:
        return None
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(int(epoch)))


def write_manifest(path, command, cfg, outputs, extra=None):
    base = os.path.dirname(os.path.abspath(path))
    stamp = _timestamp()
    doc = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed if cfg is not None else None,
        "config": cfg.to_text() if cfg is not None else None,
        "started": stamp,
        "finished": stamp,
        "outputs": sorted(os.path.relpath(os.path.abspath(p), base) for p in outputs),
    }
    doc.update(extra or {})
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_config(path, overrides=(), base=None):
    if path is None:
        cfg = base or ModelConfig()
    elif base is not None:
        try:
            with open(path) as f:
                cfg = parse_config_text(f.read(), base)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    else:
        cfg = parse_config(path)
    kw = dict(parse_override(item) for item in overrides)
    return cfg.with_overrides(**kw) if kw else cfg


def _fmt(x):
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.10g}"


def _write_text(path, text):
    with open(path, "w") as f:
        f.write(text)


def _check_compatible(model, dataset, space):
    if model.num_classes != space.num_classes:
        raise CheckpointError(f"checkpoint predicts {model.num_classes} classes, "
                              f"dataset has {space.num_classes}")
    dims = model.cfg.grid.dims
    for s in dataset:
        if tuple(s.gt.shape) not in (dims, tuple(2 * d for d in dims)):
            raise CheckpointError(f"checkpoint grid {dims} does not fit dataset grid {s.gt.shape}")
        if s.image_size != model.cfg.image_size:
            raise CheckpointError(f"checkpoint image size {model.cfg.image_size}, "
                                  f"dataset has {s.image_size}")


# --------------------------------------------------------------- commands

def cmd_gen(args):
    cfg = load_config(args.config, args.set)
    if args.count is not None:
        if args.count < 1:
            raise UsageError("--count must be at least 1")
        cfg = cfg.with_overrides(count=args.count)
    if cfg.count < 1:
        raise UsageError("data.count must be at least 1")
    samples = generate_synthetic(cfg.seed, cfg.count, cfg.grid, SYNTHETIC, cfg.image_size)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for i, s in enumerate(samples):
        d = sample_dir(args.out, i)
        write_sample(s, d)
        outputs.append(d)
    write_manifest(os.path.join(args.out, "manifest.json"), "gen", cfg, outputs,
                   {"label_space": "synthetic", "count": cfg.count})
    log.info("wrote %d samples to %s", cfg.count, args.out)
    return 0


def _train_one(cfg, dataset, space, out, max_steps=None):
    os.makedirs(out, exist_ok=True)
    result = pl.train(dataset, cfg, space, max_steps=max_steps)
    model = result.model
    cm = pl.evaluate(model, dataset)
    ckpt = os.path.join(out, "model.ckpt")
    save_checkpoint(model, ckpt)
    rows = ["epoch," + ",".join(pl.LossReport.FIELDS)]
    for i, rep in enumerate(result.epochs, 1):
        rows.append(f"{i}," + ",".join(_fmt(getattr(rep, k)) for k in pl.LossReport.FIELDS))
    losses = os.path.join(out, "losses.csv")
    _write_text(losses, "\n".join(rows) + "\n")
    evals = os.path.join(out, "evals.csv")
    _write_text(evals, "step,epoch,sc_iou,miou\n" + "".join(
        f"{e.step},{e.epoch},{e.sc_iou:.6f},{e.miou:.6f}\n" for e in result.evals))
    metrics = os.path.join(out, "metrics.csv")
    _write_text(metrics, report_csv(cm, space))
    write_manifest(os.path.join(out, "manifest.json"), "train", cfg,
                   [ckpt, losses, evals, metrics], {"steps": result.steps})
    return result, cm


def _parse_sweep(item):
    if "=" not in item:
        raise UsageError(f"--sweep expects key=v1,v2,... got {item!r}")
    key, values = item.split("=", 1)
    if key.strip() not in KEYS:
        raise ConfigError(f"unknown config key {key.strip()!r}")
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if not vals:
        raise UsageError("--sweep needs at least one value")
    return key.strip(), vals


def cmd_train(args):
    cfg = load_config(args.config, args.set)
    dataset, space = read_dataset(args.data)
    if args.sweep is None:
        result, cm = _train_one(cfg, dataset, space, args.out, args.max_steps)
        log.info("trained %d steps: SC IoU %.4f mIoU %.4f", result.steps,
                 scene_iou(cm), semantic_miou(cm)[1])
        return 0
    key, values = _parse_sweep(args.sweep)
    os.makedirs(args.out, exist_ok=True)
    rows = [f"{key},steps,final_loss,sc_iou,miou"]
    runs = []
    for raw in values:
        run_cfg = cfg.with_overrides(**dict([parse_override(f"{key}={raw}")]))
        run_dir = os.path.join(args.out, f"{key.split('.')[-1]}_{raw}")
        result, cm = _train_one(run_cfg, dataset, space, run_dir, args.max_steps)
        loss = result.epochs[-1].total if result.epochs else float("nan")
        rows.append(f"{raw},{result.steps},{_fmt(loss)},{scene_iou(cm):.6f},{semantic_miou(cm)[1]:.6f}")
        runs.append(run_dir)
        log.info("%s=%s: %s", key, raw, rows[-1])
    sweep = os.path.join(args.out, "sweep.csv")
    _write_text(sweep, "\n".join(rows) + "\n")
    write_manifest(os.path.join(args.out, "manifest.json"), "train-sweep", cfg, runs + [sweep],
                   {"sweep_key": key, "sweep_values": values})
    return 0


def cmd_eval(args):
    dataset, space = read_dataset(args.data)
    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    cfg = None
    if args.oracle:
        cm = None
        for s in dataset:
            part = accumulate(s.gt.labels, s.gt.labels, s.gt.valid, num_classes=space.num_classes)
            cm = part if cm is None else cm.merge(part)
    else:
        if args.checkpoint is None:
            raise UsageError("--checkpoint is required unless --oracle is given")
        model = load_checkpoint(args.checkpoint)
        _check_compatible(model, dataset, space)
        cfg = model.cfg
        cm = pl.evaluate(model, dataset, workers=args.workers)
    parent = os.path.dirname(os.path.abspath(args.report))
    os.makedirs(parent, exist_ok=True)
    _write_text(args.report, report_csv(cm, space))
    write_manifest(args.report + ".manifest.json", "eval", cfg, [args.report],
                   {"oracle": bool(args.oracle)})
    return 0


def cmd_gradcheck(args):
    cfg = load_config(args.config, args.set, base=GRADCHECK_CONFIG)
    if args.corrupt_grad is not None and args.corrupt_grad not in LOSS_TERMS:
        raise UsageError(f"--corrupt-grad must be one of {', '.join(LOSS_TERMS)}")
    try:
        results = check_losses(cfg, seed=cfg.seed, max_entries=args.max_entries,
                               corrupt=args.corrupt_grad)
    except (FloatingPointError, NumericDomainError) as e:
        raise NumericDomainError(f"gradient probe failed: {e}") from e
    ok = True
    print("loss,max_rel_error,status")
    for name in LOSS_TERMS:
        err = float(results[name])
        if not math.isfinite(err):
            raise NumericDomainError(f"non-finite gradient probe for loss {name}")
        passed = err < THRESHOLD
        ok &= passed
        print(f"{name},{err:.3e},{'pass' if passed else 'FAIL'}")
    return 0 if ok else 3


def _ply(labels, spec, space):
    occ = np.argwhere(labels > 0)
    centres = spec.centroids()
    lines = ["ply", "format ascii 1.0", f"element vertex {len(occ)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    for i, j, k in occ:
        x, y, z = centres[i, j, k]
        r, g, b = space.colors[labels[i, j, k]]
        lines.append(f"{x:.4f} {y:.4f} {z:.4f} {r} {g} {b}")
    return "\n".join(lines) + "\n"


def cmd_export(args):
    model = load_checkpoint(args.checkpoint)
    dataset, space = read_dataset(args.data)
    _check_compatible(model, dataset, space)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for i, s in enumerate(dataset):
        labels = pl.predict(model, s).astype(np.uint16)
        if args.format == "sscv":
            path = os.path.join(args.out, f"sample_{i:04d}.sscv")
            write_sscv(VoxelGrid(labels, np.ones(labels.shape, dtype=bool)), path)
        else:
            factor = labels.shape[0] // model.cfg.grid.dims[0]
            spec = model.cfg.grid
            if factor > 1:
                spec = type(spec)(tuple(d * factor for d in spec.dims), spec.origin,
                                  spec.resolution / factor)
            path = os.path.join(args.out, f"sample_{i:04d}.ply")
            _write_text(path, _ply(labels, spec, space))
        outputs.append(path)
    write_manifest(os.path.join(args.out, "manifest.json"), "export", model.cfg, outputs,
                   {"format": args.format})
    return 0


# ----------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="hd2ssc", description="Camera-based semantic scene completion toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def overrides(sp):
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    overrides(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--sweep", metavar="KEY=V1,V2,...",
                   help="train once per value and write sweep.csv")
    t.add_argument("--max-steps", type=int)
    overrides(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--oracle", action="store_true",
                   help="score the ground truth against itself")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    c.add_argument("--config")
    c.add_argument("--max-entries", type=int, default=6)
    c.add_argument("--corrupt-grad", help=argparse.SUPPRESS)
    overrides(c)
    c.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export", help="write predicted grids")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--format", choices=("sscv", "ply"), default="sscv")
    x.set_defaults(func=cmd_export)
    return p


def _setup_logging():
    level = os.environ.get("HD2_LOG", "quiet").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"HD2_LOG must be one of {', '.join(LOG_LEVELS)}")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("hd2ssc")
    root.handlers[:] = [handler]
    root.setLevel(LOG_LEVELS[level])
    root.propagate = False


def main(argv=None):
    parser = build_parser()
    try:
        _setup_logging()
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"hd2ssc: error: {e}", file=sys.stderr)
        return 1
    except HD2Error as e:
        print(f"hd2ssc: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"hd2ssc: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
