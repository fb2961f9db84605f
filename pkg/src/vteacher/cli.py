"""Command-line entry point: ``vteacher <command> ...``.

Exit codes: 0 success, 1 usage, 2 parse/validation, 3 numerical-check failure.
Errors are written to stderr as a single JSON object.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .caps import caps_step
from .config import RunConfig, load_config, load_scenario
from .detection import PredictionBatch
from .ema import WeightVector, ema_step
from .errors import ShapeMismatch, VTError
from .formats import (
    labels_line,
    load_state,
    read_dump,
    read_labels,
    read_tensor,
    save_state,
    write_tensor,
)
from .gradcheck import run_suite
from .losses import SOURCE, TARGET, Discriminator, adversarial_breakdown
from .saliency import FeatureMap, SaliencyMatrix, rasterize_boxes, reweight_features
from .simulator import run_scenario

log = logging.getLogger("vteacher")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def _grid(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError(f"grid dimensions must be positive, got {text!r}")
    return h, w


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, allow_nan=False) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ------------------------------------------------------------------ commands


def cmd_init_state(args):
    state = _config(args).threshold_state(args.num_classes, args.iters)
    save_state(state, args.out)
    return EXIT_OK


def cmd_select(args):
    state = load_state(args.state)
    records = read_dump(args.dump, state.num_classes)
    with open(args.out, "w", encoding="utf-8") as fh:
        for r in records:
            labels, state = caps_step(r.batch, state)
            fh.write(labels_line(labels) + "\n")
    if not records:
        # an empty dump still counts as one (empty) step
        _, state = caps_step(PredictionBatch("", ()), state)
    save_state(state, args.state_out or args.state)
    return EXIT_OK


def cmd_saliency(args):
    sets = read_labels(args.labels)
    if args.image_id is not None:
        sets = [s for s in sets if s.image_id == args.image_id]
        if not sets:
            raise VTError(f"image id {args.image_id!r} not found in {args.labels}")
    grids = []
    for s in sets:
        boxes = [(l.detection.bbox, 1.0 if args.ground_truth else l.detection.conf) for l in s.labels]
        grids.append(rasterize_boxes(boxes, args.stride, args.grid).grid)
    if len(grids) == 1:
        out = grids[0]
    else:
        out = np.stack(grids) if grids else np.zeros((0, *args.grid))
    write_tensor(args.out, out)
    return EXIT_OK


def cmd_reweight(args):
    f = read_tensor(args.features)
    m = read_tensor(args.saliency)
    if f.ndim != 3 or m.ndim != 2:
        raise ShapeMismatch(f"expected C x H x W features and H x W saliency, got {f.shape} and {m.shape}")
    out = reweight_features(FeatureMap(1, f), SaliencyMatrix(1, m.astype(f.dtype))).tensor
    write_tensor(args.out, out.astype(f.dtype, copy=False))
    return EXIT_OK


def cmd_ema(args):
    teacher = read_tensor(args.teacher)
    student = read_tensor(args.student)
    if teacher.shape != student.shape:
        raise ShapeMismatch(f"teacher {teacher.shape} vs student {student.shape}")
    alpha = args.alpha if args.alpha is not None else _config(args).alpha
    layout = "x".join(map(str, teacher.shape))
    mixed = ema_step(WeightVector(teacher, layout), WeightVector(student, layout), alpha)
    write_tensor(args.out, mixed.values.reshape(teacher.shape).astype(teacher.dtype))
    return EXIT_OK


def cmd_losses(args):
    cfg = _config(args)
    if args.lambda_d is not None:
        cfg = RunConfig(**{**cfg.to_dict(), "lambda_d": args.lambda_d})
    feats = [read_tensor(p).astype(np.float64) for p in args.features]
    if args.saliency:
        sal = [read_tensor(p).astype(np.float64) for p in args.saliency]
    else:
        sal = [np.zeros(f.shape[1:]) for f in feats]
    heads = [read_tensor(p).astype(np.float64) for p in args.disc]
    if not (len(feats) == len(sal) == len(heads)):
        raise ShapeMismatch(f"{len(feats)} feature maps, {len(sal)} saliency matrices, {len(heads)} discriminator files")
    for h in heads:
        if h.ndim != 2 or h.shape[0] != 2:
            raise ShapeMismatch(f"discriminator tensor must be 2 x (C+1), got {h.shape}")
    disc = Discriminator([h[0] for h in heads], [h[1] for h in heads])
    fmaps = [FeatureMap(1, f) for f in feats]
    smaps = [SaliencyMatrix(1, m) for m in sal]
    domain = SOURCE if args.domain == "source" else TARGET
    _emit(adversarial_breakdown(fmaps, smaps, disc, domain, cfg.loss_weights(), args.l_sup, args.l_unsup))
    return EXIT_OK


def cmd_simulate(args):
    scenario = load_scenario(args.scenario)
    overrides = {}
    if args.iters is not None:
        overrides["num_images"] = args.iters
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        scenario = replace(scenario, **overrides)
    report, trajectory = run_scenario(scenario)
    _emit(report, args.out)
    csv_path = args.csv or str(Path(args.out).with_suffix(".csv"))
    write_trajectory_csv(trajectory, csv_path)
    return EXIT_OK


def write_trajectory_csv(trajectory, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "class", "delta"])
        for k, row in enumerate(trajectory):
            for c, d in enumerate(row):
                w.writerow([k, c, repr(float(d))])


def cmd_gradcheck(args):
    report = run_suite(args.instances, args.seed, args.lambda_d)
    _emit(report)
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vteacher", description="Pseudo-label selection and domain-alignment tools.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init-state", help="write an initial threshold state file")
    s.add_argument("--num-classes", type=int)
    s.add_argument("--iters", type=int, help="total iterations K of the beta schedule")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_state)

    s = sub.add_parser("select", help="run CAPS over a detection dump")
    s.add_argument("--dump", required=True)
    s.add_argument("--state", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--state-out", help="where to write the updated state (default: overwrite --state)")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("saliency", help="rasterize pseudo labels into a saliency tensor")
    s.add_argument("--labels", required=True)
    s.add_argument("--stride", type=int, required=True)
    s.add_argument("--grid", type=_grid, required=True, help="HxW")
    s.add_argument("--image-id")
    s.add_argument("--ground-truth", action="store_true", help="treat boxes as labels (saliency 1.0)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_saliency)

    s = sub.add_parser("reweight", help="apply saliency reweighting to a feature tensor")
    s.add_argument("--features", required=True)
    s.add_argument("--saliency", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reweight)

    s = sub.add_parser("ema", help="one EMA step of teacher weights toward a student snapshot")
    s.add_argument("--teacher", required=True)
    s.add_argument("--student", required=True)
    s.add_argument("--alpha", type=float)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ema)

    s = sub.add_parser("losses", help="print the adversarial loss breakdown as JSON")
    s.add_argument("--features", action="append", required=True, help="C x H x W tensor, once per scale")
    s.add_argument("--saliency", action="append", help="H x W tensor, once per scale")
    s.add_argument("--disc", action="append", required=True, help="2 x (C+1) tensor [image head; instance head], once per scale")
    s.add_argument("--domain", choices=["source", "target"], required=True)
    s.add_argument("--lambda-d", type=float)
    s.add_argument("--l-sup", type=float, default=0.0)
    s.add_argument("--l-unsup", type=float, default=0.0)
    s.add_argument("--config")
    s.set_defaults(func=cmd_losses)

    s = sub.add_parser("simulate", help="CAPS vs static thresholds on a synthetic stream")
    s.add_argument("--scenario", required=True)
    s.add_argument("--iters", type=int, help="number of images (overrides the scenario)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--csv", help="trajectory CSV path (default: --out with .csv suffix)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lambda-d", type=float, default=0.1)
    s.set_defaults(func=cmd_gradcheck)
    return p


def _fail(code, kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail(EXIT_USAGE, "UsageError", str(e))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (VTError, ValueError, OSError) as e:
        return _fail(EXIT_INVALID, type(e).__name__, str(e))


if __name__ == "__main__":
    sys.exit(main())
