"""Command-line driver: train, eval, predict, inspect, gen-data.

Exit codes are stable: 0 success, 2 configuration error, 3 data error,
4 training divergence, 5 checkpoint mismatch. Results go to stdout,
diagnostics to stderr. Every run that writes artifacts also writes a
resolved-config snapshot so it can be reproduced from its output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import cascade, checkpoint, configio, datasynth, evaluation, training
from .checkpoint import CheckpointMismatch
from .model import CascadeModel
from .training import DivergenceError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_CHECKPOINT = 5


class CliError(Exception):
    def __init__(self, exit_code: int, message: str):
        super().__init__(message)
        self.exit_code = exit_code


def _parse_scales(text: str):
    try:
        scales = tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise CliError(EXIT_CONFIG, f"bad --scales value {text!r}")
    if not scales or any(s <= 0 for s in scales):
        raise CliError(EXIT_CONFIG, f"bad --scales value {text!r}")
    return scales


def resolve_spec(args) -> cascade.CascadeSpec:
    """--spec file, --pattern task[:id], or --task preset; exactly one source."""
    if args.spec and args.pattern:
        raise CliError(EXIT_CONFIG, "--spec and --pattern are mutually exclusive")
    try:
        if args.spec:
            if not os.path.exists(args.spec):
                raise CliError(EXIT_CONFIG, f"spec file not found: {args.spec}")
            return configio.load_spec(args.spec)
        if args.pattern:
            name, _, pid = args.pattern.partition(":")
            if args.task and args.task != name:
                raise CliError(EXIT_CONFIG,
                               f"--task {args.task} conflicts with --pattern {name}")
            if pid:
                if not pid.isdigit():
                    raise CliError(EXIT_CONFIG, f"bad pattern id {pid!r}")
                return cascade.ablation_pattern(name, int(pid),
                                                width_scale=args.width_scale)
            return cascade.preset_pattern(name, width_scale=args.width_scale)
        if args.task:
            return cascade.preset_pattern(args.task, width_scale=args.width_scale)
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    raise CliError(EXIT_CONFIG, "one of --task, --pattern, or --spec is required")


def _validated(spec) -> cascade.CascadeSpec:
    violations = cascade.validate(spec)
    if violations:
        raise CliError(EXIT_CONFIG, "invalid cascade spec:\n  "
                       + "\n  ".join(violations))
    return spec


def _load_pairs(args, task):
    if not args.data:
        raise CliError(EXIT_CONFIG, "--data is required")
    try:
        pairs = datasynth.load_dataset(args.data, task, split=args.split)
    except FileNotFoundError as exc:
        raise CliError(EXIT_DATA, str(exc))
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    if not pairs:
        raise CliError(EXIT_DATA, f"dataset at {args.data} is empty")
    return pairs


def _require_out(args) -> str:
    if not args.out:
        raise CliError(EXIT_CONFIG, "--out is required")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _write_snapshot(out, command, args, extra_sections=None):
    run = {"command": command}
    for key in ("task", "pattern", "spec", "data", "out", "seed",
                "width_scale", "scale", "thresholds", "split"):
        value = getattr(args, key, None)
        if value is not None:
            run[key] = str(value)
    if getattr(args, "ms", False):
        run["scales"] = ",".join(str(s) for s in _parse_scales(args.scales))
    sections = {"run": run}
    sections.update(extra_sections or {})
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(configio.format_text(sections))


def _model_from_checkpoint(args, spec) -> CascadeModel:
    if not args.checkpoint:
        raise CliError(EXIT_CONFIG, "--checkpoint is required")
    model = CascadeModel(spec, seed=args.seed)
    try:
        state = checkpoint.load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise CliError(EXIT_DATA, str(exc))
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc))
    try:
        checkpoint.load_into_model(model, state)
    except CheckpointMismatch as exc:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint does not match spec: {exc}")
    return model


# Commands ---------------------------------------------------------------------


def cmd_train(args) -> int:
    spec = _validated(resolve_spec(args))
    out = _require_out(args)
    try:
        config = training.preset_config(spec.task, seed=args.seed)
        config = training.scale_config(config, args.scale)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    pairs = _load_pairs(args, spec.task)
    if config.batch > len(pairs):
        print(f"note: batch {config.batch} clamped to dataset size {len(pairs)}",
              file=sys.stderr)
        config = dataclasses.replace(config, batch=len(pairs))

    try:
        report = training.train(spec, pairs, config)
    except DivergenceError as exc:
        raise CliError(EXIT_DIVERGED, str(exc))

    ckpt_path = os.path.join(out, "checkpoint.ckpt")
    checkpoint.save_checkpoint(report.model.params, ckpt_path)
    with open(os.path.join(out, "loss.csv"), "w") as fh:
        fh.write(report.to_csv())
    configio.save_spec(spec, os.path.join(out, "spec.ini"))
    resolved = {k: str(v) for k, v in dataclasses.asdict(config).items()}
    _write_snapshot(out, "train", args, {"training": resolved})
    print(f"trained {config.max_iter} iterations on {len(pairs)} samples")
    print(f"initial_loss {report.initial_loss:.6g}")
    print(f"final_loss {report.final_loss:.6g}")
    print(f"checkpoint {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    spec = _validated(resolve_spec(args))
    out = _require_out(args)
    model = _model_from_checkpoint(args, spec)
    pairs = _load_pairs(args, spec.task)
    scales = _parse_scales(args.scales) if args.ms else (1.0,)
    preds, gts = [], []
    for image, gt in pairs:
        prob = evaluation.multiscale_predict(model, image, scales)
        preds.append(prob[0, 0])
        gts.append(gt[0])

    if spec.task == "saliency":
        n = args.thresholds or 255
        beta2 = evaluation.SALIENCY_BETA2
        report = evaluation.evaluate_saliency(preds, gts, n_thresholds=n)
        print(f"MaxF {report.max_f:.6f}")
        print(f"MAE {report.mae:.6f}")
    else:
        n = args.thresholds or 99
        beta2 = evaluation.BOUNDARY_BETA2
        report = evaluation.evaluate_boundaries(
            preds, gts, n_thresholds=n, tol=evaluation.MatchTolerance())
        print(f"ODS {report.ods:.6f}")
        print(f"OIS {report.ois:.6f}")

    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(evaluation.export_report(report))
    with open(os.path.join(out, "pr.csv"), "w") as fh:
        fh.write(evaluation.export_pr_csv(report.curve, beta2))
    _write_snapshot(out, "eval", args)
    return 0


def _input_images(data):
    if os.path.isdir(data):
        names = sorted(os.listdir(data))
        paths = [os.path.join(data, n) for n in names
                 if os.path.isfile(os.path.join(data, n))]
        if not paths:
            raise CliError(EXIT_DATA, f"no files in {data}")
        return paths
    if not os.path.exists(data):
        raise CliError(EXIT_DATA, f"input not found: {data}")
    return [data]


def cmd_predict(args) -> int:
    spec = _validated(resolve_spec(args))
    out = _require_out(args)
    model = _model_from_checkpoint(args, spec)
    scales = _parse_scales(args.scales) if args.ms else (1.0,)
    written = 0
    paths = _input_images(args.data) if args.data else None
    if paths is None:
        raise CliError(EXIT_CONFIG, "--data is required (image file or directory)")
    for path in paths:
        try:
            image = datasynth.load_image(path)
        except ValueError as exc:
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
            continue
        if image.ndim == 2:
            image = np.repeat(image[None], 3, axis=0)
        prob = evaluation.multiscale_predict(model, image, scales)[0, 0]
        stem = os.path.splitext(os.path.basename(path))[0]
        target = os.path.join(out, f"{stem}.png")
        datasynth.save_image(target, prob)
        print(target)
        if args.nms:
            thinned = evaluation.nms_thin(prob)
            nms_target = os.path.join(out, f"{stem}_nms.png")
            datasynth.save_image(nms_target, thinned)
            print(nms_target)
        written += 1
    if written == 0:
        raise CliError(EXIT_DATA, "no readable input images")
    _write_snapshot(out, "predict", args)
    return 0


def cmd_inspect(args) -> int:
    spec = resolve_spec(args)
    violations = cascade.validate(spec)
    if violations:
        print("invalid")
        for v in violations:
            print(f"violation: {v}")
        return EXIT_CONFIG
    print("valid")
    groups = [len(spec.side_paths)] + [len(e.nodes) for e in spec.encoders]
    print(f"node count {'+'.join(str(g) for g in groups)}")
    print(f"edge count {cascade.count_edges(spec)}")
    print(f"signal flows {len(cascade.enumerate_signal_flows(spec))}")
    model = CascadeModel(spec, seed=args.seed)
    print(f"parameter count {model.param_count()}")
    if args.dot:
        with open(args.dot, "w") as fh:
            fh.write(cascade.to_dot(spec))
        print(f"dot {args.dot}")
    return 0


def cmd_gen_data(args) -> int:
    out = _require_out(args)
    try:
        samples = datasynth.generate(args.seed, size=args.size,
                                     count=args.count)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    except RuntimeError as exc:
        raise CliError(EXIT_DATA, str(exc))
    ids = datasynth.write_dataset(samples, out, val_fraction=args.val_fraction)
    _write_snapshot(out, "gen-data", args,
                    {"gen_data": {"size": str(args.size),
                                  "count": str(args.count),
                                  "val_fraction": str(args.val_fraction)}})
    print(f"wrote {len(ids)} samples to {out}")
    return 0


# Parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pixelcascade",
        description="Cascaded-encoder models for saliency, edge, and "
                    "skeleton prediction.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--task", choices=("saliency", "edge", "skeleton"))
    common.add_argument("--pattern", help="preset name or name:id ablation")
    common.add_argument("--spec", help="cascade spec file")
    common.add_argument("--data", help="dataset directory or input images")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--width-scale", type=float, default=0.125,
                        dest="width_scale")
    common.add_argument("--scale", type=float, default=1.0,
                        help="shrink iteration budget and lr schedule")
    common.add_argument("--thresholds", type=int)
    common.add_argument("--ms", action="store_true",
                        help="multi-scale inference")
    common.add_argument("--scales", default="0.5,1.0,1.5,2.0")
    common.add_argument("--split", choices=("train", "val"))
    common.add_argument("--checkpoint", help="checkpoint file")

    p_train = sub.add_parser("train", parents=[common])
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", parents=[common])
    p_eval.set_defaults(func=cmd_eval)

    p_predict = sub.add_parser("predict", parents=[common])
    p_predict.add_argument("--nms", action="store_true",
                           help="also write a thinned map")
    p_predict.set_defaults(func=cmd_predict)

    p_inspect = sub.add_parser("inspect", parents=[common])
    p_inspect.add_argument("--dot", help="write DOT graph export here")
    p_inspect.set_defaults(func=cmd_inspect)

    p_gen = sub.add_parser("gen-data", parents=[common])
    p_gen.add_argument("--size", type=int, default=64)
    p_gen.add_argument("--count", type=int, default=16)
    p_gen.add_argument("--val-fraction", type=float, default=0.0,
                       dest="val_fraction")
    p_gen.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
