"""Command-line interface.

Subcommands: ``gen-data``, ``train``, ``eval``, ``infer``, ``bench``.
Every RunConfig field is exposed as a ``--field-name`` flag; a flat
``key = value`` config file (``--config``) provides the base values and
flags override it. Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from PIL import UnidentifiedImageError

from . import harness
from .data import (CheckpointError, RasterFormatError, SceneParams,
                   generate_split, load_image, load_split,
                   save_class_raster, save_disparity_raster, write_sample)
from .diffops import ShapeError
from .harness import NumericFailure, RunConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _add_config_flags(parser) -> None:
    parser.add_argument("--profile", choices=["desk", "paper"],
                        default="desk", help="base configuration profile")
    parser.add_argument("--config", help="flat key=value config file")
    for field in dataclasses.fields(RunConfig):
        flag = "--" + field.name.replace("_", "-")
        parser.add_argument(flag, dest=f"cfg_{field.name}", metavar="V",
                            help=f"override {field.name} "
                                 f"(default per profile)")


def _build_config(args) -> RunConfig:
    if args.config:
        config = harness.config_from_file(args.config)
    elif args.profile == "desk":
        config = harness.desk_profile()
    else:
        config = harness.paper_profile()
    overrides = {}
    for field in dataclasses.fields(RunConfig):
        value = getattr(args, f"cfg_{field.name}")
        if value is not None:
            overrides[field.name] = value
    return harness.apply_overrides(config, overrides)


def _cmd_gen_data(args) -> int:
    config = _build_config(args)
    params = config.scene_params()
    out = Path(args.out)
    for split, count, seed0 in (("train", args.train, config.data_seed),
                                ("val", args.val, config.data_seed + 10_000)):
        if count <= 0:
            continue
        samples = generate_split(params, count, seed0)
        for i, sample in enumerate(samples):
            write_sample(out, split, i, sample)
        print(f"wrote {count} samples to {out / split}")
    return 0


def _cmd_train(args) -> int:
    config = _build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.config_to_file(config, out / "config.txt")
    result = harness.train(config, out_dir=out, log=print)
    last = result.curves[-1]
    print(f"finished {config.steps} steps; final loss {last['total']:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    config = _build_config(args)
    model, meta = harness.model_from_checkpoint(args.checkpoint)
    samples = load_split(args.data, args.split)
    report = harness.evaluate(model, meta, samples,
                              stage_stop=config.stage_stop,
                              refine=config.refine)
    for key, value in report.items():
        print(f"{key} = {'n/a' if value is None else value}")
    if args.out:
        harness.write_report(report, args.out, name="eval")
        print(f"report written to {args.out}")
    return 0


def _cmd_infer(args) -> int:
    config = _build_config(args)
    model, meta = harness.model_from_checkpoint(args.checkpoint)
    if args.cfg_c is not None and int(args.cfg_c) != meta.channel_factor:
        raise CheckpointError(
            f"checkpoint was trained with c={meta.channel_factor}, "
            f"--c {args.cfg_c} conflicts")
    if args.cfg_n_classes is not None \
            and int(args.cfg_n_classes) != meta.n_classes:
        raise CheckpointError(
            f"checkpoint was trained with {meta.n_classes} classes, "
            f"--n-classes {args.cfg_n_classes} conflicts")
    left = load_image(args.left)
    right = load_image(args.right)
    if left.shape != right.shape:
        raise RasterFormatError(f"left {left.shape[1:]} and right "
                                f"{right.shape[1:]} sizes differ")
    result = harness.infer(model, meta, left, right,
                           stage_stop=config.stage_stop,
                           refine=config.refine)
    if args.out_disp:
        save_disparity_raster(args.out_disp, result.disparity)
        print(f"disparity -> {args.out_disp}")
    if args.out_sem:
        save_class_raster(args.out_sem, result.classes)
        print(f"classes   -> {args.out_sem}")
    for label in sorted(result.timings):
        print(f"{label}: {result.timings[label] * 1e3:.2f} ms")
    return 0


def _cmd_bench(args) -> int:
    config = _build_config(args)
    if args.checkpoint:
        model, meta = harness.model_from_checkpoint(args.checkpoint)
    else:
        from .data import CheckpointMeta
        import numpy as np
        model = harness.SemStereoNet(config.c, config.n_classes, config.seed)
        meta = CheckpointMeta(config.c, config.n_classes, 0,
                              np.zeros(3, np.float32), np.ones(3, np.float32))
    report = harness.bench(model, meta, args.height, args.width, args.reps,
                           stage_stop=config.stage_stop, refine=config.refine)
    for key, value in report.items():
        print(f"{key} = {value}")
    if args.out:
        harness.write_report(report, args.out, name="bench")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="semstereo",
                     description="joint semantic segmentation and stereo "
                                 "disparity at desk scale")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--train", type=int, default=8)
    p.add_argument("--val", type=int, default=2)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--split", default="val")
    p.add_argument("--out", help="write report files here")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("infer", help="run anytime inference on one pair")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--out-disp", help="16-bit disparity raster path")
    p.add_argument("--out-sem", help="8-bit class raster path")
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("bench", help="latency / FLOP / parameter report")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--out", help="write report files here")
    p.set_defaults(fn=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (CheckpointError, RasterFormatError, UnidentifiedImageError,
            FileNotFoundError, NotADirectoryError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
