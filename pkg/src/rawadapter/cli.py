"""``rawadapter`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .degrade import DegradeConfig, degrade_dataset
from .harness import commands as C
from .harness import gradchecks
from .harness import trainer as T
from .harness.checkpoint import CheckpointError, CheckpointNotFoundError, load_checkpoint
from .harness.config import MODES, RunConfig, config_fields, load_config
from .rawio import RawFormatError

EXIT_FAILED_CHECK = 1
EXIT_RAW_FORMAT = 3
EXIT_NO_CHECKPOINT = 4
EXIT_NON_FINITE = 5


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file of run settings; flags override its keys")
    group = p.add_argument_group("run settings")
    for name, kind, default in config_fields():
        flags = [f"--{name}"] + ([f"--{name.replace('_', '-')}"] if "_" in name else [])
        group.add_argument(*flags, dest=f"cfg_{name}", default=None, metavar=kind.upper(),
                           help=f"(default {default!r})")


def _run_config(args) -> RunConfig:
    values = load_config(args.config).to_dict() if args.config else {}
    for name, _, _ in config_fields():
        v = getattr(args, f"cfg_{name}")
        if v is not None:
            values[name] = v
    return RunConfig.from_dict(values)


def _printer(rec) -> None:
    print(json.dumps(rec, sort_keys=True), flush=True)


def cmd_demosaic(args) -> int:
    C.cmd_demosaic(args.raw, args.output, args.gamma)
    print(args.output)
    return 0


def cmd_degrade(args) -> int:
    l_range = (args.l_min, args.l_max) if args.l_min is not None and args.l_max is not None else None
    cfg = DegradeConfig(args.mode, l_range, args.delta_r, args.delta_s, args.seed, args.mean_shift_noise)
    records = degrade_dataset(args.input_dir, cfg, args.output_dir)
    failed = sum(r["status"] != "ok" for r in records)
    print(f"degraded {len(records) - failed} files ({failed} failed) into {args.output_dir}")
    return 0


def cmd_isp(args) -> int:
    toggles = {"use_pk": not args.no_pk, "use_pm": not args.no_pm, "use_lut": not args.no_lut}
    out = C.cmd_isp(args.raw, args.output, args.checkpoint, args.mode, toggles)
    print(json.dumps(out, indent=1))
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    resume = load_checkpoint(args.resume) if args.resume else None
    log_path = Path(args.log) if args.log else None
    ckpt = T.train(cfg, out=args.out, log_path=log_path, resume=resume)
    if log_path is None:
        for rec in ckpt.history:
            _printer(rec)
    print(f"saved {args.out}", file=sys.stderr)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _run_config(args)
    ckpt = T.pretrain_backbone(cfg, out=args.out, log_path=args.log)
    if not args.log:
        for rec in ckpt.history:
            _printer(rec)
    return 0


def cmd_eval(args) -> int:
    print(json.dumps(C.cmd_eval(args.checkpoint), indent=1))
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    table = C.cmd_ablate(cfg, seeds=args.seeds, modes=args.modes, pretrain=not args.no_pretrain,
                         cache_dir=args.cache_dir, log=_printer if args.verbose else None)
    print(table.format())
    if args.out:
        Path(args.out).write_text(json.dumps(table.to_dict(), indent=1))
    return 0


def cmd_param_report(args) -> int:
    counts = C.cmd_param_report(args.lut_dim)
    print(json.dumps(counts, indent=1) if args.json else C.format_param_report(counts))
    return 0


def cmd_render_stages(args) -> int:
    out = C.cmd_render_stages(args.raw, args.checkpoint, args.out_dir, args.mode)
    for name, path in out["paths"].items():
        print(f"{name}: {path}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradchecks.run_all(args.instances, args.seed, args.only)
    print(gradchecks.format_report(results))
    return 0 if all(r.passed for r in results) else EXIT_FAILED_CHECK


def cmd_make_dataset(args) -> int:
    from .tasks.scenes import generate_dataset, save_dataset

    save_dataset(generate_dataset(args.n, args.seed), args.out_dir)
    print(args.out_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rawadapter", description="RAW input and model adapters toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("demosaic", help="bilinear demosaic of one RAW file to PNG")
    p.add_argument("raw")
    p.add_argument("output")
    p.add_argument("--gamma", type=float, default=1 / 2.2)
    p.set_defaults(func=cmd_demosaic)

    p = subs.add_parser("degrade", help="synthesize low-light or over-exposed RAW files")
    p.add_argument("input_dir")
    p.add_argument("output_dir")
    p.add_argument("--mode", choices=MODES, default="dark")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta-r", type=float, default=0.01)
    p.add_argument("--delta-s", type=float, default=0.02)
    p.add_argument("--l-min", type=float)
    p.add_argument("--l-max", type=float)
    p.add_argument("--mean-shift-noise", action="store_true", help="noise term has mean l*x")
    p.set_defaults(func=cmd_degrade)

    p = subs.add_parser("isp", help="run the input adapters on one RAW file")
    p.add_argument("raw")
    p.add_argument("output")
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=MODES, default="normal")
    p.add_argument("--no-pk", action="store_true")
    p.add_argument("--no-pm", action="store_true")
    p.add_argument("--no-lut", action="store_true")
    p.set_defaults(func=cmd_isp)

    p = subs.add_parser("train", help="train adapters and backbone on degraded RAW scenes")
    _add_config_flags(p)
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--log", help="metrics JSON-lines file (default: stdout)")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("pretrain", help="pretrain backbone and head on clean sRGB scenes")
    _add_config_flags(p)
    p.add_argument("--out", default="pretrained.ckpt")
    p.add_argument("--log")
    p.set_defaults(func=cmd_pretrain)

    p = subs.add_parser("eval", help="val loss and mIoU of a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("ablate", help="cumulative toggle ablation table")
    _add_config_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    p.add_argument("--no-pretrain", action="store_true", help="train every row from scratch")
    p.add_argument("--cache-dir", help="directory for pretrained backbone checkpoints")
    p.add_argument("--out", help="write the table as JSON")
    p.set_defaults(func=cmd_ablate)

    p = subs.add_parser("param-report", help="parameter counts per block")
    p.add_argument("--lut-dim", type=int, default=32)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_param_report)

    p = subs.add_parser("render-stages", help="PNG of each stage I1..I5 plus a montage")
    p.add_argument("raw")
    p.add_argument("checkpoint")
    p.add_argument("out_dir")
    p.add_argument("--mode", choices=MODES)
    p.set_defaults(func=cmd_render_stages)

    p = subs.add_parser("gradcheck", help="finite-difference checks of every registered gradient")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", nargs="+", choices=sorted(gradchecks.REGISTRY))
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("make-dataset", help="write a synthetic scene dataset")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_dataset)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CheckpointNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CHECKPOINT
    except (RawFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RAW_FORMAT
    except T.NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NON_FINITE


if __name__ == "__main__":
    sys.exit(main())
