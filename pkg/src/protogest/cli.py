"""Command-line entry point: `protogest <command> [flags]`.

Commands: gen, train, eval, ensemble, gradcheck, report.

Every flag takes an explicit value (including booleans: on/off), so a
plain-text config file of `key value` lines can stand in for flags via
`--config FILE`; explicitly passed flags always win over config values.
Run directories contain a reusable config snapshot (run_manifest.txt /
gen_manifest.txt) so any run can be reproduced verbatim.

Exit codes: 0 ok, 2 validation or usage error, 3 numerical failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import datetime
import sys
from dataclasses import fields
from pathlib import Path

from . import gradcheck, synthgen, tensorio, trainer
from .errors import CodecError, ContractError, NumericalError, ValidationError
from .synthgen import GenConfig
from .trainer import TrainConfig

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


# ---------------------------------------------------------------------------
# flag value parsers


def _csv_ints(s: str) -> tuple[int, ...]:
    if not s.strip():
        return ()
    try:
        return tuple(int(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {s!r}")


def _csv_floats(s: str) -> tuple[float, ...]:
    if not s.strip():
        return ()
    try:
        return tuple(float(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {s!r}")


def _pairs(s: str) -> tuple[tuple[int, int, float], ...]:
    """Ambiguous pairs: `a:b:offset[,a:b:offset...]` or empty."""
    if not s.strip():
        return ()
    out = []
    for item in s.split(","):
        bits = item.split(":")
        if len(bits) != 3:
            raise argparse.ArgumentTypeError(f"bad pair {item!r}, expected a:b:offset")
        try:
            out.append((int(bits[0]), int(bits[1]), float(bits[2])))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad pair {item!r}")
    return tuple(out)


def _on_off(s: str) -> bool:
    low = s.strip().lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {s!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(":".join(str(x) for x in p) for p in value)
        return ",".join(str(v) for v in value)
    return str(value)


# ---------------------------------------------------------------------------
# shared flag groups


_GEN_TYPES = {
    "seed": int, "num_classes": int,
    "clips_per_class_train": int, "clips_per_class_val": int,
    "clips_per_class_test": int,
    "t_rgb": int, "t_pose": int, "height": int, "width": int, "n_joints": int,
    "ambiguous_pairs": _pairs, "intra_noise": float,
}

_TRAIN_TYPES = {
    "epochs": int, "batch_size": int, "lr": float, "momentum": float,
    "weight_decay": float, "lr_drop_epochs": _csv_ints, "lr_drop_factor": float,
    "alpha": float, "tau": float, "rho": float, "seed": int,
    "stage_channels": _csv_ints, "embed_dim": int, "hidden_dim": int,
    "lateral_channels": int, "prm_in_pretrain": _on_off, "fusion": _on_off,
}

_TRAIN_CHOICES = {
    "stage": ("rgb", "pose", "joint", "rgb_only", "pose_only"),
    "prm_branch": ("rgb", "pose", "both", "none"),
    "attention_source": ("cross", "self"),
    "gate_activation": ("sigmoid", "identity"),
}


def _add_dataclass_flags(parser, config_cls, types, choices=None) -> None:
    defaults = config_cls()
    choices = choices or {}
    for f in fields(config_cls):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        if f.name in types:
            parser.add_argument(flag, type=types[f.name], default=default,
                                help=f"(default: {_fmt(default)})")
        elif f.name in choices:
            parser.add_argument(flag, choices=choices[f.name], default=default,
                                help=f"(default: {default})")
        else:
            parser.add_argument(flag, default=default,
                                help=f"(default: {default})")


def _gen_cfg(args) -> GenConfig:
    return GenConfig(**{f.name: getattr(args, f.name) for f in fields(GenConfig)})


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(**{f.name: getattr(args, f.name) for f in fields(TrainConfig)})


def _manifest_path(data) -> Path:
    p = Path(data)
    return p / "manifest.txt" if p.is_dir() else p


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = _gen_cfg(args)
    out = Path(args.out)
    manifest = synthgen.generate(cfg, out)
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
    lines = [
        "# protogest gen manifest",
        f"# created_utc: {stamp}",
        f"out {out}",
    ] + [f"{f.name} {_fmt(getattr(cfg, f.name))}" for f in fields(GenConfig)]
    (out / "gen_manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    counts = {s: len(manifest.split_entries(s)) for s in tensorio.SPLITS}
    print(f"wrote {out}: {manifest.num_classes} classes, "
          + ", ".join(f"{n} {s}" for s, n in counts.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_cfg(args)
    record = trainer.train(
        _manifest_path(args.data), cfg, args.out,
        init_rgb=args.init_rgb, init_pose=args.init_pose,
        init_checkpoint=args.init_checkpoint,
    )
    last = record.rows[-1]
    print(f"trained {cfg.stage} stage for {cfg.epochs} epochs in {args.out}")
    print(f"final: loss {last.loss_total:.4f} "
          f"(ce {last.loss_ce:.4f}, pr {last.loss_pr:.4f}), "
          f"train top-1 {last.train_top1_fused:.4f}, val top-1 {last.val_top1_fused:.4f}")
    print(f"best epoch {record.best_epoch} -> {record.best_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    pred_out = args.pred_out or ckpt.parent / f"{ckpt.name}_{args.split}.pred"
    metrics = trainer.evaluate(
        _manifest_path(args.data), ckpt, args.split, pred_out=pred_out,
    )
    print(f"{args.split}: n={metrics.n} fused top-1 {metrics.top1_fused:.4f} "
          f"(rgb {metrics.top1_rgb:.4f}, pose {metrics.top1_pose:.4f})")
    print("confusion (rows true, cols predicted):")
    for row in metrics.confusion:
        print("  " + " ".join(f"{int(v):4d}" for v in row))
    print(f"predictions -> {pred_out}")
    return EXIT_OK


def cmd_ensemble(args) -> int:
    preds = [tensorio.load_predictions(p) for p in args.pred_files]
    weights = list(args.weights) if args.weights else [1.0] * len(preds)
    merged = trainer.ensemble(preds, weights)
    tensorio.save_predictions(merged, args.out)
    print(f"ensembled {len(preds)} files -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.seed)
    for r in results:
        print(r.line())
    if all(r.passed for r in results):
        print("gradcheck: all suites passed")
        return EXIT_OK
    print("gradcheck: FAILURES above")
    return EXIT_NUMERICAL


def cmd_report(args) -> int:
    from . import report  # defers the matplotlib import to the one command using it

    if args.mechanism_delta:
        if not args.data or not args.out:
            raise ValidationError("--mechanism-delta needs --data and --out")
        seeds = args.seeds or (0, 1, 2)
        cfg = _train_cfg(args)
        delta = trainer.mechanism_delta(_manifest_path(args.data), cfg, seeds,
                                        Path(args.out) / "runs")
        out_md = report.mechanism_report(delta, Path(args.out) / "mechanism_delta.md")
        print(delta.markdown())
        print(f"table -> {out_md}")
        return EXIT_OK
    if not args.run:
        raise ValidationError("report needs --run DIR (or --mechanism-delta on)")
    written = report.run_report(args.run, data=args.data, out_dir=args.out)
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protogest",
        description="Two-stream micro-gesture classification workbench.",
        epilog="exit codes: 0 ok, 2 validation error, 3 numerical failure, 4 i/o error",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="key-value config file (flags win)")
    _add_dataclass_flags(p, GenConfig, _GEN_TYPES)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--data", required=True, help="dataset dir or manifest path")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--config", help="key-value config file (flags win)")
    p.add_argument("--init-rgb", default=None, help="rgb branch checkpoint (joint init)")
    p.add_argument("--init-pose", default=None, help="pose branch checkpoint (joint init)")
    p.add_argument("--init-checkpoint", default=None,
                   help="same-architecture checkpoint to start from")
    _add_dataclass_flags(p, TrainConfig, _TRAIN_TYPES, _TRAIN_CHOICES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=tensorio.SPLITS, default="test")
    p.add_argument("--pred-out", default=None, help="write fused predictions here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="weighted average of prediction files")
    p.add_argument("pred_files", nargs="+", help="input prediction files")
    p.add_argument("--out", required=True)
    p.add_argument("--weights", type=_csv_floats, default=None,
                   help="comma-separated weights (default: equal)")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=11)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="plots and summaries")
    p.add_argument("--run", default=None, help="run directory to summarize")
    p.add_argument("--data", default=None, help="dataset (defaults to the run's)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--config", help="key-value config file (flags win)")
    p.add_argument("--mechanism-delta", type=_on_off, default=False,
                   help="train and compare ce / ce+prm / ce+prm+fusion (on/off)")
    p.add_argument("--seeds", type=_csv_ints, default=(0, 1, 2),
                   help="seeds for --mechanism-delta")
    _add_dataclass_flags(p, TrainConfig, _TRAIN_TYPES, _TRAIN_CHOICES)
    p.set_defaults(func=cmd_report)

    return parser


def _expand_config(argv: list[str]) -> list[str]:
    """Inline `--config FILE` as flags right after the subcommand.

    Explicit flags stay after the config-derived ones, so argparse's
    last-wins rule makes them override the file.
    """
    rest: list[str] = []
    config_files: list[str] = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok == "--config":
            if i + 1 >= len(argv):
                raise ValidationError("--config needs a file argument")
            config_files.append(argv[i + 1])
            i += 2
        elif tok.startswith("--config="):
            config_files.append(tok.split("=", 1)[1])
            i += 1
        else:
            rest.append(tok)
            i += 1
    if not config_files:
        return rest
    flags: list[str] = []
    for cpath in config_files:
        for key, value in tensorio.read_kv_lines(cpath).items():
            flags += ["--" + key.replace("_", "-"), value]
    for j, tok in enumerate(rest):
        if not tok.startswith("-"):
            return rest[: j + 1] + flags + rest[j + 1:]
    raise ValidationError("--config requires a subcommand")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(_expand_config(argv))
        return args.func(args)
    except (ValidationError, CodecError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
