"""Command-line entry point: phantom generation, gradient maps, training,
registration, and evaluation.

Exit codes: 0 success, 1 usage error, 2 runtime error. All file writes go
through temp-file + rename.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .gradmap import gradient_map
from .losses import LossReport
from .metrics import EvalReport, asd, dice, field_rmse, write_eval_csv
from .phantom import (
    FIXED_FILE,
    FIXED_MASK_FILE,
    GT_FIELD_FILE,
    MOVING_FILE,
    MOVING_MASK_FILE,
    PhantomConfig,
    generate_phantom_pair,
    save_case,
)
from .train import (
    load_checkpoint,
    parse_train_config,
    register_pair,
    save_checkpoint,
    train_dual_branch,
    write_loss_history_csv,
)
from .volume import (
    VolumeIOError,
    atomic_write_text,
    load_mask,
    load_volume,
    normalize_intensity,
    save_volume,
)
from .warp import load_field, save_field, warp_nearest


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="gradreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("phantom", help="generate synthetic multimodal cases")
    p.add_argument("--config", help="flat key=value phantom config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1, help="number of cases (seeds seed..seed+N-1)")

    p = sub.add_parser("gradmap", help="write the gradient intensity map of a volume")
    p.add_argument("--in", dest="input", required=True, help="input volume (.vol or .nii)")
    p.add_argument("--out", required=True, help="output .vol path")

    p = sub.add_parser("train", help="train the dual-branch registration model")
    p.add_argument("--config", help="flat key=value training config file")
    p.add_argument("--data", required=True, help="directory of case_* subdirectories")
    p.add_argument("--out", required=True, help="output directory (checkpoints + loss.csv)")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable; wins over the file)",
    )

    p = sub.add_parser("register", help="register one moving/fixed pair with a trained model")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="score predicted fields against phantom ground truth")
    p.add_argument("--pred", required=True, help="register output dir (or parent of case_* dirs)")
    p.add_argument("--truth", required=True, help="phantom case dir (or parent of case_* dirs)")
    p.add_argument("--out", required=True, help="output CSV path")

    return parser


def _parse_phantom_config(path: str | None) -> PhantomConfig:
    if path is None:
        return PhantomConfig()
    kv = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    known = {"dims", "n_blobs", "deform_amplitude", "deform_smoothness", "noise_sigma", "seed"}
    unknown = set(kv) - known
    if unknown:
        raise ValueError(f"unknown phantom config keys: {sorted(unknown)}")
    base = PhantomConfig()
    return PhantomConfig(
        dims=tuple(int(x) for x in kv["dims"].split(",")) if "dims" in kv else base.dims,
        n_blobs=int(kv.get("n_blobs", base.n_blobs)),
        deform_amplitude=float(kv.get("deform_amplitude", base.deform_amplitude)),
        deform_smoothness=float(kv.get("deform_smoothness", base.deform_smoothness)),
        noise_sigma=float(kv.get("noise_sigma", base.noise_sigma)),
        seed=int(kv.get("seed", base.seed)),
    )


def _cmd_phantom(args) -> int:
    base = _parse_phantom_config(args.config)
    out = Path(args.out)
    for i in range(args.count):
        cfg = PhantomConfig(
            dims=base.dims,
            n_blobs=base.n_blobs,
            deform_amplitude=base.deform_amplitude,
            deform_smoothness=base.deform_smoothness,
            noise_sigma=base.noise_sigma,
            seed=base.seed + i,
        )
        case = generate_phantom_pair(cfg)
        save_case(case, cfg, out / f"case_{i:03d}")
    print(f"wrote {args.count} case(s) under {out}")
    return 0


def _cmd_gradmap(args) -> int:
    v = load_volume(args.input)
    save_volume(gradient_map(normalize_intensity(v)), args.out)
    return 0


def _scan_pairs(data_dir: Path):
    cases = sorted(p for p in data_dir.iterdir() if p.is_dir() and (p / MOVING_FILE).exists())
    if not cases:
        raise FileNotFoundError(f"no case directories with {MOVING_FILE} under {data_dir}")
    return [(load_volume(c / MOVING_FILE), load_volume(c / FIXED_FILE)) for c in cases]


def _cmd_train(args) -> int:
    text = Path(args.config).read_text() if args.config else ""
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise _UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    config = parse_train_config(text, overrides)
    pairs = _scan_pairs(Path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = train_dual_branch(pairs, config, out_dir=out)
    save_checkpoint(model, out / "model.ckpt")
    write_loss_history_csv(model.history, out / "loss.csv")
    print(f"trained {config.iterations} iteration(s) on {len(pairs)} pair(s); model at {out/'model.ckpt'}")
    return 0


def _loss_row_csv(report: LossReport) -> str:
    return (
        "isim,gsim,igreg,greg,total\n"
        f"{report.isim!r},{report.gsim!r},{report.igreg!r},{report.greg!r},{report.total!r}\n"
    )


def _cmd_register(args) -> int:
    model = load_checkpoint(args.model)
    moving = load_volume(args.moving)
    fixed = load_volume(args.fixed)
    field, warped, report = register_pair(model, moving, fixed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_field(field, out / "field.vol")
    save_volume(warped, out / "warped.vol")
    atomic_write_text(out / "loss.csv", _loss_row_csv(report))
    print(f"registered: total loss {report.total:.6f}; outputs under {out}")
    return 0


def _eval_case_dirs(pred: Path, truth: Path) -> list[tuple[str, Path, Path]]:
    if (truth / MOVING_MASK_FILE).exists():
        return [(truth.name, pred, truth)]
    cases = []
    for t in sorted(truth.iterdir()):
        if t.is_dir() and (t / MOVING_MASK_FILE).exists():
            p = pred / t.name
            if not (p / "field.vol").exists():
                raise FileNotFoundError(f"no predicted field for case {t.name} under {pred}")
            cases.append((t.name, p, t))
    if not cases:
        raise FileNotFoundError(f"no evaluable cases under {truth}")
    return cases


def _cmd_eval(args) -> int:
    reports: list[EvalReport] = []
    for name, pred_dir, truth_dir in _eval_case_dirs(Path(args.pred), Path(args.truth)):
        pred_field = load_field(pred_dir / "field.vol")
        moving_mask = load_mask(truth_dir / MOVING_MASK_FILE)
        fixed_mask = load_mask(truth_dir / FIXED_MASK_FILE)
        fixed_vol = load_volume(truth_dir / FIXED_FILE)
        gt_path = truth_dir / GT_FIELD_FILE
        gt = load_field(gt_path) if gt_path.exists() else None
        warped_mask = warp_nearest(moving_mask, pred_field)
        rmse = field_rmse(pred_field, gt) if gt is not None else None
        labels = sorted(set(fixed_mask.label_set()) | set(moving_mask.label_set()))
        for label in labels:
            try:
                asd_before = asd(moving_mask, fixed_mask, label, fixed_vol.spacing)
            except ValueError:
                asd_before = float("nan")
            try:
                asd_after = asd(warped_mask, fixed_mask, label, fixed_vol.spacing)
            except ValueError:
                asd_after = float("nan")
            reports.append(
                EvalReport(
                    case=name,
                    label=label,
                    dice_before=dice(moving_mask, fixed_mask, label),
                    dice_after=dice(warped_mask, fixed_mask, label),
                    asd_before=asd_before,
                    asd_after=asd_after,
                    field_rmse=rmse,
                )
            )
    write_eval_csv(reports, args.out)
    print(f"wrote {len(reports)} row(s) to {args.out}")
    return 0


_COMMANDS = {
    "phantom": _cmd_phantom,
    "gradmap": _cmd_gradmap,
    "train": _cmd_train,
    "register": _cmd_register,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, VolumeIOError, ValueError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
