"""Command-line entry point: ``gpmotion <command> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import checks
from .metrics import evaluate_tracking
from .phantom import generate_dataset, list_sequences, load_sequence
from .tensor_engine import read_ndt, write_ndt
from .trainer import TrainConfig, load_checkpoint, load_config, track_sequence, train

log = logging.getLogger("gpmotion")

FIELD_FILES = {"lagrangian": "lagrangian.ndt", "steps": "steps.ndt"}


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(TrainConfig):
        if f.name == "seed":
            continue
        kind = {bool: _bool, int: int, float: float}.get(type(f.default), str)
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None)


def _write_fields(out: Path, result, steps: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for key, name in FIELD_FILES.items():
        write_ndt(out / name, getattr(result, key))
        (out / name).with_suffix(".json").write_text(json.dumps({"kind": "displacement", "N": steps}))


def _pairs(pred: Path, gt: Path):
    """Match prediction directories to ground-truth sequences by name."""
    if (pred / FIELD_FILES["lagrangian"]).exists():
        return [(pred, list_sequences(gt)[0])]
    by_name = {p.name: p for p in list_sequences(gt)}
    out = []
    for d in sorted(p for p in pred.iterdir() if (p / FIELD_FILES["lagrangian"]).exists()):
        if d.name not in by_name:
            raise ValueError(f"no ground-truth sequence named {d.name} under {gt}")
        out.append((d, by_name[d.name]))
    if not out:
        raise ValueError(f"no tracked fields under {pred}")
    return out


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig) if f.name != "seed"}
    cfg = load_config(args.config, seed=args.seed, **overrides)
    ckpt = train(args.data, cfg, args.out, resume=args.resume)
    print(ckpt)
    return 0


def cmd_track(args) -> int:
    state = load_checkpoint(args.ckpt)
    seqs = list_sequences(args.seq)
    single = len(seqs) == 1 and Path(args.seq).resolve() == seqs[0].resolve()
    for path in seqs:
        seq = load_sequence(path)
        res = track_sequence(state.model, seq, args.window)
        dest = Path(args.out) if single else Path(args.out) / path.name
        _write_fields(dest, res, state.model.cfg.squarings)
        print(dest)
    return 0


def cmd_eval(args) -> int:
    indices = [int(t) for t in args.frames.split(",")] if args.frames else None
    rows, per_seq = [], {}
    for pred_dir, gt_dir in _pairs(Path(args.pred), Path(args.gt)):
        seq = load_sequence(gt_dir)
        lag = read_ndt(pred_dir / FIELD_FILES["lagrangian"])
        rep = evaluate_tracking(seq, lag, indices=indices)
        per_seq[gt_dir.name] = rep.to_dict()
        row = {"sequence": gt_dir.name, "mean_dice": rep.mean_dice, "psnr": rep.psnr, "ssim": rep.ssim}
        row.update({f"dice_{k}": v for k, v in rep.dice.items()})
        row.update({f"hausdorff_{k}": v for k, v in rep.hausdorff.items()})
        row["jac_frac_nonpos"] = rep.jacobian.frac_nonpos
        row["jac_mean_abs_dev"] = rep.jacobian.mean_abs_dev
        rows.append(row)
    n = len(rows)
    summary = {
        k: sum(r[k] for r in rows) / n for k in ("mean_dice", "psnr", "ssim", "jac_frac_nonpos")
    }
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(json.dumps({"summary": summary, "sequences": per_seq}, indent=2, default=str))
    with open(report.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(json.dumps(summary))
    return 0


def cmd_gen(args) -> int:
    paths = generate_dataset(
        args.out, args.count, args.size, args.period, args.frames, args.amplitude, args.noise, args.seed
    )
    print(f"wrote {len(paths)} sequences to {args.out}")
    return 0


def cmd_gp_check(args) -> int:
    err = checks.gp_equivalence(args.draws, seed=args.seed)
    print(f"max relative error {err:.3e}")
    return 0 if err < args.tol else 1


def cmd_grad_check(args) -> int:
    ok = True
    for r in checks.gradient_suite(args.seed, end_to_end=not args.skip_end_to_end):
        ok &= r.ok
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name:<24} {r.error:.3e} (tol {r.tolerance:g})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gpmotion", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a directory of sequences")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="write Lagrangian fields for one or more sequences")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, help="frames per inference window (default: whole sequence)")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score tracked fields against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--frames", help="comma-separated frame indices (default: all but the first)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen", help="generate phantom sequences")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--period", type=int, default=16)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--amplitude", type=float, default=0.12)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("gp-check", help="compare Kalman and dense GP filtering")
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_gp_check)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-end-to-end", action="store_true")
    p.set_defaults(func=cmd_grad_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
