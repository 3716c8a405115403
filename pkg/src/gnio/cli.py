"""Command line: gnio synth|train|infer|fuse|eval|ablate.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .ekf import FilterConfig
from .evaluate import MetricReport, config_hash, emit_outputs, evaluate, load_trajectory_csv
from .imu import load_dataset, save_sequence
from .network import GnioNet
from .pipeline import (ConfigError, RunConfig, apply_overrides, dataset_windows, fuse_sequence,
                       run_ablation, train_on, write_table)
from .synth import generate_from_spec
from .training import evaluate_windows, load_training_state, read_log, save_training_state, write_log

log = logging.getLogger("gnio")


class UsageError(Exception):
    pass


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{p}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise UsageError(f"{p}: top level must be a JSON object")
    return data


def _run_config(args) -> RunConfig:
    d = apply_overrides(_read_json(args.config), args.set)
    if args.seed is not None:
        d.setdefault("train", {})["seed"] = args.seed
        d.setdefault("net", {})["seed"] = args.seed
    return RunConfig.from_dict(d)


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing required {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    return Path(args.out)


# ----------------------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    spec = apply_overrides(_read_json(_require(args.config, "--config spec file")), args.set)
    try:
        seqs = generate_from_spec(spec, seed=args.seed)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"synthetic spec: {e}") from e
    out = _out(args)
    if len(seqs) == 1 and "random" not in spec:
        save_sequence(seqs[0], out)
    else:
        for s in seqs:
            save_sequence(s, out / s.name)
    print(f"wrote {len(seqs)} sequence(s) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    seqs = load_dataset(_require(args.data, "--data directory"))
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log_path = out / "model.gnio", out / "train_log.csv"
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    net, opt, start, prior = None, None, 0, []
    if args.resume:
        net, opt, start = load_training_state(_require(args.resume, "resume checkpoint"))
        prev = Path(args.resume).with_name("train_log.csv")
        prior = [r for r in read_log(prev) if r["epoch"] <= start] if prev.exists() else []
    res = train_on(seqs, cfg, net=net, optimizer=opt, start_epoch=start)
    save_training_state(ckpt, res.net, res.optimizer, max(cfg.train.epochs, start))
    write_log(log_path, prior + res.log)
    last = res.log[-1]["loss_total"] if res.log else float("nan")
    print(f"trained {len(res.log)} epoch(s); final loss {last:.6g}; checkpoint {ckpt}")
    return 0


def _load_net(args) -> GnioNet:
    return GnioNet.load(_require(args.checkpoint, "--checkpoint"))


def cmd_infer(args) -> int:
    cfg = _run_config(args)
    net = _load_net(args)
    seqs = load_dataset(_require(args.data, "--data directory"))
    X, Y, _ = dataset_windows(seqs, cfg.data.window, cfg.data.eval_stride)
    ev = evaluate_windows(net, X, Y)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    sig = np.sqrt(np.diagonal(ev["sigma"], axis1=1, axis2=2))
    rows = np.column_stack([np.arange(len(Y)), ev["d_hat"], sig, Y])
    header = "window,dx,dy,dz,sx,sy,sz,gt_dx,gt_dy,gt_dz"
    lines = [header] + [",".join([str(int(r[0]))] + [f"{v:.9g}" for v in r[1:]]) for r in rows]
    (out / "predictions.csv").write_text("\n".join(lines) + "\n", newline="\n")
    (out / "window_metrics.json").write_text(json.dumps({"mse": ev["mse"], "windows": len(Y)}, sort_keys=True) + "\n")
    print(f"{len(Y)} windows, mse {ev['mse']:.6g}")
    return 0


def cmd_fuse(args) -> int:
    cfg = _run_config(args)
    if args.oracle:
        source = "oracle"
    else:
        source = _load_net(args)
    seqs = load_dataset(_require(args.data, "--data directory"))
    out = _out(args)
    fp = {"filter": cfg.filter.to_dict(), "source": "oracle" if args.oracle else str(args.checkpoint)}
    reports = []
    for seq in seqs:
        res = fuse_sequence(seq, source, cfg.filter, config_fingerprint=fp)
        target = out if len(seqs) == 1 else out / seq.name
        emit_outputs(res.report, {"ground_truth": res.gt, "estimate": res.estimate,
                                  "dead_reckoning": res.baseline}, target)
        (target / "baseline_metrics.json").write_text(
            json.dumps(res.baseline_report.to_dict(), sort_keys=True, indent=2) + "\n", newline="\n")
        reports.append(res.report)
        print(f"{seq.name}: ATE {res.report.ate_m:.4f} m (dead reckoning {res.baseline_report.ate_m:.4f} m)")
    if len(seqs) > 1:
        summary = MetricReport(ate_m=float(np.mean([r.ate_m for r in reports])),
                               rmse_m=float(np.mean([r.rmse_m for r in reports])),
                               duration_s=float(sum(r.duration_s for r in reports)),
                               n=int(sum(r.n for r in reports)), config_hash=config_hash(fp))
        emit_outputs(summary, None, out)
    return 0


def cmd_eval(args) -> int:
    est = load_trajectory_csv(_require(args.estimate, "--estimate CSV"))
    gt_path = _require(args.gt, "--gt CSV")
    gt = load_trajectory_csv(gt_path)
    report = evaluate(est, gt, align=args.align, config={"align": args.align})
    emit_outputs(report, {"ground_truth": gt, "estimate": est}, _out(args))
    print(f"ATE {report.ate_m:.6f} m over {report.n} poses")
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    seqs = load_dataset(_require(args.data, "--data directory"))
    if args.eval_data:
        eval_seqs = load_dataset(_require(args.eval_data, "--eval-data directory"))
        train_seqs = seqs
    else:
        if len(seqs) < 2:
            raise UsageError("ablation needs at least two sequences or --eval-data")
        n_eval = max(1, len(seqs) // 5)
        train_seqs, eval_seqs = seqs[:-n_eval], seqs[-n_eval:]
    rows = run_ablation(args.axis, train_seqs, eval_seqs, cfg)
    out = _out(args)
    table = out if out.suffix == ".csv" else out / f"ablation_{args.axis}.csv"
    write_table(rows, table)
    print(f"wrote {len(rows)} rows to {table}")
    return 0


# ----------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="seed for generation and initialization")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.epochs=5 (repeatable)")
    p = argparse.ArgumentParser(prog="gnio", description="Inertial odometry pipeline on synthetic data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic IMU sequences from a spec")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a network on a dataset")
    s.add_argument("--data", help="sequence directory or directory of sequences")
    s.add_argument("--resume", help="checkpoint to continue training from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="per-window network predictions")
    s.add_argument("--data")
    s.add_argument("--checkpoint")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("fuse", parents=[common], help="run the filter with network or oracle measurements")
    s.add_argument("--data")
    s.add_argument("--checkpoint")
    s.add_argument("--oracle", action="store_true", help="use ground-truth displacements")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("eval", parents=[common], help="score an estimated trajectory CSV")
    s.add_argument("--estimate")
    s.add_argument("--gt")
    s.add_argument("--align", choices=["first_pose", "umeyama", "none"], default="first_pose")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="gating or bank-size sweep")
    s.add_argument("axis", choices=["gating", "bank_size"])
    s.add_argument("--data")
    s.add_argument("--eval-data")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        print(f"gnio {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ad.NonFiniteError, FloatingPointError, ArithmeticError, RuntimeError, ValueError, OSError) as e:
        print(f"gnio {args.command}: failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
