"""End-to-end workflow pieces shared by the command line and the test suite."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .ekf import FilterConfig, OracleMeasurement, run_filter
from .evaluate import MetricReport, Trajectory, evaluate
from .imu import Sequence, stack_windows, window_stream
from .network import GnioNet, NetConfig
from .training import ScheduleSpec, TrainConfig, TrainResult, evaluate_windows, train


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class DataConfig:
    window: float = 1.0        # s
    stride: float = 0.25       # s between training windows
    eval_stride: float = 0.1   # s between evaluation windows


def desk_train_config(epochs: int = 50, seed: int = 0) -> TrainConfig:
    """Short warmup and a higher peak rate, sized for tens of epochs on a CPU."""
    total = max(epochs, 1)
    return TrainConfig(seed=seed, batch=64, epochs=epochs,
                       schedule=ScheduleSpec(lr_start=1e-5, lr_peak=1e-3, warmup_epochs=min(2, total - 1),
                                             total_epochs=total, lr_min=1e-5))


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig.tiny)
    train: TrainConfig = field(default_factory=desk_train_config)
    data: DataConfig = field(default_factory=DataConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)

    SECTIONS = ("net", "train", "data", "filter")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}; valid keys: {list(cls.SECTIONS)}")
        base = cls()
        try:
            net = NetConfig.from_dict({**base.net.to_dict(), **d.get("net", {})})
            train_d = _deep_merge(base.train.to_dict(), d.get("train", {}))
            if "epochs" in d.get("train", {}) and "total_epochs" not in d.get("train", {}).get("schedule", {}):
                train_d["schedule"]["total_epochs"] = float(max(train_d["epochs"], 1))
                train_d["schedule"]["warmup_epochs"] = min(train_d["schedule"]["warmup_epochs"],
                                                          max(train_d["epochs"] - 1, 0))
            tr = TrainConfig.from_dict(train_d)
            data_valid = {f.name for f in fields(DataConfig)}
            bad = set(d.get("data", {})) - data_valid
            if bad:
                raise ConfigError(f"unknown data keys {sorted(bad)}; valid keys: {sorted(data_valid)}")
            data = DataConfig(**{**asdict(base.data), **d.get("data", {})})
            flt = FilterConfig.from_dict(_deep_merge(base.filter.to_dict(), d.get("filter", {})))
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        return cls(net, tr, data, flt)

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "train": self.train.to_dict(), "data": asdict(self.data),
                "filter": self.filter.to_dict()}


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_overrides(d: dict, items: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings; values parse as JSON when possible."""
    out = copy.deepcopy(d)
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = value
    return out


# ----------------------------------------------------------------------------- data

def dataset_windows(seqs: list[Sequence], window: float = 1.0, stride: float = 0.25):
    """Stacked (X, Y, stationary) over all sequences."""
    ws = [w for s in seqs for w in window_stream(s, duration=window, stride=stride)]
    if not ws:
        raise ValueError("no complete windows in the dataset")
    return stack_windows(ws)


def train_on(seqs: list[Sequence], cfg: RunConfig, net: GnioNet | None = None, **kw) -> TrainResult:
    X, Y, st = dataset_windows(seqs, cfg.data.window, cfg.data.stride)
    net = net or GnioNet(cfg.net)
    return train(net, X, Y, cfg.train, stationary=st, **kw)


# ----------------------------------------------------------------------------- fusion

@dataclass
class FusionResult:
    name: str
    gt: Trajectory
    estimate: Trajectory
    report: MetricReport
    baseline: Trajectory | None = None
    baseline_report: MetricReport | None = None
    updates: list = field(default_factory=list)


def fuse_sequence(seq: Sequence, source, flt: FilterConfig, with_baseline: bool = True,
                  config_fingerprint=None) -> FusionResult:
    """Filter ``seq`` with ``source`` (network, ``"oracle"`` or ``None``) and score against ground truth."""
    if isinstance(source, str):
        if source != "oracle":
            raise ValueError(f"unknown measurement source {source!r}")
        source = OracleMeasurement()
    gt = Trajectory.from_sequence(seq)
    run = run_filter(seq, source, flt)
    est = Trajectory(run.t, run.p, run.q)
    res = FusionResult(seq.name, gt, est, evaluate(est, gt, config=config_fingerprint), updates=run.updates)
    if with_baseline:
        dr = run_filter(seq, None, flt)
        res.baseline = Trajectory(dr.t, dr.p, dr.q)
        res.baseline_report = evaluate(res.baseline, gt, config=config_fingerprint)
    return res


# ----------------------------------------------------------------------------- ablations

GATING_GRID = (("sigmoid", "linear"), ("tanh", "linear"), ("tanh", "exp"),
               ("tanh", "abs"), ("tanh", "pos_elu"), ("tanh", "softplus"))
BANK_SIZES = (16, 32, 64, 128)
ABLATION_COLUMNS = ("axis", "gate_fn", "scale_fn", "m", "ate_m", "rmse_m", "window_mse")


def ablation_grid(axis: str, base: NetConfig) -> list[NetConfig]:
    if axis == "gating":
        return [NetConfig.from_dict({**base.to_dict(), "gate_fn": g, "scale_fn": s}) for g, s in GATING_GRID]
    if axis == "bank_size":
        return [NetConfig.from_dict({**base.to_dict(), "m": m}) for m in BANK_SIZES]
    raise ConfigError(f"unknown ablation axis {axis!r}; valid axes: ['gating', 'bank_size']")


def run_ablation(axis: str, train_seqs: list[Sequence], eval_seqs: list[Sequence], cfg: RunConfig) -> list[dict]:
    """Train every grid point with the same seed and budget, then fuse the held-out sequences."""
    rows = []
    Xe, Ye, _ = dataset_windows(eval_seqs, cfg.data.window, cfg.data.eval_stride)
    for net_cfg in ablation_grid(axis, cfg.net):
        run_cfg = RunConfig(net_cfg, cfg.train, cfg.data, cfg.filter)
        net = train_on(train_seqs, run_cfg).net
        results = [fuse_sequence(s, net, cfg.filter, with_baseline=False) for s in eval_seqs]
        rows.append({"axis": axis, "gate_fn": net_cfg.gate_fn, "scale_fn": net_cfg.scale_fn, "m": net_cfg.m,
                     "ate_m": float(np.mean([r.report.ate_m for r in results])),
                     "rmse_m": float(np.mean([r.report.rmse_m for r in results])),
                     "window_mse": evaluate_windows(net, Xe, Ye)["mse"]})
    return rows


def write_table(rows: list[dict], path: str | Path) -> None:
    lines = [",".join(ABLATION_COLUMNS)]
    for r in rows:
        lines.append(",".join(f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in ABLATION_COLUMNS))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")
