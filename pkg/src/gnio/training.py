"""Composite displacement/NLL loss, Adam with warmup + cosine schedule, training loop."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .network import GnioNet

LOG_COLUMNS = ("epoch", "lr", "loss_total", "loss_mse", "loss_nll",
               "gate_abs_mean_stationary", "gate_abs_mean_moving")


class DivergenceError(RuntimeError):
    pass


@dataclass
class LossWeights:
    lambda_mse: float = 1e2
    lambda_nll: float = 1e-4
    nll_delay_epochs: int = 0

    def __post_init__(self):
        if self.lambda_mse < 0 or self.lambda_nll < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class ScheduleSpec:
    lr_start: float = 1e-6
    lr_peak: float = 1e-4
    warmup_epochs: float = 5.0
    total_epochs: float = 200.0
    lr_min: float = 1e-6

    def __post_init__(self):
        if self.lr_start > self.lr_peak:
            raise ValueError("lr_start must not exceed lr_peak")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must lie in [0, total_epochs)")


@dataclass
class TrainConfig:
    seed: int = 0
    batch: int = 64
    epochs: int = 50
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    loss: LossWeights = field(default_factory=LossWeights)
    clip_norm: float = 10.0
    checkpoint_every: int = 0   # epochs; 0 = only at the end (when a path is given)

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        """Batch 1024 for 200 epochs with the default schedule."""
        return cls(batch=1024, epochs=200)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        _reject_unknown(cls, d, "training config")
        if "schedule" in d:
            _reject_unknown(ScheduleSpec, d["schedule"], "schedule")
            d["schedule"] = ScheduleSpec(**d["schedule"])
        if "loss" in d:
            _reject_unknown(LossWeights, d["loss"], "loss")
            d["loss"] = LossWeights(**d["loss"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _reject_unknown(cls, d: dict, label: str) -> None:
    valid = {f.name for f in fields(cls)}
    unknown = set(d) - valid
    if unknown:
        raise ValueError(f"unknown {label} keys {sorted(unknown)}; valid keys: {sorted(valid)}")


# ----------------------------------------------------------------------------- losses

def loss_mse(d_gt, d_hat) -> Tensor:
    """Squared residual norm, averaged over the batch."""
    e = ad.sub(ad.as_tensor(np.atleast_2d(d_gt)) if not isinstance(d_gt, Tensor) else d_gt, d_hat)
    if e.ndim == 1:
        e = ad.reshape(e, (1, -1))
    return ad.mean(ad.sum(e * e, axis=-1))


def loss_nll(d_gt, d_hat, u) -> Tensor:
    """Gaussian NLL with covariance diag(exp(2u)), constant dropped, averaged over the batch."""
    e = ad.sub(d_gt if isinstance(d_gt, Tensor) else ad.as_tensor(np.asarray(d_gt, dtype=np.float64)), d_hat)
    u = ad.as_tensor(u)
    per = 0.5 * (e * e) * ad.exp(-2.0 * u) + u
    if per.ndim == 1:
        per = ad.reshape(per, (1, -1))
    return ad.mean(ad.sum(per, axis=-1))


def loss_total(d_gt, d_hat, u, weights: LossWeights | None = None, nll_active: bool = True):
    """Weighted sum; returns (total, mse, nll) tensors."""
    w = weights or LossWeights()
    mse = loss_mse(d_gt, d_hat)
    nll = loss_nll(d_gt, d_hat, u)
    lam_nll = w.lambda_nll if nll_active else 0.0
    return w.lambda_mse * mse + lam_nll * nll, mse, nll


# ----------------------------------------------------------------------------- schedule / optimizer

def lr_at(epoch: float, spec: ScheduleSpec | None = None) -> float:
    """Linear warmup from lr_start to lr_peak, then cosine annealing to lr_min."""
    s = spec or ScheduleSpec()
    if not 0.0 <= epoch <= s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs}]")
    if epoch <= s.warmup_epochs:
        if s.warmup_epochs == 0:
            return s.lr_peak
        x = epoch / s.warmup_epochs
        return s.lr_start * (1.0 - x) + s.lr_peak * x
    frac = (epoch - s.warmup_epochs) / (s.total_epochs - s.warmup_epochs)
    return s.lr_min + 0.5 * (s.lr_peak - s.lr_min) * (1.0 + math.cos(math.pi * frac))


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        """In-place bias-corrected update of ``params`` given matching ``grads``."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([float(self.step_count)])}
        out.update({f"m.{k}": v for k, v in self.m.items()})
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"][0])
        self.m = {k[2:]: v.copy() for k, v in state.items() if k.startswith("m.")}
        self.v = {k[2:]: v.copy() for k, v in state.items() if k.startswith("v.")}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: Adam, lr: float) -> dict[str, Tensor]:
    state.step(params, grads, lr)
    return params


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# ----------------------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    net: GnioNet
    log: list[dict]
    optimizer: Adam


def train(net: GnioNet, X: np.ndarray, Y: np.ndarray, config: TrainConfig | None = None,
          stationary: np.ndarray | None = None, checkpoint_path: str | Path | None = None,
          log_path: str | Path | None = None, optimizer: Adam | None = None,
          start_epoch: int = 0) -> TrainResult:
    """Mini-batch Adam on windows ``X`` (n, N, 6) with targets ``Y`` (n, 3).

    The learning rate follows ``lr_at`` at fractional epochs. ``stationary``
    flags feed the per-epoch gate statistics. Training resumes from
    ``start_epoch`` when an ``optimizer`` state is supplied.
    """
    cfg = config or TrainConfig()
    n = len(X)
    if n == 0:
        raise ValueError("empty training set")
    if stationary is None:
        stationary = np.zeros(n, dtype=bool)
    opt = optimizer or Adam()
    params = dict(net.named_parameters())
    sched = cfg.schedule
    if sched.total_epochs < cfg.epochs:
        sched = ScheduleSpec(**{**asdict(sched), "total_epochs": float(cfg.epochs)})
    log: list[dict] = []
    net.train()
    n_batches = math.ceil(n / cfg.batch)
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        sums = np.zeros(3)
        gate_st, gate_mv = [], []
        lr = lr_at(epoch, sched)
        nll_active = epoch >= cfg.loss.nll_delay_epochs
        for b in range(n_batches):
            idx = order[b * cfg.batch:(b + 1) * cfg.batch]
            lr = lr_at(min(epoch + b / n_batches, sched.total_epochs), sched)
            out = net(X[idx])
            total, mse, nll = loss_total(Y[idx], out.d_hat, out.u, cfg.loss, nll_active)
            if not np.isfinite(total.item()):
                raise DivergenceError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            net.zero_grad()
            ad.backward(total)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            clip_global_norm(grads, cfg.clip_norm)
            opt.step(params, grads, lr)
            w = len(idx) / n
            sums += w * np.array([total.item(), mse.item(), nll.item()])
            g_abs = np.abs(out.g.data).mean(axis=1)
            st = stationary[idx]
            gate_st.extend(g_abs[st])
            gate_mv.extend(g_abs[~st])
        row = {
            "epoch": epoch + 1, "lr": lr, "loss_total": sums[0], "loss_mse": sums[1], "loss_nll": sums[2],
            "gate_abs_mean_stationary": float(np.mean(gate_st)) if gate_st else float("nan"),
            "gate_abs_mean_moving": float(np.mean(gate_mv)) if gate_mv else float("nan"),
        }
        log.append(row)
        if log_path is not None:
            write_log(log_path, log)
        if checkpoint_path is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_training_state(checkpoint_path, net, opt, epoch + 1)
    net.eval()
    if checkpoint_path is not None:
        save_training_state(checkpoint_path, net, opt, cfg.epochs if cfg.epochs > start_epoch else start_epoch)
    if log_path is not None:
        write_log(log_path, log)
    return TrainResult(net, log, opt)


def write_log(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k != "epoch" else int(r[k])) for k in LOG_COLUMNS})


def read_log(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def save_training_state(path: str | Path, net: GnioNet, opt: Adam, epoch: int) -> None:
    """Network checkpoint at ``path``; optimizer moments and epoch in ``<path>.opt``."""
    path = Path(path)
    net.save(path)
    state = opt.state_dict()
    state["epoch"] = np.array([float(epoch)])
    ad.save_checkpoint(path.with_name(path.name + ".opt"), state)


def load_training_state(path: str | Path) -> tuple[GnioNet, Adam, int]:
    path = Path(path)
    net = GnioNet.load(path)
    opt = Adam()
    epoch = 0
    opt_path = path.with_name(path.name + ".opt")
    if opt_path.exists():
        state = ad.load_checkpoint(opt_path)
        epoch = int(state.pop("epoch")[0])
        opt.load_state_dict(state)
    return net, opt, epoch


def evaluate_windows(net: GnioNet, X: np.ndarray, Y: np.ndarray, batch: int = 256) -> dict:
    """Eval-mode MSE (mean squared residual norm) and the raw predictions."""
    preds, sig, gates, scales = [], [], [], []
    net.eval()
    with ad.no_grad():
        for i in range(0, len(X), batch):
            out = net(X[i:i + batch])
            preds.append(out.d_hat.data)
            sig.append(out.sigma)
            gates.append(out.g.data)
            scales.append(out.s.data)
    d = np.concatenate(preds)
    return {"mse": float(np.mean(np.sum((Y - d) ** 2, axis=1))), "d_hat": d,
            "sigma": np.concatenate(sig), "g": np.concatenate(gates), "s": np.concatenate(scales)}


def config_json(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
