"""GNIO network: residual 1D encoder, motion-bank attention, gated head, uncertainty."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GATE_FNS = ("tanh", "sigmoid")
SCALE_FNS = ("softplus", "pos_elu", "abs", "exp", "linear")


@dataclass
class NetConfig:
    D: int = 512
    m: int = 64
    heads: int = 4
    channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    gate_fn: str = "tanh"
    scale_fn: str = "softplus"
    in_channels: int = 6
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 4:
            raise ValueError("channels must list 4 stage widths")
        if self.m < 1:
            raise ValueError("motion bank needs at least one prototype")
        if self.heads < 1 or self.D % self.heads:
            raise ValueError(f"D={self.D} must be divisible by heads={self.heads}")
        if self.gate_fn not in GATE_FNS:
            raise ValueError(f"gate_fn must be one of {GATE_FNS}")
        if self.scale_fn not in SCALE_FNS:
            raise ValueError(f"scale_fn must be one of {SCALE_FNS}")

    @classmethod
    def tiny(cls, **overrides) -> "NetConfig":
        base = dict(D=64, m=16, heads=4, channels=(8, 16, 32, 64))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        valid = set(cls.__dataclass_fields__)
        unknown = set(d) - valid
        if unknown:
            raise ValueError(f"unknown network config keys {sorted(unknown)}; valid keys: {sorted(valid)}")
        return cls(**d)


class Module:
    """Container of named parameters, buffers and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, v in self._params.items():
            yield prefix + k, v
        for k, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{k}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self._buffers.items():
            yield prefix + k, v
        for k, c in self._children.items():
            yield from c.named_buffers(f"{prefix}{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for c in self._children.values():
            c.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.named_parameters()}
        out.update({k: v.copy() for k, v in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
            raise ValueError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)
        for k, b in buffers.items():
            b[...] = state[k]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


# ----------------------------------------------------------------------------- layers

class Conv1d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, bias=False):
        super().__init__()
        self.stride, self.padding = stride, padding
        std = math.sqrt(2.0 / (c_in * kernel))
        self.weight = self.param("weight", rng.normal(0.0, std, (c_out, c_in, kernel)))
        self.bias = self.param("bias", np.zeros(c_out)) if bias else None

    def __call__(self, x):
        return ad.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, channels_last=True)


class BatchNorm1d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = self.param("gamma", np.ones(channels))
        self.beta = self.param("beta", np.zeros(channels))
        self._buffers["running_mean"] = np.zeros(channels)
        self._buffers["running_var"] = np.ones(channels)

    def __call__(self, x):
        return ad.batchnorm1d(x, self.gamma, self.beta, self._buffers["running_mean"],
                              self._buffers["running_var"], self.training, self.momentum, self.eps,
                              channels_last=True)


class BasicBlock(Module):
    def __init__(self, rng, c_in, c_out, stride):
        super().__init__()
        self.conv1 = self.child("conv1", Conv1d(rng, c_in, c_out, 3, stride, 1))
        self.bn1 = self.child("bn1", BatchNorm1d(c_out))
        self.conv2 = self.child("conv2", Conv1d(rng, c_out, c_out, 3, 1, 1))
        self.bn2 = self.child("bn2", BatchNorm1d(c_out))
        self.down = None
        if stride != 1 or c_in != c_out:
            self.down = self.child("down", Conv1d(rng, c_in, c_out, 1, stride, 0))
            self.down_bn = self.child("down_bn", BatchNorm1d(c_out))

    def __call__(self, x):
        out = ad.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        short = x if self.down is None else self.down_bn(self.down(x))
        return ad.relu(out + short)


class Encoder(Module):
    """ResNet-18 layout in 1D: stem (k7, s2), 4 stages x 2 basic blocks, global average pool.

    Runs channels-last: input (B, N, 6).
    """

    STRIDES = (1, 2, 2, 2)

    def __init__(self, rng, cfg: NetConfig):
        super().__init__()
        c = cfg.channels
        self.stem = self.child("stem", Conv1d(rng, cfg.in_channels, c[0], 7, 2, 3))
        self.stem_bn = self.child("stem_bn", BatchNorm1d(c[0]))
        self.blocks = []
        c_in = c[0]
        for i, (c_out, s) in enumerate(zip(c, self.STRIDES)):
            for j in range(2):
                blk = BasicBlock(rng, c_in, c_out, s if j == 0 else 1)
                self.blocks.append(self.child(f"stage{i + 1}.{j}", blk))
                c_in = c_out
        self.proj = None
        if c[3] != cfg.D:
            self.proj = self.child("proj", Linear(rng, c[3], cfg.D))

    def __call__(self, x):
        out = ad.relu(self.stem_bn(self.stem(x)))
        for blk in self.blocks:
            out = blk(out)
        f = ad.global_avg_pool(out, channels_last=True)
        return f if self.proj is None else self.proj(f)


class Linear(Module):
    """y = x W^T + b with W of shape (out, in)."""

    def __init__(self, rng, d_in, d_out, bias=True, bias_init=0.0, gain=1.0):
        super().__init__()
        self.weight = self.param("weight", rng.normal(0.0, gain / math.sqrt(d_in), (d_out, d_in)))
        self.bias = self.param("bias", np.full(d_out, bias_init)) if bias else None

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


class MotionBank(Module):
    """Learnable prototypes M (m x D) queried by scaled dot-product attention."""

    def __init__(self, rng, D, m, heads):
        super().__init__()
        self.D, self.m, self.heads = D, m, heads
        self.M = self.param("M", rng.normal(0.0, 1.0 / math.sqrt(D), (m, D)))
        std = 1.0 / math.sqrt(D)
        self.W_Q = self.param("W_Q", rng.normal(0.0, std, (D, D)))
        self.W_K = self.param("W_K", rng.normal(0.0, std, (D, D)))
        self.W_V = self.param("W_V", rng.normal(0.0, std, (D, D)))
        self.W_O = self.param("W_O", rng.normal(0.0, std, (D, D))) if heads > 1 else None


class GatedHead(Module):
    def __init__(self, rng, D, gate_fn="tanh", scale_fn="softplus"):
        super().__init__()
        self.gate_fn, self.scale_fn = gate_fn, scale_fn
        # scale starts near 1 so suppression has to come from the gate, whose bias starts at 0
        s_init = math.log(math.e - 1.0) if scale_fn == "softplus" else (0.0 if scale_fn in ("exp", "pos_elu") else 1.0)
        self.scale = self.child("scale", Linear(rng, D, 3, bias_init=s_init))
        self.gate = self.child("gate", Linear(rng, D, 3, bias_init=0.0))
        self.unc = self.child("unc", Linear(rng, D, 3, bias_init=0.0, gain=0.1))


# ----------------------------------------------------------------------------- operations

def encode(net: "GnioNet", X) -> Tensor:
    """(N, 6) or (B, N, 6) aligned windows -> features (B, D)."""
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != net.cfg.in_channels:
        raise ValueError(f"encode: expected windows of shape (B, N, {net.cfg.in_channels}), got {X.shape}")
    return net.encoder(Tensor._wrap(X))


def bank_attend(f: Tensor, bank: MotionBank) -> tuple[Tensor, Tensor]:
    """Context c = softmax(Q K^T / sqrt(d_k)) V per head; returns (c (B, D), weights (B, H, m))."""
    f = ad.as_tensor(f)
    if f.ndim == 1:
        f = ad.reshape(f, (1, -1))
    B, D = f.shape
    H, m = bank.heads, bank.m
    dk = D // H
    Q = ad.matmul(f, bank.W_Q)
    K = ad.matmul(bank.M, bank.W_K)
    V = ad.matmul(bank.M, bank.W_V)
    if H == 1:
        w = ad.softmax(ad.matmul(Q, ad.transpose(K, (1, 0))) * (1.0 / math.sqrt(dk)), axis=-1)
        return ad.matmul(w, V), ad.reshape(w, (B, 1, m))
    Qh = ad.transpose(ad.reshape(Q, (B, H, dk)), (1, 0, 2))     # (H, B, dk)
    Kh = ad.transpose(ad.reshape(K, (m, H, dk)), (1, 2, 0))     # (H, dk, m)
    Vh = ad.transpose(ad.reshape(V, (m, H, dk)), (1, 0, 2))     # (H, m, dk)
    w = ad.softmax(ad.matmul(Qh, Kh) * (1.0 / math.sqrt(dk)), axis=-1)   # (H, B, m)
    ctx = ad.reshape(ad.transpose(ad.matmul(w, Vh), (1, 0, 2)), (B, D))
    return ad.matmul(ctx, bank.W_O), ad.transpose(w, (1, 0, 2))


def fuse(f: Tensor, c: Tensor) -> Tensor:
    f, c = ad.as_tensor(f), ad.as_tensor(c)
    if f.shape != c.shape:
        raise ad.ShapeError(f"fuse: feature {f.shape} and context {c.shape} differ")
    return f + c


def apply_scale(z: Tensor, kind: str) -> Tensor:
    if kind == "softplus":
        return ad.softplus(z)
    if kind == "pos_elu":
        return ad.elu(z) + 1.0
    if kind == "abs":
        return ad.abs(z)
    if kind == "exp":
        return ad.exp(z)
    if kind == "linear":
        return z
    raise ValueError(f"unknown scale_fn {kind!r}")


def apply_gate(z: Tensor, kind: str) -> Tensor:
    if kind == "tanh":
        return ad.tanh(z)
    if kind == "sigmoid":
        return ad.sigmoid(z)
    raise ValueError(f"unknown gate_fn {kind!r}")


def gated_head(h: Tensor, head: GatedHead) -> tuple[Tensor, Tensor, Tensor]:
    """(scale >= 0, gate, displacement = scale * gate)."""
    s = apply_scale(head.scale(h), head.scale_fn)
    g = apply_gate(head.gate(h), head.gate_fn)
    return s, g, s * g


def covariance_from_log_std(u) -> np.ndarray:
    """diag(exp(2 u)) for u of shape (3,) or (B, 3)."""
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64)
    var = np.exp(2.0 * u)
    out = np.zeros(u.shape + (3,))
    idx = np.arange(3)
    out[..., idx, idx] = var
    return out


def uncertainty(h: Tensor, head: GatedHead) -> tuple[Tensor, np.ndarray]:
    u = head.unc(h)
    return u, covariance_from_log_std(u)


@dataclass
class Prediction:
    d_hat: Tensor
    u: Tensor
    f: Tensor
    c: Tensor
    h: Tensor
    s: Tensor
    g: Tensor
    attn: Tensor
    extras: dict = field(default_factory=dict)

    @property
    def sigma(self) -> np.ndarray:
        return covariance_from_log_std(self.u)


class GnioNet(Module):
    def __init__(self, cfg: NetConfig | None = None):
        super().__init__()
        self.cfg = cfg or NetConfig()
        rng = np.random.default_rng(self.cfg.seed)
        self.encoder = self.child("encoder", Encoder(rng, self.cfg))
        self.bank = self.child("bank", MotionBank(rng, self.cfg.D, self.cfg.m, self.cfg.heads))
        self.head = self.child("head", GatedHead(rng, self.cfg.D, self.cfg.gate_fn, self.cfg.scale_fn))
        self.n_params = self.num_parameters()

    def forward(self, X) -> Prediction:
        f = encode(self, X)
        c, attn = bank_attend(f, self.bank)
        h = fuse(f, c)
        s, g, d = gated_head(h, self.head)
        u, _ = uncertainty(h, self.head)
        return Prediction(d_hat=d, u=u, f=f, c=c, h=h, s=s, g=g, attn=attn)

    __call__ = forward

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode inference: (d_hat (B, 3), Sigma (B, 3, 3))."""
        was = self.training
        self.eval()
        try:
            with ad.no_grad():
                out = self.forward(X)
        finally:
            self.train(was)
        return out.d_hat.data, out.sigma

    def save(self, path: str | Path) -> None:
        """Weights in the checkpoint format plus a JSON sidecar holding the architecture."""
        path = Path(path)
        ad.save_checkpoint(path, self.state_dict())
        path.with_suffix(".json").write_text(json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path, cfg: NetConfig | None = None) -> "GnioNet":
        path = Path(path)
        if cfg is None:
            cfg = NetConfig.from_dict(json.loads(path.with_suffix(".json").read_text()))
        net = cls(cfg)
        net.load_state_dict(ad.load_checkpoint(path))
        return net
