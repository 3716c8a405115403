"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable op builds its output with :func:`_record`, which stores the
input tensors and a closure mapping the output gradient to input gradients.
:func:`backward` orders the recorded graph topologically (the tape), walks it in
reverse exactly once, accumulates into leaf ``.grad`` and then frees the graph.
"""
from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError",
    "add", "sub", "mul", "neg", "matmul", "linear", "conv1d", "batchnorm1d",
    "relu", "tanh", "sigmoid", "softplus", "elu", "abs", "exp", "log",
    "softmax", "global_avg_pool", "sum", "mean", "reshape", "transpose",
    "backward", "gradient_check", "no_grad", "debug_mode",
    "save_checkpoint", "load_checkpoint",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_DEBUG = False
_GRAD_ENABLED = True


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every op output for NaN/Inf while active."""
    global _DEBUG
    prev, _DEBUG = _DEBUG, enabled
    try:
        yield
    finally:
        _DEBUG = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """n-dimensional float64 array that can take part in a recorded graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._parents = ()
        t._backward = None
        t._op = "leaf"
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by exp(-x) instead")
        return mul(self, 1.0 / float(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    t = Tensor._wrap(out)
    t._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    y = np.logaddexp(0.0, x.data)
    return _record("softplus", y, (x,), lambda g: (g * _sigmoid(x.data),))


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    ex = np.exp(np.minimum(x.data, 0.0))
    y = np.where(pos, x.data, alpha * (ex - 1.0))
    return _record("elu", y, (x,), lambda g: (g * np.where(pos, 1.0, alpha * ex),))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    # sign(0) == 0: subgradient choice at the kink
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _record("exp", y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (x,), bw)


# ---------------------------------------------------------------- reductions / shape

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def global_avg_pool(x, channels_last: bool = False) -> Tensor:
    """Mean over the length axis: (B, C, L) -> (B, C), or (B, L, C) -> (B, C) channels-last."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool: expected 3-d input, got {x.shape}")
    axis = 1 if channels_last else 2
    L = x.shape[axis]
    shape = x.shape
    return _record("global_avg_pool", x.data.mean(axis=axis), (x,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis) / L, shape).copy(),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {orig} into {tuple(shape)}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(orig),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {tuple(axes)} invalid for rank {x.ndim}")
    inv = np.argsort(axes)
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes (rank >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map y = x W^T + b with W of shape (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input feature dim {x.shape[-1:]} vs weight {weight.shape}")
    y = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        y = add(y, bias)
    return y


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0, channels_last: bool = False) -> Tensor:
    """Cross-correlation along the length axis.

    x: (C_in, L) or (B, C_in, L); with ``channels_last`` (L, C_in) or (B, L, C_in).
    weight: (C_out, C_in, K). Output follows the input layout.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-d input and kernel (O,C,K), got {x.shape} and {weight.shape}")
    if not channels_last:
        y = transpose(_conv1d_nlc(transpose(x, (0, 2, 1)), weight, bias, stride, padding), (0, 2, 1))
    else:
        y = _conv1d_nlc(x, weight, bias, stride, padding)
    return reshape(y, y.shape[1:]) if squeeze else y


def _conv1d_nlc(x: Tensor, weight: Tensor, bias, stride: int, padding: int) -> Tensor:
    B, L, C = x.shape
    O, Cw, K = weight.shape
    if C != Cw:
        raise ShapeError(f"conv1d: input channels {C} != kernel in-channels {Cw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv1d: invalid stride={stride} padding={padding}")
    Lp = L + 2 * padding
    if Lp < K:
        raise ShapeError(f"conv1d: padded length {Lp} shorter than kernel {K}")
    Lout = (Lp - K) // stride + 1
    span = stride * (Lout - 1) + 1
    if padding:
        xp = np.zeros((B, Lp, C))
        xp[:, padding:padding + L] = x.data
    else:
        xp = np.ascontiguousarray(x.data)
    # im2col (B*Lout, K*C), column order (k, c), via a strided view of the padded input
    s0, s1, s2 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(B, Lout, K, C), strides=(s0, stride * s1, s1, s2), writeable=False
    ).reshape(B * Lout, K * C)
    wmat = weight.data.transpose(2, 1, 0).reshape(K * C, O)
    out = cols @ wmat
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    out = out.reshape(B, Lout, O)

    def bw(g):
        g2 = g.reshape(B * Lout, O)
        gw = (cols.T @ g2).reshape(K, C, O).transpose(2, 1, 0)
        dcols = (g2 @ wmat.T).reshape(B, Lout, K, C)
        dxp = np.zeros((B, Lp, C))
        for k in range(K):
            dxp[:, k:k + span:stride] += dcols[:, :, k]
        dx = dxp[:, padding:padding + L] if padding else dxp
        grads = [dx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv1d", out, parents, bw)


def batchnorm1d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5,
                channels_last: bool = False) -> Tensor:
    """Per-channel normalisation of (B, C), (B, C, L) or, channels-last, (B, L, C) input.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance); in eval mode the running statistics
    turn this into a fixed affine map.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    ch = x.ndim - 1 if (channels_last or x.ndim == 2) else 1
    if x.ndim not in (2, 3) or gamma.shape != (x.shape[ch],) or beta.shape != (x.shape[ch],):
        raise ShapeError(f"batchnorm1d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(a for a in range(x.ndim) if a != ch)
    bshape = tuple(-1 if a == ch else 1 for a in range(x.ndim))
    nch = x.shape[ch]
    g_ = gamma.data.reshape(bshape)
    if training:
        n = x.size // nch
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        if n > 1:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * invstd.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        if training:
            m = x.size // nch
            dx = (invstd.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * invstd.reshape(bshape)
        return dx, dgamma, dbeta

    return _record("batchnorm1d", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- tape / backward

class Tape:
    """Topologically ordered view of the graph that produced ``root``."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    The graph is freed afterwards unless ``retain_graph`` is set.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if not retain_graph:
        for node in tape.nodes:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None


# ---------------------------------------------------------------- gradient check

def gradient_check(f: Callable[[Mapping[str, Tensor]], Tensor], inputs: Mapping[str, np.ndarray],
                   h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6,
                   indices: Mapping[str, Iterable[int]] | None = None) -> dict:
    """Compare analytic gradients of a scalar ``f`` with central differences.

    ``f`` receives a dict of leaf tensors built from ``inputs``. Relative error
    per element is ``|a - n| / max(|a|, |n|, floor)``. ``indices`` optionally
    restricts the checked flat positions per input.
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    backward(f(leaves))
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
                for k, t in leaves.items()}

    def value(name, flat_idx, delta):
        arrs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
        arrs[name].reshape(-1)[flat_idx] += delta
        with no_grad():
            return f({k: Tensor(v) for k, v in arrs.items()}).item()

    report: dict = {"per_input": {}, "max_rel_err": 0.0}
    for name, x in inputs.items():
        size = np.asarray(x).size
        idx = range(size) if indices is None or name not in indices else indices[name]
        errs = []
        for i in idx:
            num = (value(name, i, h) - value(name, i, -h)) / (2 * h)
            a = analytic[name][i]
            errs.append(np.abs(a - num) / max(np.abs(a), np.abs(num), floor))
        worst = float(max(errs)) if errs else 0.0
        report["per_input"][name] = worst
        report["max_rel_err"] = max(report["max_rel_err"], worst)
    report["passed"] = report["max_rel_err"] < tol
    return report


# ---------------------------------------------------------------- checkpoint file

_MAGIC = b"GNIO"
_VERSION = 1


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named float64 arrays to the flat little-endian checkpoint format."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(arrays))]
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        chunks.append(a.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a GNIO checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        count_el = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=count_el, offset=off).reshape(dims).astype(np.float64)
        off += 8 * count_el
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out
