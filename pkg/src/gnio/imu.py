"""IMU / ground-truth data model, gravity-aligned windowing and CSV I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rotations import quat_to_rot, rz, rz_batch, slerp, yaw_of

IMU_HEADER = "t,wx,wy,wz,ax,ay,az"
GT_HEADER = "t,px,py,pz,qw,qx,qy,qz"
GRAVITY = np.array([0.0, 0.0, -9.81])
STATIONARY_SPEED = 1e-2  # m/s, ground-truth speed below which a window counts as stationary


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class PoseSample:
    t: float
    p: np.ndarray
    q: np.ndarray


@dataclass
class Sequence:
    """One recording: IMU samples and ground-truth poses on the same timeline.

    Arrays: ``t`` (n,), ``gyro``/``accel`` (n, 3) body-frame, ``gt_p`` (n, 3)
    world-frame and ``gt_q`` (n, 4) body-to-world quaternions (w, x, y, z).
    """

    rate: float
    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    gt_p: np.ndarray
    gt_q: np.ndarray
    bias_gt: tuple[np.ndarray, np.ndarray] | None = None
    name: str = ""
    gt_v: np.ndarray | None = None  # analytic velocity when known; not part of the CSV contract
    _gt_R: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.t)
        for label, arr, width in (("gyro", self.gyro, 3), ("accel", self.accel, 3),
                                  ("gt_p", self.gt_p, 3), ("gt_q", self.gt_q, 4)):
            if arr.shape != (n, width):
                raise ValueError(f"sequence {label} has shape {arr.shape}, expected ({n}, {width})")
        if n > 1:
            dt = np.diff(self.t)
            if np.any(dt <= 0):
                raise ValueError("sequence timestamps must be strictly increasing")
            if np.max(np.abs(dt - 1.0 / self.rate)) > 1e-6:
                raise ValueError(f"IMU timestamps deviate from declared rate {self.rate} Hz by more than 1e-6 s")
        for arr in (self.gyro, self.accel, self.gt_p, self.gt_q):
            if not np.all(np.isfinite(arr)):
                raise ValueError("sequence contains non-finite values")
        if np.max(np.abs(np.linalg.norm(self.gt_q, axis=1) - 1.0), initial=0.0) > 1e-9:
            raise ValueError("ground-truth quaternions must be unit norm within 1e-9")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def duration(self) -> float:
        return len(self.t) / self.rate

    @property
    def gt_R(self) -> np.ndarray:
        if self._gt_R is None:
            self._gt_R = quat_to_rot(self.gt_q)
        return self._gt_R

    def imu_sample(self, i: int) -> ImuSample:
        return ImuSample(float(self.t[i]), self.gyro[i], self.accel[i])

    def pose_sample(self, i: int) -> PoseSample:
        return PoseSample(float(self.t[i]), self.gt_p[i], self.gt_q[i])

    def bias_or_zero(self) -> tuple[np.ndarray, np.ndarray]:
        if self.bias_gt is None:
            return np.zeros(3), np.zeros(3)
        return self.bias_gt


@dataclass(frozen=True)
class Window:
    X: np.ndarray          # (N, 6) rows [a, w] after alignment
    d_gt: np.ndarray       # (3,) displacement in the yaw frame of the window start
    yaw: float             # alignment frame heading
    t_start: float
    t_end: float
    start_index: int
    stationary: bool = False


# ----------------------------------------------------------------------------- alignment

def _check_rotation(R: np.ndarray) -> None:
    eye = np.broadcast_to(np.eye(3), R.shape)
    err = np.abs(R @ np.swapaxes(R, -1, -2) - eye).max()
    if err > 1e-6:
        raise ValueError(f"rotation is not orthonormal (|R R^T - I| = {err:.2e})")


def gravity_align(m: np.ndarray, R_wb: np.ndarray, bias=(None, None), R_ref: np.ndarray | None = None) -> np.ndarray:
    """Rotate a block of raw ``[a, w]`` rows into the yaw-free gravity frame.

    ``R_wb`` is either one body-to-world rotation or one per row. The alignment
    rotation of row i is ``Rz(yaw_ref)^T R_wb[i]``, where the reference heading is
    taken from ``R_ref`` (default: ``R_wb`` itself, or its first row). For a single
    rotation this keeps only roll and pitch. ``bias`` is ``(b_g, b_a)``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != 6:
        raise ValueError(f"expected (N, 6) IMU block, got {m.shape}")
    R_wb = np.asarray(R_wb, dtype=np.float64)
    _check_rotation(R_wb)
    bg = np.zeros(3) if bias[0] is None else np.asarray(bias[0], dtype=np.float64)
    ba = np.zeros(3) if bias[1] is None else np.asarray(bias[1], dtype=np.float64)
    if not (np.all(np.isfinite(bg)) and np.all(np.isfinite(ba))):
        raise ValueError("bias must be finite")
    if R_ref is None:
        R_ref = R_wb if R_wb.ndim == 2 else R_wb[0]
    R_align = rz(-float(yaw_of(R_ref))) @ R_wb
    a = m[:, :3] - ba
    w = m[:, 3:] - bg
    if R_align.ndim == 2:
        return np.hstack([a @ R_align.T, w @ R_align.T])
    return np.hstack([np.einsum("nij,nj->ni", R_align, a), np.einsum("nij,nj->ni", R_align, w)])


# ----------------------------------------------------------------------------- targets

def interpolate_position(t_src: np.ndarray, p_src: np.ndarray, t_query, rate: float) -> np.ndarray:
    """Linear interpolation; extrapolates at most one sample period past either end."""
    tq = np.atleast_1d(np.asarray(t_query, dtype=np.float64))
    period = 1.0 / rate
    if np.any(tq < t_src[0] - period - 1e-9) or np.any(tq > t_src[-1] + period + 1e-9):
        raise ValueError("ground truth does not cover the requested time (gap > 1 sample period)")
    out = np.column_stack([np.interp(tq, t_src, p_src[:, k]) for k in range(p_src.shape[1])])
    if len(t_src) > 1:
        hi = tq > t_src[-1]
        if np.any(hi):
            vel = (p_src[-1] - p_src[-2]) / (t_src[-1] - t_src[-2])
            out[hi] = p_src[-1] + np.outer(tq[hi] - t_src[-1], vel)
        lo = tq < t_src[0]
        if np.any(lo):
            vel = (p_src[1] - p_src[0]) / (t_src[1] - t_src[0])
            out[lo] = p_src[0] + np.outer(tq[lo] - t_src[0], vel)
    return out


def compute_target(seq: Sequence, t_start: float, t_end: float, yaw: float | None = None) -> np.ndarray:
    """Ground-truth displacement over [t_start, t_end] in the start yaw frame.

    ``yaw`` defaults to the heading of the interpolated ground-truth orientation
    at ``t_start``.
    """
    p = interpolate_position(seq.t, seq.gt_p, [t_start, t_end], seq.rate)
    if yaw is None:
        yaw = float(yaw_of(quat_to_rot(slerp(seq.t, seq.gt_q, [t_start])[0])))
    return rz(yaw).T @ (p[1] - p[0])


# ----------------------------------------------------------------------------- windows

def window_params(rate: float, duration: float = 1.0, stride: float = 0.1) -> tuple[int, int]:
    n, s = rate * duration, rate * stride
    if abs(n - round(n)) > 1e-9 or abs(s - round(s)) > 1e-9:
        raise ValueError(f"rate x duration ({n}) and rate x stride ({s}) must be integers")
    n, s = int(round(n)), int(round(s))
    if n < 1 or s < 1:
        raise ValueError("window length and stride must be at least one sample")
    return n, s


def window_starts(n_samples: int, N: int, S: int) -> range:
    if n_samples < N:
        raise ValueError(f"sequence of {n_samples} samples is shorter than one window ({N})")
    return range(0, n_samples - N + 1, S)


def window_stream(seq: Sequence, duration: float = 1.0, stride: float = 0.1,
                  bias=None) -> list[Window]:
    """Slice ``seq`` into gravity-aligned windows using ground-truth orientation.

    Window k holds samples ``[kS, kS + N)`` and targets the displacement over
    ``[t[kS], t[kS] + N / rate]``.
    """
    if len(seq) == 0:
        raise ValueError("empty sequence")
    N, S = window_params(seq.rate, duration, stride)
    starts = window_starts(len(seq), N, S)
    bg, ba = seq.bias_or_zero() if bias is None else bias
    R = seq.gt_R
    # samples rotated into the world frame once; each window then removes its start heading
    a_w = np.einsum("nij,nj->ni", R, seq.accel - ba)
    w_w = np.einsum("nij,nj->ni", R, seq.gyro - bg)
    yaws = yaw_of(R)
    speed = np.zeros(len(seq))
    speed[1:] = np.linalg.norm(np.diff(seq.gt_p, axis=0), axis=1) * seq.rate
    t_end_all = seq.t[np.array(list(starts))] + N / seq.rate
    p_end = interpolate_position(seq.t, seq.gt_p, t_end_all, seq.rate)
    out = []
    for k, s in enumerate(starts):
        yaw = float(yaws[s])
        Rg = rz(yaw)
        X = np.hstack([a_w[s:s + N] @ Rg, w_w[s:s + N] @ Rg])
        d = Rg.T @ (p_end[k] - seq.gt_p[s])
        stationary = bool(speed[s + 1:s + N].max(initial=0.0) < STATIONARY_SPEED
                          and np.linalg.norm(d) < STATIONARY_SPEED)
        out.append(Window(X, d, yaw, float(seq.t[s]), float(t_end_all[k]), s, stationary))
    return out


def stack_windows(windows: list[Window]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(X (n, N, 6), d_gt (n, 3), stationary (n,)) arrays for training."""
    X = np.stack([w.X for w in windows])
    Y = np.stack([w.d_gt for w in windows])
    st = np.array([w.stationary for w in windows], dtype=bool)
    return X, Y, st


# ----------------------------------------------------------------------------- CSV I/O

def _write_csv(path: Path, header: str, cols: np.ndarray) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        np.savetxt(fh, cols, delimiter=",", fmt="%.17g")


def _read_csv(path: Path, header: str) -> np.ndarray:
    with open(path) as fh:
        first = fh.readline().strip()
        if first != header:
            raise ValueError(f"{path}: expected header '{header}', found '{first}'")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        data = data.reshape(0, len(header.split(",")))
    return data


def save_sequence(seq: Sequence, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_csv(d / "imu.csv", IMU_HEADER, np.column_stack([seq.t, seq.gyro, seq.accel]))
    _write_csv(d / "gt.csv", GT_HEADER, np.column_stack([seq.t, seq.gt_p, seq.gt_q]))
    meta = {"rate": seq.rate}
    if seq.bias_gt is not None:
        meta["bias_gt"] = {"bg": [float(x) for x in seq.bias_gt[0]], "ba": [float(x) for x in seq.bias_gt[1]]}
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_sequence(directory: str | Path) -> Sequence:
    d = Path(directory)
    imu = _read_csv(d / "imu.csv", IMU_HEADER)
    gt = _read_csv(d / "gt.csv", GT_HEADER)
    if len(imu) != len(gt) or not np.array_equal(imu[:, 0], gt[:, 0]):
        raise ValueError(f"{d}: IMU and ground-truth timelines differ")
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
    rate = meta.get("rate")
    if rate is None:
        rate = float(round(1.0 / np.median(np.diff(imu[:, 0]))))
    bias = None
    if "bias_gt" in meta:
        bias = (np.asarray(meta["bias_gt"]["bg"], dtype=np.float64), np.asarray(meta["bias_gt"]["ba"], dtype=np.float64))
    q = gt[:, 4:8]
    norms = np.linalg.norm(q, axis=1)
    if np.max(np.abs(norms - 1.0), initial=0.0) > 1e-6:
        raise ValueError(f"{d}: quaternions are not unit norm")
    if np.max(np.abs(norms - 1.0), initial=0.0) > 1e-9:
        q = q / norms[:, None]
    return Sequence(rate=rate, t=imu[:, 0], gyro=imu[:, 1:4], accel=imu[:, 4:7],
                    gt_p=gt[:, 1:4], gt_q=q, bias_gt=bias, name=d.name)


def load_dataset(directory: str | Path) -> list[Sequence]:
    """A single sequence directory, or a directory of sequence subdirectories (sorted)."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory not found: {d}")
    if (d / "imu.csv").exists():
        return [load_sequence(d)]
    seqs = [load_sequence(sub) for sub in sorted(d.iterdir()) if (sub / "imu.csv").exists()]
    if not seqs:
        raise FileNotFoundError(f"no sequences (imu.csv + gt.csv) under {d}")
    return seqs


def rotate_sequence_yaw(seq: Sequence, angle: float) -> Sequence:
    """Same motion with the whole world frame turned by ``angle`` about z."""
    from .rotations import rot_to_quat

    Rz_ = rz(angle)
    R = Rz_ @ seq.gt_R
    return Sequence(rate=seq.rate, t=seq.t.copy(), gyro=seq.gyro.copy(), accel=seq.accel.copy(),
                    gt_p=seq.gt_p @ Rz_.T, gt_q=rot_to_quat(R), bias_gt=seq.bias_gt, name=seq.name)


__all__ = [
    "GRAVITY", "ImuSample", "PoseSample", "Sequence", "Window", "gravity_align", "compute_target",
    "window_stream", "window_params", "window_starts", "stack_windows", "save_sequence",
    "load_sequence", "load_dataset", "interpolate_position", "rotate_sequence_yaw", "rz_batch",
]
