"""Trajectory alignment, ATE/RMSE and output files (metrics JSON, CSVs, SVG overlay)."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .imu import GT_HEADER, Sequence
from .rotations import quat_to_rot, rot_to_quat, rz, slerp, yaw_of


@dataclass
class Trajectory:
    """Timestamped positions and unit quaternions (w, x, y, z)."""

    t: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1, 4)
        if not (len(self.t) == len(self.p) == len(self.q)):
            raise ValueError("trajectory arrays have different lengths")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rot(self.q)

    @classmethod
    def from_sequence(cls, seq: Sequence) -> "Trajectory":
        return cls(seq.t, seq.gt_p, seq.gt_q)

    def interpolate(self, t_query) -> "Trajectory":
        """Linear positions and slerped attitudes at ``t_query`` (must lie inside the time range)."""
        tq = np.asarray(t_query, dtype=np.float64)
        if len(tq) == 0:
            raise ValueError("empty overlap between trajectories")
        if tq[0] < self.t[0] - 1e-9 or tq[-1] > self.t[-1] + 1e-9:
            raise ValueError("query times outside the trajectory time range")
        tq_c = np.clip(tq, self.t[0], self.t[-1])
        p = np.column_stack([np.interp(tq_c, self.t, self.p[:, i]) for i in range(3)])
        q = self.q[[0]].repeat(len(tq), 0) if len(self.t) == 1 else slerp(self.t, self.q, tq_c)
        return Trajectory(tq, p, q)


@dataclass
class MetricReport:
    ate_m: float
    rmse_m: float
    duration_s: float
    n: int
    config_hash: str = ""

    def __post_init__(self):
        if self.ate_m < 0 or self.rmse_m < 0:
            raise ValueError("metrics must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(config) -> str:
    """Short fingerprint of a JSON-serializable configuration."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def synchronize(est: Trajectory, gt: Trajectory) -> tuple[Trajectory, Trajectory]:
    """Estimate interpolated onto the ground-truth timestamps of the overlapping span."""
    lo, hi = max(est.t[0], gt.t[0]), min(est.t[-1], gt.t[-1])
    keep = (gt.t >= lo - 1e-9) & (gt.t <= hi + 1e-9)
    if not np.any(keep):
        raise ValueError("estimate and ground truth do not overlap in time")
    g = Trajectory(gt.t[keep], gt.p[keep], gt.q[keep])
    return est.interpolate(g.t), g


def _apply(traj: Trajectory, R: np.ndarray, p_from: np.ndarray, p_to: np.ndarray) -> Trajectory:
    p = (traj.p - p_from) @ R.T + p_to
    q = rot_to_quat(R @ traj.R)
    return Trajectory(traj.t.copy(), p, q)


def align_first_pose(est: Trajectory, gt: Trajectory) -> Trajectory:
    """Translate and yaw-rotate ``est`` so its first pose matches gt's position and heading."""
    if len(est) == 0 or len(gt) == 0:
        raise ValueError("empty trajectory")
    dyaw = float(yaw_of(gt.R[0]) - yaw_of(est.R[0]))
    return _apply(est, rz(dyaw), est.p[0], gt.p[0])


def align_umeyama(est: Trajectory, gt: Trajectory) -> Trajectory:
    """Least-squares rigid alignment of positions (rotation and translation, no scale)."""
    if len(est) != len(gt):
        raise ValueError("umeyama alignment needs synchronized trajectories")
    mu_e, mu_g = est.p.mean(0), gt.p.mean(0)
    C = (gt.p - mu_g).T @ (est.p - mu_e)
    U, _, Vt = np.linalg.svd(C)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return _apply(est, U @ D @ Vt, mu_e, mu_g)


def ate(est: Trajectory, gt: Trajectory) -> float:
    """Root mean square of per-timestamp 3D position errors."""
    if len(est) != len(gt):
        raise ValueError(f"length mismatch: {len(est)} vs {len(gt)}")
    if len(est) == 0:
        raise ValueError("empty trajectory")
    return float(np.sqrt(np.mean(np.sum((est.p - gt.p) ** 2, axis=1))))


# Both tables report RMS position error after first-pose alignment.
rmse = ate


def evaluate(est: Trajectory, gt: Trajectory, align: str = "first_pose", config=None) -> MetricReport:
    e, g = synchronize(est, gt)
    if align == "first_pose":
        e = align_first_pose(e, g)
    elif align == "umeyama":
        e = align_umeyama(e, g)
    elif align != "none":
        raise ValueError(f"unknown alignment {align!r}")
    err = ate(e, g)
    return MetricReport(ate_m=err, rmse_m=rmse(e, g), duration_s=float(g.t[-1] - g.t[0]), n=len(g),
                        config_hash=config_hash(config) if config is not None else "")


# ----------------------------------------------------------------------------- output files

_COLORS = ("#000000", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e")


def write_trajectory_csv(traj: Trajectory, path: str | Path) -> None:
    cols = np.column_stack([traj.t, traj.p, traj.q])
    lines = [GT_HEADER] + [",".join(f"{v:.17g}" for v in row) for row in cols]
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def _svg(trajectories: dict[str, Trajectory]) -> str:
    """Top-down overlay in centimetres (x right, y up) with legend and scale bar."""
    pts = np.vstack([tr.p[:, :2] for tr in trajectories.values()]) * 100.0
    lo, hi = pts.min(0), pts.max(0)
    span = max(float(np.max(hi - lo)), 100.0)
    pad = 0.08 * span
    x0, y0 = lo[0] - pad, -(hi[1] + pad)
    w, h = float(hi[0] - lo[0]) + 2 * pad, float(hi[1] - lo[1]) + 2 * pad + 0.12 * span
    stroke = span / 400.0
    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{x0:.1f} {y0:.1f} {w:.1f} {h:.1f}">',
           f'<rect x="{x0:.1f}" y="{y0:.1f}" width="{w:.1f}" height="{h:.1f}" fill="#ffffff"/>']
    for i, (name, tr) in enumerate(trajectories.items()):
        xy = tr.p[:, :2] * 100.0
        coords = " ".join(f"{x:.1f},{-y:.1f}" for x, y in xy)
        out.append(f'<polyline id="{name}" fill="none" stroke="{_COLORS[i % len(_COLORS)]}" '
                   f'stroke-width="{stroke:.2f}" points="{coords}"/>')
    font = span / 40.0
    lx, ly = x0 + pad / 2, y0 + h - 0.1 * span
    for i, name in enumerate(trajectories):
        yy = ly + i * font * 1.3
        out.append(f'<line x1="{lx:.1f}" y1="{yy:.1f}" x2="{lx + 3 * font:.1f}" y2="{yy:.1f}" '
                   f'stroke="{_COLORS[i % len(_COLORS)]}" stroke-width="{stroke * 2:.2f}"/>')
        out.append(f'<text x="{lx + 3.5 * font:.1f}" y="{yy + font / 3:.1f}" font-size="{font:.1f}">{name}</text>')
    # scale bar: largest power of ten metres not exceeding a quarter of the span
    bar_m = 10.0 ** np.floor(np.log10(max(span / 400.0, 1e-3)))
    bx, by = x0 + w - pad / 2 - bar_m * 100, y0 + h - 0.05 * span
    out.append(f'<line id="scale-bar" x1="{bx:.1f}" y1="{by:.1f}" x2="{bx + bar_m * 100:.1f}" y2="{by:.1f}" '
               f'stroke="#000000" stroke-width="{stroke * 2:.2f}"/>')
    out.append(f'<text x="{bx:.1f}" y="{by - font / 2:.1f}" font-size="{font:.1f}">{bar_m:g} m</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_outputs(report, trajectories: dict[str, Trajectory] | None, path: str | Path) -> list[Path]:
    """Write metrics.json, one CSV per trajectory and trajectory.svg into ``path``."""
    out = Path(path)
    written: list[Path] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        payload = report.to_dict() if hasattr(report, "to_dict") else report
        f = out / "metrics.json"
        f.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", newline="\n")
        written.append(f)
        if trajectories:
            for name, tr in trajectories.items():
                f = out / f"{name}.csv"
                write_trajectory_csv(tr, f)
                written.append(f)
            f = out / "trajectory.svg"
            f.write_text(_svg(trajectories), newline="\n")
            written.append(f)
    except OSError as e:
        raise OSError(f"cannot write outputs to {out}: {e}") from e
    return written


def load_trajectory_csv(path: str | Path) -> Trajectory:
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as e:
        raise OSError(f"cannot read trajectory {path}: {e}") from e
    return Trajectory(data[:, 0], data[:, 1:4], data[:, 4:8])
