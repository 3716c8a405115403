"""Stochastic-cloning error-state EKF fed by relative-displacement measurements.

Error state: [dtheta, dv, dp, dbg, dba] (15) followed by [dtheta_i, dp_i] per clone.
Rotation errors are left-multiplicative in the world frame: R = Exp(dtheta) R_hat.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .imu import GRAVITY, Sequence, compute_target, gravity_align, window_params, window_starts
from .rotations import (is_gimbal_degenerate, orthonormalize, quat_to_rot, rot_to_quat, rz,
                        skew, so3_exp, so3_right_jacobian, yaw_gradient, yaw_of)

log = logging.getLogger(__name__)

CORE = 15
TH, V, P, BG, BA = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))
_EZ = skew([0.0, 0.0, 1.0])


@dataclass
class NoiseParams:
    """Continuous-time densities and initial standard deviations."""

    gyro_noise: float = 2e-4        # rad/s/sqrt(Hz)
    accel_noise: float = 2e-3       # m/s^2/sqrt(Hz)
    gyro_bias_rw: float = 1e-5      # rad/s^2/sqrt(Hz)
    accel_bias_rw: float = 1e-4     # m/s^3/sqrt(Hz)
    init_theta: float = 1e-3        # rad
    init_v: float = 1e-2            # m/s
    init_p: float = 1e-4            # m
    init_bg: float = 1e-3           # rad/s
    init_ba: float = 5e-2           # m/s^2

    def __post_init__(self):
        if any(getattr(self, f.name) < 0 for f in fields(self)):
            raise ValueError("noise parameters must be nonnegative")

    @classmethod
    def from_sample_std(cls, sigma_g: float, sigma_a: float, rate: float, **kw) -> "NoiseParams":
        """Densities matching per-sample white-noise standard deviations at ``rate``."""
        return cls(gyro_noise=sigma_g / np.sqrt(rate), accel_noise=sigma_a / np.sqrt(rate), **kw)


@dataclass
class FilterConfig:
    noise: NoiseParams = field(default_factory=NoiseParams)
    clone_capacity: int = 10
    window: float = 1.0             # s
    cadence: float = 0.1            # s between updates
    var_floor: float = 1e-6         # m^2, lower bound on network variances
    net_sigma_scale: float = 4.0    # inflation of network covariances (overlapping windows are correlated)
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    max_condition: float = 1e12

    @classmethod
    def from_dict(cls, d: dict) -> "FilterConfig":
        d = dict(d)
        valid = {f.name for f in fields(cls)}
        unknown = set(d) - valid
        if unknown:
            raise ValueError(f"unknown filter config keys {sorted(unknown)}; valid keys: {sorted(valid)}")
        if "noise" in d:
            nvalid = {f.name for f in fields(NoiseParams)}
            bad = set(d["noise"]) - nvalid
            if bad:
                raise ValueError(f"unknown noise keys {sorted(bad)}; valid keys: {sorted(nvalid)}")
            d["noise"] = NoiseParams(**d["noise"])
        if "gravity" in d:
            d["gravity"] = tuple(d["gravity"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NavState:
    p: np.ndarray
    v: np.ndarray
    R: np.ndarray
    bg: np.ndarray
    ba: np.ndarray
    t: float = 0.0

    def copy(self) -> "NavState":
        return NavState(self.p.copy(), self.v.copy(), self.R.copy(), self.bg.copy(), self.ba.copy(), self.t)


@dataclass
class CloneState:
    p: np.ndarray
    R: np.ndarray
    t: float
    tag: int = -1


def yaw_rotation(R: np.ndarray) -> np.ndarray:
    """Rotation about world z by the heading of ``R`` (identity heading when degenerate)."""
    if is_gimbal_degenerate(R):
        log.warning("yaw_rotation: pitch near +-90 deg, heading undefined; using 0")
    return rz(float(yaw_of(R)))


class CloningEkf:
    """Strapdown propagation, pose cloning and displacement updates."""

    def __init__(self, state: NavState, config: FilterConfig | None = None, P0: np.ndarray | None = None):
        self.cfg = config or FilterConfig()
        self.x = state.copy()
        self.g = np.asarray(self.cfg.gravity, dtype=np.float64)
        n = self.cfg.noise
        if P0 is None:
            P0 = np.diag(np.concatenate([np.full(3, n.init_theta**2), np.full(3, n.init_v**2),
                                         np.full(3, n.init_p**2), np.full(3, n.init_bg**2),
                                         np.full(3, n.init_ba**2)]))
        self.P = np.array(P0, dtype=np.float64)
        self.clones: list[CloneState] = []
        self.rejected = 0
        self._tag = 0

    @property
    def dim(self) -> int:
        return CORE + 6 * len(self.clones)

    def _clone_slices(self, idx: int) -> tuple[slice, slice]:
        b = CORE + 6 * idx
        return slice(b, b + 3), slice(b + 3, b + 6)

    def _symmetrize(self) -> None:
        self.P = 0.5 * (self.P + self.P.T)

    # ------------------------------------------------------------------ propagation

    def propagate(self, gyro, accel, dt: float) -> None:
        """One strapdown step over ``dt`` with the sample held constant.

        Specific force is rotated with the mid-interval attitude, which makes the
        step second-order accurate when the caller passes interval-averaged samples.
        """
        if dt <= 0:
            raise ValueError(f"propagate: dt must be positive, got {dt}")
        x = self.x
        R = x.R
        w = np.asarray(gyro, dtype=np.float64) - x.bg
        a = np.asarray(accel, dtype=np.float64) - x.ba
        R_mid = R @ so3_exp(0.5 * w * dt)
        Ra = R_mid @ a
        aw = Ra + self.g
        x.p = x.p + x.v * dt + 0.5 * aw * dt * dt
        x.v = x.v + aw * dt
        x.R = orthonormalize(R @ so3_exp(w * dt))
        x.t += dt

        F = np.eye(CORE)
        F[TH, BG] = -R @ so3_right_jacobian(-w * dt) * dt   # = -R J_l(w dt) dt
        F[V, TH] = -skew(Ra) * dt
        F[V, BA] = -R_mid * dt
        F[P, V] = np.eye(3) * dt
        F[P, TH] = -0.5 * skew(Ra) * dt * dt
        F[P, BA] = -0.5 * R_mid * dt * dt
        # the mid-interval attitude makes the specific force depend on the gyro bias
        dRa_dbg = 0.5 * R_mid @ skew(a) @ so3_right_jacobian(0.5 * w * dt) * dt
        F[V, BG] = dRa_dbg * dt
        F[P, BG] = 0.5 * dRa_dbg * dt * dt
        nz = self.cfg.noise
        q = np.concatenate([np.full(3, nz.gyro_noise**2), np.full(3, nz.accel_noise**2), np.zeros(3),
                            np.full(3, nz.gyro_bias_rw**2), np.full(3, nz.accel_bias_rw**2)]) * dt
        cov = self.P
        Pcc = F @ cov[:CORE, :CORE] @ F.T
        Pcc[np.diag_indices(CORE)] += q
        cov[:CORE, :CORE] = Pcc
        if cov.shape[0] > CORE:
            cov[:CORE, CORE:] = F @ cov[:CORE, CORE:]
            cov[CORE:, :CORE] = cov[:CORE, CORE:].T
        self._symmetrize()

    # ------------------------------------------------------------------ cloning

    def clone(self) -> int:
        """Append a copy of the current pose; returns its tag."""
        if len(self.clones) >= self.cfg.clone_capacity:
            self.marginalize(0)
        n = self.dim
        J = np.zeros((n + 6, n))
        J[:n, :n] = np.eye(n)
        J[n:n + 3, TH] = np.eye(3)
        J[n + 3:n + 6, P] = np.eye(3)
        self.P = J @ self.P @ J.T
        self._symmetrize()
        self._tag += 1
        self.clones.append(CloneState(self.x.p.copy(), self.x.R.copy(), self.x.t, self._tag))
        return self._tag

    def clone_index(self, tag: int) -> int:
        for i, c in enumerate(self.clones):
            if c.tag == tag:
                return i
        raise KeyError(f"clone {tag} not present")

    def marginalize(self, idx: int) -> None:
        th, pp = self._clone_slices(idx)
        keep = np.ones(self.dim, dtype=bool)
        keep[th] = False
        keep[pp] = False
        self.P = self.P[np.ix_(keep, keep)]
        del self.clones[idx]

    # ------------------------------------------------------------------ update

    def measurement_model(self, idx: int) -> tuple[np.ndarray, np.ndarray]:
        """Predicted displacement h = Rz(yaw_i)^T (p - p_i) and its Jacobian dh/d(error state)."""
        c = self.clones[idx]
        Rg = yaw_rotation(c.R)
        h = Rg.T @ (self.x.p - c.p)
        H = np.zeros((3, self.dim))
        th, pp = self._clone_slices(idx)
        H[:, P] = Rg.T
        H[:, pp] = -Rg.T
        # d/dyaw of Rz(yaw)^T dp = -[e_z]x Rz(yaw)^T dp, chained through the clone heading
        H[:, th] = np.outer(-_EZ @ h, yaw_gradient(c.R))
        return h, H

    def update(self, tag: int, d_hat, sigma, marginalize: bool = True) -> bool:
        """Fuse a displacement measured since clone ``tag``. Returns False if rejected."""
        idx = self.clone_index(tag)
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.ndim == 1:
            sigma = np.diag(sigma)
        sigma = sigma.copy()
        sigma[np.diag_indices(3)] = np.maximum(np.diag(sigma), self.cfg.var_floor)
        h, H = self.measurement_model(idx)
        r = np.asarray(d_hat, dtype=np.float64) - h
        PHt = self.P @ H.T
        S = H @ PHt + sigma
        S = 0.5 * (S + S.T)
        if not (np.all(np.isfinite(S)) and np.all(np.isfinite(r))) or np.linalg.cond(S) > self.cfg.max_condition:
            log.debug("update rejected: non-finite or ill-conditioned innovation at t=%.3f", self.x.t)
            self.rejected += 1
            if marginalize:
                self.marginalize(idx)
            return False
        K = np.linalg.solve(S, PHt.T).T
        dx = K @ r
        A = np.eye(self.dim) - K @ H
        self.P = A @ self.P @ A.T + K @ sigma @ K.T
        self._symmetrize()
        self.inject(dx)
        if marginalize:
            self.marginalize(self.clone_index(tag))
        self.last_residual = r
        self.last_S = S
        return True

    def inject(self, dx: np.ndarray) -> None:
        x = self.x
        x.R = orthonormalize(so3_exp(dx[TH]) @ x.R)
        x.v = x.v + dx[V]
        x.p = x.p + dx[P]
        x.bg = x.bg + dx[BG]
        x.ba = x.ba + dx[BA]
        for i, c in enumerate(self.clones):
            th, pp = self._clone_slices(i)
            c.R = orthonormalize(so3_exp(dx[th]) @ c.R)
            c.p = c.p + dx[pp]

    def covariance_health(self) -> tuple[float, float]:
        """(max |P - P^T|, smallest eigenvalue)."""
        return float(np.max(np.abs(self.P - self.P.T))), float(np.linalg.eigvalsh(self.P).min())


# ----------------------------------------------------------------------------- measurement sources

class NetworkMeasurement:
    """Runs the network on a filter-aligned window; covariance scaled by ``sigma_scale``."""

    def __init__(self, net, sigma_scale: float = 1.0):
        self.net = net
        self.sigma_scale = float(sigma_scale)

    def __call__(self, seq: Sequence, i0: int, i1: int, R_hist: np.ndarray, bias, R_ref: np.ndarray):
        m = np.hstack([seq.accel[i0:i1], seq.gyro[i0:i1]])
        X = gravity_align(m, R_hist[i0:i1], bias, R_ref=R_ref)
        d, sig = self.net.predict(X[None])
        return d[0], sig[0] * self.sigma_scale


class OracleMeasurement:
    """Ground-truth displacement in the true start-heading frame, optionally perturbed."""

    def __init__(self, variance: float = 1e-6, noise_std: float = 0.0, seed: int = 0):
        self.variance = variance
        self.noise_std = noise_std
        self.rng = np.random.default_rng(seed)

    def __call__(self, seq: Sequence, i0: int, i1: int, R_hist, bias, R_ref):
        t0 = float(seq.t[i0])
        d = compute_target(seq, t0, t0 + (i1 - i0) / seq.rate, yaw=float(yaw_of(seq.gt_R[i0])))
        if self.noise_std:
            d = d + self.noise_std * self.rng.standard_normal(3)
        return d, np.eye(3) * self.variance


# ----------------------------------------------------------------------------- full loop

@dataclass
class FilterRun:
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    updates: list[dict]
    max_asymmetry: float = 0.0
    min_eigenvalue: float = np.inf
    pos_cov: np.ndarray | None = None
    filter: CloningEkf | None = None


def initial_state(seq: Sequence) -> NavState:
    """Ground-truth pose and velocity at t0, zero biases."""
    if seq.gt_v is not None:
        v0 = np.array(seq.gt_v[0], dtype=np.float64)
    else:
        p = seq.gt_p
        v0 = (-3 * p[0] + 4 * p[1] - p[2]) * seq.rate / 2.0
    return NavState(seq.gt_p[0].copy(), v0, seq.gt_R[0].copy(), np.zeros(3), np.zeros(3), float(seq.t[0]))


def run_filter(seq: Sequence, measure=None, config: FilterConfig | None = None,
               monitor: bool = False, P0: np.ndarray | None = None,
               init: NavState | None = None) -> FilterRun:
    """Propagate every IMU sample, clone at window starts, update at window ends.

    ``measure`` is a network (wrapped with the configured covariance inflation),
    a callable ``(seq, i0, i1, R_hist, bias, R_ref) -> (d, Sigma)``, or ``None``
    for pure dead reckoning. With ``monitor`` the covariance symmetry and
    smallest eigenvalue are tracked after every operation.
    """
    cfg = config or FilterConfig()
    if hasattr(measure, "predict"):
        measure = NetworkMeasurement(measure, cfg.net_sigma_scale)
    n = len(seq)
    N, S = window_params(seq.rate, cfg.window, cfg.cadence)
    starts = set(window_starts(n, N, S)) if measure is not None else set()
    starts = {s for s in starts if s + N <= n - 1}
    ekf = CloningEkf(init or initial_state(seq), cfg, P0)
    R_hist = np.zeros((n, 3, 3))
    p_out, v_out, R_out = np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3, 3))
    pos_cov = np.zeros((n, 3, 3))
    pending: dict[int, int] = {}   # window end index -> clone tag
    updates: list[dict] = []
    asym, min_eig = 0.0, np.inf

    def check():
        nonlocal asym, min_eig
        a, e = ekf.covariance_health()
        asym, min_eig = max(asym, a), min(min_eig, e)

    for k in range(n):
        if k in pending:
            i0 = k - N
            tag = pending.pop(k)
            d, sig = measure(seq, i0, k, R_hist, (ekf.x.bg, ekf.x.ba), ekf.clones[ekf.clone_index(tag)].R)
            ok = ekf.update(tag, d, sig)
            updates.append({"t": float(seq.t[k]), "accepted": ok, "d_hat": np.asarray(d).tolist(),
                            "sigma": np.diag(sig).tolist(),
                            "residual": getattr(ekf, "last_residual", np.zeros(3)).tolist()})
            if monitor:
                check()
        if k in starts:
            pending[k + N] = ekf.clone()
            if monitor:
                check()
        R_hist[k] = ekf.x.R
        p_out[k], v_out[k], R_out[k] = ekf.x.p, ekf.x.v, ekf.x.R
        pos_cov[k] = ekf.P[P, P]
        if k + 1 < n:
            # trapezoidal average over [t_k, t_k+1]
            dt = float(seq.t[k + 1] - seq.t[k])
            ekf.propagate(0.5 * (seq.gyro[k] + seq.gyro[k + 1]), 0.5 * (seq.accel[k] + seq.accel[k + 1]), dt)
        if monitor:
            check()
    if ekf.rejected:
        log.warning("%s: %d of %d updates rejected", seq.name or "sequence", ekf.rejected, len(updates))
    return FilterRun(t=seq.t.copy(), p=p_out, q=rot_to_quat(R_out), v=v_out, updates=updates,
                     max_asymmetry=asym, min_eigenvalue=min_eig, pos_cov=pos_cov, filter=ekf)


__all__ = ["NoiseParams", "FilterConfig", "NavState", "CloneState", "CloningEkf", "yaw_rotation",
           "NetworkMeasurement", "OracleMeasurement", "FilterRun", "run_filter", "initial_state",
           "GRAVITY", "quat_to_rot"]
