"""Analytic synthetic trajectories and the IMU readings they imply.

A trajectory is a chain of segments. Each segment is a closed-form function of
its local time returning world position offset, velocity, acceleration, heading
and heading rate. Where one segment ends with a different velocity or heading
than the next one starts with, a smoothstep blend is inserted so position,
velocity and heading stay continuous. The body frame is ``Rz(heading) @ R_mount``
with a constant mounting tilt.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imu import GRAVITY, Sequence
from .rotations import rot_to_quat, rx, ry, rz_batch

SEGMENT_KINDS = ("stationary", "const_vel", "sinusoid", "arc_turn", "walk")


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2 * math.pi) - math.pi


@dataclass
class _Eval:
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    yaw: np.ndarray
    yaw_rate: np.ndarray


class _Segment:
    duration: float

    def start_velocity(self, yaw0: float) -> np.ndarray:
        return self.eval(np.zeros(1), yaw0).v[0]

    def start_yaw(self, yaw0: float) -> float:
        return yaw0

    def eval(self, tau: np.ndarray, yaw0: float) -> _Eval:
        raise NotImplementedError


def _zeros(n):
    return np.zeros((n, 3))


class Stationary(_Segment):
    def __init__(self, duration):
        self.duration = duration

    def eval(self, tau, yaw0):
        n = len(tau)
        return _Eval(_zeros(n), _zeros(n), _zeros(n), np.full(n, yaw0), np.zeros(n))


class ConstVel(_Segment):
    """Constant world velocity; the body faces the horizontal direction of travel."""

    def __init__(self, duration, v):
        self.duration = duration
        self.v = np.asarray(v, dtype=np.float64)

    def start_yaw(self, yaw0):
        if np.hypot(self.v[0], self.v[1]) < 1e-9:
            return yaw0
        return math.atan2(self.v[1], self.v[0])

    def eval(self, tau, yaw0):
        n = len(tau)
        return _Eval(np.outer(tau, self.v), np.tile(self.v, (n, 1)), _zeros(n),
                     np.full(n, yaw0), np.zeros(n))


class Sinusoid(_Segment):
    """p = A sin(2 pi f t) along a world axis."""

    def __init__(self, duration, axis, amplitude, freq):
        self.duration = duration
        self.axis = np.zeros(3)
        self.axis["xyz".index(axis) if isinstance(axis, str) else int(axis)] = 1.0
        self.A = float(amplitude)
        self.w = 2 * math.pi * float(freq)

    def eval(self, tau, yaw0):
        n = len(tau)
        s, c = np.sin(self.w * tau), np.cos(self.w * tau)
        return _Eval(np.outer(self.A * s, self.axis), np.outer(self.A * self.w * c, self.axis),
                     np.outer(-self.A * self.w**2 * s, self.axis), np.full(n, yaw0), np.zeros(n))


class Walk(_Segment):
    """Planar travel at constant speed with a smoothly ramped turn rate and a gait overlay.

    The turn rate rises from zero over ``ramp`` seconds at the start and falls
    back to zero at the end, so acceleration and angular rate are continuous
    across segment joins. The gait adds forward surge, lateral sway and vertical
    bob offsets ``A c^2`` with ``c = (1 - cos(W t)) / 2`` in the heading frame;
    the step count is rounded to an even integer so each offset and its first
    two derivatives vanish at both ends.
    """

    _GL = np.polynomial.legendre.leggauss(32)

    def __init__(self, duration, speed, turn_rate=0.0, heading=None, step_freq=0.0,
                 bob=0.0, surge=0.0, sway=0.0, ramp=1.0):
        self.duration = duration
        self.speed = float(speed)
        self.turn_rate = float(turn_rate)
        self.heading = heading
        self.ramp = min(float(ramp), duration / 4.0)
        steps = 2 * round(step_freq * duration / 2.0) if step_freq > 0 else 0
        self.step_freq = steps / duration if steps else 0.0
        self.bob, self.surge, self.sway = (bob, surge, sway) if steps else (0.0, 0.0, 0.0)

    def start_yaw(self, yaw0):
        return yaw0 if self.heading is None else float(self.heading)

    def _profile(self, tau):
        """Turn-rate envelope sigma, its derivative and its integral."""
        T, r = self.duration, self.ramp
        tau = np.asarray(tau, dtype=np.float64)
        sig, dsig = np.ones_like(tau), np.zeros_like(tau)
        integ = r / 2 + (tau - r)
        head, tail = tau < r, tau > T - r
        x = tau[head] / r
        sig[head], dsig[head] = 3 * x**2 - 2 * x**3, 6 * x * (1 - x) / r
        integ[head] = r * (x**3 - 0.5 * x**4)
        y = (T - tau[tail]) / r
        sig[tail], dsig[tail] = 3 * y**2 - 2 * y**3, -6 * y * (1 - y) / r
        integ[tail] = (T - 1.5 * r) + r * (0.5 - (y**3 - 0.5 * y**4))
        return sig, dsig, integ

    def _heading(self, tau, yaw0):
        return yaw0 + self.turn_rate * self._profile(tau)[2]

    def _base_position(self, tau, yaw0):
        """speed * integral of the heading direction, by piecewise Gauss-Legendre quadrature."""
        T, r = self.duration, self.ramp
        nodes, weights = self._GL
        p = np.zeros((len(tau), 3))
        for lo, hi in ((0.0, r), (r, T - r), (T - r, T)):
            b = np.clip(tau, lo, hi)
            half = 0.5 * (b - lo)
            s = lo + half[:, None] * (nodes[None, :] + 1.0)
            psi = self._heading(s.ravel(), yaw0).reshape(s.shape)
            p[:, 0] += half * (np.cos(psi) @ weights)
            p[:, 1] += half * (np.sin(psi) @ weights)
        return self.speed * p

    def eval(self, tau, yaw0):
        tau = np.asarray(tau, dtype=np.float64)
        w = self.turn_rate
        sig, dsig, _ = self._profile(tau)
        psi = self._heading(tau, yaw0)
        dpsi, ddpsi = w * sig, w * dsig
        u = np.column_stack([np.cos(psi), np.sin(psi), np.zeros_like(psi)])
        nrm = np.column_stack([-np.sin(psi), np.cos(psi), np.zeros_like(psi)])
        col = lambda s: s[:, None]  # noqa: E731
        if abs(w) < 1e-15:
            p = self.speed * np.outer(tau, u[0] if len(tau) else np.zeros(3))
        else:
            p = self._base_position(tau, yaw0)
        v = self.speed * u
        a = col(self.speed * dpsi) * nrm

        if self.step_freq:
            def osc(amp, omega):
                c = 0.5 * (1 - np.cos(omega * tau))
                c1 = 0.5 * omega * np.sin(omega * tau)
                c2 = 0.5 * omega**2 * np.cos(omega * tau)
                return amp * c * c, 2 * amp * c * c1, 2 * amp * (c1 * c1 + c * c2)

            W = 2 * math.pi * self.step_freq
            ox, ox1, ox2 = osc(self.surge, W)
            oy, oy1, oy2 = osc(self.sway, W / 2)
            oz, oz1, oz2 = osc(self.bob, W)
            p = p + col(ox) * u + col(oy) * nrm
            p[:, 2] += oz
            v = v + col(ox1 - oy * dpsi) * u + col(ox * dpsi + oy1) * nrm
            v[:, 2] += oz1
            a = (a + col(ox2 - ox * dpsi**2 - 2 * oy1 * dpsi - oy * ddpsi) * u
                 + col(2 * ox1 * dpsi + ox * ddpsi + oy2 - oy * dpsi**2) * nrm)
            a[:, 2] += oz2
        return _Eval(p, v, a, psi, dpsi)


class ArcTurn(Walk):
    """Constant-speed circular arc continuing the current heading."""

    def __init__(self, duration, radius, speed, direction=1):
        if radius <= 0:
            raise ValueError("arc_turn radius must be positive")
        super().__init__(duration, speed, turn_rate=math.copysign(speed / radius, direction))


class Blend(_Segment):
    """Smoothstep transition of velocity and heading."""

    def __init__(self, duration, v_a, v_b, yaw_a, yaw_b):
        self.duration = duration
        self.v_a, self.dv = np.asarray(v_a), np.asarray(v_b) - np.asarray(v_a)
        self.dyaw = _wrap(yaw_b - yaw_a)

    def eval(self, tau, yaw0):
        T = self.duration
        x = tau / T
        S = 3 * x**2 - 2 * x**3
        S1 = (6 * x - 6 * x**2) / T
        intS = T * (x**3 - 0.5 * x**4)
        p = np.outer(tau, self.v_a) + np.outer(intS, self.dv)
        v = self.v_a + np.outer(S, self.dv)
        a = np.outer(S1, self.dv)
        return _Eval(p, v, a, yaw0 + self.dyaw * S, self.dyaw * S1)


def make_segment(spec: dict) -> _Segment:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    spec.pop("blend", None)
    duration = float(spec.pop("duration", spec.pop("T", 0.0)))
    if duration <= 0:
        raise ValueError(f"segment {kind!r} must have positive duration")
    if kind == "stationary":
        return Stationary(duration)
    if kind == "const_vel":
        return ConstVel(duration, spec["v"])
    if kind == "sinusoid":
        return Sinusoid(duration, spec.get("axis", "x"), spec["A"], spec["f"])
    if kind == "arc_turn":
        return ArcTurn(duration, float(spec["radius"]), float(spec["speed"]), spec.get("direction", 1))
    if kind == "walk":
        return Walk(duration, **spec)
    raise ValueError(f"unknown segment kind {kind!r}; expected one of {SEGMENT_KINDS}")


def synth_generate(segments: list[dict], noise: dict | None = None, rate: float = 100.0,
                   seed: int = 0, tilt=(0.0, 0.0), yaw0: float = 0.0, blend: float = 1.0,
                   name: str = "") -> Sequence:
    """Sample an analytic trajectory and its (noisy, biased) IMU readings.

    ``noise`` holds per-sample white-noise standard deviations ``sigma_g``
    (rad/s) and ``sigma_a`` (m/s^2) and constant biases ``bg``/``ba``. ``tilt``
    is the (roll, pitch) mounting angle in radians.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    noise = noise or {}
    sigma_g = float(noise.get("sigma_g", 0.0))
    sigma_a = float(noise.get("sigma_a", 0.0))
    bg = np.asarray(noise.get("bg", [0.0, 0.0, 0.0]), dtype=np.float64)
    ba = np.asarray(noise.get("ba", [0.0, 0.0, 0.0]), dtype=np.float64)

    # the first segment sets the initial state; later joins get a blend when needed
    chain: list[_Segment] = []
    v_end, yaw_end = None, float(yaw0)
    for spec in segments:
        seg = make_segment(spec)
        y_start = seg.start_yaw(yaw_end)
        v_start = seg.start_velocity(y_start)
        if v_end is not None and (np.max(np.abs(v_start - v_end)) > 1e-12 or abs(_wrap(y_start - yaw_end)) > 1e-12):
            chain.append(Blend(float(spec.get("blend", blend)), v_end, v_start, yaw_end, y_start))
        elif v_end is None:
            yaw0 = y_start
        chain.append(seg)
        last = seg.eval(np.array([seg.duration]), y_start)
        v_end, yaw_end = last.v[0], float(last.yaw[0])

    total = sum(s.duration for s in chain)
    n = int(round(total * rate))
    t = np.arange(n) / rate
    p, v, a = np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3))
    yaw, yaw_rate = np.zeros(n), np.zeros(n)
    p0, y0, t0 = np.zeros(3), float(yaw0), 0.0
    for seg in chain:
        y_start = seg.start_yaw(y0) if not isinstance(seg, Blend) else y0
        mask = (t >= t0 - 1e-12) & (t < t0 + seg.duration - 1e-12)
        ev = seg.eval(t[mask] - t0, y_start)
        p[mask], v[mask], a[mask] = p0 + ev.p, ev.v, ev.a
        yaw[mask], yaw_rate[mask] = ev.yaw, ev.yaw_rate
        end = seg.eval(np.array([seg.duration]), y_start)
        p0, y0, t0 = p0 + end.p[0], float(end.yaw[0]), t0 + seg.duration

    R_mount = rx(tilt[0]) @ ry(tilt[1])
    R = rz_batch(yaw) @ R_mount
    rng = np.random.default_rng(seed)
    f_world = a - GRAVITY
    accel = np.einsum("nji,nj->ni", R, f_world) + ba + sigma_a * rng.standard_normal((n, 3))
    gyro = np.outer(yaw_rate, R_mount.T @ np.array([0.0, 0.0, 1.0])) + bg + sigma_g * rng.standard_normal((n, 3))
    return Sequence(rate=float(rate), t=t, gyro=gyro, accel=accel, gt_p=p, gt_q=rot_to_quat(R),
                    bias_gt=(bg, ba), name=name, gt_v=v)


def random_segments(rng: np.random.Generator, duration: float, p_stationary: float = 0.35) -> list[dict]:
    """Mixed pedestrian-like motion: rests, straight and curved walks with a gait."""
    segs: list[dict] = []
    total = 0.0
    heading = 0.0
    while total < duration:
        if rng.random() < p_stationary:
            T = float(rng.uniform(3.0, 8.0))
            segs.append({"kind": "stationary", "duration": T})
        else:
            T = float(rng.uniform(6.0, 16.0))
            speed = float(rng.uniform(0.6, 1.8))
            turn = float(rng.choice([0.0, rng.uniform(-0.4, 0.4)]))
            heading = heading + float(rng.uniform(-1.5, 1.5))
            segs.append({
                "kind": "walk", "duration": T, "speed": speed, "turn_rate": turn, "heading": heading,
                "step_freq": 0.9 + 0.7 * speed + float(rng.uniform(-0.05, 0.05)),
                "bob": 0.02 + 0.03 * speed, "surge": 0.03 + 0.04 * speed, "sway": 0.03,
            })
            heading = heading + turn * T
        total += T + 1.0
    return segs


def random_sequence(seed: int, duration: float = 60.0, rate: float = 100.0, sigma_g: float = 2e-3,
                    sigma_a: float = 2e-2, bias_g: float = 1e-3, bias_a: float = 2e-2,
                    tilt_deg: float = 10.0, name: str = "") -> Sequence:
    """One randomized mixed-motion sequence with per-sequence bias and mounting tilt."""
    rng = np.random.default_rng(seed)
    segs = random_segments(rng, duration)
    tilt = np.deg2rad(rng.uniform(-tilt_deg, tilt_deg, size=2))
    noise = {"sigma_g": sigma_g, "sigma_a": sigma_a,
             "bg": (bias_g * rng.standard_normal(3)).tolist(),
             "ba": (bias_a * rng.standard_normal(3)).tolist()}
    return synth_generate(segs, noise, rate=rate, seed=int(rng.integers(2**31)),
                          tilt=tuple(tilt), yaw0=float(rng.uniform(-np.pi, np.pi)), name=name)


SPEC_KEYS = {"rate", "seed", "noise", "segments", "random", "tilt", "yaw0", "blend", "name"}
RANDOM_KEYS = {"count", "duration", "bias_g", "bias_a", "tilt_deg"}
NOISE_KEYS = {"sigma_g", "sigma_a", "bg", "ba"}


def generate_from_spec(spec: dict, seed: int | None = None) -> list[Sequence]:
    """Build sequences from a synthetic-spec JSON object.

    Either explicit ``segments`` (one sequence) or ``random: {count, duration,
    bias_g, bias_a, tilt_deg}`` for a randomized set.
    """
    unknown = set(spec) - SPEC_KEYS
    if unknown:
        raise ValueError(f"unknown synthetic spec keys {sorted(unknown)}; valid keys: {sorted(SPEC_KEYS)}")
    bad = set(spec.get("random", {})) - RANDOM_KEYS
    if bad:
        raise ValueError(f"unknown 'random' keys {sorted(bad)}; valid keys: {sorted(RANDOM_KEYS)}")
    bad = set(spec.get("noise", {})) - NOISE_KEYS
    if bad:
        raise ValueError(f"unknown 'noise' keys {sorted(bad)}; valid keys: {sorted(NOISE_KEYS)}")
    rate = float(spec.get("rate", 100.0))
    if rate not in (100.0, 200.0):
        raise ValueError("synthetic rate must be 100 or 200 Hz")
    seed = int(spec.get("seed", 0) if seed is None else seed)
    noise = spec.get("noise", {})
    if "segments" in spec:
        tilt = spec.get("tilt", [0.0, 0.0])
        return [synth_generate(spec["segments"], noise, rate=rate, seed=seed, tilt=tuple(tilt),
                               yaw0=float(spec.get("yaw0", 0.0)), blend=float(spec.get("blend", 1.0)),
                               name=spec.get("name", "seq_000"))]
    if "random" in spec:
        r = spec["random"]
        return [random_sequence(seed * 100003 + i, float(r.get("duration", 60.0)), rate,
                                sigma_g=float(noise.get("sigma_g", 2e-3)), sigma_a=float(noise.get("sigma_a", 2e-2)),
                                bias_g=float(r.get("bias_g", 1e-3)), bias_a=float(r.get("bias_a", 2e-2)),
                                tilt_deg=float(r.get("tilt_deg", 10.0)), name=f"seq_{i:03d}")
                for i in range(int(r.get("count", 1)))]
    raise ValueError("synthetic spec needs either 'segments' or 'random'")
