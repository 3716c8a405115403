"""Acceptance criteria 1-11, each printed as one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (the lines appear in the
terminal summary) or ``python3 tests/test_acceptance.py``.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest

from gnio import autodiff as ad
from gnio.cli import main as cli_main
from gnio.ekf import CloningEkf, FilterConfig, NavState, NoiseParams, OracleMeasurement, run_filter
from gnio.evaluate import Trajectory, evaluate
from gnio.imu import save_sequence
from gnio.network import (GatedHead, GnioNet, MotionBank, NetConfig, covariance_from_log_std, gated_head)
from gnio.pipeline import RunConfig, dataset_windows, desk_train_config, fuse_sequence, train_on
from gnio.synth import random_sequence, synth_generate
from gnio.training import ScheduleSpec, evaluate_windows, loss_nll, loss_total, lr_at

try:
    from conftest import CRITERIA_LINES, WALK_SEGMENTS
except ImportError:  # executed as a script from another directory
    from tests.conftest import CRITERIA_LINES, WALK_SEGMENTS


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA_LINES.append(line)
    print(line)


# ----------------------------------------------------------------------------- 1. gradients

def _primitive_cases():
    """name -> (input generator(rng), scalar function of the leaf dict)."""
    def away(rng, shape, lo=0.05):
        x = rng.uniform(-2, 2, shape)
        return np.where(np.abs(x) < lo, np.sign(x + 1e-300) * lo + x, x)

    def weighted(out, seed):
        w = np.random.default_rng(seed).normal(size=out.shape)
        return ad.sum(out * w)

    def bn(t):
        C = t["x"].shape[2]
        return ad.batchnorm1d(t["x"], t["gamma"], t["beta"], np.zeros(C), np.ones(C), training=True,
                              channels_last=True)

    return {
        "add": (lambda r: {"a": r.normal(size=(3, 4)), "b": r.normal(size=(4,))},
                lambda t: weighted(ad.add(t["a"], t["b"]), 1)),
        "sub": (lambda r: {"a": r.normal(size=(2, 3)), "b": r.normal(size=(2, 3))},
                lambda t: weighted(ad.sub(t["a"], t["b"]), 2)),
        "mul": (lambda r: {"a": r.normal(size=(3, 2)), "b": r.normal(size=(3, 2))},
                lambda t: weighted(ad.mul(t["a"], t["b"]), 3)),
        "matmul": (lambda r: {"a": r.normal(size=(2, 3, 4)), "b": r.normal(size=(4, 2))},
                   lambda t: weighted(ad.matmul(t["a"], t["b"]), 4)),
        "conv1d": (lambda r: {"x": r.normal(size=(2, 3, 9)), "w": r.normal(size=(4, 3, 3)), "b": r.normal(size=(4,))},
                   lambda t: weighted(ad.conv1d(t["x"], t["w"], t["b"], stride=2, padding=1), 5)),
        "batchnorm1d": (lambda r: {"x": r.normal(size=(3, 5, 2)), "gamma": r.uniform(0.5, 1.5, 2),
                                   "beta": r.normal(size=2)},
                        lambda t: weighted(bn(t), 6)),
        "relu": (lambda r: {"x": away(r, (3, 4))}, lambda t: weighted(ad.relu(t["x"]), 7)),
        "tanh": (lambda r: {"x": r.normal(size=(3, 4))}, lambda t: weighted(ad.tanh(t["x"]), 8)),
        "sigmoid": (lambda r: {"x": r.normal(size=(3, 4))}, lambda t: weighted(ad.sigmoid(t["x"]), 9)),
        "softplus": (lambda r: {"x": r.normal(size=(3, 4)) * 3}, lambda t: weighted(ad.softplus(t["x"]), 10)),
        "elu": (lambda r: {"x": away(r, (3, 4))}, lambda t: weighted(ad.elu(t["x"]), 11)),
        "abs": (lambda r: {"x": away(r, (3, 4))}, lambda t: weighted(ad.abs(t["x"]), 12)),
        "exp": (lambda r: {"x": r.normal(size=(3, 4))}, lambda t: weighted(ad.exp(t["x"]), 13)),
        "log": (lambda r: {"x": r.uniform(0.2, 3.0, (3, 4))}, lambda t: weighted(ad.log(t["x"]), 14)),
        "softmax": (lambda r: {"x": r.normal(size=(3, 5))}, lambda t: weighted(ad.softmax(t["x"], axis=-1), 15)),
        "global_avg_pool": (lambda r: {"x": r.normal(size=(2, 3, 6))},
                            lambda t: weighted(ad.global_avg_pool(t["x"]), 16)),
        "linear": (lambda r: {"x": r.normal(size=(3, 4)), "W": r.normal(size=(2, 4)), "b": r.normal(size=(2,))},
                   lambda t: weighted(ad.linear(t["x"], t["W"], t["b"]), 17)),
        "sum": (lambda r: {"x": r.normal(size=(3, 4))}, lambda t: weighted(ad.sum(t["x"], axis=0), 18)),
        "mean": (lambda r: {"x": r.normal(size=(3, 4))}, lambda t: weighted(ad.mean(t["x"], axis=1), 19)),
    }


def network_grad_rel_err(net, X, Y, name, flat, h=1e-6, floor=1e-6):
    """Backprop vs central difference for one parameter entry of the network loss."""
    params = dict(net.named_parameters())
    p = params[name]
    net.zero_grad()
    out = net(X)
    ad.backward(loss_total(Y, out.d_hat, out.u)[0])
    analytic = p.grad.reshape(-1)[flat]

    def value(delta):
        saved = p.data.reshape(-1)[flat]
        p.data.reshape(-1)[flat] = saved + delta
        with ad.no_grad():
            o = net(X)
            v = loss_total(Y, o.d_hat, o.u)[0].item()
        p.data.reshape(-1)[flat] = saved
        return v

    numeric = (value(h) - value(-h)) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def test_criterion_01_gradient_fidelity():
    t0 = time.time()
    worst_prim, failures = 0.0, []
    for name, (gen, fn) in _primitive_cases().items():
        for trial in range(100):
            res = ad.gradient_check(fn, gen(np.random.default_rng([trial, len(name)])), tol=1e-4)
            worst_prim = max(worst_prim, res["max_rel_err"])
            if not res["passed"]:
                failures.append((name, trial, res["max_rel_err"]))

    # end to end: tiny network + composite loss, one random parameter entry per trial
    worst_e2e = 0.0
    for trial in range(100):
        rng = np.random.default_rng(10_000 + trial)
        net = GnioNet(NetConfig.tiny(seed=trial))
        X = rng.normal(size=(2, 32, 6))
        Y = rng.normal(size=(2, 3))
        params = dict(net.named_parameters())
        names = sorted(params)
        pick = names[rng.integers(len(names))]
        flat = int(rng.integers(params[pick].data.size))
        err = network_grad_rel_err(net, X, Y, pick, flat)
        worst_e2e = max(worst_e2e, err)
        if err >= 1e-3:
            failures.append(("network", trial, pick, err))
    elapsed = time.time() - t0
    ok = not failures and elapsed < 120
    report(1, ok, f"primitives max rel err {worst_prim:.2e} (<1e-4), network {worst_e2e:.2e} (<1e-3), "
                  f"{elapsed:.0f}s (<120s)")
    assert not failures, failures[:5]
    assert elapsed < 120


# ----------------------------------------------------------------------------- 2. gated head

def test_criterion_02_gated_head_algebra():
    rng = np.random.default_rng(2)
    D = 16
    h = ad.Tensor(rng.normal(size=(32, D)) * 3)
    # zero gate weights and bias force g = tanh(0) = 0
    head = GatedHead(np.random.default_rng(0), D, "tanh", "softplus")
    head.gate.weight.data[:] = 0.0
    head.gate.bias.data[:] = 0.0
    s, g, d = gated_head(h, head)
    zero_ok = bool(np.all(g.data == 0.0) and np.all(d.data == 0.0))
    bound_ok = True
    for gate in ("tanh", "sigmoid"):
        for scale in ("softplus", "exp", "abs", "pos_elu"):
            s, g, d = gated_head(h, GatedHead(np.random.default_rng(1), D, gate, scale))
            bound_ok &= bool(np.all(np.abs(d.data) <= s.data))
    sp0 = ad.softplus(ad.Tensor(np.zeros(1))).item()
    sp_ok = abs(sp0 - math.log(2.0)) <= 1e-12
    ok = zero_ok and bound_ok and sp_ok
    report(2, ok, f"g=0 gives d=0 bitwise: {zero_ok}; |d|<=s: {bound_ok}; softplus(0)-ln2 = {sp0 - math.log(2):.1e}")
    assert ok


# ----------------------------------------------------------------------------- 3. attention

def _hand_attention(f, M, WQ, WK, WV):
    """Single-head attention for one query written out with scalar arithmetic."""
    D = len(f)
    q = [sum(f[i] * WQ[i][j] for i in range(D)) for j in range(D)]
    keys = [[sum(M[r][i] * WK[i][j] for i in range(D)) for j in range(D)] for r in range(len(M))]
    vals = [[sum(M[r][i] * WV[i][j] for i in range(D)) for j in range(D)] for r in range(len(M))]
    scores = [sum(q[j] * k[j] for j in range(D)) / math.sqrt(D) for k in keys]
    top = max(scores)
    ex = [math.exp(s - top) for s in scores]
    w = [e / sum(ex) for e in ex]
    return [sum(w[r] * vals[r][j] for r in range(len(M))) for j in range(D)], w


def test_criterion_03_attention_contract():
    from gnio.network import bank_attend

    rng = np.random.default_rng(3)
    worst_sum = 0.0
    for heads, D, m in ((1, 8, 5), (4, 16, 7), (2, 8, 3)):
        bank = MotionBank(rng, D, m, heads)
        _, w = bank_attend(ad.Tensor(rng.normal(size=(6, D)) * 2), bank)
        worst_sum = max(worst_sum, float(np.max(np.abs(w.data.sum(-1) - 1.0))))

    M = [[0.5, -1.0, 0.25, 2.0], [-0.75, 0.5, 1.5, -0.5]]
    WQ = [[0.2, -0.1, 0.0, 0.3], [0.1, 0.4, -0.2, 0.0], [-0.3, 0.0, 0.5, 0.1], [0.0, 0.2, 0.1, -0.4]]
    WK = [[0.3, 0.0, -0.1, 0.2], [-0.2, 0.1, 0.0, 0.4], [0.1, -0.3, 0.2, 0.0], [0.0, 0.2, -0.4, 0.1]]
    WV = [[1.0, 0.0, 0.5, -0.5], [0.0, 1.0, -0.5, 0.5], [0.5, 0.5, 1.0, 0.0], [-0.5, 0.0, 0.0, 1.0]]
    f = [1.0, -2.0, 0.5, 3.0]
    bank = MotionBank(rng, 4, 2, 1)
    bank.M.data[:] = M
    bank.W_Q.data[:] = WQ
    bank.W_K.data[:] = WK
    bank.W_V.data[:] = WV
    c, w = bank_attend(ad.Tensor(np.array([f])), bank)
    c_ref, w_ref = _hand_attention(f, M, WQ, WK, WV)
    err = max(float(np.max(np.abs(c.data[0] - c_ref))), float(np.max(np.abs(w.data[0, 0] - w_ref))))
    ok = worst_sum <= 1e-9 and err <= 1e-12
    report(3, ok, f"weights sum-to-one error {worst_sum:.1e} (<=1e-9); heads=1 vs hand oracle {err:.1e} (<=1e-12)")
    assert ok


# ----------------------------------------------------------------------------- 4. schedule

def test_criterion_04_schedule():
    s = ScheduleSpec()
    exact = lr_at(0, s) == 1e-6 and lr_at(5, s) == 1e-4 and lr_at(200, s) == 1e-6
    jump = max(abs(lr_at(5 - 1e-12, s) - lr_at(5, s)), abs(lr_at(5 + 1e-12, s) - lr_at(5, s)))
    ok = exact and jump <= 1e-15
    report(4, ok, f"lr(0), lr(5), lr(200) exact: {exact}; discontinuity at epoch 5: {jump:.1e} (<=1e-15)")
    assert ok


# ----------------------------------------------------------------------------- 5. uncertainty

def test_criterion_05_uncertainty_algebra():
    rng = np.random.default_rng(5)
    u = rng.uniform(-2, 2, size=(200, 3))
    det = np.linalg.det(covariance_from_log_std(u))
    ref = np.exp(2 * u.sum(1))
    det_err = float(np.max(np.abs(det - ref) / ref))
    worst_nll = 0.0
    for _ in range(100):
        d_gt, d_hat = rng.normal(size=3), rng.normal(size=3)
        nll = loss_nll(d_gt, ad.Tensor(d_hat), np.zeros(3)).item()
        worst_nll = max(worst_nll, abs(nll - 0.5 * float(np.sum((d_gt - d_hat) ** 2))))
    ok = det_err <= 1e-12 and worst_nll <= 1e-12
    report(5, ok, f"det Sigma vs exp(2 sum u) rel err {det_err:.1e}; NLL(u=0) - |e|^2/2 = {worst_nll:.1e} (<=1e-12)")
    assert ok


# ----------------------------------------------------------------------------- 6. / 7. filter

QUIET_SENSOR = NoiseParams(gyro_noise=1e-6, accel_noise=1e-5, gyro_bias_rw=0.0, accel_bias_rw=0.0,
                           init_bg=1e-6, init_ba=1e-5)
NOISE = {"sigma_g": 2e-3, "sigma_a": 2e-2, "bg": [1e-3, -5e-4, 8e-4], "ba": [2e-2, -1e-2, 1.5e-2]}


@pytest.fixture(scope="module")
def oracle_run():
    seq = synth_generate(WALK_SEGMENTS, rate=200.0, seed=0, tilt=(0.1, -0.05))
    t0 = time.time()
    run = run_filter(seq, OracleMeasurement(variance=1e-6), FilterConfig(noise=QUIET_SENSOR), monitor=True)
    return seq, run, time.time() - t0


def test_criterion_06_oracle_closed_loop(oracle_run):
    seq, run, t_oracle = oracle_run
    gt = Trajectory.from_sequence(seq)
    ate_oracle = evaluate(Trajectory(run.t, run.p, run.q), gt).ate_m
    noisy = synth_generate(WALK_SEGMENTS, noise=NOISE, rate=200.0, seed=0, tilt=(0.1, -0.05))
    t0 = time.time()
    dr = run_filter(noisy, None, FilterConfig(noise=NoiseParams.from_sample_std(2e-3, 2e-2, 200.0)))
    elapsed = t_oracle + time.time() - t0
    ate_dr = evaluate(Trajectory(dr.t, dr.p, dr.q), gt).ate_m
    ok = ate_oracle < 1e-3 and ate_dr >= 1e3 * ate_oracle and elapsed < 60
    report(6, ok, f"oracle ATE {ate_oracle:.2e} m (<1e-3); dead reckoning {ate_dr:.2f} m = "
                  f"{ate_dr / ate_oracle:.1e}x (>=1e3); {elapsed:.1f}s (<60s)")
    assert ok


def test_criterion_07_filter_consistency(oracle_run):
    _, run, _ = oracle_run
    sym_ok = run.max_asymmetry < 1e-9 and run.min_eigenvalue >= -1e-9

    # scalar Kalman analogue: heading 0, attitude known, isotropic position blocks
    a, b, c, r, z = 0.04, 0.01, 0.015, 0.002, 0.3
    p_now, p_clone = np.array([1.0, -2.0, 0.5]), np.array([0.6, -2.1, 0.45])
    state = NavState(p_clone.copy(), np.zeros(3), np.eye(3), np.zeros(3), np.zeros(3))
    ekf = CloningEkf(state, FilterConfig(var_floor=0.0))
    tag = ekf.clone()
    ekf.x.p = p_now.copy()
    ekf.P = np.zeros((21, 21))
    I3 = np.eye(3)
    ekf.P[6:9, 6:9], ekf.P[18:21, 18:21] = a * I3, b * I3
    ekf.P[6:9, 18:21] = ekf.P[18:21, 6:9] = c * I3
    d_meas = p_now - p_clone + z
    ekf.update(tag, d_meas, r * I3)
    S = a + b - 2 * c + r
    post_mean = p_now + (a - c) / S * z
    post_var = a - (a - c) ** 2 / S
    err = max(float(np.max(np.abs(ekf.x.p - post_mean))), float(np.max(np.abs(ekf.P[6:9, 6:9] - post_var * I3))))
    ok = sym_ok and err <= 1e-12
    report(7, ok, f"max asymmetry {run.max_asymmetry:.1e}, min eigenvalue {run.min_eigenvalue:.1e}; "
                  f"scalar Kalman posterior error {err:.1e} (<=1e-12)")
    assert ok


# ----------------------------------------------------------------------------- 8. / 9. learning

N_TRAIN, N_HELDOUT = 30, 3


@pytest.fixture(scope="module")
def trained():
    t0 = time.time()
    train_seqs = [random_sequence(1000 + i, 60.0) for i in range(N_TRAIN)]
    held = [random_sequence(5000 + i, 60.0) for i in range(N_HELDOUT)]
    cfg = RunConfig(train=desk_train_config(epochs=50))
    Xh, Yh, st = dataset_windows(held, cfg.data.window, cfg.data.eval_stride)
    untrained = evaluate_windows(GnioNet(cfg.net), Xh, Yh)["mse"]
    net = train_on(train_seqs, cfg).net
    ev = evaluate_windows(net, Xh, Yh)
    fused = [fuse_sequence(s, net, cfg.filter) for s in held]
    return {"cfg": cfg, "net": net, "untrained": untrained, "ev": ev, "stationary": st, "fused": fused,
            "elapsed": time.time() - t0, "minutes": N_TRAIN * 60.0 / 60.0}


def test_criterion_08_end_to_end_learning(trained):
    mse0, mse1 = trained["untrained"], trained["ev"]["mse"]
    ratios = [r.report.ate_m / r.baseline_report.ate_m for r in trained["fused"]]
    detail = ", ".join(f"{r.report.ate_m:.2f}/{r.baseline_report.ate_m:.1f} m" for r in trained["fused"])
    ok_a = mse1 < 0.25 * mse0
    ok_b = all(q <= 0.1 for q in ratios)
    ok_t = trained["elapsed"] < 15 * 60
    report(8, ok_a and ok_b and ok_t,
           f"(a) held-out MSE {mse1:.4f} vs untrained {mse0:.1f} (ratio {mse1 / mse0:.1e} <0.25); "
           f"(b) fused/dead-reckoning ATE {detail} (max ratio {max(ratios):.3f} <=0.1); "
           f"{trained['minutes']:.0f} min of data, {trained['elapsed']:.0f}s (<900s)")
    assert ok_a and ok_b and ok_t


def test_criterion_09_soft_zupt(trained):
    ev, st = trained["ev"], trained["stationary"]
    g = np.abs(ev["g"]).mean(1)
    d = np.linalg.norm(ev["d_hat"], axis=1)
    g_ratio = g[st].mean() / g[~st].mean()
    d_ratio = d[st].mean() / d[~st].mean()
    ok = g_ratio < 0.3 and d_ratio < 0.1
    report(9, ok, f"stationary/moving mean |g| {g_ratio:.3f} (<0.3), mean |d| {d_ratio:.4f} (<0.1) "
                  f"over {int(st.sum())}/{int((~st).sum())} windows")
    assert ok


# ----------------------------------------------------------------------------- 10. ablations

def test_criterion_10_ablation_harness(tmp_path):
    data = tmp_path / "data"
    for i in range(3):
        save_sequence(random_sequence(300 + i, 20.0, name=f"seq_{i:03d}"), data / f"seq_{i:03d}")
    tables = {}
    for axis in ("gating", "bank_size"):
        for run in (1, 2):
            out = tmp_path / f"{axis}_{run}.csv"
            code = cli_main(["ablate", axis, "--data", str(data), "--seed", "7", "--set", "train.epochs=1",
                             "--out", str(out)])
            assert code == 0
            tables[axis, run] = out.read_bytes()
    gating = tables["gating", 1].decode().strip().splitlines()[1:]
    banks = tables["bank_size", 1].decode().strip().splitlines()[1:]
    grid = [tuple(r.split(",")[1:3]) for r in gating]
    expected = [("sigmoid", "linear"), ("tanh", "linear"), ("tanh", "exp"), ("tanh", "abs"),
                ("tanh", "pos_elu"), ("tanh", "softplus")]
    ms = [int(r.split(",")[3]) for r in banks]
    deterministic = all(tables[a, 1] == tables[a, 2] for a in ("gating", "bank_size"))
    ok = grid == expected and ms == [16, 32, 64, 128] and deterministic
    report(10, ok, f"gating rows {len(gating)} {grid == expected}; bank sizes {ms}; identical reruns {deterministic}")
    assert ok


# ----------------------------------------------------------------------------- 11. capacity

def test_criterion_11_parameter_count():
    n = GnioNet(NetConfig()).n_params
    ok = abs(n - 4.90e6) <= 0.3 * 4.90e6
    report(11, ok, f"default configuration has {n:,} parameters (4.90M +-30%)")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
