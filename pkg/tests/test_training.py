import math

import numpy as np
import pytest

from gnio import autodiff as ad
from gnio.autodiff import Tensor
from gnio.network import GnioNet, NetConfig
from gnio.pipeline import dataset_windows, desk_train_config
from gnio.synth import random_sequence
from gnio.training import (Adam, DivergenceError, LossWeights, ScheduleSpec, TrainConfig, clip_global_norm,
                           load_training_state, loss_mse, loss_nll, loss_total, lr_at, read_log,
                           save_training_state, train, write_log)


@pytest.fixture(scope="module")
def windows():
    seqs = [random_sequence(300 + i, duration=30.0) for i in range(2)]
    X, Y, st = dataset_windows(seqs, 1.0, 0.25)
    return X[:200], Y[:200], st[:200]


def _v(x):
    return np.array(x, dtype=np.float64)


# ----------------------------------------------------------------------------- losses

def test_mse_examples():
    assert loss_mse(_v([1, 2, 3]), Tensor(_v([1, 2, 3]))).item() == 0.0
    assert loss_mse(_v([1, 0, 0]), Tensor(_v([0, 0, 0]))).item() == 1.0
    assert loss_mse(_v([1, 2, 3]), Tensor(_v([0, 2, 1]))).item() == 5.0
    batch = loss_mse(_v([[1, 0, 0], [0, 0, 3]]), Tensor(np.zeros((2, 3)))).item()
    assert batch == pytest.approx(5.0)


def test_nll_examples():
    z = Tensor(np.zeros(3))
    assert loss_nll(_v([1, 0, 0]), z, np.zeros(3)).item() == pytest.approx(0.5, abs=1e-15)
    assert loss_nll(_v([0, 0, 0]), z, np.ones(3)).item() == pytest.approx(3.0, abs=1e-15)
    direct = 2.0**2 / (2 * 4.0) + math.log(2)
    assert loss_nll(_v([2, 0, 0]), z, _v([math.log(2), 0, 0])).item() == pytest.approx(direct, abs=1e-12)


def test_nll_minimized_at_log_abs_error():
    e = 0.37
    grid = np.linspace(-4, 2, 60001)
    vals = [loss_nll(_v([e, 0, 0]), Tensor(np.zeros(3)), _v([u, 0, 0])).item() for u in grid[::100]]
    u_best = grid[::100][int(np.argmin(vals))]
    assert abs(u_best - math.log(e)) < 0.01
    fine = 0.5 * e**2 * np.exp(-2 * grid) + grid
    assert abs(grid[np.argmin(fine)] - math.log(e)) < 1e-3


def test_total_loss_examples():
    z = Tensor(np.zeros(3))
    total, mse, nll = loss_total(_v([1, 0, 0]), z, np.zeros(3))
    assert total.item() == pytest.approx(100.00005, abs=1e-12)
    total, mse, _ = loss_total(_v([1, 2, 0]), z, np.zeros(3), LossWeights(lambda_nll=0.0))
    assert total.item() == 100.0 * mse.item()
    assert loss_total(_v([1, 2, 0]), Tensor(_v([1, 2, 0])), np.zeros(3))[0].item() == 0.0
    with pytest.raises(ValueError):
        LossWeights(lambda_mse=-1.0)


def test_total_loss_gradient_through_head(windows):
    net = GnioNet(NetConfig.tiny(seed=2))
    net.eval()
    X, Y, _ = windows
    X, Y = X[:4], Y[:4]
    w = net.head.scale.weight

    def f():
        out = net(X)
        return loss_total(Y, out.d_hat, out.u)[0]

    net.zero_grad()
    ad.backward(f())
    g = w.grad.copy()
    # entries with the largest gradients, well above finite-difference rounding
    for flat in np.argsort(-np.abs(g).ravel())[:6]:
        i, j = np.unravel_index(flat, g.shape)
        old = w.data[i, j]
        w.data[i, j] = old + 1e-6
        up = f().item()
        w.data[i, j] = old - 1e-6
        dn = f().item()
        w.data[i, j] = old
        num = (up - dn) / 2e-6
        assert abs(num - g[i, j]) <= 1e-3 * max(abs(num), abs(g[i, j]))


# ----------------------------------------------------------------------------- schedule

def test_schedule_values():
    assert lr_at(0) == pytest.approx(1e-6, rel=1e-12)
    assert lr_at(5) == pytest.approx(1e-4, rel=1e-12)
    assert lr_at(200) == pytest.approx(1e-6, rel=1e-12)
    assert lr_at(102.5) == pytest.approx(5.05e-5, rel=1e-12)
    assert lr_at(5 - 1e-9) == pytest.approx(lr_at(5 + 1e-9), rel=1e-6)
    with pytest.raises(ValueError):
        lr_at(201)
    with pytest.raises(ValueError):
        ScheduleSpec(warmup_epochs=10, total_epochs=10)


# ----------------------------------------------------------------------------- optimizer

def test_adam_zero_gradient_keeps_parameters():
    p = {"x": Tensor(_v([1.0, -2.0]), requires_grad=True)}
    opt = Adam()
    for _ in range(3):
        opt.step(p, {"x": np.zeros(2)}, 0.1)
    assert p["x"].data.tolist() == [1.0, -2.0]


def test_adam_first_step_magnitude_is_lr():
    p = {"x": Tensor(_v([0.0, 0.0, 0.0]), requires_grad=True)}
    Adam().step(p, {"x": _v([3.0, -0.01, 500.0])}, 1e-3)
    assert np.allclose(p["x"].data, [-1e-3, 1e-3, -1e-3], rtol=1e-5)


def test_adam_scalar_quadratic():
    p = {"x": Tensor(_v([1.0]), requires_grad=True)}
    opt = Adam()
    for _ in range(100):
        opt.step(p, {"x": 2 * p["x"].data}, 0.1)
    assert abs(p["x"].data[0]) < 0.05


def test_clip_global_norm():
    g = {"a": _v([3.0, 0.0]), "b": _v([4.0])}
    norm = clip_global_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert math.sqrt(sum(float(np.sum(v * v)) for v in g.values())) == pytest.approx(1.0, rel=1e-9)
    g2 = {"a": _v([0.3])}
    clip_global_norm(g2, 1.0)
    assert g2["a"][0] == 0.3


# ----------------------------------------------------------------------------- loop

def _state(net):
    return {k: v.copy() for k, v in net.state_dict().items()}


def test_zero_epochs_leaves_net_unchanged(windows):
    X, Y, st = windows
    net = GnioNet(NetConfig.tiny(seed=1))
    before = _state(net)
    res = train(net, X, Y, TrainConfig(epochs=0), stationary=st)
    assert res.log == []
    after = net.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_zero_loss_weights_never_change_parameters(windows):
    X, Y, st = windows
    net = GnioNet(NetConfig.tiny(seed=1))
    before = {k: p.data.copy() for k, p in net.named_parameters()}
    cfg = TrainConfig(epochs=1, loss=LossWeights(lambda_mse=0.0, lambda_nll=0.0))
    train(net, X, Y, cfg, stationary=st)
    assert all(np.array_equal(before[k], p.data) for k, p in net.named_parameters())


def test_training_reduces_mse(windows):
    X, Y, st = windows
    res = train(GnioNet(NetConfig.tiny(seed=0)), X, Y, desk_train_config(epochs=50), stationary=st)
    assert len(res.log) == 50
    assert res.log[-1]["loss_mse"] < 0.1 * res.log[0]["loss_mse"]


def test_same_seed_gives_identical_checkpoints(tmp_path, windows):
    X, Y, st = windows
    for tag in ("a", "b"):
        train(GnioNet(NetConfig.tiny(seed=4)), X[:96], Y[:96], desk_train_config(epochs=2, seed=9),
              stationary=st[:96], checkpoint_path=tmp_path / f"{tag}.gnio")
    assert (tmp_path / "a.gnio").read_bytes() == (tmp_path / "b.gnio").read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path, windows):
    X, Y, st = windows
    X, Y, st = X[:96], Y[:96], st[:96]
    sched = ScheduleSpec(lr_start=1e-5, lr_peak=1e-3, warmup_epochs=1, total_epochs=4, lr_min=1e-5)
    full = train(GnioNet(NetConfig.tiny(seed=6)), X, Y, TrainConfig(epochs=4, schedule=sched), stationary=st)
    train(GnioNet(NetConfig.tiny(seed=6)), X, Y, TrainConfig(epochs=2, schedule=sched), stationary=st,
          checkpoint_path=tmp_path / "half.gnio")
    net, opt, epoch = load_training_state(tmp_path / "half.gnio")
    assert epoch == 2
    rest = train(net, X, Y, TrainConfig(epochs=4, schedule=sched), stationary=st, optimizer=opt, start_epoch=2)
    assert [r["epoch"] for r in rest.log] == [3, 4]
    assert rest.log[-1]["loss_total"] == full.log[-1]["loss_total"]
    a, b = full.net.state_dict(), rest.net.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_divergence_guard(windows):
    X, Y, st = windows
    with pytest.raises((DivergenceError, ad.NonFiniteError)):
        train(GnioNet(NetConfig.tiny()), X[:8], np.full((8, 3), 1e200), TrainConfig(epochs=1), stationary=st[:8])


def test_log_roundtrip_and_columns(tmp_path):
    rows = [{"epoch": 1, "lr": 1e-4, "loss_total": 2.5, "loss_mse": 0.02, "loss_nll": 1.0,
             "gate_abs_mean_stationary": 0.1, "gate_abs_mean_moving": 0.4}]
    write_log(tmp_path / "log.csv", rows)
    text = (tmp_path / "log.csv").read_text()
    assert text.splitlines()[0] == ("epoch,lr,loss_total,loss_mse,loss_nll,"
                                    "gate_abs_mean_stationary,gate_abs_mean_moving")
    assert read_log(tmp_path / "log.csv") == rows


def test_training_state_roundtrip(tmp_path):
    net = GnioNet(NetConfig.tiny(seed=8))
    opt = Adam()
    params = dict(net.named_parameters())
    opt.step(params, {k: np.ones_like(p.data) for k, p in params.items()}, 1e-3)
    save_training_state(tmp_path / "m.gnio", net, opt, 7)
    net2, opt2, epoch = load_training_state(tmp_path / "m.gnio")
    assert epoch == 7 and opt2.step_count == 1
    assert all(np.array_equal(opt.m[k], opt2.m[k]) for k in opt.m)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="valid keys"):
        TrainConfig.from_dict({"epochs": 3, "momentum": 0.9})
    with pytest.raises(ValueError, match="valid keys"):
        TrainConfig.from_dict({"schedule": {"peak": 1e-3}})
    assert TrainConfig.full_scale().batch == 1024
