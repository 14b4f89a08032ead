import numpy as np
import pytest
import torch

from pinn_bc.errors import ConfigurationError
from pinn_bc.nn import (
    MlpArchitecture,
    forward,
    init_weights,
    input_jet,
    l2_penalty,
    load_checkpoint,
    save_checkpoint,
    weight_gradient,
)
from pinn_bc.optim import AdamConfig, QuasiNewtonConfig, TrainRecord, adam_run, quasi_newton_run, train_schedule


def quad(A):
    return lambda w: (0.5 * float(w @ A @ w), A @ w)


def rosenbrock(w):
    x, y = w
    f = 100 * (y - x * x) ** 2 + (1 - x) ** 2
    g = np.array([-400 * x * (y - x * x) - 2 * (1 - x), 200 * (y - x * x)])
    return f, g


# ---- networks


def test_param_count_and_determinism():
    arch = MlpArchitecture.hidden(2, 4, 50)
    assert arch.n_params == 2 * 50 + 50 + 3 * (50 * 50 + 50) + 51
    assert np.array_equal(init_weights(arch, 3), init_weights(arch, 3))
    assert not np.array_equal(init_weights(arch, 3), init_weights(arch, 4))


def test_bad_architecture_rejected():
    with pytest.raises(ConfigurationError):
        MlpArchitecture((2,))
    with pytest.raises(ConfigurationError):
        MlpArchitecture((2, 5, 1), "swish")
    arch = MlpArchitecture((2, 5, 1), "relu")
    with pytest.raises(ConfigurationError):
        input_jet(arch, init_weights(arch, 0), np.zeros((1, 2)), 2)


def test_input_dimension_checked():
    arch = MlpArchitecture.hidden(2, 1, 3)
    with pytest.raises(ValueError):
        forward(arch, init_weights(arch, 0), np.zeros((4, 3)))


def test_input_jet_matches_autograd():
    arch = MlpArchitecture.hidden(3, 2, 7, 2)
    w = init_weights(arch, 1) + 0.1
    x = torch.tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    j = input_jet(arch, w, x.detach(), 2)
    for n in range(4):
        for o in range(2):
            fo = lambda p: forward(arch, w, p[None])[0, o]  # noqa: E731
            H = torch.autograd.functional.hessian(fo, x[n].detach())
            assert torch.allclose(j.hessian[n, o], H, atol=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    arch = MlpArchitecture.hidden(2, 2, 5)
    w = init_weights(arch, 9)
    save_checkpoint(tmp_path / "c.bin", arch, w, seed=9)
    arch2, w2, header = load_checkpoint(tmp_path / "c.bin")
    assert arch2 == arch and np.array_equal(w, w2) and header["seed"] == 9


def test_l2_penalty_and_gradient():
    w = np.array([1.0, -2.0])
    assert l2_penalty(w, 0.5) == 2.5
    val, g = weight_gradient(lambda t: l2_penalty(t, 0.5), w)
    assert val == 2.5 and np.allclose(g, w)


# ---- ADAM


def test_adam_converges_on_quadratic():
    w, rec = adam_run(quad(2 * np.eye(3)), np.ones(3), AdamConfig(lr0=0.05, decay_rate=1.0, epochs=3000))
    assert np.linalg.norm(w) < 1e-3
    assert rec.epochs == 3001 and rec.stop_reason == "max epochs"


def test_adam_first_step_is_sign_of_gradient():
    g = np.array([3.0, -0.5, 1e-3])
    cfg = AdamConfig(lr0=0.01, decay_rate=1.0, eps=1e-14, epochs=1)
    w, _ = adam_run(lambda w: (float(g @ w), g), np.zeros(3), cfg)
    assert np.allclose(w, -0.01 * np.sign(g), rtol=1e-9)


def test_adam_step_size_follows_decay_exactly():
    # constant gradient: mhat = g and vhat = g^2 exactly, so every step is lr_k * sign(g)
    g = np.array([1.0])
    cfg = AdamConfig(lr0=0.1, decay_rate=0.9, eps=0.0, epochs=5)
    w, _ = adam_run(lambda w: (float(w[0]), g), np.zeros(1), cfg)
    assert np.isclose(w[0], -sum(0.1 * 0.9**k for k in range(5)), rtol=1e-12)


def test_adam_default_decay_is_tenfold():
    cfg = AdamConfig(epochs=2000)
    assert np.isclose(cfg.learning_rate(2000), 1e-4)


def test_adam_aborts_on_nan():
    w, rec = adam_run(lambda w: (float("nan"), w), np.ones(2), AdamConfig(epochs=5))
    assert rec.stop_reason.startswith("non-finite")


@pytest.mark.parametrize("kw", [dict(lr0=0), dict(decay_rate=1.5), dict(beta1=1.0), dict(epochs=-1)])
def test_adam_config_validation(kw):
    with pytest.raises(ConfigurationError):
        AdamConfig(**kw)


# ---- quasi-Newton


@pytest.mark.parametrize("memory", [50, None])
def test_rosenbrock(memory):
    w, rec = quasi_newton_run(rosenbrock, np.array([-1.2, 1.0]), QuasiNewtonConfig(memory=memory, max_iters=200))
    assert np.allclose(w, [1, 1], atol=1e-8)
    assert rec.epochs - 1 < 200


@pytest.mark.parametrize("dim", [5, 10, 20])
def test_quadratic_converges_fast(dim):
    # a strong-Wolfe step is inexact, so the textbook "dim steps" bound becomes a small multiple of dim
    rng = np.random.default_rng(dim)
    Q = np.linalg.qr(rng.normal(size=(dim, dim)))[0]
    A = Q @ np.diag(np.linspace(1, 10, dim)) @ Q.T
    w, rec = quasi_newton_run(quad(A), rng.normal(size=dim), QuasiNewtonConfig(max_iters=10 * dim))
    assert np.linalg.norm(w) < 1e-8
    assert rec.epochs - 1 <= 3 * dim


def test_stationary_start_stops_immediately():
    w, rec = quasi_newton_run(quad(np.eye(2)), np.zeros(2), QuasiNewtonConfig())
    assert rec.stop_reason == "identical iterates" and rec.epochs == 1


def test_quasi_newton_loss_monotone_and_deterministic():
    w0 = np.array([-1.2, 1.0])
    a = quasi_newton_run(rosenbrock, w0, QuasiNewtonConfig(max_iters=60))
    b = quasi_newton_run(rosenbrock, w0, QuasiNewtonConfig(max_iters=60))
    assert np.all(np.diff(a[1].loss) <= 0)
    assert np.array_equal(a[0], b[0]) and a[1].loss == b[1].loss


def test_schedule_phases():
    adam, qn = AdamConfig(lr0=1e-2, epochs=50), QuasiNewtonConfig(max_iters=30)
    w, rec = train_schedule(rosenbrock, np.array([-1.2, 1.0]), adam, qn, monitor=lambda w: 0.0, log_every=10)
    assert rec.phase[: rec.phase_boundary] == ["adam"] * 50
    assert set(rec.phase[rec.phase_boundary :]) == {"bfgs"}
    assert np.all(np.diff(rec.loss[rec.phase_boundary :]) <= 0)
    assert [e for e, _ in rec.errors] == sorted(e for e, _ in rec.errors)

    _, only_qn = train_schedule(rosenbrock, np.array([-1.2, 1.0]), AdamConfig(epochs=0), qn)
    assert only_qn.phase_boundary == 0 and set(only_qn.phase) == {"bfgs"}
    _, only_adam = train_schedule(rosenbrock, np.array([-1.2, 1.0]), adam, QuasiNewtonConfig(max_iters=0))
    assert set(only_adam.phase) == {"adam"} and only_adam.epochs == 51


def test_record_roundtrip(tmp_path):
    rec = TrainRecord([1.0, 0.5], ["adam", "bfgs"], [(0, 0.3)], 1, "max iterations")
    assert TrainRecord.from_dict(rec.to_dict()) == rec
    rec.write_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,phase,loss,h1_error" and lines[1].endswith(",0.3")
