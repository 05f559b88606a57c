"""Substrate tests: forward contract, gradient checker, optimizers, training
loop determinism, checkpoint format."""

import math

import numpy as np
import pytest
import torch

from matxfer.errors import SignatureError, TrainingDivergedError, ValidationError
from matxfer.learning import (
    Adam,
    OptimizerConfig,
    SGDMomentum,
    grad_check,
    forward,
    init_module,
    load_checkpoint,
    load_into_module,
    named_tensors,
    new_generator,
    save_checkpoint,
    train_steps,
)


class Identity(torch.nn.Module):
    def forward(self, x):
        return x


def test_forward_identity():
    x = torch.tensor([1.0, -2.0, 3.5], dtype=torch.float64)
    assert torch.equal(forward(Identity(), x), x)


def test_forward_zero_linear():
    lin = torch.nn.Linear(3, 2, dtype=torch.float64)
    with torch.no_grad():
        lin.weight.zero_()
        lin.bias.zero_()
    out = forward(lin, torch.tensor([4.0, 5.0, 6.0], dtype=torch.float64))
    assert torch.equal(out, torch.zeros(2, dtype=torch.float64))


def test_forward_two_layer_hand_values():
    # Hand weights: y = W2 @ relu(W1 @ x + b1) + b2 with x = [1, 0].
    model = torch.nn.Sequential(
        torch.nn.Linear(2, 2, dtype=torch.float64),
        torch.nn.ReLU(),
        torch.nn.Linear(2, 2, dtype=torch.float64),
    )
    with torch.no_grad():
        model[0].weight.copy_(torch.tensor([[1.0, 2.0], [-3.0, 0.5]], dtype=torch.float64))
        model[0].bias.copy_(torch.tensor([0.5, 1.0], dtype=torch.float64))
        model[2].weight.copy_(torch.tensor([[2.0, -1.0], [0.0, 4.0]], dtype=torch.float64))
        model[2].bias.copy_(torch.tensor([-1.0, 0.25], dtype=torch.float64))
    x = torch.tensor([1.0, 0.0], dtype=torch.float64)
    # Hand arithmetic: h = relu([1*1+0.5, -3*1+1]) = [1.5, 0]
    # y = [2*1.5 - 0 - 1, 0 + 0 + 0.25] = [2.0, 0.25]
    out = forward(model, x)
    assert torch.allclose(out, torch.tensor([2.0, 0.25], dtype=torch.float64), atol=1e-15)


def test_forward_signature_mismatch():
    class Sig(Identity):
        input_signature = (3,)

    with pytest.raises(SignatureError):
        forward(Sig(), torch.ones(4, dtype=torch.float64))


def test_forward_nonfinite_output_rejected():
    class Bad(torch.nn.Module):
        def forward(self, x):
            return x / 0.0

    with pytest.raises(ValidationError):
        forward(Bad(), torch.ones(2, dtype=torch.float64))


# ---------------------------------------------------------------------------
# grad_check
# ---------------------------------------------------------------------------

def test_grad_check_quadratic():
    p = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    report = grad_check(lambda: (p ** 2).sum(), [p], step=1e-6, tol=1e-8)
    assert report.passed
    assert report.max_rel_err < 1e-8
    # Analytic gradient is [2, 4].
    g = torch.autograd.grad((p ** 2).sum(), p)[0]
    assert torch.allclose(g, torch.tensor([2.0, 4.0], dtype=torch.float64))


def test_grad_check_rejects_bad_gradient():
    p = torch.tensor([0.7], dtype=torch.float64, requires_grad=True)

    class WrongGrad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 100.0 * torch.ones_like(x)  # wrong on purpose

    report = grad_check(lambda: WrongGrad.apply(p), [p], step=1e-5, tol=1e-3)
    assert not report.passed


def test_grad_check_nonfinite_identifies_coordinate():
    p = torch.tensor([5.0, 1e-7], dtype=torch.float64, requires_grad=True)
    report = grad_check(lambda: torch.log(p).sum(), [p], step=1e-5, tol=1e-3)
    assert not report.passed
    assert report.failure is not None and "coord" in report.failure


def test_grad_check_requires_positive_step():
    p = torch.tensor([1.0], dtype=torch.float64)
    with pytest.raises(ValidationError):
        grad_check(lambda: (p ** 2).sum(), [p], step=0.0)


# ---------------------------------------------------------------------------
# Optimizers: 10-step hand trajectories on f(p) = p1^2 + 2 p2^2.
# ---------------------------------------------------------------------------

def _quad_grad(p):
    return np.array([2.0 * p[0], 4.0 * p[1]])


def _hand_sgd(p0, lr, momentum, steps):
    p = np.array(p0, dtype=float)
    v = np.zeros(2)
    traj = []
    for _ in range(steps):
        v = momentum * v + _quad_grad(p)
        p = p - lr * v
        traj.append(p.copy())
    return traj


def _hand_adam(p0, lr, b1, b2, eps, steps):
    p = np.array(p0, dtype=float)
    m = np.zeros(2)
    v = np.zeros(2)
    traj = []
    for t in range(1, steps + 1):
        g = _quad_grad(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
        traj.append(p.copy())
    return traj


def _run_optimizer(opt_cls, cfg, steps):
    p = torch.tensor([1.0, -0.5], dtype=torch.float64, requires_grad=True)
    opt = opt_cls([p], cfg)
    traj = []
    for _ in range(steps):
        opt.zero_grad()
        loss = p[0] ** 2 + 2.0 * p[1] ** 2
        loss.backward()
        opt.step()
        traj.append(p.detach().numpy().copy())
    return traj


def test_sgd_momentum_matches_hand_trajectory():
    cfg = OptimizerConfig("sgd-momentum", 0.1, momentum=0.9)
    got = _run_optimizer(SGDMomentum, cfg, 10)
    want = _hand_sgd([1.0, -0.5], 0.1, 0.9, 10)
    for g, w in zip(got, want):
        np.testing.assert_allclose(g, w, rtol=0, atol=1e-14)


def test_adam_matches_hand_trajectory():
    cfg = OptimizerConfig("adam", 0.05, beta1=0.9, beta2=0.999, epsilon=1e-8)
    got = _run_optimizer(Adam, cfg, 10)
    want = _hand_adam([1.0, -0.5], 0.05, 0.9, 0.999, 1e-8, 10)
    for g, w in zip(got, want):
        np.testing.assert_allclose(g, w, rtol=0, atol=1e-13)


def test_optimizer_config_validation():
    with pytest.raises(ValidationError):
        OptimizerConfig("sgd-momentum", -0.1)
    with pytest.raises(ValidationError):
        OptimizerConfig("adam", 0.1, batch_size=0)
    with pytest.raises(ValidationError):
        OptimizerConfig("rmsprop", 0.1)


# ---------------------------------------------------------------------------
# train_steps
# ---------------------------------------------------------------------------

def _ls_problem(seed=3):
    g = new_generator(seed)
    X = torch.rand((32, 3), generator=g, dtype=torch.float64)
    w_true = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    y = X @ w_true + 0.3
    model = init_module(torch.nn.Linear(3, 1, dtype=torch.float64), seed)

    def loss_fn(m, _):
        return ((m(X).squeeze(-1) - y) ** 2).mean()

    return model, loss_fn


def _const_iter():
    while True:
        yield None


def test_train_steps_lr_zero_keeps_params():
    model, loss_fn = _ls_problem()
    before = {k: v.detach().clone() for k, v in named_tensors(model).items()}
    train_steps(model, _const_iter(), loss_fn, OptimizerConfig("adam", 0.0), 1, seed=0)
    for k, v in named_tensors(model).items():
        assert torch.equal(v, before[k])


def test_train_steps_least_squares_converges():
    model, loss_fn = _ls_problem()
    trace = train_steps(model, _const_iter(), loss_fn, OptimizerConfig("adam", 0.05), 200, seed=0)
    assert len(trace) == 200
    assert trace[-1] < 1e-3 * trace[0]


def test_train_steps_deterministic():
    traces = []
    finals = []
    for _ in range(2):
        model, loss_fn = _ls_problem(seed=7)
        traces.append(train_steps(model, _const_iter(), loss_fn, OptimizerConfig("adam", 0.02), 50, seed=5))
        finals.append({k: v.detach().clone() for k, v in named_tensors(model).items()})
    assert traces[0] == traces[1]
    for k in finals[0]:
        assert torch.equal(finals[0][k], finals[1][k])


def test_train_steps_nan_aborts_with_step_index():
    model, _ = _ls_problem()
    calls = {"n": 0}

    def loss_fn(m, _):
        calls["n"] += 1
        if calls["n"] >= 3:
            return torch.tensor(float("nan"), dtype=torch.float64) * m.weight.sum()
        return (m.weight ** 2).sum()

    with pytest.raises(TrainingDivergedError) as exc:
        train_steps(model, _const_iter(), loss_fn, OptimizerConfig("adam", 0.01), 10, seed=0)
    assert exc.value.step == 2


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_and_byte_stability(tmp_path):
    model = init_module(torch.nn.Linear(4, 3, dtype=torch.float64), seed=11)
    cfg = OptimizerConfig("adam", 1e-3, batch_size=8)
    path1 = tmp_path / "a.ckpt"
    path2 = tmp_path / "b.ckpt"
    save_checkpoint(path1, named_tensors(model), seed=11, optimizer=cfg, extra={"stage": "unit"})
    save_checkpoint(path2, named_tensors(model), seed=11, optimizer=cfg, extra={"stage": "unit"})
    assert path1.read_bytes() == path2.read_bytes()

    ckpt = load_checkpoint(path1)
    assert ckpt.seed == 11
    assert ckpt.optimizer == cfg
    assert ckpt.extra == {"stage": "unit"}
    other = torch.nn.Linear(4, 3, dtype=torch.float64)
    load_into_module(other, ckpt)
    for k, v in named_tensors(model).items():
        assert torch.equal(named_tensors(other)[k], v)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValidationError):
        load_checkpoint(path)


def test_init_module_deterministic():
    a = init_module(torch.nn.Linear(5, 5, dtype=torch.float64), seed=3)
    b = init_module(torch.nn.Linear(5, 5, dtype=torch.float64), seed=3)
    c = init_module(torch.nn.Linear(5, 5, dtype=torch.float64), seed=4)
    assert torch.equal(a.weight, b.weight)
    assert not torch.equal(a.weight, c.weight)
