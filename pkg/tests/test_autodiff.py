"""Finite-difference gradient checks for every primitive, plus Adam and tape rules."""

from __future__ import annotations

import numpy as np
import pytest

from awm import autodiff as ad
from awm import nn
from awm.autodiff import AutodiffError, NonFiniteError, Tape, Tensor

FD_EPS = 1e-4
FD_TOL = 1e-3


def finite_difference(fn, arrays: list[np.ndarray], idx: int) -> np.ndarray:
    """Central finite differences of scalar fn w.r.t. arrays[idx]."""
    base = [a.copy() for a in arrays]
    grad = np.zeros_like(base[idx])
    flat = grad.reshape(-1)
    for i in range(flat.size):
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[idx].reshape(-1)[i] += FD_EPS
        minus[idx].reshape(-1)[i] -= FD_EPS
        flat[i] = (fn(plus) - fn(minus)) / (2 * FD_EPS)
    return grad


def check_op(build_loss, shapes, seed, n_inputs=None):
    """Compare tape gradients against central differences for one op graph."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build_loss(tensors)
    ad.backward(tape, loss)

    def eval_loss(arrs):
        return build_loss([Tensor(a) for a in arrs]).item()

    for i, t in enumerate(tensors):
        fd = finite_difference(eval_loss, arrays, i)
        got = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        denom = np.maximum(np.abs(fd), 1.0)
        err = np.max(np.abs(got - fd) / denom)
        assert err < FD_TOL, f"input {i}: max rel err {err}"


SEEDS = range(20)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_add_mul_sub(seed):
    check_op(lambda ts: ad.sum_(ad.mul(ad.add(ts[0], ts[1]), ad.sub(ts[0], 0.5))),
             [(3, 4), (3, 4)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_broadcast_bias(seed):
    check_op(lambda ts: ad.sum_(ad.mul(ad.add(ts[0], ts[1]), ts[0])),
             [(5, 3), (3,)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_matmul(seed):
    check_op(lambda ts: ad.sum_(ad.matmul(ts[0], ts[1])), [(3, 4), (4, 2)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_activations(seed):
    check_op(lambda ts: ad.sum_(ad.tanh(ad.relu(ts[0]))), [(4, 4)], seed)
    check_op(lambda ts: ad.sum_(ad.mul(ad.sigmoid(ts[0]), ad.exp(ts[0]))), [(3, 3)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_log(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 2.0, size=(3, 3))
    t = Tensor(a, requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.log(t))
    ad.backward(tape, loss)
    fd = finite_difference(lambda arrs: ad.sum_(ad.log(Tensor(arrs[0]))).item(), [a], 0)
    assert np.max(np.abs(t.grad - fd)) < FD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax(seed):
    check_op(lambda ts: ad.sum_(ad.mul(ad.softmax(ts[0], axis=1), ts[1])),
             [(3, 5), (3, 5)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_reductions_and_shapes(seed):
    check_op(lambda ts: ad.sum_(ad.mean(ad.reshape(ts[0], (2, 6)), axis=1)), [(3, 4)], seed)
    check_op(lambda ts: ad.sum_(ad.mul(ad.concat([ts[0], ts[1]], axis=1),
                                       ad.concat([ts[1], ts[0]], axis=1))),
             [(2, 3), (2, 3)], seed)
    check_op(lambda ts: ad.sum_(ad.narrow(ts[0], 1, 1, 2)), [(3, 4)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv2d(seed):
    check_op(lambda ts: ad.sum_(ad.mul(ad.conv2d(ts[0], ts[1]), ts[2])),
             [(2, 5, 5, 2), (3, 3, 2, 3), (2, 5, 5, 3)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_gaussian_sample(seed):
    rng = np.random.default_rng(seed)
    mean = rng.standard_normal((3, 4))
    log_std = rng.uniform(-1.0, 0.5, size=(3, 4))
    weight = rng.standard_normal((3, 4))
    mt = Tensor(mean, requires_grad=True)
    lt = Tensor(log_std, requires_grad=True)
    with Tape() as tape:
        out = ad.gaussian_sample(mt, lt, np.random.default_rng(seed + 1000))
        loss = ad.sum_(ad.mul(out, Tensor(weight)))
    ad.backward(tape, loss)

    def eval_loss(arrs):
        out = ad.gaussian_sample(Tensor(arrs[0]), Tensor(arrs[1]),
                                 np.random.default_rng(seed + 1000))
        return ad.sum_(ad.mul(out, Tensor(weight))).item()

    for i, t in enumerate([mt, lt]):
        fd = finite_difference(eval_loss, [mean, log_std], i)
        assert np.max(np.abs(t.grad - fd) / np.maximum(np.abs(fd), 1.0)) < FD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_kl_diag(seed):
    check_op(lambda ts: ad.sum_(ad.kl_diag_gaussians(ts[0], ad.mul(ts[1], 0.3),
                                                     ts[2], ad.mul(ts[3], 0.3))),
             [(3, 4), (3, 4), (3, 4), (3, 4)], seed)


@pytest.mark.parametrize("seed", range(5))
def test_grad_gru_cell(seed):
    rng = np.random.default_rng(seed)
    cell = nn.GRUCell(rng, 3, 4)
    x = rng.standard_normal((2, 3))
    h = rng.standard_normal((2, 4))
    params = cell.params("gru")
    with Tape() as tape:
        loss = ad.sum_(cell(Tensor(x), Tensor(h)))
    ad.backward(tape, loss)
    name = sorted(params)[seed % len(params)]
    p = params[name]
    got = p.grad.copy()
    base = p.data.copy()

    def eval_at(vals):
        p.data = vals[0]
        out = ad.sum_(cell(Tensor(x), Tensor(h))).item()
        p.data = base.copy()
        return out

    fd = finite_difference(eval_at, [base], 0)
    assert np.max(np.abs(got - fd) / np.maximum(np.abs(fd), 1.0)) < FD_TOL


def test_pool_and_upsample_shapes_and_grads():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 4, 4, 3))
    t = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(nn.avg_pool2(t))
    ad.backward(tape, loss)
    assert np.allclose(t.grad, 0.25)

    t2 = Tensor(x, requires_grad=True)
    with Tape() as tape:
        up = nn.upsample2(t2)
        assert up.shape == (2, 8, 8, 3)
        loss = ad.sum_(up)
    ad.backward(tape, loss)
    assert np.allclose(t2.grad, 4.0)
    # nearest-neighbor layout
    vals = nn.upsample2(Tensor(x)).data
    assert np.allclose(vals[:, ::2, ::2], x) and np.allclose(vals[:, 1::2, 1::2], x)


def test_softmax_uniform_and_conv_identity():
    out = ad.softmax(Tensor(np.zeros(4)), axis=0)
    assert np.allclose(out.data, 0.25)
    delta = np.zeros((3, 3, 1, 1))
    delta[1, 1, 0, 0] = 1.0
    x = np.random.default_rng(1).standard_normal((1, 6, 6, 1))
    assert np.allclose(ad.conv2d(Tensor(x), Tensor(delta)).data, x)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 2))
    want = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                want[i, j] += a[i, k] * b[k, j]
    assert np.allclose(ad.matmul(Tensor(a), Tensor(b)).data, want)


def test_backward_simple_rules():
    x = Tensor(np.arange(3.0), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(x)
    ad.backward(tape, loss)
    assert np.allclose(x.grad, 1.0)

    y = Tensor(np.array(3.0), requires_grad=True)
    with Tape() as tape:
        loss = ad.mul(y, y)
    ad.backward(tape, loss)
    assert np.allclose(y.grad, 6.0)


def test_backward_errors():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        out = ad.mul(x, 2.0)
    with pytest.raises(AutodiffError):
        ad.backward(tape, out)  # non-scalar loss
    with Tape() as tape:
        loss = ad.sum_(ad.mul(x, 2.0))
    ad.backward(tape, loss)
    with pytest.raises(AutodiffError):
        ad.backward(tape, loss)  # second call without re-forward
    detached = ad.sum_(ad.mul(x, 2.0))  # no active tape
    with Tape() as tape2:
        pass
    with pytest.raises(AutodiffError):
        ad.backward(tape2, detached)


def test_non_finite_raises_with_op_name():
    with np.errstate(all="ignore"):
        with pytest.raises(NonFiniteError, match="log"):
            ad.log(Tensor(np.array([0.0])))
        with pytest.raises(NonFiniteError, match="exp"):
            ad.exp(Tensor(np.array([1e6])))


def test_adam_zero_grad_and_sign():
    rng = np.random.default_rng(0)
    params = {"w": Tensor(rng.standard_normal(4), requires_grad=True)}
    before = params["w"].data.copy()
    state = ad.adam_init(params)
    ad.adam_step(params, {"w": np.zeros(4)}, state, lr=0.1)
    assert state["step"] == 1
    assert np.array_equal(params["w"].data, before)

    g = np.array([1.0, -2.0, 0.5, -0.1])
    for _ in range(50):
        ad.adam_step(params, {"w": g}, state, lr=0.01)
    moved = params["w"].data - before
    assert np.all(np.sign(moved) == -np.sign(g))


def test_adam_first_step_magnitude():
    # closed form: with zero state, first update is lr * g/|g| (bias corrected)
    params = {"w": Tensor(np.zeros(3), requires_grad=True)}
    state = ad.adam_init(params)
    ad.adam_step(params, {"w": np.array([0.3, -0.7, 2.0])}, state, lr=0.05, eps=1e-12)
    assert np.allclose(np.abs(params["w"].data), 0.05, atol=1e-6)


def test_adam_shape_mismatch():
    params = {"w": Tensor(np.zeros(3), requires_grad=True)}
    state = ad.adam_init(params)
    with pytest.raises(AutodiffError):
        ad.adam_step(params, {"w": np.zeros(4)}, state)


def test_training_determinism_same_seed():
    def run():
        rng = np.random.default_rng(42)
        layer = nn.Dense(rng, 4, 3)
        params = layer.params("d")
        state = ad.adam_init(params)
        data_rng = np.random.default_rng(7)
        for _ in range(20):
            x = Tensor(data_rng.standard_normal((8, 4)))
            target = Tensor(data_rng.standard_normal((8, 3)))
            ad.zero_grads(params)
            with Tape() as tape:
                err = ad.sub(layer(x), target)
                loss = ad.mean(ad.mul(err, err))
            ad.backward(tape, loss)
            ad.adam_step(params, ad.collect_grads(params), state, lr=1e-2)
        return {k: v.data.copy() for k, v in params.items()}

    a, b = run(), run()
    for k in a:
        assert np.array_equal(a[k], b[k])
