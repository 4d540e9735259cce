"""Layer-kit tests: finite-difference gradient oracle, shape algebra, Adam."""

import numpy as np
import pytest

from spectrum_sentinel import nn
from spectrum_sentinel.errors import InvalidArgument, InvalidState, NumericError


def finite_difference_grads(chain, params, x, loss_fn, h=1e-4):
    """Central-difference gradient of loss_fn(forward(x)) w.r.t. every parameter.

    Independent of the analytic backward path: only calls forward().
    """
    grads = []
    for t in params.tensors:
        g = np.zeros_like(t, dtype=np.float64)
        it = np.nditer(t, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            orig = t[ix]
            t[ix] = orig + h
            lo_hi, _ = chain.forward(params, x)
            t[ix] = orig - h
            lo_lo, _ = chain.forward(params, x)
            t[ix] = orig
            g[ix] = (loss_fn(lo_hi) - loss_fn(lo_lo)) / (2 * h)
            it.iternext()
        grads.append(g)
    return grads


def analytic_grads(chain, params, x, loss_grad_fn):
    out, cache = chain.forward(params, x)
    grads, _ = chain.backward(cache, loss_grad_fn(out))
    return grads


def relative_errors(analytic, numeric):
    errs = []
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
        errs.append((np.abs(a - n) / denom).ravel())
    return np.concatenate(errs)


def _mse_pair(target):
    def loss(y):
        return float(np.mean((y.astype(np.float64) - target) ** 2))

    def grad(y):
        return (2.0 / y.size) * (y.astype(np.float64) - target)

    return loss, grad


SMALL_NETS = [
    ([nn.Conv3x3(2, "tanh"), nn.MaxPool2(), nn.Dense(3, "linear")], (4, 6, 1)),
    ([nn.Conv3x3(3, "tanh"), nn.Conv3x3(2, "linear"), nn.MaxPool2(pool_rows=False)], (3, 5, 2)),
    ([nn.Dense(5, "tanh"), nn.Dense(4, "softmax")], (6,)),
    ([nn.Conv3x3(2, "tanh"), nn.Upsample2(), nn.Conv3x3(1, "linear"), nn.Dense(4, "tanh")], (2, 3, 1)),
    ([nn.Dense(6, "tanh"), nn.Reshape((2, 3, 1)), nn.Conv3x3(2, "tanh"), nn.MaxPool2(), nn.Dense(2, "linear")], (4,)),
    ([nn.Conv3x3(2, "tanh"), nn.MaxPool2(), nn.MaxPool2(pool_rows=False), nn.Dense(3, "tanh")], (5, 7, 1)),
]


@pytest.mark.parametrize("layers,in_shape", SMALL_NETS)
def test_gradients_match_finite_differences(layers, in_shape):
    rng = np.random.default_rng(7)
    chain = nn.Chain(layers, in_shape)
    params = chain.init_params(rng, dtype=np.float64)
    x = rng.normal(size=(2,) + in_shape)
    target = rng.normal(size=(2,) + chain.output_shape)
    loss, grad = _mse_pair(target)
    ana = analytic_grads(chain, params, x, grad)
    num = finite_difference_grads(chain, params, x, loss)
    errs = relative_errors(ana, num)
    assert np.mean(errs < 1e-3) >= 0.99
    assert np.max(errs) < 1e-2


def test_gradient_suite_many_random_nets():
    """20 random small nets; >=99% of parameters within 1e-3 relative error."""
    rng = np.random.default_rng(1234)
    all_errs = []
    for trial in range(20):
        layers = []
        kind = trial % 4
        if kind == 0:
            layers = [nn.Conv3x3(int(rng.integers(1, 4)), "tanh"), nn.MaxPool2(), nn.Dense(3, "tanh")]
            in_shape = (4, 6, 1)
        elif kind == 1:
            layers = [nn.Dense(int(rng.integers(3, 7)), "tanh"), nn.Dense(3, "softmax")]
            in_shape = (5,)
        elif kind == 2:
            layers = [nn.Conv3x3(2, "linear"), nn.Upsample2(rows=False), nn.Conv3x3(1, "tanh"), nn.Dense(2, "linear")]
            in_shape = (3, 4, 2)
        else:
            layers = [nn.Dense(8, "tanh"), nn.Reshape((2, 2, 2)), nn.Conv3x3(2, "tanh"), nn.Dense(3, "linear")]
            in_shape = (6,)
        chain = nn.Chain(layers, in_shape)
        params = chain.init_params(rng, dtype=np.float64)
        x = rng.normal(size=(2,) + in_shape)
        target = rng.normal(size=(2,) + chain.output_shape)
        loss, grad = _mse_pair(target)
        ana = analytic_grads(chain, params, x, grad)
        num = finite_difference_grads(chain, params, x, loss)
        all_errs.append(relative_errors(ana, num))
    errs = np.concatenate(all_errs)
    assert np.mean(errs < 1e-3) >= 0.99


def test_zero_output_gradient_gives_zero_param_gradients():
    rng = np.random.default_rng(0)
    chain = nn.Chain([nn.Conv3x3(2), nn.Dense(3)], (3, 4, 1))
    params = chain.init_params(rng)
    x = rng.normal(size=(2, 3, 4, 1)).astype(np.float32)
    out, cache = chain.forward(params, x)
    grads, gin = chain.backward(cache, np.zeros_like(out))
    assert all(np.all(g == 0) for g in grads)
    assert np.all(gin == 0)


def test_mse_at_target_has_zero_gradient():
    y = np.random.default_rng(3).normal(size=(4, 7)).astype(np.float32)
    loss, grad = nn.mse_loss(y, y.copy())
    assert loss == 0.0
    assert np.all(grad == 0)


def test_conv_all_zero_kernels_give_zero_output():
    chain = nn.Chain([nn.Conv3x3(4, "linear")], (6, 10, 1))
    params = chain.init_params(np.random.default_rng(0))
    params.tensors[0][:] = 0
    params.tensors[1][:] = 0
    out, _ = chain.forward(params, np.ones((1, 6, 10, 1), dtype=np.float32))
    assert np.all(out == 0)


def test_maxpool_shape_6x300():
    chain = nn.Chain([nn.MaxPool2()], (6, 300, 1))
    assert chain.output_shape == (3, 150, 1)


def test_maxpool_odd_axis_uses_ceil_padding():
    chain = nn.Chain([nn.MaxPool2(pool_rows=False)], (3, 75, 2))
    assert chain.output_shape == (3, 38, 2)
    x = np.arange(3 * 75 * 2, dtype=np.float32).reshape(1, 3, 75, 2)
    out, _ = chain.forward(chain.init_params(np.random.default_rng(0)), x)
    assert out.shape == (1, 3, 38, 2)
    # last output column is the max of the single real column 74
    assert np.array_equal(out[0, :, -1, :], x[0, :, 74, :])


def test_softmax_rows_sum_to_one():
    chain = nn.Chain([nn.Dense(8, "softmax")], (5,))
    params = chain.init_params(np.random.default_rng(2))
    out, _ = chain.forward(params, np.random.default_rng(4).normal(size=(9, 5)).astype(np.float32))
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(out >= 0)


def test_forward_rejects_wrong_input_shape():
    chain = nn.Chain([nn.Dense(2)], (4,))
    with pytest.raises(InvalidArgument, match="layer 0"):
        chain.forward(chain.init_params(np.random.default_rng(0)), np.zeros((1, 5), dtype=np.float32))


def test_backward_rejects_stale_cache():
    rng = np.random.default_rng(0)
    a = nn.Chain([nn.Dense(2)], (4,))
    b = nn.Chain([nn.Dense(2)], (4,))
    pa = a.init_params(rng)
    out, cache = a.forward(pa, np.zeros((1, 4), dtype=np.float32))
    with pytest.raises(InvalidState, match="stale"):
        b.backward(cache, np.zeros_like(out))


class TestAdam:
    def test_first_step_magnitude_equals_lr(self):
        params = nn.Params([np.zeros((1,), dtype=np.float64)])
        cfg = nn.AdamConfig(learning_rate=0.001)
        nn.adam_step(params, [np.ones((1,), dtype=np.float64)], cfg)
        assert abs(abs(params.tensors[0][0]) - cfg.learning_rate) < 1e-9
        assert params.tensors[0][0] < 0
        assert params.step == 1

    def test_zero_gradients_leave_params_unchanged(self):
        t = np.random.default_rng(0).normal(size=(3, 2)).astype(np.float32)
        params = nn.Params([t.copy()])
        for _ in range(5):
            nn.adam_step(params, [np.zeros_like(t)], nn.AdamConfig())
        assert np.array_equal(params.tensors[0], t)

    def test_identical_replicas_stay_identical(self):
        rng = np.random.default_rng(5)
        t = rng.normal(size=(4,)).astype(np.float32)
        g = rng.normal(size=(4,)).astype(np.float32)
        p1, p2 = nn.Params([t.copy()]), nn.Params([t.copy()])
        for _ in range(10):
            nn.adam_step(p1, [g], nn.AdamConfig())
            nn.adam_step(p2, [g], nn.AdamConfig())
        assert np.array_equal(p1.tensors[0], p2.tensors[0])

    def test_nonfinite_gradient_raises(self):
        params = nn.Params([np.zeros((2,), dtype=np.float32)])
        bad = np.array([1.0, np.nan], dtype=np.float32)
        with pytest.raises(NumericError):
            nn.adam_step(params, [bad], nn.AdamConfig())

    def test_shape_mismatch_raises(self):
        params = nn.Params([np.zeros((2,), dtype=np.float32)])
        with pytest.raises(InvalidArgument):
            nn.adam_step(params, [np.zeros((3,), dtype=np.float32)], nn.AdamConfig())

    def test_bad_config_rejected(self):
        with pytest.raises(InvalidArgument):
            nn.AdamConfig(learning_rate=0.0)
        with pytest.raises(InvalidArgument):
            nn.AdamConfig(beta1=1.0)


def test_init_is_deterministic_under_fixed_seed():
    chain = nn.Chain([nn.Conv3x3(3), nn.Dense(5)], (4, 6, 1))
    p1 = chain.init_params(np.random.default_rng(42))
    p2 = chain.init_params(np.random.default_rng(42))
    for a, b in zip(p1.tensors, p2.tensors):
        assert np.array_equal(a, b)


def test_snapshot_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    tensors = [rng.normal(size=(3, 3, 1, 2)).astype(np.float32), rng.normal(size=(7,)).astype(np.float32)]
    path = tmp_path / "params.aaep"
    nn.save_tensors(path, tensors)
    loaded = nn.load_tensors(path)
    assert len(loaded) == 2
    for a, b in zip(tensors, loaded):
        assert np.array_equal(a, b)


def test_snapshot_bad_magic(tmp_path):
    path = tmp_path / "bad.aaep"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(InvalidArgument, match="magic"):
        nn.load_tensors(path)


def test_cross_entropy_gradient_direction():
    probs = np.array([[0.7, 0.2, 0.1]], dtype=np.float32)
    onehot = np.array([[0.0, 1.0, 0.0]], dtype=np.float32)
    loss, grad = nn.cross_entropy_loss(probs, onehot)
    assert loss == pytest.approx(-np.log(0.2), rel=1e-6)
    assert grad[0, 1] < 0 and grad[0, 0] == 0 and grad[0, 2] == 0
