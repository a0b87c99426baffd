import numpy as np
import pytest

import dcq.autodiff as ad
from dcq.errors import ShapeError, TrainingError


def _t(arr, grad=False):
    return ad.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


# --- forward semantics --------------------------------------------------------


def test_relu_values():
    out = ad.relu(_t([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_softmax_uniform():
    out = ad.softmax(_t([[0.0, 0.0, 0.0, 0.0]]))
    assert np.allclose(out.data, 0.25)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = ad.softmax(_t(rng.normal(size=(50, 7)) * 10))
    assert np.all(out.data >= 0)
    assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)


def test_concat_preserves_order():
    a = _t(np.arange(64, dtype=np.float64)[None])
    b = _t(np.arange(256, dtype=np.float64)[None] + 1000)
    out = ad.concat([a, b], axis=1)
    assert out.shape == (1, 320)
    assert np.array_equal(out.data[0, :64], a.data[0])
    assert np.array_equal(out.data[0, 64:], b.data[0])


def test_conv3d_identity_kernel():
    rng = np.random.default_rng(1)
    x = _t(rng.normal(size=(2, 1, 4, 4, 4)))
    w = _t(np.ones((1, 1, 1, 1, 1)))
    b = _t(np.zeros(1))
    out = ad.conv3d(x, w, b)
    assert np.array_equal(out.data, x.data)


def test_conv3d_zero_input_gives_bias():
    x = _t(np.zeros((1, 2, 4, 4, 4)))
    w = _t(np.ones((3, 2, 3, 3, 3)))
    b = _t([1.0, -2.0, 0.5])
    out = ad.conv3d(x, w, b, padding=1)
    for k in range(3):
        assert np.allclose(out.data[0, k], b.data[k])


def test_conv3d_output_shape():
    x = _t(np.zeros((1, 1, 9, 9, 9)))
    w = _t(np.zeros((4, 1, 3, 3, 3)))
    out = ad.conv3d(x, w, stride=2, padding=1)
    assert out.shape == (1, 4, 5, 5, 5)


def test_conv3d_shape_errors():
    with pytest.raises(ShapeError):
        ad.conv3d(_t(np.zeros((1, 2, 4, 4, 4))), _t(np.zeros((1, 3, 3, 3, 3))))
    with pytest.raises(ShapeError):
        ad.conv3d(_t(np.zeros((1, 1, 2, 2, 2))), _t(np.zeros((1, 1, 3, 3, 3))))


def test_global_avg_pool():
    x = _t(np.arange(16, dtype=np.float64).reshape(1, 2, 2, 2, 2))
    out = ad.global_avg_pool(x)
    assert np.allclose(out.data, [[3.5, 11.5]])


def test_losses():
    assert ad.mse_loss(_t([0.0, 0.0]), _t([2.0, 0.0])).item() == 2.0
    assert ad.mse_loss(_t([1.0]), _t([1.0])).item() == 0.0
    assert abs(ad.rmse_loss(_t([1.0]), _t([1.0])).item() - 1e-6) < 1e-9


# --- gradient checks ----------------------------------------------------------


def test_grad_linear():
    rng = np.random.default_rng(2)
    x = _t(rng.normal(size=(4, 6)), grad=True)
    w = _t(rng.normal(size=(3, 6)), grad=True)
    b = _t(rng.normal(size=3), grad=True)
    t = _t(rng.normal(size=(4, 3)))
    err = ad.grad_check(lambda: ad.mse_loss(ad.linear(x, w, b), t), [x, w, b])
    assert err < 1e-6


def test_grad_conv3d():
    rng = np.random.default_rng(3)
    x = _t(rng.normal(size=(1, 2, 4, 4, 4)), grad=True)
    w = _t(rng.normal(size=(2, 2, 3, 3, 3), scale=0.5), grad=True)
    b = _t(rng.normal(size=2), grad=True)
    t = _t(rng.normal(size=(1, 2, 2, 2, 2)))
    err = ad.grad_check(
        lambda: ad.mse_loss(ad.conv3d(x, w, b, stride=2, padding=1), t), [x, w, b]
    )
    assert err < 1e-4


def test_grad_rmse():
    rng = np.random.default_rng(4)
    p = _t(rng.normal(size=(8, 1)), grad=True)
    t = _t(rng.normal(size=(8, 1)))
    err = ad.grad_check(lambda: ad.rmse_loss(p, t), [p])
    assert err < 1e-4


def test_grad_softmax_pool_concat():
    rng = np.random.default_rng(5)
    x = _t(rng.normal(size=(2, 3, 4, 4, 4)), grad=True)
    w = _t(rng.normal(size=(5, 6)), grad=True)
    t = _t(rng.normal(size=(2, 5)))

    def loss():
        pooled = ad.global_avg_pool(x)
        fused = ad.concat([pooled, pooled], axis=1)
        return ad.mse_loss(ad.softmax(ad.linear(fused, w)), t)

    assert ad.grad_check(loss, [x, w]) < 1e-5


def test_grad_index_select_and_residual():
    rng = np.random.default_rng(6)
    x = _t(rng.normal(size=(5, 4)), grad=True)
    idx = np.array([0, 2, 2, 4, 1, 0])
    t = _t(rng.normal(size=(6, 4)))

    def loss():
        rows = ad.index_select(x, idx)
        return ad.mse_loss(ad.residual_add(rows, rows), t)

    assert ad.grad_check(loss, [x]) < 1e-6


# --- Adam and schedule ----------------------------------------------------------


def test_adam_zero_grad_no_update():
    p = ad.Parameter("p", _t([1.0, 2.0], grad=True))
    p.tensor.grad = np.zeros(2)
    before = p.tensor.data.copy()
    ad.adam_step([p], ad.AdamState(), lr=0.1)
    assert np.array_equal(p.tensor.data, before)


def test_adam_first_step_magnitude():
    p = ad.Parameter("p", _t([0.0], grad=True))
    p.tensor.grad = np.array([1.0])
    ad.adam_step([p], ad.AdamState(), lr=0.01)
    assert abs(abs(float(p.tensor.data[0])) - 0.01) < 1e-6


def test_adam_skips_frozen():
    p = ad.Parameter("p", _t([1.0], grad=True), trainable=False)
    p.tensor.grad = np.array([1.0])
    ad.adam_step([p], ad.AdamState(), lr=0.1)
    assert p.tensor.data[0] == 1.0


def test_adam_nan_gradient_raises():
    p = ad.Parameter("bad.weight", _t([1.0], grad=True))
    p.tensor.grad = np.array([np.nan])
    with pytest.raises(TrainingError, match="bad.weight"):
        ad.adam_step([p], ad.AdamState(), lr=0.1)


def test_step_decay_schedule():
    total = 9
    assert ad.step_decay_lr(0, total, 0.01) == 0.01
    assert ad.step_decay_lr(total * 2 // 3, total, 0.01) == 0.01 / 4
    assert ad.step_decay_lr(total - 1, total, 0.01) == 0.01 / 4


def test_linear_model_trains():
    # y = 3x + 1 over 100 points reaches mse < 1e-4 within 2000 steps
    xs = np.linspace(-1, 1, 100).reshape(-1, 1).astype(np.float32)
    ys = (3 * xs + 1).astype(np.float32)
    w = ad.Parameter("w", ad.Tensor(np.zeros((1, 1), np.float32), requires_grad=True))
    b = ad.Parameter("b", ad.Tensor(np.zeros(1, np.float32), requires_grad=True))
    state = ad.AdamState()
    xt, yt = ad.Tensor(xs), ad.Tensor(ys)
    loss = None
    for _ in range(2000):
        ad.zero_grads([w, b])
        loss = ad.mse_loss(ad.linear(xt, w.tensor, b.tensor), yt)
        if loss.item() < 1e-4:
            break
        ad.backward(loss)
        ad.adam_step([w, b], state, lr=0.01)
    assert loss.item() < 1e-4


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        ad.backward(_t([1.0, 2.0], grad=True))


def test_forward_deterministic():
    rng = np.random.default_rng(7)
    x = np.asarray(rng.normal(size=(3, 1, 8, 8, 8)), dtype=np.float32)
    w = np.asarray(rng.normal(size=(4, 1, 3, 3, 3)), dtype=np.float32)
    a = ad.conv3d(ad.Tensor(x), ad.Tensor(w), padding=1).data
    b = ad.conv3d(ad.Tensor(x), ad.Tensor(w), padding=1).data
    assert np.array_equal(a, b)
