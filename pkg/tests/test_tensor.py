import numpy as np
import pytest

from adrf import tensor as T
from adrf.gradcheck import check_gradients, relative_error
from adrf.tensor import NumericError, ShapeError, Tape, Tensor


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


# ---------------------------------------------------------------- forward values


def test_matmul_identity(rng):
    a = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_leaky_relu_slope():
    assert T.leaky_relu(Tensor([-1.0]), 0.2).data[0] == pytest.approx(-0.2)
    assert T.leaky_relu(Tensor([3.0]), 0.2).data[0] == 3.0


@pytest.mark.parametrize("slope", [0.0, 1.0, -0.1])
def test_leaky_relu_rejects_bad_slope(slope):
    with pytest.raises(ShapeError):
        T.leaky_relu(Tensor([1.0]), slope)


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    y = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), stride=1, pad=0)
    np.testing.assert_array_equal(y.data, x)


@pytest.mark.parametrize("size,k,stride,pad", [(32, 3, 2, 1), (32, 3, 1, 1), (7, 3, 2, 0), (5, 5, 1, 2), (9, 1, 3, 0)])
def test_conv_output_shape_formula(rng, size, k, stride, pad):
    y = T.conv2d(Tensor(rng.normal(size=(2, 3, size, size))), Tensor(rng.normal(size=(4, 3, k, k))),
                 stride=stride, pad=pad)
    expect = (size + 2 * pad - k) // stride + 1
    assert y.shape == (2, 4, expect, expect)


def test_conv_matches_direct_sum(rng):
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(y)
    for i in range(y.shape[2]):
        for j in range(y.shape[3]):
            patch = xp[:, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
            ref[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w) + b
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_upsample_nearest():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    y = T.upsample(x, 2).data[0, 0]
    np.testing.assert_array_equal(y, [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


def test_repeat_vector_rows_identical(rng):
    z = T.repeat_vector(Tensor(rng.normal(size=(2, 64))), 3)
    assert z.shape == (2, 3, 64)
    assert np.array_equal(z.data[:, 0], z.data[:, 2])


def test_losses_arithmetic():
    p, t = Tensor([0.0, 0.0]), Tensor([1.0, 1.0])
    assert T.loss("mse", p, t).item() == 1.0
    assert T.loss("mae", p, t).item() == 1.0
    assert T.loss("mse+mae", p, t).item() == 2.0
    assert T.loss("bce", Tensor([0.5]), Tensor([1.0])).item() == pytest.approx(np.log(2.0), abs=1e-12)
    x = Tensor([0.3, -2.0])
    assert T.mse(x, x).item() == 0.0


def test_loss_errors():
    with pytest.raises(ShapeError):
        T.mse(Tensor([1.0, 2.0]), Tensor([1.0]))
    with pytest.raises(ValueError):
        T.bce(Tensor([1.0]), Tensor([1.0]))
    with pytest.raises(ValueError):
        T.loss("huber", Tensor([1.0]), Tensor([1.0]))


def test_bce_with_logits_matches_bce(rng):
    z = rng.normal(size=6)
    y = (rng.random(6) > 0.5).astype(float)
    a = T.bce_with_logits(Tensor(z), y).item()
    b = T.bce(T.sigmoid(Tensor(z)), y).item()
    assert a == pytest.approx(b, rel=1e-12)


# ---------------------------------------------------------------- error states


def test_shape_mismatch_errors(rng):
    with pytest.raises(ShapeError):
        T.matmul(Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3))))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=0)
    with pytest.raises(ShapeError):
        T.reshape(Tensor(np.ones(6)), (4, 2))
    with pytest.raises(ShapeError):
        Tensor(np.ones((0, 3)))


def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        T.mul(Tensor([1e200]), Tensor([1e200]))


def test_backward_requires_scalar(rng):
    x = param(rng, 3)
    with Tape() as tape:
        y = T.tanh(x)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_unreachable_leaf_gets_zero_grad(rng):
    x, unused = param(rng, 3), param(rng, 3)
    with Tape() as tape:
        _ = T.tanh(unused)
        loss = T.sum_all(T.tanh(x))
    tape.backward(loss)
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


def test_tanh_derivative_at_zero():
    x = Tensor([0.0], requires_grad=True)
    with Tape() as tape:
        y = T.sum_all(T.tanh(x))
    tape.backward(y)
    assert x.grad[0] == 1.0


def test_mse_of_identical_inputs_has_zero_grad(rng):
    x = param(rng, 4)
    with Tape() as tape:
        loss = T.mse(x, x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.zeros(4))


def test_gradients_accumulate_over_reuse():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(T.mul(x, x))
    tape.backward(loss)
    assert x.grad[0] == 4.0


def test_no_recording_without_grad(rng):
    with Tape() as tape:
        T.tanh(Tensor(rng.normal(size=3)))
    assert len(tape) == 0


# ---------------------------------------------------------------- gradient checks

GRAD_TOL = 1e-4


def _cases(rng):
    a, b = param(rng, 3, 4), param(rng, 3, 4)
    row = param(rng, 1, 4)
    m1, m2 = param(rng, 3, 5), param(rng, 5, 2)
    x4 = param(rng, 2, 2, 5, 5)
    w4 = param(rng, 3, 2, 3, 3, scale=0.5)
    b4 = param(rng, 3)
    seq = param(rng, 2, 3, 4)
    vec = param(rng, 2, 4)
    prob_logits = param(rng, 5)
    target = rng.random((3, 4))
    lab = (rng.random(5) > 0.5).astype(float)
    return {
        "add-broadcast": (lambda: T.sum_all(T.mul(T.add(a, row), b)), [a, b, row]),
        "sub": (lambda: T.sum_all(T.mul(T.sub(a, b), a)), [a, b]),
        "mul": (lambda: T.sum_all(T.mul(a, b)), [a, b]),
        "tanh": (lambda: T.sum_all(T.mul(T.tanh(a), b)), [a, b]),
        "sigmoid": (lambda: T.sum_all(T.mul(T.sigmoid(a), b)), [a, b]),
        "leaky_relu": (lambda: T.sum_all(T.mul(T.leaky_relu(a, 0.2), b)), [a, b]),
        "matmul": (lambda: T.sum_all(T.tanh(T.matmul(m1, m2))), [m1, m2]),
        "reshape-flatten": (lambda: T.sum_all(T.mul(T.flatten(T.reshape(a, (2, 6))), T.reshape(b, (2, 6)))), [a, b]),
        "concat": (lambda: T.sum_all(T.tanh(T.concat([a, b], axis=0))), [a, b]),
        "stack-select": (lambda: T.sum_all(T.mul(T.select(T.stack([a, b], axis=1), 1, axis=1), a)), [a, b]),
        "repeat": (lambda: T.sum_all(T.tanh(T.repeat_vector(vec, 3))), [vec]),
        "mean": (lambda: T.mean_all(T.mul(a, a)), [a]),
        "conv2d-stride2": (lambda: T.sum_all(T.tanh(T.conv2d(x4, w4, b4, stride=2, pad=1))), [x4, w4, b4]),
        "conv2d-stride1": (lambda: T.sum_all(T.tanh(T.conv2d(x4, w4, b4, stride=1, pad=1))), [x4, w4, b4]),
        "upsample": (lambda: T.sum_all(T.tanh(T.upsample(x4, 2))), [x4]),
        "mse": (lambda: T.mse(a, target), [a]),
        "mae": (lambda: T.mae(a, target), [a]),
        "mse+mae": (lambda: T.loss("mse+mae", a, target), [a]),
        "bce": (lambda: T.bce(T.sigmoid(prob_logits), lab), [prob_logits]),
        "bce_with_logits": (lambda: T.bce_with_logits(prob_logits, lab), [prob_logits]),
        "lstm_cell": (lambda: _lstm_loss(seq), [seq]),
    }


_LSTM = {}


def _lstm_loss(seq):
    rng = np.random.default_rng(5)
    if not _LSTM:
        H = 3
        _LSTM["w"] = Tensor(rng.normal(size=(4 * H, 4)) * 0.5, requires_grad=True)
        _LSTM["u"] = Tensor(rng.normal(size=(4 * H, H)) * 0.5, requires_grad=True)
        _LSTM["b"] = Tensor(rng.normal(size=4 * H) * 0.1, requires_grad=True)
    w, u, b = _LSTM["w"], _LSTM["u"], _LSTM["b"]
    h = c = Tensor(np.zeros((2, 3)))
    total = None
    for t in range(3):
        h, c = T.lstm_cell(T.select(seq, t, axis=1), h, c, w, u, b)
        step = T.sum_all(T.mul(h, h)) + T.sum_all(T.mul(c, c)) * 0.5
        total = step if total is None else total + step
    return total


@pytest.mark.parametrize("name", list(_cases(np.random.default_rng(0))))
def test_op_gradients(name):
    fn, params = _cases(np.random.default_rng(42))[name]
    if name == "lstm_cell":
        _lstm_loss(params[0])
        params = params + [_LSTM["w"], _LSTM["u"], _LSTM["b"]]
    assert check_gradients(fn, params) < GRAD_TOL


def test_two_layer_net_gradients(rng):
    x = rng.normal(size=(5, 4))
    y = rng.normal(size=(5, 2))
    w1, b1 = param(rng, 4, 8, scale=0.5), param(rng, 8)
    w2, b2 = param(rng, 8, 2, scale=0.5), param(rng, 2)

    def loss():
        h = T.tanh(T.add(T.matmul(Tensor(x), w1), b1))
        return T.mse(T.add(T.matmul(h, w2), b2), y)

    assert check_gradients(loss, [w1, b1, w2, b2]) < GRAD_TOL


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-9])) < 1e-2
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
