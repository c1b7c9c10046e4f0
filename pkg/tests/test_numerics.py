import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rscnet import numerics as nx
from rscnet.numerics import ConvSpec, LstmParams, Tensor

from oracles import conv2d_loops, finite_difference, lstm_cell_loops, mse_loops, relative_error


def gradcheck(fn, arrays, seed=0, eps=1e-6, max_entries=40):
    """Compare reverse-mode gradients of ``sum(w * fn(*tensors))`` with central
    differences at 64-bit. Returns the worst relative error."""
    rng = np.random.default_rng(seed)
    with nx.precision(np.float64):
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        probe = None

        def scalar():
            nonlocal probe
            out = fn(*tensors)
            if probe is None:
                probe = rng.standard_normal(out.shape)
            return float((out.data * probe).sum())

        scalar()
        out = fn(*tensors)
        nx.backward(nx.sum(out * Tensor(probe)))
        analytic = [t.grad.copy() for t in tensors]
        numeric = finite_difference(scalar, [t.data for t in tensors], eps=eps,
                                    max_entries=max_entries, rng=rng)
    worst = 0.0
    for g, (idx, vals) in zip(analytic, numeric):
        worst = max(worst, relative_error(g.reshape(-1)[idx], vals, floor=1e-6))
    return worst


rng0 = np.random.default_rng(42)


def rand(*shape):
    return rng0.standard_normal(shape)


# -- tensor basics -------------------------------------------------------------

def test_tensor_rejects_non_finite():
    with pytest.raises(nx.NonFiniteError):
        nx.mul(Tensor([1e30], dtype=np.float32), Tensor([1e30], dtype=np.float32))


def test_backward_needs_scalar():
    with pytest.raises(ValueError, match="scalar"):
        nx.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_sum_gradient_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    nx.backward(nx.sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_mse_scalar_derivative(f64):
    x = Tensor([1.75], requires_grad=True)
    nx.backward(nx.mse(Tensor([0.0]), x))
    assert x.grad[0] == pytest.approx(2 * 1.75)


def test_backward_overwrites_instead_of_accumulating():
    x = Tensor([2.0], requires_grad=True)
    for _ in range(3):
        nx.backward(nx.sum(x * x))
    assert x.grad[0] == pytest.approx(4.0)


def test_precision_switch():
    with nx.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


# -- gradient suite -------------------------------------------------------------

GRAD_CASES = {
    "add_broadcast": (lambda a, b: a + b, [rand(3, 4), rand(4)]),
    "sub": (lambda a, b: a - b, [rand(2, 3), rand(2, 3)]),
    "mul_broadcast": (lambda a, b: a * b, [rand(2, 3, 4), rand(3, 1)]),
    "sum": (lambda a: nx.sum(a).reshape(1), [rand(3, 5)]),
    "mean": (lambda a: nx.mean(a).reshape(1), [rand(4, 2)]),
    "reshape": (lambda a: nx.reshape(a, (6, 2)), [rand(3, 4)]),
    "getitem_slice": (lambda a: a[:, 1:3], [rand(3, 4)]),
    "getitem_fancy": (lambda a: a[np.array([0, 2, 0])], [rand(3, 2)]),
    "concat": (lambda a, b: nx.concat([a, b], axis=1), [rand(2, 3), rand(2, 2)]),
    "stack": (lambda a, b: nx.stack([a, b], axis=1), [rand(2, 3), rand(2, 3)]),
    "linear": (lambda x, w, b: nx.linear(x, w, b), [rand(2, 3, 4), rand(5, 4), rand(5)]),
    "sigmoid": (nx.sigmoid, [rand(3, 4) * 3]),
    "tanh": (nx.tanh, [rand(3, 4) * 2]),
    "relu": (nx.relu, [rand(3, 4) + 0.05]),
    "prelu": (nx.prelu, [rand(2, 3, 4) + 0.05, rand(3) * 0.3]),
    "softmax": (lambda z: nx.softmax(z), [rand(3, 5)]),
    "cross_entropy": (lambda z: nx.cross_entropy(z, [1, 0, 4]).reshape(1), [rand(3, 5)]),
    "mse": (lambda a, b: nx.mse(a, b).reshape(1), [rand(2, 6), rand(2, 6)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_op_gradients(name):
    fn, arrays = GRAD_CASES[name]
    assert gradcheck(fn, [a.copy() for a in arrays]) < 1e-4


def test_batch_norm_gradients_training():
    mean, var = np.zeros(3), np.ones(3)

    def fn(x, g, b):
        return nx.batch_norm(x, g, b, mean.copy(), var.copy(), training=True)

    assert gradcheck(fn, [rand(4, 3, 2, 5), rand(3), rand(3)]) < 1e-4


def test_batch_norm_gradients_eval():
    mean, var = rand(3) * 0.1, np.abs(rand(3)) + 0.5

    def fn(x, g, b):
        return nx.batch_norm(x, g, b, mean, var, training=False)

    assert gradcheck(fn, [rand(2, 3, 7), rand(3), rand(3)]) < 1e-4


@pytest.mark.parametrize("kh,kw,d", [(3, 3, 1), (3, 1, 2), (1, 5, 3), (5, 5, 2)])
def test_conv_gradients(backend, kh, kw, d):
    spec = ConvSpec(2, 3, kh, kw, d)

    def fn(x, w, b):
        return nx.conv2d(x, spec, w, b)

    assert gradcheck(fn, [rand(2, 2, 7, 6), rand(*spec.weight_shape), rand(3)]) < 1e-4


def test_lstm_gradients():
    def fn(x, h, c, w, b):
        h2, c2 = nx.lstm_cell(x, h, c, LstmParams(w, b))
        return nx.concat([h2, c2], axis=-1)

    arrays = [rand(2, 3), rand(2, 4), rand(2, 4), rand(16, 7) * 0.5, rand(16) * 0.5]
    assert gradcheck(fn, arrays) < 1e-4


# -- conv ------------------------------------------------------------------------

@pytest.mark.parametrize("k,d,expected", [(3, 1, 3), (3, 2, 5), (5, 3, 13)])
def test_effective_kernel_size(k, d, expected):
    assert nx.effective_kernel_size(k, d) == expected


@given(st.integers(2, 9), st.integers(1, 6))
def test_effective_kernel_increasing_in_dilation(k, d):
    assert nx.effective_kernel_size(k, d + 1) > nx.effective_kernel_size(k, d) >= k


def test_conv_identity_kernel(backend):
    x = Tensor(rand(2, 3, 5, 4))
    spec = ConvSpec(3, 3, 1, 1)
    w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
    out = nx.conv2d(x, spec, w, Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x.data)


def test_conv_zero_input(backend):
    spec = ConvSpec(3, 2, 3, 3)
    out = nx.conv2d(Tensor(np.zeros((3, 5, 5))), spec, Tensor(rand(*spec.weight_shape)))
    assert out.shape == (2, 5, 5) and not out.data.any()


def test_conv_matches_nested_loops_small(backend, f64):
    x, w = rand(1, 5, 5), rand(1, 1, 3, 3)
    out = nx.conv2d(Tensor(x), ConvSpec(1, 1, 3, 3, 2), Tensor(w))
    assert np.allclose(out.data, conv2d_loops(x, w, None, 2), rtol=0, atol=1e-12)


def test_conv_shape_errors():
    spec = ConvSpec(2, 3, 3, 3)
    with pytest.raises(ValueError, match="channels"):
        nx.conv2d(Tensor(np.zeros((1, 4, 5, 5))), spec, Tensor(np.zeros(spec.weight_shape)))
    with pytest.raises(ValueError, match="weight shape"):
        nx.conv2d(Tensor(np.zeros((1, 2, 5, 5))), spec, Tensor(np.zeros((3, 2, 3, 1))))
    with pytest.raises(ValueError):
        ConvSpec(0, 1, 3, 3)


def test_conv_same_output_size_for_model_specs():
    from rscnet.model import ModelConfig, conv_plan
    for nf in (5, 10, 25, 50, 125, 250):
        for name, spec, _ in conv_plan(ModelConfig(window_frames=nf)):
            kh, kw = spec.effective_kernel
            ph, pw = spec.check_input(30, nf)
            assert (30 + kh - 1 - (kh - 1), nf + kw - 1 - (kw - 1)) == (30, nf)
            assert ph == (kh - 1) // 2 and pw == (kw - 1) // 2


def test_backends_agree(f64):
    if len(nx.available_backends()) < 2:
        pytest.skip("compiled extension not built")
    spec = ConvSpec(3, 4, 3, 5, 2)
    x, w = Tensor(rand(2, 3, 9, 11), requires_grad=True), Tensor(rand(*spec.weight_shape),
                                                                  requires_grad=True)
    results = {}
    previous = nx.get_backend()
    try:
        for name in nx.available_backends():
            nx.set_backend(name)
            y = nx.conv2d(x, spec, w)
            nx.backward(nx.sum(y * y))
            results[name] = (y.data.copy(), x.grad.copy(), w.grad.copy())
    finally:
        nx.set_backend(previous)
    for a, b in zip(results["ext"], results["python"]):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        nx.set_backend("cuda")


# -- linear, activations, losses -------------------------------------------------

def test_linear_examples():
    x = Tensor([1.0, 2.0])
    assert nx.linear(x, Tensor([[1.0, 1.0]]), Tensor([0.0])).data.tolist() == [3.0]
    eye = nx.linear(Tensor(rand(4, 3)), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    assert eye.shape == (4, 3)
    assert nx.linear(Tensor(rand(8, 4500)), Tensor(rand(50, 4500))).shape == (8, 50)
    with pytest.raises(ValueError):
        nx.linear(Tensor(rand(2, 3)), Tensor(rand(4, 5)))


def test_softmax_examples(f64):
    assert np.allclose(nx.softmax(Tensor(np.zeros(7))).data, 1 / 7)
    z = rand(7)
    assert np.allclose(nx.softmax(Tensor(z)).data, nx.softmax(Tensor(z + 123.0)).data)
    big = nx.softmax(Tensor([1000.0, 0.0])).data
    assert big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0, abs=1e-300)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=9))
def test_softmax_sums_to_one(z):
    with nx.precision(np.float64):
        p = nx.softmax(Tensor(z)).data
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9


def test_cross_entropy_examples(f64):
    assert nx.cross_entropy(Tensor(np.zeros((1, 7))), [3]).item() == pytest.approx(math.log(7))
    assert nx.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(0.693147, abs=1e-6)
    assert nx.cross_entropy(Tensor([[60.0, 0.0, 0.0]]), [0]).item() < 1e-20
    with pytest.raises(ValueError, match="range"):
        nx.cross_entropy(Tensor(np.zeros((1, 3))), [3])


@given(st.lists(st.floats(-30, 30), min_size=3, max_size=3), st.integers(0, 2))
def test_cross_entropy_nonnegative(z, y):
    with nx.precision(np.float64):
        assert nx.cross_entropy(Tensor([z]), [y]).item() >= 0


def test_mse_examples(f64):
    h = rand(3, 4)
    assert nx.mse(Tensor(h), Tensor(h)).item() == 0
    assert nx.mse(Tensor(np.zeros(4)), Tensor(np.ones(4))).item() == 1.0
    a, b = rand(2, 5), rand(2, 5)
    assert nx.mse(Tensor(a), Tensor(b)).item() == pytest.approx(mse_loops(a, b), rel=1e-12)
    with pytest.raises(ValueError):
        nx.mse(Tensor(rand(2)), Tensor(rand(3)))


# -- LSTM --------------------------------------------------------------------------

def test_lstm_zero_everything():
    n, d = 4, 3
    p = LstmParams(Tensor(np.zeros((4 * n, d + n))), Tensor(np.zeros(4 * n)))
    h, c = nx.lstm_cell(Tensor(np.zeros(d)), Tensor(np.zeros(n)), Tensor(np.zeros(n)), p)
    assert not h.data.any() and not c.data.any()


def test_lstm_saturated_forget_keeps_cell(f64):
    n, d = 3, 2
    bias = np.full(4 * n, -50.0)
    bias[n:2 * n] = 50.0                      # forget gate open, others shut
    p = LstmParams(Tensor(np.zeros((4 * n, d + n))), Tensor(bias))
    c0 = rand(n)
    _, c = nx.lstm_cell(Tensor(rand(d)), Tensor(rand(n)), Tensor(c0), p)
    assert np.allclose(c.data, c0, atol=1e-6)


def test_lstm_matches_scalar_oracle(f64):
    n, d = 3, 4
    w, b = rand(4 * n, d + n), rand(4 * n)
    x, h, c = rand(d), rand(n), rand(n)
    h2, c2 = nx.lstm_cell(Tensor(x), Tensor(h), Tensor(c), LstmParams(Tensor(w), Tensor(b)))
    rh, rc = lstm_cell_loops(x, h, c, w, b)
    assert np.allclose(h2.data, rh, atol=1e-12) and np.allclose(c2.data, rc, atol=1e-12)


def test_lstm_gate_blocks():
    w = Tensor(np.arange(4 * 2 * 5, dtype=float).reshape(8, 5))
    p = LstmParams(w, Tensor(np.arange(8.0)))
    assert p.hidden_size == 2 and p.input_size == 3
    assert np.array_equal(p.gate_block("forget"), w.data[2:4])
    assert np.array_equal(p.gate_bias("output"), [6.0, 7.0])


# -- optimizer ---------------------------------------------------------------------

def test_sgd_zero_gradient_no_change():
    w = Tensor([1.0, -2.0], requires_grad=True)
    nx.sgd_step(nx.OptimizerState(0.01, 0.9), {"w": w}, {"w": np.zeros(2, np.float32)})
    assert w.data.tolist() == [1.0, -2.0]


def test_sgd_one_step(f64):
    w = Tensor([1.0], requires_grad=True)
    nx.sgd_step(nx.OptimizerState(0.01, 0.0), {"w": w}, {"w": np.array([0.1])})
    assert w.data[0] == pytest.approx(0.999, abs=1e-15)


def test_sgd_two_steps_unrolled(f64):
    lr, mu, wd = 0.05, 0.9, 0.01
    w0, g1, g2 = 0.7, 0.3, -0.2
    w = Tensor([w0], requires_grad=True)
    state = nx.OptimizerState(lr, mu, wd)
    nx.sgd_step(state, {"w": w}, {"w": np.array([g1])})
    nx.sgd_step(state, {"w": w}, {"w": np.array([g2])})
    v1 = g1 + wd * w0
    w1 = w0 - lr * v1
    v2 = mu * v1 + g2 + wd * w1
    assert w.data[0] == pytest.approx(w1 - lr * v2, abs=1e-15)
    assert state.step_index == 2


def test_sgd_lr_zero_changes_nothing():
    w = Tensor(rand(3, 3), requires_grad=True, dtype=np.float32)
    before = w.data.copy()
    nx.sgd_step(nx.OptimizerState(0.01, 0.9, 1e-3), {"w": w}, {"w": rand(3, 3).astype(np.float32)},
                lr=0.0)
    assert np.array_equal(w.data, before)


def test_sgd_rejects_non_finite():
    w = Tensor([1.0], requires_grad=True)
    with pytest.raises(FloatingPointError):
        nx.sgd_step(nx.OptimizerState(), {"w": w}, {"w": np.array([np.nan], np.float32)})


def test_optimizer_state_validation():
    with pytest.raises(ValueError):
        nx.OptimizerState(momentum=1.0)
    with pytest.raises(ValueError):
        nx.OptimizerState(weight_decay=-1)
    with pytest.raises(ValueError):
        nx.OptimizerState(method="rmsprop")


def test_adam_first_step_moves_by_lr(f64):
    # with bias correction the first Adam step is lr * sign(g)
    w = Tensor([1.0, 1.0], requires_grad=True)
    nx.adam_step(nx.OptimizerState(0.1, 0.9, method="adam"), {"w": w},
                 {"w": np.array([3.0, -0.002])})
    assert np.allclose(w.data, [0.9, 1.1], atol=1e-6)


def test_cosine_lr_examples():
    assert nx.cosine_lr(0, 100, 0.01) == 0.01
    assert nx.cosine_lr(100, 100, 0.01) == 0.0
    assert nx.cosine_lr(50, 100, 0.01) == pytest.approx(0.005)
    with pytest.raises(ValueError):
        nx.cosine_lr(0, 0, 0.01)


@given(st.integers(1, 500), st.floats(1e-5, 1.0))
def test_cosine_lr_non_increasing(total, lr0):
    values = [nx.cosine_lr(s, total, lr0) for s in range(total + 1)]
    assert all(a >= b for a, b in zip(values, values[1:]))
