import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from paadetect.tensor import (
    BatchNormState,
    ConfigurationError,
    ContractError,
    DegenerateInputError,
    Tensor,
    avg_pool2d,
    backward,
    batch_norm,
    concat,
    conv1d,
    conv2d,
    cross_entropy,
    einsum,
    exp,
    finite_diff_check,
    getitem,
    global_avg_pool,
    l2_normalize,
    load_ten,
    log,
    log_softmax,
    matmul,
    max_pool2d,
    no_grad,
    parse_ten,
    power,
    precision,
    rel_gather,
    rel_scatter,
    relu,
    reshape,
    save_ten,
    softmax_axis,
    sqrt,
    take,
    tanh,
    ten_bytes,
    trace,
    transpose,
    where,
)
from paadetect.tensor import max as tmax
from paadetect.tensor import mean as tmean
from paadetect.tensor import sum as tsum

SHAPES = [(3, 4), (2, 3, 5), (4, 1, 3)]


def _weighted(f, shape, rng):
    w = Tensor(rng.standard_normal(shape), dtype=np.float64)
    return lambda x: tsum(f(x) * w)


def _check(f, x, tol=1e-4):
    with precision("float64"):
        return finite_diff_check(f, x) < tol


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("name", ["exp", "tanh", "relu", "square", "softmax", "log_softmax", "l2",
                                  "sum_axis", "max_axis", "transpose", "mul_broadcast", "div"])
def test_unary_primitives_match_finite_differences(name, shape, rng):
    other = Tensor(rng.uniform(0.5, 1.5, shape[-1:]), dtype=np.float64)
    ops = {
        "exp": exp,
        "tanh": tanh,
        "relu": relu,
        "square": lambda x: power(x, 2.0),
        "softmax": lambda x: softmax_axis(x, axis=-1),
        "log_softmax": lambda x: log_softmax(x, axis=-1),
        "l2": l2_normalize,
        "sum_axis": lambda x: tsum(x, axis=0),
        "max_axis": lambda x: tmax(x, axis=-1),
        "transpose": lambda x: transpose(x),
        "mul_broadcast": lambda x: x * other,
        "div": lambda x: x / other,
    }
    x = rng.standard_normal(shape)
    if name == "relu":
        x = np.where(np.abs(x) < 1e-2, 0.5, x)
    with precision("float64"):
        out_shape = ops[name](Tensor(x)).shape
    assert _check(_weighted(ops[name], out_shape, rng), x)


@pytest.mark.parametrize("shape", SHAPES)
def test_log_and_sqrt_gradients_on_positive_inputs(shape, rng):
    x = rng.uniform(0.5, 2.0, shape)
    assert _check(_weighted(log, shape, rng), x)
    assert _check(_weighted(sqrt, shape, rng), x)


@pytest.mark.parametrize("m,k,n", [(2, 3, 4), (5, 1, 2), (3, 6, 3)])
def test_matmul_and_einsum_gradients(m, k, n, rng):
    b = Tensor(rng.standard_normal((k, n)), dtype=np.float64)
    assert _check(_weighted(lambda a: matmul(a, b), (m, n), rng), rng.standard_normal((m, k)))
    assert _check(_weighted(lambda a: einsum("ij,jk->ik", a, b), (m, n), rng), rng.standard_normal((m, k)))


def test_indexing_concat_reshape_where_take_gradients(rng):
    x = rng.standard_normal((4, 5))
    mask = rng.random((4, 5)) > 0.5
    assert _check(_weighted(lambda t: getitem(t, (slice(1, 3), [0, 2, 4])), (2, 3), rng), x)
    assert _check(_weighted(lambda t: concat([t, t * 2.0], axis=1), (4, 10), rng), x)
    assert _check(_weighted(lambda t: reshape(t, (2, 10)), (2, 10), rng), x)
    assert _check(_weighted(lambda t: where(mask, t, t * t), (4, 5), rng), x)
    assert _check(_weighted(lambda t: take(t, np.array([3, 0, 3])), (3, 5), rng), x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_convolution_gradients(stride, pad, rng):
    w2 = Tensor(rng.standard_normal((3, 2, 3, 3)), dtype=np.float64)
    x2 = rng.standard_normal((2, 2, 6, 6))
    with precision("float64"):
        shape2 = conv2d(Tensor(x2), w2, stride=stride, pad=pad).shape
    assert _check(_weighted(lambda t: conv2d(t, w2, stride=stride, pad=pad), shape2, rng), x2)
    wx = rng.standard_normal((3, 2, 3, 3))
    assert _check(_weighted(lambda w: conv2d(Tensor(x2, dtype=np.float64), w, stride=stride, pad=pad),
                            shape2, rng), wx)
    w1 = Tensor(rng.standard_normal((4, 2, 3)), dtype=np.float64)
    x1 = rng.standard_normal((3, 2, 7))
    with precision("float64"):
        shape1 = conv1d(Tensor(x1), w1, stride=stride, pad=pad).shape
    assert _check(_weighted(lambda t: conv1d(t, w1, stride=stride, pad=pad), shape1, rng), x1)


def test_pooling_gradients(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    assert _check(_weighted(avg_pool2d, (2, 3, 2, 2), rng), x)
    assert _check(_weighted(max_pool2d, (2, 3, 2, 2), rng), x)
    assert _check(_weighted(global_avg_pool, (2, 3), rng), x)


@pytest.mark.parametrize("shape", [(4, 3), (3, 2, 5), (2, 3, 3, 3)])
def test_batch_norm_train_mode_gradients(shape, rng):
    c = shape[1]
    gamma = Tensor(rng.uniform(0.5, 1.5, c), dtype=np.float64)
    beta = Tensor(rng.standard_normal(c), dtype=np.float64)
    f = _weighted(lambda t: batch_norm(t, gamma, beta, None, training=True), shape, rng)
    assert _check(f, rng.standard_normal(shape))


def test_batch_norm_running_statistics_update():
    x = Tensor(np.arange(12, dtype=np.float64).reshape(4, 3), dtype=np.float64)
    state = BatchNormState(3, dtype=np.float64)
    batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), state, training=True)
    np.testing.assert_allclose(state.mean, 0.1 * x.data.mean(axis=0))
    np.testing.assert_allclose(state.var, 0.9 + 0.1 * x.data.var(axis=0, ddof=1))


@pytest.mark.parametrize("length", [3, 5, 8])
def test_rel_gather_and_scatter_are_adjoint(length, rng):
    # gather picks table[i, j - i + L - 1]; scatter is its transpose
    table = rng.standard_normal((2, length, 2 * length - 1))
    out = rel_gather(Tensor(table, dtype=np.float64)).data
    for i in range(length):
        for j in range(length):
            assert out[0, i, j] == table[0, i, j - i + length - 1]
    y = rng.standard_normal((2, length, length))
    lhs = np.sum(out * y)
    rhs = np.sum(table * rel_scatter(Tensor(y, dtype=np.float64)).data)
    assert lhs == pytest.approx(rhs, rel=1e-12)
    assert _check(_weighted(rel_gather, (2, length, length), rng), table)


def test_cross_entropy_matches_definition(rng):
    z = rng.standard_normal((5, 4))
    y = np.array([0, 3, 1, 1, 2])
    with precision("float64"):
        got = float(cross_entropy(Tensor(z), y).data)
    lse = np.log(np.exp(z).sum(axis=1))
    assert got == pytest.approx(np.mean(lse - z[np.arange(5), y]), rel=1e-12)


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = softmax_axis(Tensor(x, dtype=np.float64), axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(s >= 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 9)), elements=finite))
def test_l2_normalize_produces_unit_norms(x):
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms <= 1e-12):
        with pytest.raises(DegenerateInputError):
            l2_normalize(Tensor(x))
        return
    y = l2_normalize(Tensor(x, dtype=np.float32)).data
    np.testing.assert_allclose(np.linalg.norm(y.astype(np.float64), axis=1), 1.0, atol=1e-5)


def test_l2_normalize_rejects_zero_vector():
    with pytest.raises(DegenerateInputError):
        l2_normalize(Tensor(np.zeros((2, 3))))


def _graph(rng):
    x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    h = relu(matmul(x, w))
    return x, w, tmean(log_softmax(h * 2.0, axis=1))


def test_forward_backward_is_bit_reproducible():
    out = []
    for _ in range(2):
        x, w, loss = _graph(np.random.default_rng(7))
        backward(loss, [x, w])
        out.append((loss.data.copy(), x.grad.copy(), w.grad.copy()))
    for a, b in zip(*out):
        assert np.array_equal(a, b)


def test_tape_replay_reproduces_outputs_bitwise(rng):
    _, _, loss = _graph(rng)
    tape = trace(loss)
    assert tape.is_topological()
    replayed = tape.replay()
    for entry, value in zip(tape, replayed):
        assert np.array_equal(entry.output.data, value)


def test_gradients_accumulate_and_no_grad_disables_tracking(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    backward(tsum(x * 2.0), [x])
    backward(tsum(x * 3.0), [x])
    np.testing.assert_allclose(x.grad, 5.0)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0, [x])


def test_precision_switch_restores_default():
    assert Tensor([1.0]).dtype == np.float32
    with precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_ten_byte_layout(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = ten_bytes(arr)
    assert buf[:4] == b"TEN1"
    assert buf[4] == 0 and buf[5] == 2
    assert struct.unpack_from("<2Q", buf, 6) == (2, 3)
    assert buf[22:] == arr.astype("<f4").tobytes()
    save_ten(tmp_path / "a.ten", arr)
    assert np.array_equal(load_ten(tmp_path / "a.ten"), arr)
    back, end = parse_ten(buf)
    assert end == len(buf) and np.array_equal(back, arr)


def test_ten_rejects_bad_magic_and_truncation(tmp_path):
    buf = ten_bytes(np.ones(4, np.float32))
    with pytest.raises(ValueError):
        parse_ten(b"XXXX" + buf[4:])
    with pytest.raises(ValueError):
        parse_ten(buf[:-1])
    with pytest.raises(ValueError):
        ten_bytes(np.ones(2, dtype=np.complex64))


def test_shape_mismatches_raise():
    with pytest.raises(ValueError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises((ConfigurationError, ValueError)):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 5, 3, 3))))
