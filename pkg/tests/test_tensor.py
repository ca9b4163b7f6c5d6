"""Tensor core: forward semantics against numpy, gradients against central
finite differences, and the tape's bookkeeping rules."""

import numpy as np
import pytest

from ecmflow import tensor as T
from ecmflow.tensor import (NonFiniteError, ShapeError, Tape, Tensor,
                            TensorError)

FD = 1e-5


def _t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


def _fd_grads(fn, inputs, step=FD):
    """Central finite-difference gradient of a scalar fn per input array."""
    grads = []
    for k, x in enumerate(inputs):
        base = x.data.copy()
        g = np.zeros_like(base)
        flat = g.reshape(-1)
        for j in range(base.size):
            for sign in (1.0, -1.0):
                arr = base.copy()
                arr.reshape(-1)[j] += sign * step
                ins = list(inputs)
                ins[k] = Tensor(arr)
                flat[j] += sign * fn(ins).item()
        grads.append(g / (2.0 * step))
    return grads


def _check_grads(fn, inputs, tol=1e-6):
    with Tape() as tape:
        loss = fn(inputs)
    analytic = tape.gradient(loss, inputs)
    numeric = _fd_grads(fn, inputs)
    for a, nmr in zip(analytic, numeric):
        assert np.allclose(a, nmr, rtol=tol, atol=tol), \
            f"max dev {np.abs(a - nmr).max():.3e}"


# ---------------------------------------------------------------------------
# forward semantics


def test_arithmetic_matches_numpy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(0, 1, (3, 4))
        b = rng.normal(0, 1, (3, 4)) + 2.0  # keep divisors away from zero
        ta, tb = _t64(a), _t64(b)
        assert np.array_equal(T.add(ta, tb).data, a + b)
        assert np.array_equal(T.sub(ta, tb).data, a - b)
        assert np.array_equal(T.mul(ta, tb).data, a * b)
        assert np.array_equal(T.div(ta, tb).data, a / b)
        assert np.array_equal(T.neg(ta).data, -a)
        assert np.array_equal(T.absval(ta).data, np.abs(a))
        assert np.allclose(T.exp(ta).data, np.exp(a), rtol=1e-15)
        assert np.allclose(T.sqrt(tb).data, np.sqrt(b), rtol=1e-15)


def test_operator_overloads_and_scalars():
    a = _t64([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((a + 1.0).data, a.data + 1.0)
    assert np.array_equal((2.0 - a).data, 2.0 - a.data)
    assert np.array_equal((a * 3.0).data, a.data * 3.0)
    assert np.array_equal((a / 2.0).data, a.data / 2.0)
    assert np.array_equal((-a).data, -a.data)
    # scalar operands adopt the tensor's dtype
    assert (a + 1).dtype == np.float64
    f32 = Tensor(np.ones((2, 2), dtype=np.float32))
    assert (f32 * 0.5).dtype == np.float32


def test_sigmoid_and_elu_values():
    x = np.array([-700.0, -2.0, 0.0, 2.0, 700.0])
    s = T.sigmoid(_t64(x)).data
    expect = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                      np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    assert np.allclose(s, expect, atol=1e-15)
    assert np.all((s > 0) & (s < 1))
    e = T.elu(_t64(x)).data
    assert np.allclose(e, np.where(x > 0, x, np.expm1(np.minimum(x, 0))))


def test_softmax_normalizes_and_is_shift_invariant():
    rng = np.random.default_rng(3)
    x = rng.normal(0, 5, (2, 7, 3))
    y = T.softmax(_t64(x), axis=1).data
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12)
    y2 = T.softmax(_t64(x + 123.0), axis=1).data
    assert np.allclose(y, y2, atol=1e-12)
    with pytest.raises(ShapeError):
        T.softmax(_t64(x), axis=3)


def test_reductions_and_reshape():
    rng = np.random.default_rng(4)
    x = rng.normal(0, 1, (2, 3, 5))
    tx = _t64(x)
    assert np.allclose(T.tsum(tx).data, x.sum())
    assert np.allclose(T.tsum(tx, axis=1).data, x.sum(axis=1))
    assert np.allclose(T.tsum(tx, axis=2, keepdims=True).data,
                       x.sum(axis=2, keepdims=True))
    assert np.allclose(T.tmean(tx, axis=0).data, x.mean(axis=0))
    assert np.array_equal(T.reshape(tx, (6, 5)).data, x.reshape(6, 5))


def test_concat_narrow_crop_roundtrip():
    rng = np.random.default_rng(5)
    a = rng.normal(0, 1, (1, 2, 4, 4))
    b = rng.normal(0, 1, (1, 3, 4, 4))
    cat = T.concat([_t64(a), _t64(b)], axis=1)
    assert np.array_equal(T.narrow(cat, 1, 0, 2).data, a)
    assert np.array_equal(T.narrow(cat, 1, 2, 3).data, b)
    crop = T.crop2d(_t64(a), 1, 2, 3, 2)
    assert np.array_equal(crop.data, a[:, :, 1:4, 2:4])


def test_pad2d_matches_numpy():
    rng = np.random.default_rng(6)
    x = rng.normal(0, 1, (2, 3, 5, 6))
    z = T.pad2d_zero(_t64(x), 1, 2, 3, 0).data
    assert np.array_equal(z, np.pad(x, ((0, 0), (0, 0), (1, 2), (3, 0))))
    r = T.pad2d_reflect(_t64(x), 2, 1, 0, 3).data
    assert np.array_equal(
        r, np.pad(x, ((0, 0), (0, 0), (2, 1), (0, 3)), mode="reflect"))
    with pytest.raises(ShapeError):
        T.pad2d_reflect(_t64(x), 5, 0, 0, 0)  # wider than the extent


def test_where_mask_selects_by_constant_mask():
    a = _t64([[1.0, 2.0], [3.0, 4.0]])
    b = _t64([[10.0, 20.0], [30.0, 40.0]])
    m = np.array([[True, False], [False, True]])
    out = T.where_mask(m, a, b)
    assert np.array_equal(out.data, np.where(m, a.data, b.data))


def test_zeros_ones_full():
    assert np.array_equal(T.zeros((2, 3)).data, np.zeros((2, 3), np.float32))
    assert np.array_equal(T.ones((4,), dtype=np.float64).data, np.ones(4))
    assert np.array_equal(T.full((2,), 7.5).data, np.full(2, 7.5, np.float32))


# ---------------------------------------------------------------------------
# gradients


def test_elementwise_gradients():
    rng = np.random.default_rng(10)
    a = _t64(rng.uniform(0.5, 2.0, (3, 4)))
    b = _t64(rng.uniform(0.5, 2.0, (3, 4)))
    p = rng.normal(0, 1, (3, 4))

    def dot(x):
        return T.tsum(T.mul(x, _t64(p)))

    _check_grads(lambda ins: dot(T.add(ins[0], ins[1])), [a, b])
    _check_grads(lambda ins: dot(T.sub(ins[0], ins[1])), [a, b])
    _check_grads(lambda ins: dot(T.mul(ins[0], ins[1])), [a, b])
    _check_grads(lambda ins: dot(T.div(ins[0], ins[1])), [a, b])
    _check_grads(lambda ins: dot(T.exp(ins[0])), [a])
    _check_grads(lambda ins: dot(T.sqrt(ins[0])), [a])
    _check_grads(lambda ins: dot(T.sigmoid(ins[0])), [a])
    _check_grads(lambda ins: dot(T.neg(ins[0])), [a])


def test_piecewise_gradients_away_from_breakpoints():
    rng = np.random.default_rng(11)
    # keep samples at least 0.1 from the kinks so FD probes stay one-sided
    x = rng.uniform(0.1, 2.0, (4, 4)) * rng.choice([-1.0, 1.0], (4, 4))
    p = rng.normal(0, 1, (4, 4))

    def dot(y):
        return T.tsum(T.mul(y, _t64(p)))

    _check_grads(lambda ins: dot(T.absval(ins[0])), [_t64(x)])
    _check_grads(lambda ins: dot(T.elu(ins[0])), [_t64(x)])
    _check_grads(lambda ins: dot(T.clamp(ins[0], -1.5, 1.5)), [_t64(x)])


def test_clamp_gradient_is_zero_outside():
    x = _t64([-3.0, 0.0, 3.0])
    with Tape() as tape:
        loss = T.tsum(T.clamp(x, -1.0, 1.0))
    g = tape.gradient(loss, [x])[0]
    assert np.array_equal(g, [0.0, 1.0, 0.0])


def test_softmax_reduction_shape_gradients():
    rng = np.random.default_rng(12)
    x = _t64(rng.normal(0, 1, (2, 5, 3)))
    p = rng.normal(0, 1, (2, 5, 3))
    _check_grads(
        lambda ins: T.tsum(T.mul(T.softmax(ins[0], axis=1), _t64(p))), [x])
    _check_grads(
        lambda ins: T.tsum(T.mul(T.tsum(ins[0], axis=2, keepdims=True),
                                 _t64(p[:, :, :1]))), [x])
    _check_grads(
        lambda ins: T.tsum(T.mul(T.reshape(ins[0], (10, 3)),
                                 _t64(p.reshape(10, 3)))), [x])


def test_matmul_gradients():
    rng = np.random.default_rng(13)
    a = _t64(rng.normal(0, 1, (3, 4)))
    b = _t64(rng.normal(0, 1, (4, 2)))
    p = rng.normal(0, 1, (3, 2))
    _check_grads(
        lambda ins: T.tsum(T.mul(T.matmul(ins[0], ins[1]), _t64(p))), [a, b])
    with pytest.raises(ShapeError):
        T.matmul(a, _t64(np.ones((2, 2, 2))))


def test_broadcast_gradient_unbroadcasts():
    rng = np.random.default_rng(14)
    a = _t64(rng.normal(0, 1, (4,)))          # broadcast over rows
    b = _t64(rng.normal(0, 1, (3, 4)) + 2.0)
    p = rng.normal(0, 1, (3, 4))
    for op in (T.add, T.mul, T.div):
        _check_grads(
            lambda ins, op=op: T.tsum(T.mul(op(ins[0], ins[1]), _t64(p))),
            [a, b])
    c = _t64(rng.normal(0, 1, (3, 1)))        # keepdim-1 axis
    _check_grads(
        lambda ins: T.tsum(T.mul(T.mul(ins[0], ins[1]), _t64(p))), [c, b])


def test_pad_crop_where_gradients():
    rng = np.random.default_rng(15)
    x = _t64(rng.normal(0, 1, (1, 2, 4, 5)))
    pz = rng.normal(0, 1, (1, 2, 7, 6))
    _check_grads(
        lambda ins: T.tsum(T.mul(T.pad2d_zero(ins[0], 1, 2, 1, 0), _t64(pz))),
        [x])
    pr = rng.normal(0, 1, (1, 2, 8, 7))
    _check_grads(
        lambda ins: T.tsum(T.mul(T.pad2d_reflect(ins[0], 2, 2, 1, 1),
                                 _t64(pr))), [x])
    pc = rng.normal(0, 1, (1, 2, 2, 3))
    _check_grads(
        lambda ins: T.tsum(T.mul(T.crop2d(ins[0], 1, 1, 2, 3), _t64(pc))), [x])
    m = rng.random((1, 2, 4, 5)) < 0.5
    y = _t64(rng.normal(0, 1, (1, 2, 4, 5)))
    pw = rng.normal(0, 1, (1, 2, 4, 5))
    _check_grads(
        lambda ins: T.tsum(T.mul(T.where_mask(m, ins[0], ins[1]), _t64(pw))),
        [x, y])


def test_where_mask_routes_gradient_to_selected_branch_only():
    a = _t64([1.0, 2.0])
    b = _t64([3.0, 4.0])
    m = np.array([True, False])
    with Tape() as tape:
        loss = T.tsum(T.where_mask(m, a, b))
    ga, gb = tape.gradient(loss, [a, b])
    assert np.array_equal(ga, [1.0, 0.0])
    assert np.array_equal(gb, [0.0, 1.0])


def test_multi_consumer_accumulation():
    x = _t64([2.0, 3.0])
    with Tape() as tape:
        # x feeds three consumers, one of them twice (x*x)
        loss = T.tsum(T.add(T.add(T.mul(x, x), T.mul(x, 3.0)), T.exp(x)))
    g = tape.gradient(loss, [x])[0]
    assert np.allclose(g, 2.0 * x.data + 3.0 + np.exp(x.data), atol=1e-12)


def test_gradient_returns_zeros_for_untouched_leaves():
    x = _t64([1.0])
    other = _t64([[5.0, 6.0]])
    with Tape() as tape:
        loss = T.tsum(T.mul(x, 2.0))
    g = tape.gradient(loss, [other])[0]
    assert g.shape == other.shape
    assert np.array_equal(g, np.zeros_like(other.data))


# ---------------------------------------------------------------------------
# error handling and invariants


def test_dtype_mixing_rejected():
    a = Tensor(np.ones((2,), dtype=np.float32))
    b = Tensor(np.ones((2,), dtype=np.float64))
    with pytest.raises(TensorError):
        T.add(a, b)
    with pytest.raises(TensorError):
        T.concat([a, b], axis=0)


def test_non_float_input_coerced_to_float32():
    t = Tensor(np.arange(4, dtype=np.int64))
    assert t.dtype == np.float32


def test_non_finite_rejected_at_construction_and_in_ops():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, np.inf]))
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.nan]))
    with pytest.raises(NonFiniteError):
        T.div(_t64([1.0]), _t64([0.0]))
    with pytest.raises(NonFiniteError):
        T.exp(_t64([1000.0]))


def test_sqrt_of_negative_rejected():
    with pytest.raises(TensorError):
        T.sqrt(_t64([-1.0]))


def test_tensor_data_is_immutable():
    t = _t64([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_item_requires_scalar():
    assert _t64([[3.5]]).item() == 3.5
    with pytest.raises(ShapeError):
        _t64([1.0, 2.0]).item()


def test_backward_requires_scalar_loss_produced_on_tape():
    x = _t64([1.0, 2.0])
    with Tape() as tape:
        y = T.mul(x, 2.0)
    with pytest.raises(ShapeError):
        tape.gradient(y, [x])
    stray = _t64([7.0])
    with pytest.raises(TensorError):
        tape.gradient(stray, [x])


def test_ops_outside_tape_record_nothing():
    x = _t64([1.0])
    y = T.mul(x, 2.0)  # no active tape
    assert np.array_equal(y.data, [2.0])
    with Tape() as tape:
        T.mul(x, 3.0)
    assert len(tape.nodes) == 1
