import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from arflow import autodiff as ad
from arflow.autodiff import NonFiniteError, Tensor
from helpers import RTOL, check_op

rng = np.random.default_rng(0)


def away_from_zero(shape, lo=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < lo, np.sign(x + 1e-12) * lo, x)


OPS = {
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(2, 3), (2, 3)]),
    "mul_broadcast": (lambda a, b: a * b, [(2, 3, 4), (3, 1)]),
    "div_scalar": (lambda a: a / 3.0, [(5,)]),
    "neg": (lambda a: -a, [(4,)]),
    "square": (ad.square, [(3, 3)]),
    "sigmoid": (ad.sigmoid, [(4, 5)]),
    "silu": (ad.silu, [(4, 5)]),
    "sum_all": (lambda a: a.sum(), [(3, 4)]),
    "sum_axis": (lambda a: a.sum(axis=1), [(3, 4, 2)]),
    "sum_keepdims": (lambda a: a.sum(axis=-1, keepdims=True), [(3, 4)]),
    "mean": (lambda a: a.mean(axis=0), [(5, 3)]),
    "reshape": (lambda a: a.reshape(6, 2), [(3, 4)]),
    "transpose": (lambda a: a.transpose(2, 0, 1), [(2, 3, 4)]),
    "getitem_slice": (lambda a: a[1:, ::2], [(4, 6)]),
    "getitem_fancy": (lambda a: a[np.array([0, 2, 2])], [(4, 3)]),
    "take": (lambda a: ad.take(a, np.array([[0, 1], [1, 3]])), [(4, 3)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 5)]),
    "matmul": (ad.matmul, [(3, 4), (4, 2)]),
    "matmul_batched": (ad.matmul, [(2, 3, 4), (4, 5)]),
    "linear": (ad.linear, [(2, 3, 4), (4, 5), (5,)]),
    "layer_norm": (ad.layer_norm, [(3, 6), (6,), (6,)]),
    "softmax": (ad.softmax, [(2, 5)]),
    "softmax_masked": (lambda a: ad.softmax(a, mask=np.tril(np.ones((4, 4), bool))), [(2, 4, 4)]),
    "bce": (lambda a: ad.bce_with_logits(a, np.array([0.0, 1.0, 1.0, 0.0, 0.3])), [(5,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    op, shapes = OPS[name]
    arrays = [rng.standard_normal(s) for s in shapes]
    assert check_op(op, *arrays) < RTOL


@pytest.mark.parametrize("op", [ad.abs_, ad.relu])
def test_kinked_op_gradients_away_from_kink(op):
    assert check_op(op, away_from_zero((4, 5))) < RTOL


def test_shared_subexpression_accumulates():
    def f(a):
        b = a * a
        return b + b * a

    assert check_op(f, rng.standard_normal(6)) < RTOL


def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, -1.0])) * np.inf
    with pytest.raises(NonFiniteError):
        ad.softmax(Tensor(np.array([np.nan, 0.0])))


def test_no_grad_builds_no_graph():
    a = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        b = a * 2.0
    assert not b.requires_grad and b._parents == ()
    assert ad.grad_enabled()


def test_precision_context_sets_dtype():
    with ad.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_backward_needs_scalar_seed():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (a * 2.0).backward()


def test_linear_shape_mismatch():
    with pytest.raises(ValueError, match="input width"):
        ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_bce_extreme_logits_are_finite():
    z = Tensor(np.array([-800.0, 800.0]), requires_grad=True)
    loss = ad.bce_with_logits(z, np.array([1.0, 0.0]))
    np.testing.assert_allclose(loss.data, [800.0, 800.0])
    loss.sum().backward()
    np.testing.assert_allclose(z.grad, [-1.0, 1.0])


def test_bce_at_zero_is_log2():
    loss = ad.bce_with_logits(Tensor(np.zeros(1, dtype=np.float64)), np.ones(1))
    assert loss.data[0] == pytest.approx(np.log(2.0), abs=1e-15)


def test_softmax_masked_entries_get_zero_weight():
    mask = np.array([[True, False, True]])
    y = ad.softmax(Tensor(np.array([[1.0, 50.0, 1.0]])), mask=mask).data
    np.testing.assert_array_equal(y, [[0.5, 0.0, 0.5]])


@settings(max_examples=30, deadline=None)
@given(
    a=hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                 elements=st.floats(-10, 10)),
)
def test_add_broadcast_grad_counts_uses(a):
    # d/db sum(a + b) for a broadcast b of shape a.shape[-1:] counts how often b is reused
    with ad.precision(np.float64):
        ta = Tensor(a, requires_grad=True)
        tb = Tensor(np.zeros(a.shape[-1:]), requires_grad=True)
        (ta + tb).sum().backward()
    np.testing.assert_array_equal(ta.grad, np.ones_like(a))
    np.testing.assert_array_equal(tb.grad, np.full(a.shape[-1:], a.size // a.shape[-1]))


@settings(max_examples=30, deadline=None)
@given(x=hnp.arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    y = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(y.sum(-1), 1.0, rtol=1e-12)
    assert np.all(y >= 0)
