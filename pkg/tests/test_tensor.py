import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ftlab import tensor as T
from ftlab.gradcheck import numeric_grad, relative_error
from ftlab.tensor import Tensor


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


def brute_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


# --- matmul -----------------------------------------------------------------


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_scalar_matrices():
    assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, brute_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# --- softmax ----------------------------------------------------------------


def test_softmax_symmetric():
    np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_ln3():
    np.testing.assert_allclose(T.softmax(Tensor([math.log(3), 0.0])).data, [0.75, 0.25], atol=1e-15)


def test_softmax_high_temperature_is_uniform():
    out = T.softmax(Tensor([10.0, -10.0]), temperature=1e6).data
    assert np.all(np.abs(out - 0.5) < 1e-4)


@pytest.mark.parametrize("temp", [0.0, -1.0])
def test_softmax_rejects_bad_temperature(temp):
    with pytest.raises(ValueError):
        T.softmax(Tensor([1.0, 2.0]), temperature=temp)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=st.floats(-50, 50)),
    st.floats(0.1, 10.0),
)
def test_softmax_rows_are_distributions(x, temp):
    s = T.softmax(Tensor(x), temperature=temp).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(s >= 0) and np.all(s <= 1)


def test_softmax_entries_strictly_inside_unit_interval():
    s = T.softmax(Tensor([[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]])).data
    assert np.all((s > 0) & (s < 1))


# --- cross entropy ----------------------------------------------------------


def test_cross_entropy_uniform_two_class():
    assert T.cross_entropy(Tensor([[0.0, 0.0]]), [1]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_cross_entropy_saturated():
    assert T.cross_entropy(Tensor([[30.0, 0.0], [0.0, 30.0]]), [0, 1]).item() < 1e-12


def test_cross_entropy_scalar_closed_form():
    # -log softmax([1, -1])[1] = 2 + ln(1 + e^-2)
    expected = -math.log(math.exp(-1) / (math.exp(1) + math.exp(-1)))
    assert expected == pytest.approx(2 + math.log1p(math.exp(-2)), abs=1e-15)
    assert T.cross_entropy(Tensor([[1.0, -1.0]]), [1]).item() == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize("label", [-1, 2])
def test_cross_entropy_rejects_out_of_range_label(label):
    with pytest.raises(ValueError, match="label"):
        T.cross_entropy(Tensor([[0.0, 1.0]]), [label])


# --- kl ---------------------------------------------------------------------


def test_kl_identical_logits_is_zero():
    x = np.random.default_rng(1).normal(size=(5, 3))
    assert abs(T.kl_divergence(x, Tensor(x), 1.7).item()) <= 1e-14


def test_kl_two_class_closed_form():
    expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    got = T.kl_divergence(np.array([[math.log(3), 0.0]]), Tensor([[0.0, 0.0]]), 1.0).item()
    assert got == pytest.approx(expected, abs=1e-14)
    assert got == pytest.approx(0.13081, abs=1e-5)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (2, 3), elements=st.floats(-30, 30)),
    arrays(np.float64, (2, 3), elements=st.floats(-30, 30)),
    st.floats(0.25, 8.0),
)
def test_kl_nonnegative(p, q, temp):
    assert T.kl_divergence(p, Tensor(q), temp).item() >= -1e-12


def test_kl_gradient_flows_only_into_q():
    p, q = leaf([[1.0, 0.0]]), leaf([[0.0, 1.0]])
    T.kl_divergence(p, q, 2.0).backward()
    assert p.grad is None and q.grad is not None


def test_kl_errors():
    with pytest.raises(ValueError):
        T.kl_divergence(np.zeros((1, 2)), Tensor(np.zeros((1, 3))))
    with pytest.raises(ValueError):
        T.kl_divergence(np.zeros((1, 2)), Tensor(np.zeros((1, 2))), temperature=0.0)


# --- backward ---------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = leaf([1.0, -2.0, 3.5])
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_quadratic():
    x = leaf([1.0, 2.0, 3.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 4, 6])


def test_backward_accumulates_across_calls():
    x = leaf([1.0, 2.0])
    loss = (x * x).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [4, 8])


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        (leaf([1.0, 2.0]) * 2.0).backward()


def test_frozen_leaf_gets_no_grad():
    x, w = leaf([1.0, 2.0]), Tensor([3.0, 4.0])
    (x * w).sum().backward()
    assert w.grad is None
    np.testing.assert_array_equal(x.grad, [3, 4])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


# --- finite-difference checks for every primitive ---------------------------

RNG = np.random.default_rng(42)
LN_GAMMA = leaf(RNG.normal(size=4))
LN_BETA = leaf(RNG.normal(size=4))
BIAS = leaf(RNG.normal(size=4))
W = leaf(RNG.normal(size=(3, 4)))
EMB = leaf(RNG.normal(size=(6, 4)))

PRIMITIVES = {
    "add_broadcast": lambda x: T.add(x, BIAS),
    "mul": lambda x: T.mul(x, x),
    "neg_scale": lambda x: T.scale(T.neg(x), 0.3),
    "gelu": T.gelu,
    "layer_norm": lambda x: T.layer_norm(x, LN_GAMMA, LN_BETA),
    "linear": lambda x: T.linear(x, W, None),
    "reshape_transpose": lambda x: T.transpose(T.reshape(x, (2, 4, 3)), (1, 0, 2)),
    "masked_fill": lambda x: T.masked_fill(x, np.array([True, False, False, True]), -5.0),
    "mean": lambda x: T.mean(x, axis=1),
    "softmax_T": lambda x: T.softmax(x, temperature=1.7),
    "log_softmax": lambda x: T.log_softmax(x, temperature=0.8),
    "index": lambda x: x[(np.array([0, 1, 1]), np.array([2, 0, 2]))],
    "dropout_fixed_mask": lambda x: T.dropout(x, 0.3, True, T.make_rng(9)),
    "cross_entropy": lambda x: T.cross_entropy(T.reshape(x, (6, 4)), [0, 1, 2, 3, 0, 1]),
    "kl": lambda x: T.kl_divergence(np.ones((6, 4)), T.reshape(x, (6, 4)), 1.5),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    fn = PRIMITIVES[name]
    x = leaf(np.random.default_rng(7).normal(size=(2, 3, 4)))
    # weight the output by a fixed random tensor so every entry matters
    weights = np.random.default_rng(8).normal(size=fn(x).shape)

    def loss():
        return T.mul(fn(x), Tensor(weights)).sum()

    loss().backward()
    analytic = x.grad.copy()
    worst = max(
        relative_error(analytic[idx], numeric_grad(lambda: loss().item(), x, idx, 1e-4)) for idx in np.ndindex(x.shape)
    )
    assert worst < 1e-4


def test_embedding_gradient_scatter_adds():
    ids = np.array([[1, 3, 1]])
    EMB.grad = None
    T.embedding(EMB, ids).sum().backward()
    expected = np.zeros((6, 4))
    expected[1] = 2
    expected[3] = 1
    np.testing.assert_array_equal(EMB.grad, expected)


def test_embedding_rejects_bad_id():
    with pytest.raises(IndexError):
        T.embedding(EMB, np.array([6]))


# --- dropout ----------------------------------------------------------------


def test_dropout_eval_is_identity():
    x = Tensor(np.ones((3, 3)))
    assert T.dropout(x, 0.5, False, None) is x


def test_dropout_reproducible_and_scaled():
    x = Tensor(np.ones((50, 50)))
    a = T.dropout(x, 0.25, True, T.make_rng(3)).data
    b = T.dropout(x, 0.25, True, T.make_rng(3)).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1 / 0.75}


def test_dropout_rejects_p_one():
    with pytest.raises(ValueError):
        T.dropout(Tensor([1.0]), 1.0, True, T.make_rng(0))


# --- policy -----------------------------------------------------------------


def test_non_finite_raises_with_op_name():
    with pytest.raises(T.NonFiniteError) as err, np.errstate(over="ignore"):
        T.mul(Tensor([1e300]), Tensor([1e300]))
    assert err.value.op == "mul"


def test_rng_determinism():
    assert np.array_equal(T.make_rng(11).normal(size=5), T.make_rng(11).normal(size=5))


def test_memory_proxy_single_tensor():
    T.memory.reset()
    before = T.memory.live
    x = Tensor(np.zeros((10, 10)))
    peak = T.memory_proxy() - before
    assert 800 <= peak < 800 + 64
    del x
    T.memory.reset()
    assert T.memory_proxy() - before < 800
