"""Testing tensors, the tape and primitive gradients."""

import numpy as np
import pytest

from xstream import numerics as nx
from xstream.exceptions import MaskError, NonFiniteError, ShapeError
from xstream.numerics import Tape, Tensor

def weighted_sum(out, weights):
    return nx.sum(out * Tensor(weights))

def test_tensor_is_immutable():
    t = Tensor(np.arange(4.0))
    with pytest.raises(ValueError):
        t.data[0] = 1.0
    copy = t.numpy()
    copy[0] = 5.0
    assert t.data[0] == 0.0

def test_tensor_dtypes():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64
    assert Tensor(np.zeros(2), dtype=np.float32).dtype == np.float32
    with pytest.raises(ValueError):
        Tensor(np.zeros(2), dtype=np.int64)

def test_item():
    assert Tensor([2.5]).item() == 2.5
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()

def test_broadcast_rules():
    a = Tensor(np.ones((3, 4)))
    assert (a + Tensor(np.ones(4))).shape == (3, 4)
    with pytest.raises(ShapeError):
        a + Tensor(np.ones(3))

def test_mixed_dtypes_rejected():
    with pytest.raises(ShapeError):
        nx.add(Tensor(np.ones(2)), Tensor(np.ones(2), dtype=np.float32))

def test_matmul_shapes():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    batched = Tensor(np.ones((4, 2, 3))) @ Tensor(np.ones((3, 5)))
    assert batched.shape == (4, 2, 5)

def test_non_finite_output_raises():
    with pytest.warns(RuntimeWarning):
        with pytest.raises(NonFiniteError):
            nx.log(Tensor(np.array([0.0, 1.0])))

def test_gradcheck_linear(rng):
    weights = rng.uniform(0.5, 2.0, (3, 4))
    err = nx.finite_difference_gradcheck(
        lambda x: weighted_sum(x, weights), [rng.standard_normal((3, 4))]
        )
    assert err <= 1e-9

UNARY = {
    "exp": nx.exp,
    "tanh": nx.tanh,
    "gelu": nx.gelu,
    "softmax": nx.softmax,
    "log_softmax": nx.log_softmax,
    "reshape": lambda x: nx.reshape(x, (4, 3)),
    "swapaxes": lambda x: nx.swapaxes(x, 0, 1),
    "scale": lambda x: nx.scale(x, -2.5),
    "mean": lambda x: Tensor(np.ones((3, 4))) * nx.mean(x),
    }

@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    op = UNARY[name]
    x = rng.standard_normal((3, 4))
    weights = rng.standard_normal(op(Tensor(x)).shape)
    assert nx.finite_difference_gradcheck(lambda t: weighted_sum(op(t), weights), [x]) <= 1e-5

def test_log_gradient(rng):
    x = rng.uniform(0.5, 2.0, (3, 4))
    weights = rng.standard_normal((3, 4))
    assert nx.finite_difference_gradcheck(lambda t: weighted_sum(nx.log(t), weights), [x]) <= 1e-5

def test_binary_gradients(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal(4)
    w = rng.standard_normal((3, 4))
    for op in (nx.add, nx.sub, nx.mul):
        assert nx.finite_difference_gradcheck(lambda x, y: weighted_sum(op(x, y), w), [a, b]) <= 1e-5

def test_matmul_gradients(rng):
    a = rng.standard_normal((2, 3, 4))
    shared = rng.standard_normal((4, 5))
    batched = rng.standard_normal((2, 4, 5))
    w = rng.standard_normal((2, 3, 5))
    for b in (shared, batched):
        assert nx.finite_difference_gradcheck(lambda x, y: weighted_sum(x @ y, w), [a, b]) <= 1e-5

def test_concat_gradient(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3))
    w = rng.standard_normal((6, 3))
    err = nx.finite_difference_gradcheck(lambda x, y: weighted_sum(nx.concat([x, y]), w), [a, b])
    assert err <= 1e-5

def test_layer_norm_gradient(rng):
    x = rng.standard_normal((3, 5))
    gain, bias = rng.standard_normal(5), rng.standard_normal(5)
    w = rng.standard_normal((3, 5))
    err = nx.finite_difference_gradcheck(
        lambda v, g, b: weighted_sum(nx.layer_norm(v, g, b), w), [x, gain, bias]
        )
    assert err <= 1e-5

def test_conv1d_gradient(rng):
    x = rng.standard_normal((5, 3))
    kernel = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((5, 4))
    err = nx.finite_difference_gradcheck(lambda v, k: weighted_sum(nx.conv1d(v, k), w), [x, kernel])
    assert err <= 1e-5

def test_embedding_and_outer_add_gradients(rng):
    table = rng.standard_normal((6, 3))
    other = rng.standard_normal((2, 3))
    w = rng.standard_normal((4, 2, 3))
    err = nx.finite_difference_gradcheck(
        lambda t, o: weighted_sum(nx.outer_add(nx.embedding(t, [1, 4, 1, 0]), o), w),
        [table, other],
        )
    assert err <= 1e-5

def test_masked_softmax_cross_entropy_gradient(rng):
    scores = rng.standard_normal((2, 4, 4))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    targets = np.zeros((2, 4, 4))
    targets[:, np.arange(4), np.arange(4)] = 1.0

    def loss(s):
        probs = nx.masked_softmax(s, mask)
        return -nx.sum(nx.log(probs + Tensor(np.full((2, 4, 4), 1e-3))) * Tensor(targets))

    assert nx.finite_difference_gradcheck(loss, [scores]) <= 1e-5

def test_masked_softmax(rng):
    scores = Tensor(rng.standard_normal((3, 5, 5)))
    mask = rng.random((5, 5)) < 0.5
    mask[:, 0] = True
    probs = nx.masked_softmax(scores, mask).data
    assert (probs[:, ~mask] == 0).all()
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)

def test_masked_softmax_all_true_is_softmax(rng):
    scores = Tensor(rng.standard_normal((2, 4, 6)))
    np.testing.assert_array_equal(
        nx.masked_softmax(scores, np.ones((4, 6), dtype=bool)).data,
        nx.softmax(scores).data,
        )

def test_masked_softmax_errors(rng):
    scores = Tensor(rng.standard_normal((3, 3)))
    with pytest.raises(MaskError):
        nx.masked_softmax(scores, np.ones((3, 4), dtype=bool))
    empty_row = np.ones((3, 3), dtype=bool)
    empty_row[1] = False
    with pytest.raises(MaskError):
        nx.masked_softmax(scores, empty_row)

def test_layer_norm_values(rng):
    out = nx.layer_norm(Tensor(np.array([-1.0, 1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-4)
    x = nx.layer_norm(Tensor(rng.standard_normal(64) * 3 + 2), Tensor(np.ones(64)), Tensor(np.zeros(64)))
    assert abs(x.data.mean()) <= 1e-6
    assert abs(x.data.var() - 1.0) <= 1e-3

def test_conv1d_is_causal(rng):
    kernel = Tensor(rng.standard_normal((3, 2, 2)))
    x = rng.standard_normal((6, 2))
    changed = x.copy()
    changed[4] += 10.0
    a = nx.conv1d(Tensor(x), kernel).data
    b = nx.conv1d(Tensor(changed), kernel).data
    np.testing.assert_allclose(a[:4], b[:4], rtol=0, atol=1e-12)
    assert not np.allclose(a[4:], b[4:])

def test_embedding_out_of_range():
    with pytest.raises(ShapeError):
        nx.embedding(Tensor(np.zeros((3, 2))), [3])

def test_reused_tensor_accumulates(rng):
    x = rng.standard_normal(5)
    with Tape() as tape:
        t = tape.watch(Tensor(x))
        out = nx.sum(t * t)
    (grad,) = nx.backward(tape, out, [t])
    np.testing.assert_allclose(grad, 2 * x)

def test_unwatched_tensors_get_zero_gradient(rng):
    with Tape() as tape:
        a = tape.watch(Tensor(rng.standard_normal(3)))
        b = Tensor(rng.standard_normal(3))
        out = nx.sum(a * b)
    grads = nx.backward(tape, out, {"a": a, "b": b})
    np.testing.assert_allclose(grads["a"], b.data)
    np.testing.assert_array_equal(grads["b"], np.zeros(3))

def test_operations_outside_tape_are_not_recorded(rng):
    a = Tensor(rng.standard_normal(3))
    with Tape() as tape:
        tape.watch(a)
    nx.exp(a)
    assert tape.entries == []
    assert nx.current_tape() is None

def test_replay_reproduces_values(rng):
    with Tape() as tape:
        a = tape.watch(Tensor(rng.standard_normal((2, 3))))
        out = nx.sum(nx.tanh(a @ Tensor(rng.standard_normal((3, 3)))))
    replayed = tape.replay()
    assert float(replayed[tape.node(out)]) == pytest.approx(out.item())

def test_backward_needs_scalar(rng):
    with Tape() as tape:
        a = tape.watch(Tensor(rng.standard_normal(3)))
        out = nx.exp(a)
    with pytest.raises(ShapeError):
        nx.backward(tape, out)

def test_dropout(rng):
    x = Tensor(np.ones((200, 50)))
    assert nx.dropout(x, 0.0, rng) is x
    assert nx.dropout(x, 0.5, None) is x
    out = nx.dropout(x, 0.25, rng).data
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
    assert abs((out == 0).mean() - 0.25) < 0.02
