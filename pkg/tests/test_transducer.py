"""Testing the predictor, the joiner and the transducer loss."""

import math

import numpy as np
import pytest

from xstream import numerics as nx
from xstream import transducer as tdr
from xstream.exceptions import NonFiniteError, ShapeError
from xstream.numerics import Tape, Tensor

def test_vocab():
    vocab = tdr.Vocab.from_texts(["the Cat", "a cat sat"])
    assert vocab.tokens == ("<blank>", "a", "cat", "sat", "the")
    assert vocab.size == len(vocab) == 5
    assert vocab.encode("The cat") == [4, 2]
    assert vocab.decode([4, 0, 2]) == "the cat"
    with pytest.raises(ValueError):
        vocab.encode("dog")
    with pytest.raises(ValueError):
        vocab.encode("<blank>")

def test_synthetic_vocab():
    vocab = tdr.Vocab.synthetic(4)
    assert vocab.tokens == ("<blank>", "t1", "t2", "t3")
    with pytest.raises(ValueError):
        tdr.Vocab.synthetic(1)

def test_vocab_validation():
    with pytest.raises(ValueError):
        tdr.Vocab(("a", "<blank>"))
    with pytest.raises(ValueError):
        tdr.Vocab(("<blank>", "a", "a"))

@pytest.fixture
def predictor_params(rng):
    yield tdr.init_predictor_params(tdr.PredictorConfig(embed_dim=4, kernel=2), 6, rng, np.float64)

def test_predictor_shapes(predictor_params):
    assert tdr.predictor_forward(predictor_params, []).shape == (1, 4)
    assert tdr.predictor_forward(predictor_params, [3, 1, 5]).shape == (4, 4)

def test_predictor_rejects_blank(predictor_params):
    with pytest.raises(ValueError):
        tdr.predictor_forward(predictor_params, [2, 0])

def test_predictor_is_stateless(predictor_params):
    # with kernel 2 only the last two tokens matter for the next row
    a = tdr.predictor_forward(predictor_params, [1, 2, 3]).data[-1]
    b = tdr.predictor_forward(predictor_params, [5, 2, 3]).data[-1]
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

def test_predictor_context_row(predictor_params):
    tokens = [2, 5, 1, 4]
    rows = tdr.predictor_forward(predictor_params, tokens).data
    for u in range(len(tokens) + 1):
        row = tdr.predictor_context_row(predictor_params, tokens[:u])
        np.testing.assert_allclose(row, rows[u], rtol=0, atol=1e-12)

def test_joiner_step_matches_joiner(rng):
    params = tdr.init_joiner_params(tdr.JoinerConfig(joint_dim=5), 8, 4, 6, rng, np.float64)
    enc = Tensor(rng.standard_normal((3, 8)))
    pred = Tensor(rng.standard_normal((2, 4)))
    lattice = tdr.joiner(params, enc, pred).data
    assert lattice.shape == (3, 2, 6)
    for t in range(3):
        for u in range(2):
            step = tdr.joiner_step(params, enc.data[t], pred.data[u])
            np.testing.assert_allclose(step, lattice[t, u], rtol=0, atol=1e-12)

LOSS_CASES = [(1, 0), (1, 1), (3, 0), (3, 2), (4, 4), (5, 3), (8, 6), (2, 5)]

@pytest.mark.parametrize("n_frames,n_labels", LOSS_CASES)
def test_loss_matches_bruteforce(n_frames, n_labels, rng):
    vocab = 4
    logits = rng.standard_normal((n_frames, n_labels + 1, vocab)) * 2
    target = list(rng.integers(1, vocab, n_labels))
    nll, _ = tdr.rnnt_loss(logits, target)
    assert nll == pytest.approx(tdr.rnnt_loss_bruteforce(logits, target), abs=1e-10)

def test_empty_target_is_all_blanks(rng):
    logits = rng.standard_normal((4, 1, 3))
    nll, _ = tdr.rnnt_loss(logits, [])
    lp_blank = logits[:, 0, 0] - np.log(np.exp(logits[:, 0]).sum(axis=-1))
    assert nll == pytest.approx(-lp_blank.sum(), abs=1e-12)

def test_uniform_logits(rng):
    # every path has probability V^-(T+U)
    n_frames, n_labels, vocab = 3, 2, 4
    nll, _ = tdr.rnnt_loss(np.zeros((n_frames, n_labels + 1, vocab)), [1, 3])
    expected = (n_frames + n_labels) * math.log(vocab) - math.log(tdr.count_alignments(n_frames, n_labels))
    assert nll == pytest.approx(expected, abs=1e-12)

def test_count_alignments():
    for n_frames in range(1, 6):
        for n_labels in range(0, 5):
            paths = list(tdr.enumerate_alignments(n_frames, n_labels))
            assert len(paths) == tdr.count_alignments(n_frames, n_labels)
            assert all(not p[-1] for p in paths)
    assert tdr.count_alignments(2, 1) == 2
    assert tdr.count_alignments(0, 3) == 0

def test_loss_gradient_matches_finite_differences(rng):
    logits = rng.standard_normal((3, 3, 3))
    target = [2, 1]

    def loss(x):
        return tdr.rnnt_nll(x, target)

    assert nx.finite_difference_gradcheck(loss, [logits]) <= 1e-4

def test_gradient_sums_to_zero_over_vocabulary(rng):
    _, grad = tdr.rnnt_loss(rng.standard_normal((5, 4, 6)), [5, 2, 2])
    np.testing.assert_allclose(grad.sum(axis=-1), 0.0, atol=1e-12)

def test_gradient_keeps_dtype(rng):
    logits = rng.standard_normal((3, 2, 4)).astype(np.float32)
    nll, grad = tdr.rnnt_loss(logits, [1])
    assert grad.dtype == np.float32
    assert isinstance(nll, float)

def test_loss_on_tape(rng):
    logits = rng.standard_normal((4, 3, 5))
    target = [4, 1]
    with Tape() as tape:
        x = tape.watch(Tensor(logits))
        out = tdr.rnnt_nll(x, target)
    (grad,) = nx.backward(tape, out, [x])
    nll, expected = tdr.rnnt_loss(logits, target)
    assert out.item() == pytest.approx(nll)
    np.testing.assert_allclose(grad, expected)

def test_loss_errors(rng):
    with pytest.raises(ShapeError):
        tdr.rnnt_loss(rng.standard_normal((3, 4)), [1])
    with pytest.raises(ShapeError):
        tdr.rnnt_loss(rng.standard_normal((3, 2, 4)), [1, 2])
    with pytest.raises(ValueError):
        tdr.rnnt_loss(rng.standard_normal((0, 2, 4)), [1])
    with pytest.raises(ValueError):
        tdr.rnnt_loss(rng.standard_normal((3, 2, 4)), [0])
    with pytest.raises(ValueError):
        tdr.rnnt_loss(rng.standard_normal((3, 2, 4)), [4])
    bad = rng.standard_normal((3, 2, 4))
    bad[1, 0, 2] = np.nan
    with pytest.raises(NonFiniteError):
        tdr.rnnt_loss(bad, [1])

def test_bruteforce_limits(rng):
    with pytest.raises(ValueError):
        tdr.rnnt_loss_bruteforce(rng.standard_normal((9, 2, 3)), [1])
    with pytest.raises(ValueError):
        tdr.rnnt_loss_bruteforce(rng.standard_normal((2, 8, 3)), [1] * 7)

@pytest.mark.slow
def test_loss_matches_bruteforce_randomized():
    rng = np.random.default_rng(99)
    for _ in range(200):
        n_frames = int(rng.integers(1, 9))
        n_labels = int(rng.integers(0, 7))
        vocab = int(rng.integers(2, 7))
        logits = rng.standard_normal((n_frames, n_labels + 1, vocab)) * 3
        target = list(rng.integers(1, vocab, n_labels))
        nll, _ = tdr.rnnt_loss(logits, target)
        assert nll == pytest.approx(tdr.rnnt_loss_bruteforce(logits, target), abs=1e-10)
