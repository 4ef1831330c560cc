"""End-to-end training and decoding on the synthetic task."""

import warnings

import numpy as np
import pytest

from xstream import data
from xstream import evaluation as ev
from xstream import search
from xstream.core import ModelConfig, TransducerModel
from xstream.geometry import MaskSpec
from xstream.trainer import Trainer, TrainConfig, evaluate_nll
from xstream.utils import substream

pytestmark = pytest.mark.slow

TASK = data.SyntheticTaskConfig(vocab_size=16, frames_per_token=4, feature_dim=16, noise_std=0.1)
MODEL = ModelConfig(vocab_size=16, feature_dim=16)
TREND_SEEDS = (0, 1, 2, 3, 4)
SATURATED_WER = 0.01

def train_model(mode, seed=0, epochs=20, **overrides):
    train = data.gen_synthetic(TASK, 500, seed)
    cfg = TrainConfig(
        learning_rate=2e-3, warmup_steps=50, epochs=epochs, batch_size=8,
        training_mode=mode, chunk_choices=(4, 8, 16), seed=seed, **overrides,
        )
    model = TransducerModel.init(MODEL, substream(seed, "init"), np.float32)
    trainer = Trainer(model, cfg)
    history = trainer.fit(train)
    return trainer.model, history

def corpus_wer(model, utts, mask, mode="offline", beam_width=4):
    cfg = search.DecodeConfig(beam_width=beam_width, mask=mask)
    results = search.decode_dataset(model, utts, cfg, mode)
    return ev.wer([u.text for u in utts], [r.text for r in results]).wer

def assert_not_worse(better, worse, what):
    """`better` <= `worse`, passing with a warning when both are saturated."""
    if better <= SATURATED_WER and worse <= SATURATED_WER:
        warnings.warn(f"{what}: task saturated ({better:.4f}, {worse:.4f})", stacklevel=2)
        return
    assert better <= worse, what

@pytest.fixture(scope="module")
def test_set():
    yield data.gen_synthetic(TASK, 100, 1000)

@pytest.fixture(scope="module")
def full_model():
    yield train_model("non_streaming")

@pytest.fixture(scope="module")
def multi_chunk_model():
    yield train_model("multi_chunk")

@pytest.fixture(scope="module")
def trend_wers(test_set):
    """Median WER over seeds for each decoding geometry, multi-chunk models."""
    masks = {
        "C4": MaskSpec(4, None, 0),
        "C16": MaskSpec(16, None, 0),
        "full": MaskSpec.full_attention(),
        "C4L0": MaskSpec(4, 0, 0),
        "C4L1": MaskSpec(4, 1, 0),
        "C4L1S4": MaskSpec(4, 1, 4),
    }
    runs = {name: [] for name in masks}
    for seed in TREND_SEEDS:
        model, _ = train_model("multi_chunk", seed=seed)
        for name, mask in masks.items():
            runs[name].append(corpus_wer(model, test_set, mask, beam_width=1))
    yield {name: float(np.median(wers)) for name, wers in runs.items()}

def test_model_is_small():
    model = TransducerModel.init(MODEL, substream(0, "init"), np.float32)
    assert model.n_params <= 200_000

def test_task_is_learnable(test_set):
    correct = total = 0
    for utt in test_set:
        guess = data.nearest_template_decode(utt.inputs, TASK)
        correct += sum(a == b for a, b in zip(guess, utt.tokens))
        total += len(utt.tokens)
    assert correct / total >= 0.99

def test_nll_decreases_early(full_model):
    _, history = full_model
    nll = list(history["mean_nll"])
    assert nll[0] > nll[1] > nll[2]

def test_full_attention_training(full_model, test_set):
    model, _ = full_model
    assert corpus_wer(model, test_set, MaskSpec.full_attention()) <= 0.05

def test_multi_chunk_streaming(multi_chunk_model, test_set):
    model, _ = multi_chunk_model
    assert corpus_wer(model, test_set, MaskSpec(16, None, 0), mode="streaming") <= 0.10

@pytest.mark.parametrize("mask", [
    MaskSpec(4, 0, 0),
    MaskSpec(4, 1, 0),
    MaskSpec(4, 1, 4),
    MaskSpec(16, None, 0),
    MaskSpec(16, 1, 16),
    ])
def test_streaming_matches_offline_on_trained_model(multi_chunk_model, test_set, mask):
    model, _ = multi_chunk_model
    model = model.astype(np.float64)
    cfg = search.DecodeConfig(beam_width=2, mask=mask)
    utts = test_set[:10]
    offline = search.decode_dataset(model, utts, cfg, "offline")
    streaming = search.decode_dataset(model, utts, cfg, "streaming")
    assert [r.tokens for r in offline] == [r.tokens for r in streaming]

def test_longer_chunks_help(trend_wers):
    assert_not_worse(trend_wers["C16"], trend_wers["C4"], "C=16 vs C=4")
    assert_not_worse(trend_wers["full"], trend_wers["C16"], "full attention vs C=16")

def test_one_chunk_of_left_context_helps(trend_wers):
    assert_not_worse(trend_wers["C4L1"], trend_wers["C4L0"], "L=1 vs L=0")

def test_sinks_help(trend_wers):
    assert_not_worse(trend_wers["C4L1S4"], trend_wers["C4L1"], "S=4 vs S=0")

def test_training_geometry_scores_best(test_set):
    """A fixed-chunk model scores its own chunk size better than a smaller one."""
    trained_on = MaskSpec(16, None, 0)
    smaller = MaskSpec(4, None, 0)
    wins = 0
    for seed in TREND_SEEDS:
        model, _ = train_model("fixed_chunk", seed=seed, epochs=10, chunk_frames=16)
        own = evaluate_nll(model, test_set[:30], trained_on)
        wins += own <= evaluate_nll(model, test_set[:30], smaller)
    assert wins > len(TREND_SEEDS) // 2
