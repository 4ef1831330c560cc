"""Testing the assembled transducer model."""

import math
from dataclasses import replace

import numpy as np
import pytest

from xstream import numerics as nx
from xstream.core import ModelConfig, TransducerModel, utterance_nll
from xstream.encoder import EncoderConfig, FrontEndConfig
from xstream.exceptions import CheckpointError, ShapeError
from xstream.geometry import MaskSpec
from xstream.numerics import Tape, Tensor

def test_parameter_names(tiny_model):
    names = list(tiny_model.params)
    assert names[:2] == ["input.proj.w", "input.proj.b"]
    assert "encoder.layer1.attn.wq" in names
    assert "predictor.embed" in names
    assert names[-1] == "joiner.out.b"
    assert tiny_model.params["joiner.out.w"].shape == (8, 5)
    assert tiny_model.params["predictor.embed"].shape == (5, 4)

def test_audio_model_has_frontend(tiny_audio_model):
    assert "frontend.fc1.w" in tiny_audio_model.params
    assert "input.proj.w" not in tiny_audio_model.params
    assert tiny_audio_model.params["frontend.fc1.w"].shape == (40, 8)

def test_expected_shapes_match(tiny_model_cfg, tiny_model):
    expected = TransducerModel.expected_shapes(tiny_model_cfg)
    assert expected == {n: t.shape for n, t in tiny_model.params.items()}
    assert tiny_model.n_params == sum(math.prod(s) for s in expected.values())

def test_init_is_deterministic(tiny_model_cfg):
    a = TransducerModel.init(tiny_model_cfg, np.random.default_rng(5))
    b = TransducerModel.init(tiny_model_cfg, np.random.default_rng(5))
    assert a.dtype == np.float32
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

def test_checkpoint_errors(tiny_model):
    params = dict(tiny_model.params)
    with pytest.raises(CheckpointError):
        TransducerModel(tiny_model.cfg, {**params, "extra.w": Tensor(np.zeros(2))})
    missing = dict(params)
    del missing["joiner.out.b"]
    with pytest.raises(CheckpointError):
        TransducerModel(tiny_model.cfg, missing)
    with pytest.raises(CheckpointError):
        TransducerModel(tiny_model.cfg, {**params, "joiner.out.b": Tensor(np.zeros(7))})
    with pytest.raises(CheckpointError):
        TransducerModel(
            tiny_model.cfg, {**params, "joiner.out.b": params["joiner.out.b"].astype(np.float32)}
            )

def test_astype(tiny_model):
    single = tiny_model.astype(np.float32)
    assert single.dtype == np.float32
    assert tiny_model.dtype == np.float64

@pytest.mark.parametrize("kwargs", [
    {"vocab_size": 1},
    {"input_kind": "spectrogram"},
    {"feature_dim": 0},
    {"loss": "rnnt_pruned"},
    {"input_kind": "audio", "frontend": FrontEndConfig(d_model=16), "encoder": EncoderConfig(d_model=32)},
    ])
def test_model_config_validation(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)

def test_embed_features_shape_error(tiny_model):
    with pytest.raises(ShapeError):
        tiny_model.embed_features(np.zeros((4, 5)))

def test_audio_frame_count(tiny_audio_model):
    for n_samples in (32, 33, 100, 320):
        raw = np.random.default_rng(n_samples).uniform(-1, 1, n_samples)
        assert tiny_audio_model.n_frames(raw) == math.ceil(n_samples / 32)
        assert tiny_audio_model.embed(raw).shape == (math.ceil(n_samples / 32), 8)

def test_encode_shape(tiny_model, rng):
    out = tiny_model.encode(rng.standard_normal((7, 6)), MaskSpec(2, 1, 1))
    assert out.shape == (7, 8)

def test_step_log_probs_normalized(tiny_model, rng):
    enc_t = rng.standard_normal(8)
    lp = tiny_model.step_log_probs(enc_t, tiny_model.predictor_row([3]))
    assert lp.shape == (5,)
    assert np.exp(lp).sum() == pytest.approx(1.0)

def test_step_log_probs_match_lattice(tiny_model, rng):
    enc_out = tiny_model.encode(rng.standard_normal((3, 6)), MaskSpec(2, 0, 0))
    tokens = [2, 4]
    lattice = nx.log_softmax(tiny_model.logits(enc_out, tokens)).data
    for u in range(3):
        lp = tiny_model.step_log_probs(enc_out.data[1], tiny_model.predictor_row(tokens[:u]))
        np.testing.assert_allclose(lp, lattice[1, u], atol=1e-10)

def test_utterance_nll_is_positive(tiny_model, rng):
    nll = utterance_nll(tiny_model, rng.standard_normal((6, 6)), [1, 3], MaskSpec(2, 1, 0))
    assert nll > 0.0

def test_loss_gradient_subset(tiny_model_cfg):
    """Finite differences on a few tensors of a tiny model."""
    cfg = replace(
        tiny_model_cfg,
        encoder=EncoderConfig(n_layers=1, n_heads=2, d_model=8, d_ffn=16, dropout=0.0),
        )
    model = TransducerModel.init(cfg, np.random.default_rng(1), np.float64)
    rng = np.random.default_rng(2)
    features = rng.standard_normal((3, 6))
    tokens = [2, 1]
    spec = MaskSpec(2, 0, 1)
    names = ["joiner.out.b", "encoder.layer0.attn_norm.gain", "input.proj.b"]

    def loss(*tensors):
        params = dict(model.params)
        params.update(zip(names, tensors))
        return model.with_params(params).loss(features, tokens, spec)

    err = nx.finite_difference_gradcheck(loss, [model.params[n].data for n in names])
    assert err <= 1e-4

def test_loss_backward_covers_all_params(tiny_model, rng):
    with Tape() as tape:
        watched = {n: tape.watch(t) for n, t in tiny_model.params.items()}
        out = tiny_model.with_params(watched).loss(rng.standard_normal((5, 6)), [1, 2], MaskSpec(2, 1, 1))
    grads = nx.backward(tape, out, watched)
    assert set(grads) == set(tiny_model.params)
    assert all(np.isfinite(g).all() for g in grads.values())
    assert np.abs(grads["joiner.out.w"]).sum() > 0
