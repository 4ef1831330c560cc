import numpy as np
import pytest

from xstream.core import ModelConfig, TransducerModel
from xstream.data import SyntheticTaskConfig
from xstream.encoder import EncoderConfig, FrontEndConfig
from xstream.transducer import JoinerConfig, PredictorConfig

@pytest.fixture
def rng():
    yield np.random.default_rng(1234)

@pytest.fixture(scope="session")
def tiny_model_cfg():
    """
    Small feature model used across tests.

    Dropout is off so that offline and streaming forwards are comparable.
    """
    cfg = ModelConfig(
        vocab_size=5,
        input_kind="features",
        feature_dim=6,
        encoder=EncoderConfig(n_layers=2, n_heads=2, d_model=8, d_ffn=16, dropout=0.0),
        predictor=PredictorConfig(embed_dim=4, kernel=2),
        joiner=JoinerConfig(joint_dim=8),
        )
    yield cfg

@pytest.fixture(scope="session")
def tiny_audio_cfg():
    """Small raw-audio model with a 32-sample hop."""
    cfg = ModelConfig(
        vocab_size=4,
        input_kind="audio",
        frontend=FrontEndConfig(sample_rate=16000, frame_window=40, frame_hop=32, d_model=8, hidden=8),
        encoder=EncoderConfig(n_layers=1, n_heads=2, d_model=8, d_ffn=16, dropout=0.0),
        predictor=PredictorConfig(embed_dim=4, kernel=2),
        joiner=JoinerConfig(joint_dim=8),
        )
    yield cfg

@pytest.fixture
def tiny_model(tiny_model_cfg):
    """Randomly initialized float64 feature model."""
    yield TransducerModel.init(tiny_model_cfg, np.random.default_rng(0), np.float64)

@pytest.fixture
def tiny_audio_model(tiny_audio_cfg):
    yield TransducerModel.init(tiny_audio_cfg, np.random.default_rng(0), np.float64)

@pytest.fixture(scope="session")
def synthetic_cfg():
    """Synthetic task matching `tiny_model_cfg`."""
    yield SyntheticTaskConfig(
        vocab_size=5,
        frames_per_token=3,
        feature_dim=6,
        noise_std=0.05,
        min_tokens=2,
        max_tokens=4,
        )
