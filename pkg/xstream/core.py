"""Core functionality of XStream: the assembled transducer model."""

import functools
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from xstream import encoder as enc
from xstream import geometry
from xstream import transducer as tdr
from xstream.exceptions import CheckpointError, ShapeError
from xstream.numerics import Tensor
from xstream.utils import init_weight

logger = logging.getLogger(__name__)

INPUT_KINDS = ("features", "audio")

@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture of a transducer model.

    Parameters
    ----------
    vocab_size : int
        Output symbols including blank.
    input_kind : {"features", "audio"}
        Feature frames go through a learned input projection; raw audio
        goes through the chunk-wise front-end.
    feature_dim : int
        Width of feature frames (ignored for audio).
    frontend : FrontEndConfig
        Front-end settings; its `d_model` must match the encoder.
    encoder : EncoderConfig
    predictor : PredictorConfig
    joiner : JoinerConfig
    loss : str
        Training objective. Only the exact, unpruned transducer loss is
        implemented.
    """
    vocab_size: int = 16
    input_kind: str = "features"
    feature_dim: int = 16
    frontend: enc.FrontEndConfig = field(default_factory=enc.FrontEndConfig)
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    predictor: tdr.PredictorConfig = field(default_factory=tdr.PredictorConfig)
    joiner: tdr.JoinerConfig = field(default_factory=tdr.JoinerConfig)
    loss: str = "rnnt_exact"

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2.")
        if self.input_kind not in INPUT_KINDS:
            raise ValueError(f"input_kind must be one of {INPUT_KINDS}.")
        if self.input_kind == "audio" and self.frontend.d_model != self.encoder.d_model:
            raise ValueError("frontend.d_model must equal encoder.d_model.")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1.")
        if self.loss != "rnnt_exact":
            raise ValueError("only the exact transducer loss ('rnnt_exact') is available.")

    @property
    def d_model(self) -> int:
        return self.encoder.d_model


def init_params(
    cfg: ModelConfig,
    rng: np.random.Generator,
    dtype=np.float32,
    ) -> dict[str, Tensor]:
    """Fresh parameters for every component of `cfg`, in a fixed order."""
    params = {}
    if cfg.input_kind == "features":
        params["input.proj.w"] = Tensor(init_weight(rng, (cfg.feature_dim, cfg.d_model), dtype))
        params["input.proj.b"] = Tensor(np.zeros(cfg.d_model, dtype=dtype))
    else:
        params.update(enc.init_frontend_params(cfg.frontend, rng, dtype))
    params.update(enc.init_encoder_params(cfg.encoder, rng, dtype))
    params.update(tdr.init_predictor_params(cfg.predictor, cfg.vocab_size, rng, dtype))
    params.update(tdr.init_joiner_params(
        cfg.joiner, cfg.d_model, cfg.predictor.embed_dim, cfg.vocab_size, rng, dtype
        ))
    return params


@functools.lru_cache(maxsize=32)
def _expected_shapes(cfg: ModelConfig) -> tuple:
    probe = init_params(cfg, np.random.default_rng(0), np.float32)
    return tuple((name, t.shape) for name, t in probe.items())


class TransducerModel:
    """
    Encoder, stateless predictor and joiner with named parameters.

    Parameters are immutable tensors; updates produce a new model through
    `with_params`.

    Parameters
    ----------
    cfg : ModelConfig
        Architecture.
    params : mapping of str to Tensor
        One tensor per name of ``expected_shapes(cfg)``.

    Raises
    ------
    CheckpointError
        On missing, unknown or mis-shaped tensors.
    """

    def __init__(self, cfg: ModelConfig, params: Mapping[str, Tensor]):
        expected = self.expected_shapes(cfg)
        unknown = sorted(set(params) - set(expected))
        if unknown:
            raise CheckpointError(f"unknown tensor name {unknown[0]!r}")
        missing = sorted(set(expected) - set(params))
        if missing:
            raise CheckpointError(f"missing tensor {missing[0]!r}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise CheckpointError(
                    f"tensor {name!r} has shape {params[name].shape}, model expects {shape}"
                    )
        dtypes = {params[name].dtype for name in expected}
        if len(dtypes) != 1:
            raise CheckpointError("all tensors must share one dtype")
        self.cfg = cfg
        self.params = {name: params[name] for name in expected}

    @classmethod
    def init(
        cls,
        cfg: ModelConfig,
        rng: np.random.Generator,
        dtype=np.float32,
        ) -> "TransducerModel":
        return cls(cfg, init_params(cfg, rng, dtype))

    @staticmethod
    def expected_shapes(cfg: ModelConfig) -> dict[str, tuple]:
        """Parameter names and shapes of an architecture."""
        return dict(_expected_shapes(cfg))

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def with_params(self, params: Mapping[str, Tensor]) -> "TransducerModel":
        return TransducerModel(self.cfg, params)

    def astype(self, dtype) -> "TransducerModel":
        return self.with_params({n: t.astype(dtype) for n, t in self.params.items()})

    def __repr__(self) -> str:
        return (
            f"TransducerModel(input={self.cfg.input_kind}, layers={self.cfg.encoder.n_layers}, "
            f"d_model={self.cfg.d_model}, vocab={self.cfg.vocab_size}, params={self.n_params})"
            )

    def embed(self, inputs: np.ndarray, chunk_frames: int | None = None) -> Tensor:
        """
        Frame embeddings of one utterance.

        Parameters
        ----------
        inputs : np.ndarray
            ``[T, feature_dim]`` features or 1-D raw samples.
        chunk_frames : int, optional
            Front-end chunking for raw audio; features ignore it.
        """
        if self.cfg.input_kind == "audio":
            return enc.frontend(inputs, self.cfg.frontend, self.params, chunk_frames)
        return self.embed_features(inputs)

    def embed_features(self, frames: np.ndarray) -> Tensor:
        frames = np.asarray(frames)
        if frames.ndim != 2 or frames.shape[1] != self.cfg.feature_dim:
            raise ShapeError(
                f"expected [frames, {self.cfg.feature_dim}] features, got {frames.shape}"
                )
        x = Tensor(frames, dtype=self.dtype)
        return x @ self.params["input.proj.w"] + self.params["input.proj.b"]

    def embed_chunk(self, chunk: np.ndarray) -> Tensor:
        """Embeds one streaming chunk (samples padded to a hop, or frames)."""
        if self.cfg.input_kind == "audio":
            return enc.frontend_chunk(chunk, self.cfg.frontend, self.params)
        return self.embed_features(chunk)

    def n_frames(self, inputs: np.ndarray) -> int:
        """Encoder frames produced for `inputs`."""
        if self.cfg.input_kind == "audio":
            return self.cfg.frontend.frames_in(np.asarray(inputs).size)
        return int(np.asarray(inputs).shape[0])

    def encode(
        self,
        inputs: np.ndarray,
        spec: geometry.MaskSpec,
        rng: np.random.Generator | None = None,
        ) -> Tensor:
        """Offline encoder outputs under `spec`; `rng` enables dropout."""
        frames = self.embed(inputs, spec.chunk_frames)
        return enc.encode_offline(frames, spec, self.params, self.cfg.encoder, rng)

    def open_stream(self, spec: geometry.MaskSpec) -> enc.StreamState:
        return enc.encoder_open_stream(self.cfg.encoder, spec, self.params)

    def logits(self, enc_out: Tensor, tokens: Sequence[int]) -> Tensor:
        """Full ``[T, U + 1, V]`` lattice for `tokens`."""
        pred = tdr.predictor_forward(self.params, tokens)
        return tdr.joiner(self.params, enc_out, pred)

    def loss(
        self,
        inputs: np.ndarray,
        tokens: Sequence[int],
        spec: geometry.MaskSpec,
        rng: np.random.Generator | None = None,
        ) -> Tensor:
        """Scalar transducer negative log-likelihood of `tokens`."""
        enc_out = self.encode(inputs, spec, rng)
        return tdr.rnnt_nll(self.logits(enc_out, tokens), tokens)

    def predictor_row(self, context: Sequence[int]) -> np.ndarray:
        return tdr.predictor_context_row(self.params, context)

    def step_log_probs(self, enc_t: np.ndarray, pred_row: np.ndarray) -> np.ndarray:
        """Log-probabilities over the vocabulary at one lattice node."""
        return special.log_softmax(tdr.joiner_step(self.params, enc_t, pred_row))

    @property
    def context_size(self) -> int:
        return self.cfg.predictor.kernel


def utterance_nll(
    model: TransducerModel,
    inputs: np.ndarray,
    tokens: Sequence[int],
    spec: geometry.MaskSpec,
    ) -> float:
    """Untracked negative log-likelihood of one utterance."""
    return model.loss(inputs, tokens, spec).item()
