"""Chunk-wise front-end and masked transformer encoder, offline or streaming."""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from xstream import geometry
from xstream import numerics as nx
from xstream.exceptions import ShapeError, StreamClosedError
from xstream.numerics import Tensor
from xstream.utils import init_weight

logger = logging.getLogger(__name__)

@dataclass(frozen=True)
class FrontEndConfig:
    """
    Raw waveform to frame embedding settings.

    Parameters
    ----------
    sample_rate : int
        Samples per second of the input audio.
    frame_window : int
        Samples per analysis window (25 ms at 16 kHz).
    frame_hop : int
        Samples between consecutive frames (20 ms at 16 kHz).
    d_model : int
        Width of the produced frame embeddings.
    hidden : int
        Width of the pointwise hidden layer.
    """
    sample_rate: int = 16000
    frame_window: int = 400
    frame_hop: int = 320
    d_model: int = 32
    hidden: int = 64

    def __post_init__(self):
        if self.frame_hop < 1 or self.frame_window < self.frame_hop:
            raise ValueError("frame_window must be >= frame_hop >= 1.")

    def chunk_samples(self, chunk_frames: int) -> int:
        return chunk_frames * self.frame_hop

    def frames_in(self, n_samples: int) -> int:
        """Frames produced by `n_samples` once padded to a hop boundary."""
        return math.ceil(n_samples / self.frame_hop)


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 32
    d_ffn: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if self.n_layers < 0:
            raise ValueError("n_layers cannot be negative.")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})."
                )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1).")


def init_frontend_params(
    cfg: FrontEndConfig,
    rng: np.random.Generator,
    dtype=np.float32,
    ) -> dict[str, Tensor]:
    return {
        "frontend.fc1.w": Tensor(init_weight(rng, (cfg.frame_window, cfg.hidden), dtype)),
        "frontend.fc1.b": Tensor(np.zeros(cfg.hidden, dtype=dtype)),
        "frontend.fc2.w": Tensor(init_weight(rng, (cfg.hidden, cfg.d_model), dtype)),
        "frontend.fc2.b": Tensor(np.zeros(cfg.d_model, dtype=dtype)),
    }

def init_encoder_params(
    cfg: EncoderConfig,
    rng: np.random.Generator,
    dtype=np.float32,
    ) -> dict[str, Tensor]:
    """
    Fresh parameters for every layer of the stack.

    Names follow ``encoder.layer{i}.{block}.{tensor}``, for example
    ``encoder.layer0.attn.wq``.
    """
    d, f = cfg.d_model, cfg.d_ffn
    params = {}
    for i in range(cfg.n_layers):
        p = f"encoder.layer{i}"
        params[f"{p}.attn_norm.gain"] = Tensor(np.ones(d, dtype=dtype))
        params[f"{p}.attn_norm.bias"] = Tensor(np.zeros(d, dtype=dtype))
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{p}.attn.{name}"] = Tensor(init_weight(rng, (d, d), dtype))
        for name in ("bq", "bk", "bv", "bo"):
            params[f"{p}.attn.{name}"] = Tensor(np.zeros(d, dtype=dtype))
        params[f"{p}.ffn_norm.gain"] = Tensor(np.ones(d, dtype=dtype))
        params[f"{p}.ffn_norm.bias"] = Tensor(np.zeros(d, dtype=dtype))
        params[f"{p}.ffn.w1"] = Tensor(init_weight(rng, (d, f), dtype))
        params[f"{p}.ffn.b1"] = Tensor(np.zeros(f, dtype=dtype))
        params[f"{p}.ffn.w2"] = Tensor(init_weight(rng, (f, d), dtype))
        params[f"{p}.ffn.b2"] = Tensor(np.zeros(d, dtype=dtype))
    return params

def _windows(raw: np.ndarray, cfg: FrontEndConfig) -> np.ndarray:
    n_frames = len(raw) // cfg.frame_hop
    padded_len = (n_frames - 1) * cfg.frame_hop + cfg.frame_window
    padded = np.zeros(padded_len, dtype=np.float64)
    padded[:len(raw)] = raw
    view = np.lib.stride_tricks.sliding_window_view(padded, cfg.frame_window)
    return view[::cfg.frame_hop][:n_frames]

def frontend_chunk(
    raw: np.ndarray,
    cfg: FrontEndConfig,
    params: Mapping[str, Tensor],
    ) -> Tensor:
    """
    Embeds one chunk of samples, independently of every other chunk.

    Each frame reads a window starting at a multiple of the hop; windows
    running past the end of the chunk read zeros.

    Parameters
    ----------
    raw : np.ndarray
        Samples of the chunk; the length must be a positive multiple of
        `cfg.frame_hop`.
    cfg : FrontEndConfig
        Framing settings.
    params : mapping of str to Tensor
        Holds the ``frontend.*`` tensors.

    Returns
    -------
    Tensor
        ``[len(raw) / frame_hop, d_model]`` frame embeddings.
    """
    raw = np.asarray(raw)
    if raw.ndim != 1 or raw.size == 0:
        raise ValueError("frontend_chunk needs a non-empty 1-D chunk of samples.")
    if raw.size % cfg.frame_hop != 0:
        raise ValueError(
            f"chunk of {raw.size} samples is not a multiple of the hop ({cfg.frame_hop})."
            )
    w1 = params["frontend.fc1.w"]
    windows = Tensor(_windows(raw, cfg), dtype=w1.dtype)
    hidden = nx.gelu(windows @ w1 + params["frontend.fc1.b"])
    return hidden @ params["frontend.fc2.w"] + params["frontend.fc2.b"]

def pad_to_hop(raw: np.ndarray, frame_hop: int) -> np.ndarray:
    """Zero-pads `raw` at the end to a multiple of `frame_hop`."""
    raw = np.asarray(raw, dtype=np.float64)
    remainder = raw.size % frame_hop
    if remainder == 0:
        return raw
    return np.concatenate([raw, np.zeros(frame_hop - remainder)])

def frontend(
    raw: np.ndarray,
    cfg: FrontEndConfig,
    params: Mapping[str, Tensor],
    chunk_frames: int | None = None,
    ) -> Tensor:
    """
    Runs `frontend_chunk` sequentially over an utterance and concatenates.

    With `chunk_frames` None the whole utterance is one chunk.
    """
    raw = pad_to_hop(raw, cfg.frame_hop)
    if raw.size == 0:
        raise ValueError("cannot embed an empty utterance.")
    step = raw.size if chunk_frames is None else cfg.chunk_samples(chunk_frames)
    pieces = [
        frontend_chunk(raw[start:start + step], cfg, params)
        for start in range(0, raw.size, step)
        ]
    return pieces[0] if len(pieces) == 1 else nx.concat(pieces, axis=0)

def positional_encoding(
    positions: np.ndarray,
    d_model: int,
    dtype=np.float32,
    ) -> np.ndarray:
    """
    Sinusoidal encoding of absolute frame positions.

    Even features hold ``sin(pos / 10000^(2i/d))`` and odd features the
    matching cosine.
    """
    positions = np.asarray(positions, dtype=np.float64)[:, None]
    dims = np.arange(0, d_model, 2, dtype=np.float64)
    angles = positions / np.power(10000.0, dims / d_model)
    pe = np.zeros((positions.shape[0], d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return pe.astype(dtype)

def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    n, d = x.shape
    return nx.swapaxes(nx.reshape(x, (n, n_heads, d // n_heads)), 0, 1)

def _layer_forward(
    params: Mapping[str, Tensor],
    prefix: str,
    x: Tensor,
    mask: np.ndarray,
    n_heads: int,
    past: tuple[Tensor, Tensor] | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, Tensor, Tensor]:
    """
    One pre-norm transformer block.

    Returns the block output together with the keys and values computed for
    the rows of `x`, so that a stream can cache them.
    """
    c, d = x.shape
    h = nx.layer_norm(x, params[f"{prefix}.attn_norm.gain"], params[f"{prefix}.attn_norm.bias"])
    q = h @ params[f"{prefix}.attn.wq"] + params[f"{prefix}.attn.bq"]
    k = h @ params[f"{prefix}.attn.wk"] + params[f"{prefix}.attn.bk"]
    v = h @ params[f"{prefix}.attn.wv"] + params[f"{prefix}.attn.bv"]
    keys, values = k, v
    if past is not None:
        keys = nx.concat([past[0], k], axis=0)
        values = nx.concat([past[1], v], axis=0)

    qh = _split_heads(q, n_heads)
    kh = _split_heads(keys, n_heads)
    vh = _split_heads(values, n_heads)
    scores = nx.scale(qh @ nx.swapaxes(kh, 1, 2), 1.0 / math.sqrt(d // n_heads))
    probs = nx.masked_softmax(scores, mask)
    ctx = nx.reshape(nx.swapaxes(probs @ vh, 0, 1), (c, d))
    attn_out = ctx @ params[f"{prefix}.attn.wo"] + params[f"{prefix}.attn.bo"]
    x = x + nx.dropout(attn_out, dropout, rng)

    h = nx.layer_norm(x, params[f"{prefix}.ffn_norm.gain"], params[f"{prefix}.ffn_norm.bias"])
    ffn = nx.gelu(h @ params[f"{prefix}.ffn.w1"] + params[f"{prefix}.ffn.b1"])
    ffn = ffn @ params[f"{prefix}.ffn.w2"] + params[f"{prefix}.ffn.b2"]
    x = x + nx.dropout(ffn, dropout, rng)
    return x, k, v

def _check_frames(frames: Tensor, cfg: EncoderConfig) -> None:
    if frames.ndim != 2 or frames.shape[1] != cfg.d_model:
        raise ShapeError(f"expected [frames, {cfg.d_model}] input, got {frames.shape}")

def encode_offline(
    frames: Tensor,
    spec: geometry.MaskSpec,
    params: Mapping[str, Tensor],
    cfg: EncoderConfig,
    rng: np.random.Generator | None = None,
    ) -> Tensor:
    """
    Full-utterance forward under the mask of `spec`.

    Parameters
    ----------
    frames : Tensor
        ``[T, d_model]`` frame embeddings.
    spec : MaskSpec
        Attention geometry; its `total_frames` is replaced by T.
    params : mapping of str to Tensor
        Encoder parameters.
    cfg : EncoderConfig
        Stack settings.
    rng : np.random.Generator, optional
        Dropout generator. Dropout is only applied when given.

    Returns
    -------
    Tensor
        ``[T, d_model]`` encoder outputs.
    """
    _check_frames(frames, cfg)
    total = frames.shape[0]
    if total < 1:
        raise ValueError("cannot encode an empty utterance.")
    mask = geometry.build_mask(spec.with_frames(total))
    pe = positional_encoding(np.arange(total), cfg.d_model, frames.dtype)
    x = frames + Tensor(pe)
    rate = cfg.dropout if rng is not None else 0.0
    for i in range(cfg.n_layers):
        x, _, _ = _layer_forward(params, f"encoder.layer{i}", x, mask, cfg.n_heads, None, rate, rng)
    return x


@dataclass
class StreamState:
    """
    Key/value cache of one incremental encoding.

    Per layer, `sink_keys` and `sink_values` hold the first `spec.sink_frames`
    frames of the stream, and `window` holds the (keys, values) of the
    retained previous chunks, oldest first. With full left context every
    chunk is retained and the cache grows with the stream.
    """
    cfg: EncoderConfig
    spec: geometry.MaskSpec
    params: Mapping[str, Tensor]
    frames_emitted: int = 0
    closed: bool = False
    sink_keys: list = field(default_factory=list)
    sink_values: list = field(default_factory=list)
    window: list = field(default_factory=list)
    _saw_short: bool = False

    @property
    def retained_frames(self) -> int:
        """Non-sink cached frames per layer."""
        if not self.window:
            return 0
        return sum(k.shape[0] for k, _ in self.window[0])

    @property
    def sink_frames_cached(self) -> int:
        if not self.sink_keys or self.sink_keys[0] is None:
            return 0
        return self.sink_keys[0].shape[0]


def encoder_open_stream(
    cfg: EncoderConfig,
    spec: geometry.MaskSpec,
    params: Mapping[str, Tensor],
    ) -> StreamState:
    """Empty stream for `spec`; `spec.total_frames` is ignored."""
    maxlen = spec.left_context
    return StreamState(
        cfg=cfg,
        spec=spec.with_frames(None),
        params=params,
        sink_keys=[None] * cfg.n_layers,
        sink_values=[None] * cfg.n_layers,
        window=[deque(maxlen=maxlen) for _ in range(cfg.n_layers)],
        )

def _past_for(state: StreamState, layer: int, window_start: int):
    keys, values = [], []
    n_sinks = min(state.spec.sink_frames, window_start)
    if n_sinks > 0 and state.sink_keys[layer] is not None:
        keys.append(Tensor(state.sink_keys[layer].data[:n_sinks]))
        values.append(Tensor(state.sink_values[layer].data[:n_sinks]))
    for k, v in state.window[layer]:
        keys.append(k)
        values.append(v)
    if not keys:
        return None
    if len(keys) == 1:
        return keys[0], values[0]
    return nx.concat(keys, axis=0), nx.concat(values, axis=0)

def _capture_sinks(state: StreamState, layer: int, k: Tensor, v: Tensor) -> None:
    missing = state.spec.sink_frames - state.frames_emitted
    if missing <= 0:
        return
    take = min(missing, k.shape[0])
    new_k = Tensor(k.data[:take])
    new_v = Tensor(v.data[:take])
    if state.sink_keys[layer] is None:
        state.sink_keys[layer], state.sink_values[layer] = new_k, new_v
    else:
        state.sink_keys[layer] = nx.concat([state.sink_keys[layer], new_k])
        state.sink_values[layer] = nx.concat([state.sink_values[layer], new_v])

def encoder_push_chunk(state: StreamState, chunk: Tensor) -> Tensor:
    """
    Encodes the next chunk of a stream.

    The chunk attends to the cached sink frames, the cached left-context
    chunks and itself. Its keys and values are then cached, chunks beyond
    the left context are evicted, and sink keys are captured while the
    stream is still inside its first `sink_frames` frames.

    Parameters
    ----------
    state : StreamState
        Open stream, updated in place.
    chunk : Tensor
        ``[c, d_model]`` frame embeddings with ``c <= chunk_frames``. Only
        the final push may be shorter than `chunk_frames`.

    Returns
    -------
    Tensor
        ``[c, d_model]`` encoder outputs for the chunk.

    Raises
    ------
    StreamClosedError
        If the stream was finalized.
    ValueError
        On an oversize chunk, or a push following a short one.
    """
    if state.closed:
        raise StreamClosedError("push after finalize")
    cfg, spec = state.cfg, state.spec
    _check_frames(chunk, cfg)
    c = chunk.shape[0]
    if c < 1:
        raise ValueError("cannot push an empty chunk.")
    if state._saw_short:
        raise ValueError("only the final push may be shorter than chunk_frames.")
    if spec.chunk_frames is None:
        state._saw_short = True
    elif c > spec.chunk_frames:
        raise ValueError(f"chunk of {c} frames exceeds chunk_frames={spec.chunk_frames}.")
    elif c < spec.chunk_frames:
        state._saw_short = True

    start = state.frames_emitted
    if spec.chunk_frames is None or spec.left_context is None:
        window_start = 0
    else:
        n = start // spec.chunk_frames
        window_start = max(0, n - spec.left_context) * spec.chunk_frames

    pe = positional_encoding(np.arange(start, start + c), cfg.d_model, chunk.dtype)
    x = chunk + Tensor(pe)
    for i in range(cfg.n_layers):
        past = _past_for(state, i, window_start)
        n_keys = c + (0 if past is None else past[0].shape[0])
        mask = np.ones((c, n_keys), dtype=bool)
        x, k, v = _layer_forward(state.params, f"encoder.layer{i}", x, mask, cfg.n_heads, past)
        _capture_sinks(state, i, k, v)
        state.window[i].append((k, v))

    state.frames_emitted += c
    logger.debug(
        "pushed %d frames (total %d), retained %d, sinks %d",
        c, state.frames_emitted, state.retained_frames, state.sink_frames_cached,
        )
    return x

def encoder_finalize(state: StreamState) -> None:
    """Closes the stream; further pushes raise `StreamClosedError`."""
    if state.closed:
        raise StreamClosedError("stream already finalized")
    state.closed = True
