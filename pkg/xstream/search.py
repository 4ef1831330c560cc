"""Greedy and beam transducer search, offline or over a live stream."""

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from xstream import encoder as enc
from xstream import geometry
from xstream.core import TransducerModel
from xstream.data import Utterance
from xstream.evaluation import CostReport, cost_report
from xstream.exceptions import StreamClosedError
from xstream.numerics import Tensor
from xstream.transducer import BLANK_ID, Vocab

logger = logging.getLogger(__name__)

DECODE_MODES = ("offline", "streaming")

@dataclass(frozen=True)
class Hypothesis:
    """
    Partial or final transcript of a search.

    Parameters
    ----------
    tokens : tuple of int
        Emitted token ids.
    log_prob : float
        Total log score of every merged path producing `tokens`.
    context : tuple of int
        Last tokens seen by the stateless predictor.
    """
    tokens: tuple[int, ...] = ()
    log_prob: float = 0.0
    context: tuple[int, ...] = ()

    def extend(self, token: int, score: float, context_size: int) -> "Hypothesis":
        tokens = self.tokens + (token,)
        return Hypothesis(tokens, self.log_prob + score, tokens[-context_size:])


@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 4
    mask: geometry.MaskSpec = field(default_factory=geometry.MaskSpec)
    max_symbols_per_frame: int = 8

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1.")
        if self.max_symbols_per_frame < 1:
            raise ValueError("max_symbols_per_frame must be >= 1.")


def _sort_key(hyp: Hypothesis):
    return (-hyp.log_prob, hyp.tokens)

class _Scorer:
    """Log-probabilities per (frame, predictor context), caching predictor rows."""

    def __init__(self, model: TransducerModel):
        self.model = model
        self.rows: dict[tuple, np.ndarray] = {}

    def __call__(self, enc_t: np.ndarray, context: tuple) -> np.ndarray:
        row = self.rows.get(context)
        if row is None:
            row = self.rows[context] = self.model.predictor_row(context)
        return self.model.step_log_probs(enc_t, row)


def _as_frames(enc_frames) -> np.ndarray:
    return enc_frames.data if isinstance(enc_frames, Tensor) else np.asarray(enc_frames)

def _greedy_frame(hyp: Hypothesis, enc_t, scorer: _Scorer, max_symbols: int, k: int) -> Hypothesis:
    for _ in range(max_symbols):
        log_probs = scorer(enc_t, hyp.context)
        best = int(np.argmax(log_probs))
        if best == BLANK_ID:
            return Hypothesis(hyp.tokens, hyp.log_prob + float(log_probs[BLANK_ID]), hyp.context)
        hyp = hyp.extend(best, float(log_probs[best]), k)
    return hyp

def greedy_search(
    enc_frames,
    model: TransducerModel,
    max_symbols_per_frame: int = 8,
    ) -> Hypothesis:
    """`greedy_decode` returning the scored hypothesis."""
    scorer = _Scorer(model)
    hyp = Hypothesis()
    for enc_t in _as_frames(enc_frames):
        hyp = _greedy_frame(hyp, enc_t, scorer, max_symbols_per_frame, model.context_size)
    return hyp

def greedy_decode(
    enc_frames,
    model: TransducerModel,
    max_symbols_per_frame: int = 8,
    ) -> list[int]:
    """
    Best-first decoding, one argmax per step.

    A frame is left on a blank or after `max_symbols_per_frame` emissions.

    Parameters
    ----------
    enc_frames : Tensor or np.ndarray
        ``[T, d_model]`` encoder outputs.
    model : TransducerModel

    Returns
    -------
    list of int
        Emitted token ids.
    """
    return list(greedy_search(enc_frames, model, max_symbols_per_frame).tokens)

def _merge(pool: dict, hyp: Hypothesis) -> None:
    other = pool.get(hyp.tokens)
    if other is None:
        pool[hyp.tokens] = hyp
    else:
        pool[hyp.tokens] = Hypothesis(
            hyp.tokens, float(np.logaddexp(other.log_prob, hyp.log_prob)), hyp.context
            )

def _beam_frame(
    beam: list[Hypothesis],
    enc_t: np.ndarray,
    scorer: _Scorer,
    cfg: DecodeConfig,
    k: int,
    ) -> list[Hypothesis]:
    width = cfg.beam_width
    finished: dict[tuple, Hypothesis] = {}
    active = beam
    for _ in range(cfg.max_symbols_per_frame):
        if not active:
            break
        done = dict(finished)
        growing: dict[tuple, Hypothesis] = {}
        for hyp in active:
            log_probs = scorer(enc_t, hyp.context)
            _merge(done, Hypothesis(hyp.tokens, hyp.log_prob + float(log_probs[BLANK_ID]), hyp.context))
            for token in range(1, log_probs.shape[0]):
                _merge(growing, hyp.extend(token, float(log_probs[token]), k))
        pool = [(h, True) for h in done.values()] + [(h, False) for h in growing.values()]
        pool.sort(key=lambda item: (*_sort_key(item[0]), not item[1]))
        kept = pool[:width]
        finished = {h.tokens: h for h, is_done in kept if is_done}
        active = [h for h, is_done in kept if not is_done]
    # hypotheses still emitting at the cap leave the frame without a blank
    for hyp in active:
        _merge(finished, hyp)
    return sorted(finished.values(), key=_sort_key)[:width]

def beam_search(
    enc_frames,
    model: TransducerModel,
    cfg: DecodeConfig,
    beam: Sequence[Hypothesis] | None = None,
    ) -> list[Hypothesis]:
    """
    Frame-synchronous transducer beam search.

    Within a frame, hypotheses are expanded for up to
    `max_symbols_per_frame` rounds. Each round scores blank (closing the
    frame) and every token (staying in it) for the active hypotheses, merges
    equal token sequences by log-add, and keeps the best `beam_width`
    candidates across closed and active ones. With width 1 this is exactly
    `greedy_decode`.

    Parameters
    ----------
    enc_frames : Tensor or np.ndarray
        ``[T, d_model]`` encoder outputs.
    model : TransducerModel
    cfg : DecodeConfig
    beam : sequence of Hypothesis, optional
        Beam to continue from; a fresh empty hypothesis by default.

    Returns
    -------
    list of Hypothesis
        Up to `beam_width` hypotheses, best first.
    """
    scorer = _Scorer(model)
    current = list(beam) if beam else [Hypothesis()]
    for enc_t in _as_frames(enc_frames):
        current = _beam_frame(current, enc_t, scorer, cfg, model.context_size)
    return current


@dataclass
class Session:
    """
    One live decoding stream.

    Samples (audio models) or frames (feature models) are buffered until a
    whole chunk of the decode geometry is available; each chunk is encoded
    incrementally and the beam is carried across chunks.
    """
    model: TransducerModel
    cfg: DecodeConfig
    state: enc.StreamState
    beam: list[Hypothesis]
    buffer: np.ndarray
    chunk_keys: list[int] = field(default_factory=list)
    chunk_lengths: list[int] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    closed: bool = False

    @property
    def frames_emitted(self) -> int:
        return self.state.frames_emitted

    @property
    def best(self) -> Hypothesis:
        return self.beam[0]

    @property
    def _chunk_units(self) -> int | None:
        c = self.cfg.mask.chunk_frames
        if c is None:
            return None
        if self.model.cfg.input_kind == "audio":
            return self.model.cfg.frontend.chunk_samples(c)
        return c


def stream_open(model: TransducerModel, cfg: DecodeConfig) -> Session:
    """Fresh session with an empty cache and the empty hypothesis."""
    if model.cfg.input_kind == "audio":
        buffer = np.zeros(0)
    else:
        buffer = np.zeros((0, model.cfg.feature_dim))
    return Session(
        model=model,
        cfg=cfg,
        state=model.open_stream(cfg.mask),
        beam=[Hypothesis()],
        buffer=buffer,
        )

def _cached_keys(state: enc.StreamState) -> int:
    spec = state.spec
    if spec.chunk_frames is None or spec.left_context is None:
        return state.retained_frames
    n = state.frames_emitted // spec.chunk_frames
    window_start = max(0, n - spec.left_context) * spec.chunk_frames
    return state.retained_frames + min(state.sink_frames_cached, window_start)

def _process_chunk(session: Session, chunk: np.ndarray) -> None:
    started = time.perf_counter()
    frames = session.model.embed_chunk(chunk)
    cached = _cached_keys(session.state)
    out = enc.encoder_push_chunk(session.state, frames)
    session.beam = beam_search(out, session.model, session.cfg, session.beam)
    session.chunk_keys.append(cached + out.shape[0])
    session.chunk_lengths.append(out.shape[0])
    session.wall_ms.append(1000.0 * (time.perf_counter() - started))
    logger.debug(
        "chunk %d: %d frames, %d keys, best %s",
        len(session.chunk_keys) - 1, out.shape[0], session.chunk_keys[-1], session.best.tokens,
        )

def _push(session: Session, data: np.ndarray) -> Hypothesis:
    if session.closed:
        raise StreamClosedError("push after finalize")
    session.buffer = np.concatenate([session.buffer, data], axis=0)
    units = session._chunk_units
    if units is not None:
        while session.buffer.shape[0] >= units:
            chunk, session.buffer = session.buffer[:units], session.buffer[units:]
            _process_chunk(session, chunk)
    return session.best

def stream_push(session: Session, raw: np.ndarray) -> Hypothesis:
    """
    Feeds raw samples to an audio session.

    Returns
    -------
    Hypothesis
        Current best hypothesis. Under beam search it may be revised by
        later pushes.

    Raises
    ------
    StreamClosedError
        If the session was finalized.
    """
    if session.model.cfg.input_kind != "audio":
        raise ValueError("stream_push needs an audio model; use stream_push_frames.")
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1:
        raise ValueError("raw samples must be 1-D.")
    return _push(session, raw)

def stream_push_frames(session: Session, frames: np.ndarray) -> Hypothesis:
    """Feature-model counterpart of `stream_push`."""
    if session.model.cfg.input_kind != "features":
        raise ValueError("stream_push_frames needs a feature model; use stream_push.")
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != session.model.cfg.feature_dim:
        raise ValueError(f"expected [frames, {session.model.cfg.feature_dim}] features.")
    return _push(session, frames)

def stream_finalize(session: Session) -> tuple[Hypothesis, CostReport]:
    """
    Flushes the trailing partial chunk and closes the session.

    Remaining samples are zero-padded to a hop boundary and processed as a
    final short chunk.

    Returns
    -------
    Hypothesis
        Final best hypothesis.
    CostReport
        Per-chunk attended keys and timing.

    Raises
    ------
    StreamClosedError
        On a second finalize.
    """
    if session.closed:
        raise StreamClosedError("session already finalized")
    if session.buffer.shape[0] > 0:
        remainder = session.buffer
        if session.model.cfg.input_kind == "audio":
            remainder = enc.pad_to_hop(remainder, session.model.cfg.frontend.frame_hop)
        session.buffer = session.buffer[:0]
        _process_chunk(session, remainder)
    enc.encoder_finalize(session.state)
    session.closed = True
    chunk = session.cfg.mask.chunk_frames
    if chunk is None:
        chunk = session.chunk_lengths[0] if session.chunk_lengths else 0
    report = CostReport.from_chunks(session.chunk_keys, session.chunk_lengths, chunk, session.wall_ms)
    return session.best, report


@dataclass(frozen=True)
class DecodeResult:
    utterance_id: str
    tokens: tuple[int, ...]
    text: str
    log_prob: float
    chunks: int
    attended_keys_total: int

    def to_dict(self) -> dict:
        return {
            "utterance_id": self.utterance_id,
            "tokens": list(self.tokens),
            "text": self.text,
            "log_prob": self.log_prob,
            "chunks": self.chunks,
            "attended_keys_total": self.attended_keys_total,
        }


def decode_utterance(
    model: TransducerModel,
    utt: Utterance,
    cfg: DecodeConfig,
    mode: str = "offline",
    vocab: Vocab | None = None,
    push_size: int | None = None,
    ) -> tuple[DecodeResult, CostReport]:
    """
    Decodes one utterance offline or through a session.

    Parameters
    ----------
    model : TransducerModel
    utt : Utterance
    cfg : DecodeConfig
    mode : {"offline", "streaming"}, optional
    vocab : Vocab, optional
        Spells the tokens; defaults to the synthetic vocabulary.
    push_size : int, optional
        Samples (or frames) per streaming push; the whole utterance when
        None. It never changes the result.
    """
    if mode not in DECODE_MODES:
        raise ValueError(f"mode must be one of {DECODE_MODES}.")
    vocab = vocab or Vocab.synthetic(model.cfg.vocab_size)
    if mode == "offline":
        n_frames = model.n_frames(utt.inputs)
        enc_out = model.encode(utt.inputs, cfg.mask)
        best = beam_search(enc_out, model, cfg)[0]
        report = cost_report(cfg.mask, n_frames)
    else:
        session = stream_open(model, cfg)
        push = stream_push if model.cfg.input_kind == "audio" else stream_push_frames
        step = push_size or max(len(utt.inputs), 1)
        for start in range(0, len(utt.inputs), step):
            push(session, utt.inputs[start:start + step])
        best, report = stream_finalize(session)
    result = DecodeResult(
        utterance_id=utt.utterance_id,
        tokens=best.tokens,
        text=vocab.decode(best.tokens),
        log_prob=best.log_prob,
        chunks=report.n_chunks,
        attended_keys_total=report.total_keys,
        )
    return result, report

def decode_dataset(
    model: TransducerModel,
    utts: Sequence[Utterance],
    cfg: DecodeConfig,
    mode: str = "offline",
    vocab: Vocab | None = None,
    ) -> list[DecodeResult]:
    """Decodes every utterance, keeping input order."""
    results = []
    for utt in utts:
        result, _ = decode_utterance(model, utt, cfg, mode, vocab)
        results.append(result)
    logger.info("decoded %d utterances (%s, %s)", len(results), mode, cfg.mask.label())
    return results
