"""Chunked attention masks with left context and attention sinks."""

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from xstream.exceptions import MaskError

DEFAULT_CHUNK_CHOICES = (16, 32, 64, 128)

# Region codes of `mask_regions`
MASKED = 0
CURRENT_CHUNK = 1
LEFT_CONTEXT = 2
SINK = 3

@dataclass(frozen=True)
class MaskSpec:
    """
    Complete description of one attention geometry.

    Parameters
    ----------
    chunk_frames : int or None
        Chunk size C in frames. None means a single chunk spanning the whole
        utterance (full attention).
    left_context : int or None
        Number L of previous chunks a chunk may attend to. None means full
        left context.
    sink_frames : int
        Number S of initial frames every later chunk may attend to.
    total_frames : int or None
        Utterance length T. None for open-ended streams.
    """
    chunk_frames: int | None = field(default=None, metadata={"none_as": "full"})
    left_context: int | None = field(default=None, metadata={"none_as": "full"})
    sink_frames: int = 0
    total_frames: int | None = None

    def __post_init__(self):
        if self.chunk_frames is not None and self.chunk_frames < 1:
            raise MaskError(f"chunk_frames must be >= 1, got {self.chunk_frames}")
        if self.left_context is not None and self.left_context < 0:
            raise MaskError(f"left_context must be >= 0 or full, got {self.left_context}")
        if self.sink_frames < 0:
            raise MaskError(f"sink_frames must be >= 0, got {self.sink_frames}")
        if self.total_frames is not None and self.total_frames < 1:
            raise MaskError(f"total_frames must be >= 1, got {self.total_frames}")

    @classmethod
    def full_attention(cls, total_frames: int | None = None) -> "MaskSpec":
        """Non-streaming geometry: one chunk, everything visible."""
        return cls(chunk_frames=None, total_frames=total_frames)

    def with_frames(self, total_frames: int | None) -> "MaskSpec":
        return replace(self, total_frames=total_frames)

    @property
    def is_streaming(self) -> bool:
        return self.chunk_frames is not None

    def chunk_size(self) -> int:
        """Effective chunk size; the utterance length for full attention."""
        if self.chunk_frames is not None:
            return self.chunk_frames
        if self.total_frames is None:
            raise MaskError("full-attention geometry needs total_frames")
        return self.total_frames

    def label(self) -> str:
        chunk = "full" if self.chunk_frames is None else str(self.chunk_frames)
        left = "full" if self.left_context is None else str(self.left_context)
        return f"C={chunk},L={left},S={self.sink_frames}"


def _require_frames(spec: MaskSpec) -> int:
    if spec.total_frames is None:
        raise MaskError("this operation needs spec.total_frames")
    return spec.total_frames

def chunk_index(i: int, chunk_frames: int) -> int:
    """Ordinal of the chunk holding frame `i`."""
    if i < 0 or chunk_frames < 1:
        raise ValueError(f"invalid frame {i} or chunk size {chunk_frames}")
    return i // chunk_frames

def n_chunks(spec: MaskSpec) -> int:
    """Number of chunks covering the utterance, the last one possibly short."""
    return math.ceil(_require_frames(spec) / spec.chunk_size())

def chunk_bounds(spec: MaskSpec, n: int) -> tuple[int, int]:
    """First frame and one-past-last frame of chunk `n`."""
    total = _require_frames(spec)
    if not 0 <= n < n_chunks(spec):
        raise ValueError(f"chunk {n} outside utterance of {n_chunks(spec)} chunks")
    c = spec.chunk_size()
    return n * c, min((n + 1) * c, total)

def allowed(spec: MaskSpec, i: int, j: int) -> bool:
    """
    Whether query frame `i` may attend key frame `j`.

    This set-membership definition is the oracle every mask builder is
    checked against. Key `j` is allowed when it lies in the chunk of `i`,
    in one of the `left_context` chunks before it, or among the first
    `sink_frames` frames. Sink frames follow the stream: a sink is only
    visible once its chunk has arrived.
    """
    if spec.total_frames is not None and not (
        0 <= i < spec.total_frames and 0 <= j < spec.total_frames
        ):
        raise ValueError(f"frames ({i}, {j}) outside [0, {spec.total_frames})")
    c = spec.chunk_size()
    ci = chunk_index(i, c)
    cj = chunk_index(j, c)
    if cj > ci:
        return False
    if spec.left_context is None or ci - cj <= spec.left_context:
        return True
    return j < spec.sink_frames

def build_mask(spec: MaskSpec) -> np.ndarray:
    """
    Boolean ``[T, T]`` allowance matrix of `spec`.

    A final partial chunk behaves as a smaller chunk with full attention
    inside it.
    """
    total = _require_frames(spec)
    idx = np.arange(total)
    chunk = idx // spec.chunk_size()
    cq = chunk[:, None]
    ck = chunk[None, :]
    causal = ck <= cq
    if spec.left_context is None:
        return causal
    in_window = (cq - ck) <= spec.left_context
    is_sink = idx[None, :] < spec.sink_frames
    return causal & (in_window | is_sink)

def mask_regions(spec: MaskSpec) -> np.ndarray:
    """
    Integer ``[T, T]`` matrix labelling why each key is visible.

    Codes are `MASKED`, `CURRENT_CHUNK`, `LEFT_CONTEXT` and `SINK`; a sink
    frame that is also in the current chunk or left context keeps that
    label.
    """
    total = _require_frames(spec)
    idx = np.arange(total)
    chunk = idx // spec.chunk_size()
    cq = chunk[:, None]
    ck = chunk[None, :]
    regions = np.full((total, total), MASKED, dtype=np.int8)
    mask = build_mask(spec)
    regions[mask] = SINK
    left = mask & (ck < cq)
    if spec.left_context is not None:
        left &= (cq - ck) <= spec.left_context
    regions[left] = LEFT_CONTEXT
    regions[cq == ck] = CURRENT_CHUNK
    return regions

def attended_count(spec: MaskSpec, n: int) -> int:
    """
    Number of distinct key frames visible to the queries of chunk `n`.

    The union of the chunk itself, its left-context chunks and the sink
    frames received so far; overlapping sinks are counted once.
    """
    if n < 0:
        raise ValueError(f"chunk ordinal must be >= 0, got {n}")
    c = spec.chunk_size()
    hi = (n + 1) * c
    if spec.total_frames is not None:
        if n >= n_chunks(spec):
            raise ValueError(f"chunk {n} outside utterance of {n_chunks(spec)} chunks")
        hi = min(hi, spec.total_frames)
    lo = 0 if spec.left_context is None else max(0, n - spec.left_context) * c
    return hi - lo + min(spec.sink_frames, lo)

def cached_count(spec: MaskSpec, n: int) -> int:
    """Keys of chunk `n` that come from earlier chunks (the cache)."""
    c = spec.chunk_size()
    own = c if spec.total_frames is None else min((n + 1) * c, spec.total_frames) - n * c
    return attended_count(spec, n) - own

def sample_chunk_size(
    rng: np.random.Generator,
    choices: Sequence[int] = DEFAULT_CHUNK_CHOICES,
    ) -> int:
    """
    Draws one training chunk size uniformly from `choices`.

    Parameters
    ----------
    rng : np.random.Generator
        Seeded generator; one draw per batch.
    choices : sequence of int, optional
        Candidate chunk sizes in frames.

    Returns
    -------
    int
        The drawn chunk size.
    """
    if len(choices) == 0:
        raise ValueError("choices cannot be empty.")
    return int(choices[int(rng.integers(len(choices)))])
