"""WER scoring and streaming compute accounting."""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from xstream import geometry

logger = logging.getLogger(__name__)

FRAME_HOP_MS = 20

# Alignment operations, in backtrace preference order
MATCH = "match"
SUBSTITUTION = "sub"
INSERTION = "ins"
DELETION = "del"

@dataclass(frozen=True)
class WerReport:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    n_ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        """Pooled error rate; infinite when errors occur against no reference."""
        if self.n_ref_words == 0:
            return 0.0 if self.errors == 0 else math.inf
        return self.errors / self.n_ref_words

    def __add__(self, other: "WerReport") -> "WerReport":
        return WerReport(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.n_ref_words + other.n_ref_words,
            )

    def to_dict(self) -> dict:
        return {**asdict(self), "wer": self.wer}


def normalize(text: str | Sequence) -> list[str]:
    """Lowercased whitespace tokens of `text`; sequences are taken as words."""
    if isinstance(text, str):
        return text.lower().split()
    return [str(w) for w in text]

def align_words(ref: Sequence[str], hyp: Sequence[str]) -> list[tuple[str, str | None, str | None]]:
    """
    Minimum-edit alignment of two word sequences.

    Unit costs for substitution, insertion and deletion. Among equally cheap
    alignments the backtrace prefers a substitution, then an insertion,
    then a deletion.

    Returns
    -------
    list of (op, ref_word, hyp_word)
        Operations in reading order; missing words are None.
    """
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(diag, dist[i, j - 1] + 1, dist[i - 1, j] + 1)

    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            op = MATCH if ref[i - 1] == hyp[j - 1] else SUBSTITUTION
            ops.append((op, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif j > 0 and dist[i, j] == dist[i, j - 1] + 1:
            ops.append((INSERTION, None, hyp[j - 1]))
            j -= 1
        else:
            ops.append((DELETION, ref[i - 1], None))
            i -= 1
    return ops[::-1]

def utterance_errors(ref: str | Sequence, hyp: str | Sequence) -> WerReport:
    ref_words, hyp_words = normalize(ref), normalize(hyp)
    counts = {SUBSTITUTION: 0, INSERTION: 0, DELETION: 0}
    for op, _, _ in align_words(ref_words, hyp_words):
        if op in counts:
            counts[op] += 1
    return WerReport(counts[SUBSTITUTION], counts[INSERTION], counts[DELETION], len(ref_words))

def wer(refs: Sequence, hyps: Sequence) -> WerReport:
    """
    Corpus word error rate.

    Parameters
    ----------
    refs, hyps : sequence of str or of word sequences
        Reference and hypothesis transcripts, aligned by position. Strings
        are lowercased and split on whitespace.

    Returns
    -------
    WerReport
        Error counts pooled over all utterances.

    Raises
    ------
    ValueError
        If the lists differ in length.
    """
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses.")
    report = WerReport()
    for ref, hyp in zip(refs, hyps):
        report = report + utterance_errors(ref, hyp)
    return report

def frames_to_ms(frames: int, hop_ms: int = FRAME_HOP_MS) -> int:
    """Duration of `frames` encoder frames."""
    if frames < 0:
        raise ValueError("frames cannot be negative.")
    return frames * hop_ms


@dataclass(frozen=True)
class CostReport:
    """
    Attention cost of one utterance under one geometry.

    Parameters
    ----------
    per_chunk_keys : tuple of int
        Distinct keys attended by each chunk.
    chunk_lengths : tuple of int
        Frames in each chunk.
    total_keys : int
        Sum of `per_chunk_keys`.
    total_pairs : int
        Query-key products computed, ``sum(keys * chunk length)``.
    peak_cache_frames : int
        Largest number of keys served from the cache for one chunk.
    chunk_ms : int
        Nominal chunk duration.
    wall_ms : tuple of float
        Measured processing time per chunk, when available.
    """
    per_chunk_keys: tuple[int, ...]
    chunk_lengths: tuple[int, ...]
    total_keys: int
    total_pairs: int
    peak_cache_frames: int
    chunk_ms: int
    wall_ms: tuple[float, ...] = field(default=())

    @classmethod
    def from_chunks(
        cls,
        per_chunk_keys: Sequence[int],
        chunk_lengths: Sequence[int],
        chunk_frames: int,
        wall_ms: Sequence[float] = (),
        ) -> "CostReport":
        keys = tuple(int(k) for k in per_chunk_keys)
        lengths = tuple(int(c) for c in chunk_lengths)
        return cls(
            per_chunk_keys=keys,
            chunk_lengths=lengths,
            total_keys=sum(keys),
            total_pairs=sum(k * c for k, c in zip(keys, lengths)),
            peak_cache_frames=max((k - c for k, c in zip(keys, lengths)), default=0),
            chunk_ms=frames_to_ms(chunk_frames),
            wall_ms=tuple(float(w) for w in wall_ms),
            )

    @property
    def n_chunks(self) -> int:
        return len(self.per_chunk_keys)

    def table(self) -> pd.DataFrame:
        df = pd.DataFrame({
            "frames": self.chunk_lengths,
            "keys": self.per_chunk_keys,
            "cached": [k - c for k, c in zip(self.per_chunk_keys, self.chunk_lengths)],
        })
        if self.wall_ms:
            df["wall_ms"] = self.wall_ms
        df.index.name = "chunk"
        return df

    def to_dict(self) -> dict:
        return {
            "per_chunk_keys": list(self.per_chunk_keys),
            "chunk_lengths": list(self.chunk_lengths),
            "total_keys": self.total_keys,
            "total_pairs": self.total_pairs,
            "peak_cache_frames": self.peak_cache_frames,
            "chunk_ms": self.chunk_ms,
            "wall_ms": list(self.wall_ms),
        }


def cost_report(spec: geometry.MaskSpec, total_frames: int) -> CostReport:
    """
    Attention cost of a `total_frames` utterance under `spec`.

    Totals are exact sums of `geometry.attended_count` over the chunks.
    """
    spec = spec.with_frames(total_frames)
    keys, lengths = [], []
    for n in range(geometry.n_chunks(spec)):
        start, stop = geometry.chunk_bounds(spec, n)
        keys.append(geometry.attended_count(spec, n))
        lengths.append(stop - start)
    return CostReport.from_chunks(keys, lengths, spec.chunk_size())

def relative_reduction(baseline_wer: float, new_wer: float) -> float:
    """Relative WER reduction in percent; positive means `new_wer` is better."""
    if baseline_wer == 0:
        return 0.0 if new_wer == 0 else -math.inf
    return 100.0 * (baseline_wer - new_wer) / baseline_wer

def _axis_label(value):
    return "full" if value is None else value

def sweep_table(records: Sequence[dict]) -> pd.DataFrame:
    """
    Tabulates a decoding sweep over chunk sizes, left contexts and sinks.

    Parameters
    ----------
    records : sequence of dict
        One record per decoding run with keys ``chunk_frames``,
        ``left_context``, ``sink_frames``, ``wer`` and ``keys_per_chunk``.
        None stands for full attention or full left context.

    Returns
    -------
    pd.DataFrame
        The records plus ``chunk_ms`` and ``rel_reduction``, the latter
        measured against the sink-free run of the same chunk size and left
        context (NaN when that run is absent).
    """
    rows = [
        {**r, "chunk_frames": _axis_label(r["chunk_frames"]), "left_context": _axis_label(r["left_context"])}
        for r in records
        ]
    df = pd.DataFrame(rows, dtype=object) if rows else pd.DataFrame()
    if df.empty:
        return df
    df = df.infer_objects()
    df["chunk_ms"] = df["chunk_frames"].map(
        lambda c: frames_to_ms(c) if isinstance(c, (int, np.integer)) else None
        )
    baselines = {
        (row.chunk_frames, row.left_context): row.wer
        for row in df.itertuples()
        if row.sink_frames == 0
        }
    df["rel_reduction"] = [
        relative_reduction(baselines[(row.chunk_frames, row.left_context)], row.wer)
        if (row.chunk_frames, row.left_context) in baselines else np.nan
        for row in df.itertuples()
        ]
    return df
