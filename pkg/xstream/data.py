"""Audio and manifest ingestion, synthetic tasks and checkpoint files."""

import io
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.io import wavfile

from xstream import transducer as tdr
from xstream.core import ModelConfig, TransducerModel
from xstream.exceptions import AudioFormatError, CheckpointError, ManifestError
from xstream.numerics import Tensor
from xstream.utils import (
    atomic_write_bytes,
    dataclass_from_dict,
    dataclass_to_dict,
    dumps_canonical,
    dumps_line,
    substream,
)

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
PCM_SCALE = 32768.0

MAGIC = b"XTRD"
VERSION = 1
FEATURES_TENSOR = "frames"

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODE_OF = {dt.newbyteorder("="): code for code, dt in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class Utterance:
    """
    One decodable (and possibly trainable) example.

    Parameters
    ----------
    utterance_id : str
    inputs : np.ndarray
        ``[T, feature_dim]`` features or 1-D samples in [-1, 1].
    tokens : tuple of int
        Reference token ids; empty when unknown.
    text : str
        Reference transcript.
    """
    utterance_id: str
    inputs: np.ndarray = field(repr=False)
    tokens: tuple[int, ...] = ()
    text: str = ""


# WAV

def read_wav(
    path: str | os.PathLike,
    expected_rate: int | None = SAMPLE_RATE,
    ) -> tuple[np.ndarray, int]:
    """
    Reads a mono PCM16 RIFF/WAVE file.

    Parameters
    ----------
    path : path-like
        File to read.
    expected_rate : int or None, optional
        Required sample rate; None accepts any rate.

    Returns
    -------
    samples : np.ndarray
        float64 samples, ``int16 / 32768``.
    sample_rate : int

    Raises
    ------
    AudioFormatError
        Naming the unsupported field: container, encoding, rate or channels.
    """
    try:
        rate, data = wavfile.read(path)
    except ValueError as err:
        raise AudioFormatError("container", f"{path} is not a readable RIFF/WAVE file ({err})") from err
    if data.dtype != np.int16:
        raise AudioFormatError("encoding", f"{data.dtype} samples, expected 16-bit PCM")
    if data.ndim != 1:
        raise AudioFormatError("channels", f"{data.shape[1]} channels, expected mono")
    if expected_rate is not None and rate != expected_rate:
        raise AudioFormatError("rate", f"{rate} Hz, expected {expected_rate} Hz")
    return data.astype(np.float64) / PCM_SCALE, int(rate)

def write_wav(
    path: str | os.PathLike,
    samples: np.ndarray,
    sample_rate: int = SAMPLE_RATE,
    ) -> Path:
    """Writes float samples in [-1, 1] as mono PCM16, atomically."""
    samples = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.round(samples * PCM_SCALE), -32768, 32767).astype(np.int16)
    buffer = io.BytesIO()
    wavfile.write(buffer, sample_rate, pcm)
    return atomic_write_bytes(path, buffer.getvalue())


# Manifests

@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    audio_path: str | None = None
    features_path: str | None = None
    text: str | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclass_to_dict(self).items() if v is not None}


def read_manifest(
    path: str | os.PathLike,
    require_text: bool = True,
    ) -> list[ManifestEntry]:
    """
    Reads a JSON-lines manifest.

    Blank lines are skipped; entries keep file order.

    Parameters
    ----------
    path : path-like
        Manifest file.
    require_text : bool, optional
        Training manifests need a non-empty ``text`` on every line.

    Raises
    ------
    ManifestError
        With the 1-based number of the first malformed line.
    """
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise ManifestError(line_no, f"invalid JSON ({err.msg})") from err
            entries.append(_manifest_entry(record, line_no, require_text))
    logger.debug("read %d manifest entries from %s", len(entries), path)
    return entries

def _manifest_entry(record, line_no: int, require_text: bool) -> ManifestEntry:
    if not isinstance(record, dict):
        raise ManifestError(line_no, "expected a JSON object")
    unknown = set(record) - {"utterance_id", "audio_path", "features_path", "text"}
    if unknown:
        raise ManifestError(line_no, f"unknown field {sorted(unknown)[0]!r}")
    utt_id = record.get("utterance_id")
    if not isinstance(utt_id, str) or not utt_id:
        raise ManifestError(line_no, "missing utterance_id")
    has_audio = record.get("audio_path") is not None
    has_features = record.get("features_path") is not None
    if has_audio == has_features:
        raise ManifestError(line_no, "exactly one of audio_path and features_path is required")
    text = record.get("text")
    if text is not None and not isinstance(text, str):
        raise ManifestError(line_no, "text must be a string")
    if require_text and not (text or "").strip():
        raise ManifestError(line_no, "missing text")
    return ManifestEntry(utt_id, record.get("audio_path"), record.get("features_path"), text)

def write_manifest(path: str | os.PathLike, entries: Sequence[ManifestEntry]) -> Path:
    payload = "".join(dumps_line(e.to_dict()) + "\n" for e in entries)
    return atomic_write_bytes(path, payload.encode("utf-8"))


# Named-tensor container

def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODE_OF.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    encoded = name.encode("utf-8")
    head = struct.pack("<H", len(encoded)) + encoded
    head += struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()

def write_container(
    path: str | os.PathLike,
    header: Mapping,
    tensors: Mapping[str, np.ndarray],
    ) -> Path:
    """
    Writes a named-tensor file atomically.

    Layout: magic ``XTRD``, version (u32), JSON header length (u32) and
    canonical JSON, tensor count (u32), then per tensor its name (u16 length
    and UTF-8), dtype code (u8), rank (u8), extents (u32 each) and the
    little-endian payload.
    """
    header_bytes = dumps_canonical(header).encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", len(header_bytes)),
        header_bytes,
        struct.pack("<I", len(tensors)),
        ]
    parts.extend(_pack_tensor(name, arr) for name, arr in tensors.items())
    return atomic_write_bytes(path, b"".join(parts))


class _Reader:
    def __init__(self, payload: bytes, path):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise CheckpointError(f"{self.path}: truncated payload")
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    """
    Reads a file written by `write_container`.

    Raises
    ------
    CheckpointError
        On bad magic, version mismatch, truncation or trailing bytes.
    """
    reader = _Reader(Path(path).read_bytes(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: version {version} is not supported (expected {VERSION})")
    (header_len,) = reader.unpack("<I")
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt header") from err
    (count,) = reader.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dims = reader.unpack(f"<{ndim}I") if ndim else ()
        dtype = _DTYPE_CODES[code]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(reader.take(n_bytes), dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    if reader.offset != len(reader.payload):
        raise CheckpointError(f"{path}: trailing bytes after the last tensor")
    return header, tensors

def save_features(path: str | os.PathLike, frames: np.ndarray) -> Path:
    return write_container(path, {"kind": "features"}, {FEATURES_TENSOR: np.asarray(frames)})

def load_features(path: str | os.PathLike) -> np.ndarray:
    _, tensors = read_container(path)
    if FEATURES_TENSOR not in tensors or len(tensors) != 1:
        raise CheckpointError(f"{path}: a feature file holds exactly one tensor {FEATURES_TENSOR!r}")
    return tensors[FEATURES_TENSOR]


# Checkpoints

@dataclass
class Checkpoint:
    """
    Parsed checkpoint.

    `header` holds the model configuration, the run configuration, the
    training position, rng states and vocabulary; `tensors` holds model
    parameters by name and optimizer moments under ``optim.m.*`` and
    ``optim.v.*``.
    """
    header: dict
    tensors: dict[str, np.ndarray]

    @property
    def model_config(self) -> ModelConfig:
        return dataclass_from_dict(ModelConfig, self.header["model"], "model")

    def model(self) -> TransducerModel:
        params = {
            name: Tensor(arr) for name, arr in self.tensors.items()
            if not name.startswith("optim.")
            }
        return TransducerModel(self.model_config, params)

    def optim_moments(self) -> tuple[dict, dict]:
        m = {n[len("optim.m."):]: a for n, a in self.tensors.items() if n.startswith("optim.m.")}
        v = {n[len("optim.v."):]: a for n, a in self.tensors.items() if n.startswith("optim.v.")}
        return m, v

    @property
    def vocab(self) -> tdr.Vocab | None:
        tokens = self.header.get("vocab")
        return None if tokens is None else tdr.Vocab(tuple(tokens))


def save_checkpoint(
    path: str | os.PathLike,
    model: TransducerModel,
    optim=None,
    config: Mapping | None = None,
    rng_states: Mapping | None = None,
    vocab: tdr.Vocab | None = None,
    **position,
    ) -> Path:
    """
    Persists a model, and optionally optimizer and run state.

    Parameters
    ----------
    path : path-like
        Destination; written atomically.
    model : TransducerModel
    optim : OptimState, optional
        Anything with ``step``, ``m`` and ``v``.
    config : mapping, optional
        Run configuration snapshot.
    rng_states : mapping, optional
        Generator states by sub-stream name.
    vocab : Vocab, optional
    **position
        Extra JSON values such as ``step``, ``epoch`` or ``best_dev_nll``.
    """
    tensors = {name: t.data for name, t in model.params.items()}
    header = {
        "model": dataclass_to_dict(model.cfg),
        "config": dict(config) if config is not None else None,
        "rng": dict(rng_states) if rng_states is not None else None,
        "vocab": list(vocab.tokens) if vocab is not None else None,
        "optim_step": None,
        **position,
    }
    if optim is not None:
        header["optim_step"] = int(optim.step)
        for name in model.params:
            tensors[f"optim.m.{name}"] = optim.m[name]
            tensors[f"optim.v.{name}"] = optim.v[name]
    write_container(path, header, tensors)
    logger.info("saved checkpoint %s (%d tensors)", path, len(tensors))
    return Path(path)

def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    header, tensors = read_container(path)
    if "model" not in header:
        raise CheckpointError(f"{path}: not a model checkpoint")
    return Checkpoint(header, tensors)

def load_params_into(model: TransducerModel, ckpt: Checkpoint) -> TransducerModel:
    """
    Loads checkpoint parameters into an existing architecture.

    Raises
    ------
    CheckpointError
        On a tensor name or shape the model does not have.
    """
    params = {n: Tensor(a) for n, a in ckpt.tensors.items() if not n.startswith("optim.")}
    return TransducerModel(model.cfg, params)


# Synthetic task

@dataclass(frozen=True)
class SyntheticTaskConfig:
    """
    Learnable surrogate ASR task.

    Parameters
    ----------
    vocab_size : int
        K, including blank; tokens are ``1 .. K-1``.
    frames_per_token : int
        R, frames rendered per token.
    feature_dim : int
        Width of feature frames.
    noise_std : float
        Standard deviation of the Gaussian frame noise.
    min_tokens, max_tokens : int
        Utterance length range, inclusive.
    silence_frames : int
        Zero frames added before and after each utterance.
    allow_repeats : bool
        Whether a token may immediately repeat.
    seed : int
        Seed of the token templates.
    """
    vocab_size: int = 16
    frames_per_token: int = 4
    feature_dim: int = 16
    noise_std: float = 0.1
    min_tokens: int = 3
    max_tokens: int = 8
    silence_frames: int = 0
    allow_repeats: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2.")
        if self.frames_per_token < 1:
            raise ValueError("frames_per_token must be >= 1.")
        if self.noise_std < 0:
            raise ValueError("noise_std cannot be negative.")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError("need 1 <= min_tokens <= max_tokens.")
        if self.silence_frames < 0:
            raise ValueError("silence_frames cannot be negative.")
        if self.vocab_size == 2 and not self.allow_repeats and self.max_tokens > 1:
            raise ValueError("a single token cannot form longer utterances without repeats.")


def token_templates(cfg: SyntheticTaskConfig) -> np.ndarray:
    """``[K, feature_dim]`` templates; row 0 (blank) is silence."""
    rng = substream(cfg.seed, "templates")
    templates = rng.standard_normal((cfg.vocab_size, cfg.feature_dim))
    templates[0] = 0.0
    return templates

def render_features(
    tokens: Sequence[int],
    cfg: SyntheticTaskConfig,
    rng: np.random.Generator | None = None,
    ) -> np.ndarray:
    """Frames of `tokens`: each template repeated R times, framed by silence, plus noise."""
    templates = token_templates(cfg)
    ids = [0] * cfg.silence_frames
    for t in tokens:
        ids.extend([int(t)] * cfg.frames_per_token)
    ids.extend([0] * cfg.silence_frames)
    frames = templates[ids]
    if cfg.noise_std > 0:
        if rng is None:
            raise ValueError("noisy rendering needs a generator.")
        frames = frames + rng.normal(0.0, cfg.noise_std, frames.shape)
    return frames

def tone_frequency(token: int) -> float:
    """Pitch of `token` in the audio rendering; blank is silence."""
    return 0.0 if token == 0 else 200.0 + 150.0 * token

def render_audio(
    tokens: Sequence[int],
    cfg: SyntheticTaskConfig,
    rng: np.random.Generator | None = None,
    sample_rate: int = SAMPLE_RATE,
    frame_hop: int = 320,
    ) -> np.ndarray:
    """
    Waveform of `tokens`: a pure tone per token for R hops, in [-1, 1].

    Silence frames render as zeros; noise is scaled down to a tenth of
    `noise_std` since the samples are bounded.
    """
    ids = [0] * cfg.silence_frames
    for t in tokens:
        ids.extend([int(t)] * cfg.frames_per_token)
    ids.extend([0] * cfg.silence_frames)
    time = np.arange(frame_hop) / sample_rate
    pieces = [0.5 * np.sin(2 * np.pi * tone_frequency(k) * time) for k in ids]
    audio = np.concatenate(pieces) if pieces else np.zeros(0)
    if cfg.noise_std > 0:
        if rng is None:
            raise ValueError("noisy rendering needs a generator.")
        audio = audio + rng.normal(0.0, cfg.noise_std / 10, audio.shape)
    return np.clip(audio, -1.0, 1.0 - 1.0 / PCM_SCALE)

def _draw_tokens(rng: np.random.Generator, cfg: SyntheticTaskConfig) -> list[int]:
    length = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
    tokens = []
    for _ in range(length):
        while True:
            k = int(rng.integers(1, cfg.vocab_size))
            if cfg.allow_repeats or not tokens or k != tokens[-1]:
                break
        tokens.append(k)
    return tokens

def gen_synthetic(
    cfg: SyntheticTaskConfig,
    n_utts: int,
    seed: int,
    input_kind: str = "features",
    ) -> list[Utterance]:
    """
    Generates a synthetic dataset.

    Templates come from ``cfg.seed``; token sequences and noise come from
    `seed`, so train and test sets share templates but not utterances.

    Parameters
    ----------
    cfg : SyntheticTaskConfig
    n_utts : int
        Number of utterances.
    seed : int
        Seed of the utterance draws.
    input_kind : {"features", "audio"}, optional
        Render feature frames or pure-tone waveforms.

    Returns
    -------
    list of Utterance
        Utterances ``syn-00000``, ``syn-00001``, ... whose text is the
        synthetic vocabulary spelling of the tokens.
    """
    if n_utts < 0:
        raise ValueError("n_utts cannot be negative.")
    vocab = tdr.Vocab.synthetic(cfg.vocab_size)
    rng = substream(seed, "data")
    utts = []
    for i in range(n_utts):
        tokens = _draw_tokens(rng, cfg)
        if input_kind == "features":
            inputs = render_features(tokens, cfg, rng)
        elif input_kind == "audio":
            inputs = render_audio(tokens, cfg, rng)
        else:
            raise ValueError(f"unknown input_kind {input_kind!r}.")
        utts.append(Utterance(f"syn-{i:05d}", inputs, tuple(tokens), vocab.decode(tokens)))
    return utts

def nearest_template_decode(frames: np.ndarray, cfg: SyntheticTaskConfig) -> list[int]:
    """
    Learnability oracle: labels each frame with its nearest template and
    collapses runs, dropping silence.
    """
    templates = token_templates(cfg)
    dist = ((frames[:, None, :] - templates[None, :, :]) ** 2).sum(axis=-1)
    labels = dist.argmin(axis=1)
    tokens = []
    previous = 0
    run = 0
    for label in labels:
        run = run + 1 if label == previous else 1
        if label != 0 and (label != previous or (cfg.allow_repeats and run > cfg.frames_per_token)):
            tokens.append(int(label))
            run = 1
        previous = label
    return tokens

def write_synthetic(
    out_dir: str | os.PathLike,
    utts: Sequence[Utterance],
    manifest_name: str = "manifest.jsonl",
    ) -> Path:
    """Writes feature or wav files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    entries = []
    for utt in utts:
        if utt.inputs.ndim == 1:
            rel = f"{utt.utterance_id}.wav"
            write_wav(out_dir / rel, utt.inputs)
            entries.append(ManifestEntry(utt.utterance_id, audio_path=rel, text=utt.text))
        else:
            rel = f"{utt.utterance_id}.xtrd"
            save_features(out_dir / rel, utt.inputs)
            entries.append(ManifestEntry(utt.utterance_id, features_path=rel, text=utt.text))
    return write_manifest(out_dir / manifest_name, entries)

def load_dataset(
    entries: Sequence[ManifestEntry],
    vocab: tdr.Vocab | None = None,
    base_dir: str | os.PathLike = ".",
    ) -> list[Utterance]:
    """
    Loads manifest entries; relative paths resolve against `base_dir`.

    Texts are encoded with `vocab` when given.
    """
    base_dir = Path(base_dir)
    utts = []
    for entry in entries:
        if entry.features_path is not None:
            inputs = load_features(base_dir / entry.features_path)
        else:
            inputs, _ = read_wav(base_dir / entry.audio_path)
        text = entry.text or ""
        tokens = tuple(vocab.encode(text)) if vocab is not None and text else ()
        utts.append(Utterance(entry.utterance_id, inputs, tokens, text))
    return utts
