"""Utility functions for XStream."""

import json
import math
import os
import tempfile
import types
import typing
import zlib
from dataclasses import fields, is_dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from xstream.exceptions import ConfigError

RNG_STREAMS = [
    "data",
    "init",
    "sampler",
    "dropout",
    "shuffle",
    ]

def substream(
    seed: int,
    name: str,
    ) -> np.random.Generator:
    """
    Derives a named random generator from a root seed.

    The same (seed, name) pair always yields the same sequence, and distinct
    names yield statistically independent sequences.

    Parameters
    ----------
    seed : int
        Root seed of the run.
    name : str
        Name of the sub-stream, usually one of `RNG_STREAMS`.

    Returns
    -------
    np.random.Generator
        PCG64 generator seeded from the pair.
    """
    if seed < 0:
        raise ValueError("seed cannot be negative.")
    seq = np.random.SeedSequence(
        entropy=seed,
        spawn_key=(zlib.crc32(name.encode("utf-8")),)
        )
    return np.random.Generator(np.random.PCG64(seq))

def get_rng_state(rng: np.random.Generator) -> dict:
    """JSON-serializable state of a generator."""
    return rng.bit_generator.state

def set_rng_state(
    rng: np.random.Generator,
    state: dict,
    ) -> np.random.Generator:
    """Restores a generator in place from `get_rng_state` output and returns it."""
    rng.bit_generator.state = state
    return rng

def atomic_write_bytes(
    path: str | os.PathLike,
    payload: bytes,
    ) -> Path:
    """
    Writes `payload` to `path` through a temporary file and a rename.

    Readers never observe a partially written file.

    Parameters
    ----------
    path : path-like
        Destination file.
    payload : bytes
        Full file contents.

    Returns
    -------
    Path
        The destination path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path

def dumps_canonical(obj) -> str:
    """Canonical JSON text: sorted keys, two-space indent."""
    return json.dumps(obj, sort_keys=True, indent=2)

def _finite_json(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, Mapping):
        return {k: _finite_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_json(v) for v in obj]
    return obj

def dumps_line(obj) -> str:
    """Single-line JSON record with sorted keys; non-finite floats become null."""
    return json.dumps(_finite_json(obj), sort_keys=True, allow_nan=False)

def init_weight(
    rng: np.random.Generator,
    shape: tuple,
    dtype=np.float32,
    ) -> np.ndarray:
    """
    Draws a weight array with standard deviation ``1/sqrt(fan_in)``.

    `fan_in` is the second-to-last extent for matrices and stacked kernels,
    and the only extent for vectors.
    """
    fan_in = shape[-2] if len(shape) >= 2 else shape[0]
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)

def _join(path: str, key) -> str:
    return f"{path}.{key}" if path else str(key)

def dataclass_to_dict(obj) -> dict:
    """
    Plain JSON-ready dict of a (nested) dataclass.

    Tuples become lists; a None field whose metadata defines ``none_as`` is
    written as that string (for example ``"full"``).
    """
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if is_dataclass(value):
            value = dataclass_to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        elif value is None and "none_as" in f.metadata:
            value = f.metadata["none_as"]
        out[f.name] = value
    return out

def _coerce(tp, value, path: str, metadata: Mapping):
    if "none_as" in metadata and value == metadata["none_as"]:
        return None
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        options = [a for a in args if a is not type(None)]
        if len(options) == 1:
            return _coerce(options[0], value, path, {})
        raise ConfigError(path, f"cannot read union type {tp}")
    if is_dataclass(tp):
        return dataclass_from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(_coerce(args[0], v, f"{path}[{i}]", {}) for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true or false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {tp}")

def dataclass_from_dict(cls, data, path: str = ""):
    """
    Strictly builds dataclass `cls` from parsed JSON.

    Unknown keys are rejected, missing keys take their defaults, and values
    are checked against the field annotations.

    Parameters
    ----------
    cls : type
        Dataclass to build; nested dataclass fields are read recursively.
    data : mapping
        Parsed JSON object.
    path : str, optional
        Dotted location of `data`, used in error messages.

    Raises
    ------
    ConfigError
        Naming the dotted key of the first offending value.
    """
    if not isinstance(data, Mapping):
        raise ConfigError(path or cls.__name__, f"expected an object, got {data!r}")
    known = {f.name: f for f in fields(cls) if f.init}
    for key in data:
        if key not in known:
            raise ConfigError(_join(path, key), "unknown key")
    hints = typing.get_type_hints(cls)
    kwargs = {
        key: _coerce(hints[key], value, _join(path, key), known[key].metadata)
        for key, value in data.items()
        }
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as err:
        raise ConfigError(path or cls.__name__, str(err)) from err
