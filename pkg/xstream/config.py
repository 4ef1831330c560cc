"""Run configuration: one JSON document per reproducible run."""

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from xstream.core import ModelConfig
from xstream.data import SyntheticTaskConfig
from xstream.exceptions import ConfigError
from xstream.search import DecodeConfig
from xstream.trainer import TrainConfig
from xstream.utils import dataclass_from_dict, dataclass_to_dict, dumps_canonical

@dataclass(frozen=True)
class DataConfig:
    """
    Where training data comes from.

    Without manifests the synthetic task of `synthetic` is generated.
    """
    synthetic: SyntheticTaskConfig = field(default_factory=SyntheticTaskConfig)
    train_manifest: str | None = None
    dev_manifest: str | None = None
    n_train: int = 500
    n_dev: int = 100

    def __post_init__(self):
        if self.n_train < 0 or self.n_dev < 0:
            raise ValueError("n_train and n_dev cannot be negative.")


@dataclass(frozen=True)
class RunConfig:
    """
    Complete, serializable description of a run.

    `seed` is the root of every random sub-stream and overrides the
    training seed.
    """
    seed: int
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed cannot be negative.")
        syn = self.data.synthetic
        if self.data.train_manifest is None:
            if syn.vocab_size != self.model.vocab_size:
                raise ValueError("model.vocab_size must equal data.synthetic.vocab_size.")
            if self.model.input_kind == "features" and syn.feature_dim != self.model.feature_dim:
                raise ValueError("model.feature_dim must equal data.synthetic.feature_dim.")

    @property
    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def to_dict(self) -> dict:
        return dataclass_to_dict(self)

    def dumps(self) -> str:
        """Canonical JSON: sorted keys, every default filled in."""
        return dumps_canonical(self.to_dict())


def parse_run_config(data: dict | str) -> RunConfig:
    """
    Strictly parses a run configuration.

    Parameters
    ----------
    data : dict or str
        Parsed JSON object or JSON text.

    Raises
    ------
    ConfigError
        On invalid JSON, a missing seed, an unknown key or an invalid value;
        the message names the dotted key.
    """
    if isinstance(data, str):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as err:
            raise ConfigError("<document>", f"invalid JSON ({err.msg})") from err
    if not isinstance(data, dict):
        raise ConfigError("<document>", "expected a JSON object")
    if "seed" not in data:
        raise ConfigError("seed", "required")
    return dataclass_from_dict(RunConfig, data)

def load_run_config(path: str | os.PathLike) -> RunConfig:
    return parse_run_config(Path(path).read_text(encoding="utf-8"))
