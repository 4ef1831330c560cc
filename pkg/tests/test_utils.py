import json
import math
import os

import numpy as np
import pytest

import xstream as xstm
from xstream import utils
from xstream.exceptions import ConfigError
from xstream.geometry import MaskSpec
from xstream.search import DecodeConfig
from xstream.trainer import TrainConfig

def test_substream_is_deterministic():
    """Same seed and name, same draws."""
    a = utils.substream(7, "data").standard_normal(5)
    b = utils.substream(7, "data").standard_normal(5)
    np.testing.assert_array_equal(a, b)

def test_substreams_differ():
    """Different names or seeds give different draws."""
    base = utils.substream(7, "data").standard_normal(5)
    assert not np.allclose(base, utils.substream(7, "init").standard_normal(5))
    assert not np.allclose(base, utils.substream(8, "data").standard_normal(5))

def test_substream_negative_seed():
    with pytest.raises(ValueError):
        utils.substream(-1, "data")

def test_rng_state_round_trip():
    rng = utils.substream(3, "shuffle")
    rng.standard_normal(4)
    state = json.loads(json.dumps(utils.get_rng_state(rng)))
    expected = rng.standard_normal(3)
    restored = utils.set_rng_state(utils.substream(0, "other"), state)
    np.testing.assert_array_equal(restored.standard_normal(3), expected)

def test_atomic_write(tmp_path):
    """Writes create parent directories and leave no temporary files."""
    path = utils.atomic_write_bytes(tmp_path / "deep" / "dir" / "f.bin", b"abc")
    assert path.read_bytes() == b"abc"
    utils.atomic_write_bytes(path, b"xyz")
    assert path.read_bytes() == b"xyz"
    assert os.listdir(path.parent) == ["f.bin"]

def test_dumps():
    assert utils.dumps_line({"b": 1, "a": [1, 2]}) == '{"a": [1, 2], "b": 1}'
    assert utils.dumps_canonical({"b": 1, "a": 2}) == '{\n  "a": 2,\n  "b": 1\n}'

def test_dumps_line_writes_non_finite_as_null():
    line = utils.dumps_line({"wer": math.inf, "rows": [np.nan, 1.5, (-math.inf,)]})
    assert line == '{"rows": [null, 1.5, [null]], "wer": null}'

def test_init_weight_scale(rng):
    w = utils.init_weight(rng, (400, 300), np.float64)
    assert w.dtype == np.float64
    assert w.std() == pytest.approx(1 / np.sqrt(400), rel=0.05)

def test_full_left_context_is_written_as_string():
    record = utils.dataclass_to_dict(MaskSpec(4, None, 2))
    assert record == {"chunk_frames": 4, "left_context": "full", "sink_frames": 2, "total_frames": None}
    assert utils.dataclass_from_dict(MaskSpec, record) == MaskSpec(4, None, 2)

def test_full_attention_round_trip():
    record = utils.dataclass_to_dict(MaskSpec.full_attention())
    assert record["chunk_frames"] == "full"
    assert utils.dataclass_from_dict(MaskSpec, record) == MaskSpec.full_attention()

def test_tuples_become_lists():
    record = utils.dataclass_to_dict(TrainConfig(chunk_choices=(4, 8)))
    assert record["chunk_choices"] == [4, 8]
    assert utils.dataclass_from_dict(TrainConfig, record).chunk_choices == (4, 8)

def test_missing_keys_take_defaults():
    cfg = utils.dataclass_from_dict(DecodeConfig, {"beam_width": 2})
    assert cfg == DecodeConfig(beam_width=2)

@pytest.mark.parametrize("payload,key", [
    ({"beam": 2}, "beam"),
    ({"mask": {"chunk": 2}}, "mask.chunk"),
    ({"beam_width": "4"}, "beam_width"),
    ({"beam_width": True}, "beam_width"),
    ({"mask": {"left_context": "half"}}, "mask.left_context"),
    ({"mask": {"chunk_frames": 0}}, "mask"),
    ({"beam_width": 0}, "DecodeConfig"),
    ])
def test_strict_reader_names_the_key(payload, key):
    with pytest.raises(ConfigError) as info:
        utils.dataclass_from_dict(DecodeConfig, payload)
    assert info.value.key == key
    assert str(info.value).startswith(f"{key}: ")

def test_integers_accepted_as_floats():
    cfg = utils.dataclass_from_dict(TrainConfig, {"learning_rate": 1})
    assert cfg.learning_rate == 1.0
    assert isinstance(cfg.learning_rate, float)

def test_run_config_requires_seed():
    with pytest.raises(ConfigError) as info:
        xstm.parse_run_config({})
    assert info.value.key == "seed"

def test_run_config_invalid_json():
    with pytest.raises(ConfigError):
        xstm.parse_run_config("{seed: 1")
    with pytest.raises(ConfigError):
        xstm.parse_run_config("[1, 2]")

def test_run_config_canonical_round_trip():
    """Parsing the canonical dump gives back the same config and text."""
    cfg = xstm.parse_run_config({"seed": 5, "decode": {"beam_width": 2, "mask": {"chunk_frames": 8}}})
    text = cfg.dumps()
    assert json.loads(text)["decode"]["mask"]["left_context"] == "full"
    again = xstm.parse_run_config(text)
    assert again == cfg
    assert again.dumps() == text

def test_run_config_seed_drives_training():
    cfg = xstm.parse_run_config({"seed": 9, "train": {"seed": 1}})
    assert cfg.train_config.seed == 9

def test_run_config_consistency():
    with pytest.raises(ConfigError):
        xstm.parse_run_config({"seed": 0, "model": {"vocab_size": 8}})
    cfg = xstm.parse_run_config({
        "seed": 0,
        "model": {"vocab_size": 8},
        "data": {"synthetic": {"vocab_size": 8}},
        })
    assert cfg.model.vocab_size == 8

def test_load_toy_config():
    path = os.path.join(os.path.dirname(__file__), "..", "configs", "toy.json")
    cfg = xstm.load_run_config(path)
    assert cfg.train.training_mode == "multi_chunk"
    assert cfg.train.left_context is None
    assert cfg.decode.mask == MaskSpec(8, 1, 4)
