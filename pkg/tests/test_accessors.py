"""Testing mask DataArrays and the xstm accessor."""

import numpy as np
import pandas as pd
import pytest

import xstream as xstm
from xstream import geometry
from xstream.exceptions import MaskError

@pytest.fixture
def mask_da():
    """C=2, L=1, S=1 over 7 frames; the last chunk is a single frame."""
    yield xstm.create_mask_da(xstm.MaskSpec(2, 1, 1, 7))

def test_create_mask_da(mask_da):
    assert mask_da.name == "attention_mask"
    assert mask_da.dims == ("query", "key")
    assert mask_da.shape == (7, 7)
    assert mask_da.dtype == bool
    assert list(mask_da["query_chunk"].values) == [0, 0, 1, 1, 2, 2, 3]
    assert list(mask_da["key_chunk"].values) == [0, 0, 1, 1, 2, 2, 3]
    assert mask_da.attrs == {
        "chunk_frames": 2,
        "streaming": 1,
        "left_context": 1,
        "sink_frames": 1,
        }

def test_full_left_context_attr():
    da = xstm.create_mask_da(xstm.MaskSpec(3, None, 0, 6))
    assert da.attrs["left_context"] == -1
    assert da.xstm.spec.left_context is None

def test_spec_round_trip(mask_da):
    assert mask_da.xstm.spec == xstm.MaskSpec(2, 1, 1, 7)

def test_full_attention_spec_round_trip():
    spec = xstm.MaskSpec.full_attention(5)
    da = xstm.create_mask_da(spec)
    assert da.attrs["streaming"] == 0
    assert da.xstm.spec == spec
    assert bool(da.all())

def test_chunk_table(mask_da):
    table = mask_da.xstm.chunk_table
    assert isinstance(table, pd.DataFrame)
    assert table.index.name == "chunk"
    assert list(table.columns) == ["start", "stop", "attended", "cached"]
    assert list(table["start"]) == [0, 2, 4, 6]
    assert list(table["stop"]) == [2, 4, 6, 7]
    assert list(table["attended"]) == [2, 4, 5, 4]
    assert list(table["cached"]) == [0, 2, 3, 3]

def test_attended_counts_match_geometry(mask_da):
    counted = mask_da.xstm.attended_counts()
    assert counted.name == "attended"
    assert list(counted.values) == list(mask_da.xstm.chunk_table["attended"])

def test_chunk_sel(mask_da):
    rows = mask_da.xstm.chunk_sel(1)
    assert list(rows["query"].values) == [2, 3]
    np.testing.assert_array_equal(rows.values, mask_da.values[2:4])
    with pytest.raises(ValueError):
        mask_da.xstm.chunk_sel(4)

def test_verify(mask_da):
    mask_da.xstm.verify()
    values = mask_da.values.copy()
    values[6, 1] = True
    tampered = mask_da.copy(data=values)
    with pytest.raises(MaskError):
        tampered.xstm.verify()

def test_regions(mask_da):
    regions = mask_da.xstm.regions()
    assert regions.dims == mask_da.dims
    assert int(regions.sel(query=4, key=0)) == geometry.SINK
    assert int(regions.sel(query=4, key=2)) == geometry.LEFT_CONTEXT
    assert int(regions.sel(query=4, key=5)) == geometry.CURRENT_CHUNK
    assert int(regions.sel(query=4, key=1)) == geometry.MASKED

def test_to_ascii():
    da = xstm.create_mask_da(xstm.MaskSpec(2, 0, 0, 4))
    assert da.xstm.to_ascii() == "##..\n##..\n..##\n..##"
    da = xstm.create_mask_da(xstm.MaskSpec(2, 0, 1, 4))
    assert da.xstm.to_ascii().splitlines()[2] == "#.##"

def test_to_ascii_limit():
    da = xstm.create_mask_da(xstm.MaskSpec(64, 0, 0, 513))
    with pytest.raises(ValueError):
        da.xstm.to_ascii()
