"""Testing mask plots."""

import pytest

import xstream as xstm

matplotlib = pytest.importorskip("matplotlib")
matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from xstream.plotting import plot_mask  # noqa: E402

def test_plot_mask():
    da = xstm.create_mask_da(xstm.MaskSpec(4, 1, 2, 16))
    fig, ax = plt.subplots()
    out = plot_mask(da, ax=ax)
    assert out is ax
    assert ax.get_title() == "C=4,L=1,S=2"
    assert len(ax.images) == 1
    assert ax.images[0].get_array().shape == (16, 16)
    # three inner chunk edges, drawn on both axes
    assert len(ax.lines) == 6
    plt.close(fig)

def test_plot_mask_uses_current_axes():
    da = xstm.create_mask_da(xstm.MaskSpec.full_attention(5))
    fig = plt.figure()
    ax = plot_mask(da)
    assert ax is fig.gca()
    assert len(ax.lines) == 0
    plt.close(fig)
