"""Plotting functions."""

import matplotlib.pyplot as plt
from matplotlib.axes import Axes
from matplotlib.colors import ListedColormap

import xarray as xr

# masked, current chunk, left context, sink
REGION_COLORS = ["white", "tab:blue", "tab:orange", "gold"]

def plot_mask(
    mask_da: xr.DataArray,
    ax: Axes = None
    ) -> Axes:
    """
    Draws an attention mask coloured by region.

    Parameters
    ----------
    mask_da : xr.DataArray
        Mask created with `create_mask_da`.
    ax : Axes, optional
        matplotlib Axes on which to draw. If none specified, uses the
        currently active matplotlib axes.

    Returns
    -------
    Axes
        The axes drawn on.
    """
    if ax is None:
        ax = plt.gca()

    regions = mask_da.xstm.regions()
    ax.imshow(
        regions.values,
        cmap=ListedColormap(REGION_COLORS),
        vmin=0,
        vmax=len(REGION_COLORS) - 1,
        interpolation="nearest",
    )
    chunk = mask_da.attrs["chunk_frames"]
    for edge in range(chunk, mask_da.sizes["key"], chunk):
        ax.axvline(edge - 0.5, color="grey", linewidth=0.5)
        ax.axhline(edge - 0.5, color="grey", linewidth=0.5)
    ax.set_xlabel("key frame")
    ax.set_ylabel("query frame")
    ax.set_title(mask_da.xstm.spec.label())
    return ax
