"""Accessors to extend Xarray functionality."""

# https://docs.xarray.dev/en/stable/internals/extending-xarray.html

import numpy as np
import pandas as pd
import xarray as xr

from xstream import geometry
from xstream.exceptions import MaskError

ASCII_ALLOWED = "#"
ASCII_MASKED = "."
ASCII_LIMIT = 512

def create_mask_da(spec: geometry.MaskSpec) -> xr.DataArray:
    """
    Packages the mask of `spec` as a labelled DataArray.

    Parameters
    ----------
    spec : MaskSpec
        Geometry with `total_frames` set.

    Returns
    -------
    xr.DataArray
        Boolean DataArray with dims ``("query", "key")``, chunk ordinals as
        the ``query_chunk`` and ``key_chunk`` coordinates, and the geometry
        in ``attrs`` (``left_context`` is -1 for full left context, since
        netCDF-style attrs cannot hold None).
    """
    mask = geometry.build_mask(spec)
    total = spec.total_frames
    frames = np.arange(total)
    chunks = frames // spec.chunk_size()
    attrs = {
        "chunk_frames": spec.chunk_size(),
        "streaming": int(spec.is_streaming),
        "left_context": -1 if spec.left_context is None else spec.left_context,
        "sink_frames": spec.sink_frames,
    }
    return xr.DataArray(
        data=mask,
        dims=("query", "key"),
        coords={
            "query": frames,
            "key": frames,
            "query_chunk": ("query", chunks),
            "key_chunk": ("key", chunks),
        },
        name="attention_mask",
        attrs=attrs,
    )

@xr.register_dataarray_accessor("xstm")
class MaskDAAccessor:
    def __init__(self, xarray_obj):
        self._obj = xarray_obj
        self._spec = None
        self._chunk_table = None

    @property
    def spec(self) -> geometry.MaskSpec:
        """MaskSpec reconstructed from the attributes."""
        if self._spec is None:
            attrs = self._obj.attrs
            left = int(attrs["left_context"])
            self._spec = geometry.MaskSpec(
                chunk_frames=int(attrs["chunk_frames"]) if attrs.get("streaming", 1) else None,
                left_context=None if left < 0 else left,
                sink_frames=int(attrs["sink_frames"]),
                total_frames=int(self._obj.sizes["query"]),
            )
        return self._spec

    @property
    def chunk_table(self) -> pd.DataFrame:
        """One row per chunk: first frame, end frame, attended and cached keys."""
        if self._chunk_table is None:
            spec = self.spec
            rows = []
            for n in range(geometry.n_chunks(spec)):
                start, stop = geometry.chunk_bounds(spec, n)
                rows.append({
                    "start": start,
                    "stop": stop,
                    "attended": geometry.attended_count(spec, n),
                    "cached": geometry.cached_count(spec, n),
                })
            self._chunk_table = pd.DataFrame(
                rows,
                index=pd.RangeIndex(len(rows), name="chunk"),
                )
        return self._chunk_table

    def chunk_sel(self, n: int) -> xr.DataArray:
        """
        Rows of the queries belonging to chunk `n`.

        Raises
        ------
        ValueError
            If the utterance has no chunk `n`.
        """
        if n not in self.chunk_table.index:
            raise ValueError(f"the mask has no chunk {n}.")
        return self._obj.where(self._obj["query_chunk"] == n, drop=True).astype(bool)

    def attended_counts(self) -> pd.Series:
        """
        Distinct keys visible to each chunk, counted on the mask itself.

        For every chunk this is the number of key columns allowed for at
        least one of its queries.
        """
        per_chunk = self._obj.groupby("query_chunk").any(dim="query").sum(dim="key")
        return pd.Series(
            per_chunk.values.astype(int),
            index=pd.Index(per_chunk["query_chunk"].values, name="chunk"),
            name="attended",
            )

    def verify(self) -> None:
        """
        Checks every entry against `geometry.allowed`.

        Raises
        ------
        MaskError
            On the first disagreeing (query, key) pair.
        """
        spec = self.spec
        values = self._obj.values
        for i in range(values.shape[0]):
            for j in range(values.shape[1]):
                if bool(values[i, j]) != geometry.allowed(spec, i, j):
                    raise MaskError(f"mask disagrees with allowed() at ({i}, {j})")

    def regions(self) -> xr.DataArray:
        """Region codes (see `geometry.mask_regions`) on the same coordinates."""
        return self._obj.copy(data=geometry.mask_regions(self.spec))

    def to_ascii(self) -> str:
        """Grid with one row per query, `#` for allowed and `.` for masked keys."""
        values = self._obj.values
        if values.shape[0] > ASCII_LIMIT:
            raise ValueError(f"ASCII rendering is limited to {ASCII_LIMIT} frames.")
        return "\n".join(
            "".join(ASCII_ALLOWED if v else ASCII_MASKED for v in row) for row in values
            )
