"""Fixed random filter banks for per-pixel texture descriptors.

A bank is a set of zero-mean, unit-energy random filters drawn once from a
seeded stream.  Zero mean makes responses to constant images exactly zero;
unit energy keeps response magnitudes comparable across filters.  Responses
are computed densely with mirror padding, so output H x W matches input.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grid import Grid, Rng


class FilterBank:
    """``n_filters`` random ``size x size x channels`` filters (fixed seed)."""

    def __init__(self, size: int = 5, n_filters: int = 64, channels: int = 1, seed: int = 0):
        if size % 2 != 1:
            raise ValueError(f"filter size must be odd, got {size}")
        self.size = size
        self.n_filters = n_filters
        self.channels = channels
        self.seed = seed
        rng = Rng(seed).derive(f"filter-bank/{size}/{n_filters}/{channels}")
        w = rng.normal(size=(n_filters, size, size, channels))
        w -= w.mean(axis=(1, 2, 3), keepdims=True)
        w /= np.sqrt((w**2).sum(axis=(1, 2, 3), keepdims=True))
        # flattened layout matches the (ky, kx, channel) window layout below
        self._flat = w.reshape(n_filters, -1)

    def responses(self, grid: Grid) -> np.ndarray:
        """Dense filter responses, shape (H, W, n_filters), float64."""
        if grid.c != self.channels:
            raise ValueError(
                f"bank built for {self.channels} channels, image has {grid.c}"
            )
        if grid.h < self.size or grid.w < self.size:
            raise ValueError(
                f"image {grid.h}x{grid.w} smaller than filter size {self.size}"
            )
        pad = self.size // 2
        data = np.pad(
            grid.data.astype(np.float64), ((pad, pad), (pad, pad), (0, 0)), mode="reflect"
        )
        # windows: (H, W, size, size, C) -> rows of length size*size*C
        win = sliding_window_view(data, (self.size, self.size), axis=(0, 1))
        win = np.moveaxis(win, 2, -1)  # (H, W, size, size, C)
        h, w = win.shape[0], win.shape[1]
        flat = win.reshape(h, w, -1)
        return flat @ self._flat.T
