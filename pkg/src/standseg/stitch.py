"""Overlapping-tile inference with center-crop stitching."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ShapeError
from .raster import Raster, decode_argmax
from .unet import UNetModel, predict_proba


def window_starts(length: int, tile: int, overlap: int) -> list[int]:
    """Tile offsets with stride ``tile - overlap``; the last tile is pinned to the end."""
    if length <= tile:
        return [0]
    stride = tile - overlap
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] + tile < length:
        starts.append(length - tile)
    return starts


def owner_intervals(length: int, tile: int, starts: list[int]) -> list[tuple[int, int]]:
    """For each tile, the half-open pixel range it contributes.

    A pixel goes to the tile in which it sits farthest from an edge; ties go
    to the earlier tile.
    """
    x = np.arange(length)[:, None]
    s = np.asarray(starts)[None, :]
    inside = (x >= s) & (x < s + tile)
    depth = np.where(inside, np.minimum(x - s, s + tile - 1 - x), -1)
    owner = np.argmax(depth, axis=1)
    out = []
    for i in range(len(starts)):
        idx = np.flatnonzero(owner == i)
        out.append((int(idx[0]), int(idx[-1]) + 1) if idx.size else (0, 0))
    return out


def _reflect_pad(data: np.ndarray, height: int, width: int) -> np.ndarray:
    ph, pw = height - data.shape[1], width - data.shape[2]
    if ph == 0 and pw == 0:
        return data
    return np.pad(data, ((0, 0), (0, ph), (0, pw)), mode="reflect")


def stitch_windows(
    data: np.ndarray,
    tile: int,
    overlap: int,
    fn: Callable[[np.ndarray], np.ndarray],
    batch_size: int = 16,
) -> np.ndarray:
    """Apply ``fn`` to overlapping (c, tile, tile) windows of ``data`` and stitch.

    ``fn`` maps an (n, c, tile, tile) batch to (n, k, tile, tile). Inputs
    smaller than one tile are reflection-padded and the result cropped back.
    """
    if overlap < 0 or overlap % 2 or overlap >= tile / 2:
        raise ShapeError(f"overlap must be even and < tile/2, got {overlap} for tile {tile}")
    _, h0, w0 = data.shape
    data = _reflect_pad(data, max(h0, tile), max(w0, tile))
    _, h, w = data.shape
    rs, cs = window_starts(h, tile, overlap), window_starts(w, tile, overlap)
    r_own, c_own = owner_intervals(h, tile, rs), owner_intervals(w, tile, cs)
    jobs = [(i, j) for i in range(len(rs)) for j in range(len(cs))]
    out = None
    for b in range(0, len(jobs), batch_size):
        chunk = jobs[b : b + batch_size]
        batch = np.stack([data[:, rs[i] : rs[i] + tile, cs[j] : cs[j] + tile] for i, j in chunk])
        pred = fn(batch)
        if out is None:
            out = np.zeros((pred.shape[1], h, w), dtype=pred.dtype)
        for (i, j), p in zip(chunk, pred):
            (r0, r1), (c0, c1) = r_own[i], c_own[j]
            out[:, r0:r1, c0:c1] = p[:, r0 - rs[i] : r1 - rs[i], c0 - cs[j] : c1 - cs[j]]
    return out[:, :h0, :w0]


def predict_and_stitch(
    model: UNetModel | Callable[[np.ndarray], np.ndarray],
    composite: Raster,
    tile_pixels: int,
    overlap: int = 0,
    batch_size: int = 16,
) -> Raster:
    """Class raster for a normalised composite via overlapping tiled inference."""
    if isinstance(model, UNetModel):
        fn = lambda batch: predict_proba(model, batch.astype(np.float32), batch_size)  # noqa: E731
    else:
        fn = model
    probs = stitch_windows(composite.data.astype(np.float32), tile_pixels, overlap, fn, batch_size)
    return decode_argmax(probs, composite.transform)
