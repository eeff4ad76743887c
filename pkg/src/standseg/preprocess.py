"""Dataset construction: CHM, compositing, stand rasterization, tiling, splitting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AlignmentError, GeometryError, InputError, ShapeError
from .raster import (
    COMPOSITE_BANDS,
    DEFAULT_SCHEME,
    UNLABELED,
    ClassMask,
    ClassScheme,
    GeoTransform,
    Raster,
    one_hot_encode,
)

# pre-merge development-stage code -> class id; stages I and II share a class
STAGE_TO_CLASS = {0: 0, 1: 1, 2: 1, 3: 2, 4: 3, 5: 4}
CLASS_TO_STAGE = {0: 0, 1: 1, 2: 3, 3: 4, 4: 5}
SPLITS = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Height-normalised returns, shape (n, 3): x, y, z above ground."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InputError("point cloud contains non-finite coordinates")
        if np.any(pts[:, 2] < 0):
            raise InputError("point cloud must be height-normalised (z >= 0)")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


def read_xyz(path) -> PointCloud:
    """Whitespace-separated ``x y z`` lines; ``#`` starts a comment."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise InputError(f"{path}:{lineno}: expected 'x y z', got {line!r}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-numeric coordinate in {line!r}") from None
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def write_xyz(cloud: PointCloud, path) -> None:
    # %.17g round-trips float64 exactly
    np.savetxt(path, cloud.points, fmt="%.17g", header="x y z (height above ground)", comments="# ")


@dataclass(frozen=True, eq=False)
class StandPolygon:
    """Exterior ring plus optional holes, tagged with a development-stage code.

    ``stage`` uses the pre-merge codes 0=NF, 1=I, 2=II, 3=III, 4=IV, 5=V;
    :attr:`class_id` gives the merged class.
    """

    rings: tuple[np.ndarray, ...]
    stage: int

    def __post_init__(self):
        rings = tuple(np.asarray(r, dtype=np.float64).reshape(-1, 2) for r in self.rings)
        if not rings:
            raise GeometryError("polygon needs an exterior ring")
        for i, ring in enumerate(rings):
            if len(ring) < 4:
                raise GeometryError(f"ring {i} has {len(ring)} vertices, need >= 4")
            if not np.array_equal(ring[0], ring[-1]):
                raise GeometryError(f"ring {i} is not closed (first vertex != last)")
        if self.stage not in STAGE_TO_CLASS:
            raise GeometryError(f"unknown development-stage code {self.stage}")
        object.__setattr__(self, "rings", rings)

    @classmethod
    def for_class(cls, rings, class_id: int) -> "StandPolygon":
        return cls(rings, CLASS_TO_STAGE[class_id])

    @property
    def class_id(self) -> int:
        return STAGE_TO_CLASS[self.stage]

    def area(self) -> float:
        """Even-odd area: exterior minus holes."""
        ext, *holes = (abs(_shoelace(r)) for r in self.rings)
        return ext - sum(holes)

    def perimeter(self) -> float:
        return float(sum(np.linalg.norm(np.diff(r, axis=0), axis=1).sum() for r in self.rings))


def _shoelace(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


def read_stands_geojson(path) -> list[StandPolygon]:
    doc = json.loads(Path(path).read_text())
    if doc.get("type") != "FeatureCollection":
        raise InputError(f"{path}: expected a GeoJSON FeatureCollection")
    polygons = []
    for i, feat in enumerate(doc["features"]):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise InputError(f"{path}: feature {i} is {geom.get('type')!r}, only Polygon is supported")
        try:
            stage = int(feat["properties"]["class"])
        except (KeyError, TypeError, ValueError):
            raise InputError(f"{path}: feature {i} lacks an integer 'class' property") from None
        polygons.append(StandPolygon(tuple(np.array(r) for r in geom["coordinates"]), stage))
    return polygons


def write_stands_geojson(polygons: Iterable[StandPolygon], path) -> None:
    features = [
        {
            "type": "Feature",
            "properties": {"class": p.stage},
            "geometry": {"type": "Polygon", "coordinates": [r.tolist() for r in p.rings]},
        }
        for p in polygons
    ]
    Path(path).write_text(json.dumps({"type": "FeatureCollection", "features": features}))


def build_chm(cloud: PointCloud, grid: GeoTransform, width: int, height: int) -> Raster:
    """Per-cell maximum height, then one 3x3 mean pass over empty cells.

    Cells still empty after the fill pass are set to 0. Points outside the
    grid are ignored.
    """
    if len(cloud) == 0:
        raise InputError("cannot build a CHM from an empty point cloud")
    pts = cloud.points
    col = np.floor((pts[:, 0] - grid.origin_x) / grid.cell_size).astype(np.int64)
    row = np.floor((grid.origin_y - pts[:, 1]) / grid.cell_size).astype(np.int64)
    inside = (row >= 0) & (row < height) & (col >= 0) & (col < width)
    chm = np.full(height * width, -np.inf)
    np.maximum.at(chm, row[inside] * width + col[inside], pts[inside, 2])
    chm = chm.reshape(height, width)
    filled = np.isfinite(chm)
    values = np.where(filled, chm, 0.0)
    sums = _box3(values)
    counts = _box3(filled.astype(np.float64))
    out = values.copy()
    holes = ~filled
    with np.errstate(invalid="ignore", divide="ignore"):
        out[holes] = np.where(counts[holes] > 0, sums[holes] / counts[holes], 0.0)
    return Raster(out[None].astype(np.float32), grid, None, ("chm",))


def _box3(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1)
    h, w = a.shape
    return sum(p[i : i + h, j : j + w] for i in range(3) for j in range(3))


def stack_composite(spectral: Raster, chm: Raster, tol: float = 1e-6) -> Raster:
    """Append the CHM to the 4 spectral bands: [red, green, blue, nir, chm]."""
    if spectral.bands != 4 or chm.bands != 1:
        raise ShapeError(f"need a 4-band image and a 1-band CHM, got {spectral.bands} and {chm.bands}")
    a, b = spectral.transform, chm.transform
    if (
        spectral.data.shape[1:] != chm.data.shape[1:]
        or abs(a.cell_size - b.cell_size) > tol
        or abs(a.origin_x - b.origin_x) > tol
        or abs(a.origin_y - b.origin_y) > tol
    ):
        raise AlignmentError(
            f"grids differ: image {spectral.width}x{spectral.height} {a}, CHM {chm.width}x{chm.height} {b}"
        )
    data = np.concatenate([spectral.data.astype(np.float32), chm.data.astype(np.float32)])
    if spectral.nodata is not None:
        data[:, spectral.nodata_mask()] = spectral.nodata
    return Raster(data, a, spectral.nodata, COMPOSITE_BANDS)


def _ring_crossings(ring: np.ndarray, ys: np.ndarray) -> list[np.ndarray]:
    """x coordinates where each horizontal line y in ``ys`` crosses the ring."""
    x1, y1 = ring[:-1, 0], ring[:-1, 1]
    x2, y2 = ring[1:, 0], ring[1:, 1]
    yy = ys[:, None]
    crosses = (y1[None] > yy) != (y2[None] > yy)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = x1[None] + (yy - y1[None]) * (x2 - x1)[None] / (y2 - y1)[None]
    return [xi[r, crosses[r]] for r in range(len(ys))]


def polygon_coverage(polygon: StandPolygon, grid: GeoTransform, width: int, height: int):
    """Rows, column-center x values and inside flags for a polygon's bounding rows.

    Returns (row0, inside) where ``inside`` is a boolean (nrows, width) array for
    rows row0..row0+nrows-1, using the even-odd rule at pixel centers.
    """
    allpts = np.concatenate(polygon.rings)
    ymin, ymax = allpts[:, 1].min(), allpts[:, 1].max()
    r0 = max(0, int(math.floor((grid.origin_y - ymax) / grid.cell_size - 0.5)))
    r1 = min(height - 1, int(math.ceil((grid.origin_y - ymin) / grid.cell_size - 0.5)))
    if r1 < r0:
        return 0, np.zeros((0, width), dtype=bool)
    rows = np.arange(r0, r1 + 1)
    _, ys = grid.pixel_center(rows, 0)
    xc, _ = grid.pixel_center(0, np.arange(width))
    per_row: list[list[np.ndarray]] = [[] for _ in rows]
    for ring in polygon.rings:
        for i, xs in enumerate(_ring_crossings(ring, ys)):
            per_row[i].append(xs)
    inside = np.zeros((len(rows), width), dtype=bool)
    for i, parts in enumerate(per_row):
        xs = np.sort(np.concatenate(parts))
        if xs.size:
            inside[i] = (np.searchsorted(xs, xc, side="left") % 2) == 1
    return r0, inside


def rasterize_stands(
    polygons: Sequence[StandPolygon],
    grid: GeoTransform,
    width: int,
    height: int,
    scheme: ClassScheme = DEFAULT_SCHEME,
) -> Raster:
    """Class raster by pixel-center even-odd containment; later polygons win.

    Stage codes are merged to class ids first. Pixels outside every polygon
    hold :data:`UNLABELED` (255), which is also the raster's nodata value.
    """
    out = np.full((height, width), UNLABELED, dtype=np.uint8)
    for poly in polygons:
        cid = poly.class_id
        if cid >= scheme.n:
            raise GeometryError(f"class id {cid} not in scheme of {scheme.n} classes")
        r0, inside = polygon_coverage(poly, grid, width, height)
        block = out[r0 : r0 + len(inside)]
        block[inside] = cid
    return Raster(out[None], grid, UNLABELED, ("class",))


def rasterize_boundary(polygons: Sequence[StandPolygon], grid: GeoTransform, width: int, height: int) -> np.ndarray:
    """Boolean (height, width) mask of pixel centers inside any polygon."""
    out = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        r0, inside = polygon_coverage(poly, grid, width, height)
        out[r0 : r0 + len(inside)] |= inside
    return out


@dataclass(frozen=True, eq=False)
class Tile:
    composite: Raster
    mask: ClassMask
    tile_id: str
    row: int
    col: int
    split: str | None = None


@dataclass(eq=False)
class TileSet:
    tiles: list[Tile]
    tile_pixels: int
    scheme: ClassScheme = DEFAULT_SCHEME

    def __len__(self) -> int:
        return len(self.tiles)

    def subset(self, split: str) -> list[Tile]:
        return [t for t in self.tiles if t.split == split]

    def counts(self) -> dict[str, int]:
        return {s: len(self.subset(s)) for s in SPLITS}

    def arrays(self, split: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Stacked inputs (n, 5, S, S) float32 and one-hot masks (n, N, S, S) uint8."""
        tiles = self.tiles if split is None else self.subset(split)
        if not tiles:
            s, n = self.tile_pixels, self.scheme.n
            return np.zeros((0, 5, s, s), np.float32), np.zeros((0, n, s, s), np.uint8)
        x = np.stack([t.composite.data for t in tiles]).astype(np.float32)
        m = np.stack([t.mask.layers for t in tiles])
        return x, m


@dataclass(frozen=True)
class SplitConfig:
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0

    def validate(self) -> None:
        if len(self.fractions) != 3 or any(not 0.0 < f < 1.0 for f in self.fractions):
            raise InputError(f"split fractions must be three values in (0, 1), got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise InputError(f"split fractions must sum to 1, got {sum(self.fractions)}")


def tile_composite(
    composite: Raster,
    mask_raster: Raster,
    tile_pixels: int,
    boundary: Sequence[StandPolygon] | None = None,
    scheme: ClassScheme = DEFAULT_SCHEME,
) -> TileSet:
    """Cut non-overlapping tiles on a grid anchored at the raster origin.

    A candidate tile is dropped if it runs past the raster edge, leaves the
    ``boundary`` polygons, or contains nodata or unlabeled pixels.
    """
    if tile_pixels < 32:
        raise ShapeError(f"tile size must be >= 32 pixels, got {tile_pixels}")
    if composite.data.shape[1:] != mask_raster.data.shape[1:] or composite.transform != mask_raster.transform:
        raise AlignmentError("composite and mask raster must share a grid")
    bad = composite.nodata_mask() | (mask_raster.data[0] == UNLABELED)
    if boundary is not None:
        bad |= ~rasterize_boundary(boundary, composite.transform, composite.width, composite.height)
    tiles = []
    s = tile_pixels
    for gr, r in enumerate(range(0, composite.height - s + 1, s)):
        for gc, c in enumerate(range(0, composite.width - s + 1, s)):
            if bad[r : r + s, c : c + s].any():
                continue
            tiles.append(
                Tile(
                    composite=composite.window(r, c, s),
                    mask=one_hot_encode(mask_raster.window(r, c, s), scheme),
                    tile_id=f"r{gr:03d}_c{gc:03d}",
                    row=gr,
                    col=gc,
                )
            )
    return TileSet(tiles, s, scheme)


def mosaic_tiles(tileset: TileSet, width: int, height: int, fill: float = np.nan) -> np.ndarray:
    """Reassemble tile composites into a (bands, height, width) float array."""
    s = tileset.tile_pixels
    bands = tileset.tiles[0].composite.bands if tileset.tiles else 5
    out = np.full((bands, height, width), fill, dtype=np.float32)
    for t in tileset.tiles:
        out[:, t.row * s : (t.row + 1) * s, t.col * s : (t.col + 1) * s] = t.composite.data
    return out


def split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    """floor(n * train), floor(n * val), remainder."""
    n_train = math.floor(n * fractions[0])
    n_val = math.floor(n * fractions[1])
    return n_train, n_val, n - n_train - n_val


def split_assignment(n: int, config: SplitConfig) -> list[str]:
    """Split label for each of ``n`` items in input order."""
    config.validate()
    if n == 0:
        raise InputError("cannot split an empty tile set")
    order = np.random.default_rng(config.seed).permutation(n)
    n_train, n_val, _ = split_counts(n, config.fractions)
    labels = [""] * n
    for rank, idx in enumerate(order):
        labels[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return labels


def split_dataset(tiles: TileSet, config: SplitConfig) -> TileSet:
    labels = split_assignment(len(tiles), config)
    return TileSet([replace(t, split=s) for t, s in zip(tiles.tiles, labels)], tiles.tile_pixels, tiles.scheme)
