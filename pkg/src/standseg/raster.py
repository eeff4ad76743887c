"""Raster data model, the RSTR1 container, and pixel-level transforms.

RSTR1 layout::

    bytes 0-4    b"RSTR1"
    bytes 5-8    little-endian u32 header length L
    bytes 9..    L bytes of UTF-8 JSON header
    then         band-sequential, row-major, little-endian payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    CorruptionError,
    DimensionError,
    EncodingError,
    FormatError,
    GeometryError,
    InputError,
    NumericError,
    ShapeError,
)

RASTER_MAGIC = b"RSTR1"
COMPOSITE_BANDS = ("red", "green", "blue", "nir", "chm")
UNLABELED = 255
DEFAULT_CHM_MAX = 39.0

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_DTYPE_CODES = {np.dtype("float32"): "f32", np.dtype("uint8"): "u8"}


@dataclass(frozen=True)
class GeoTransform:
    """North-up grid: origin is the top-left corner, square cells."""

    origin_x: float = 0.0
    origin_y: float = 0.0
    cell_size: float = 1.0

    def __post_init__(self):
        if not self.cell_size > 0:
            raise GeometryError(f"cell_size must be positive, got {self.cell_size}")

    def pixel_center(self, row, col):
        x = self.origin_x + (np.asarray(col) + 0.5) * self.cell_size
        y = self.origin_y - (np.asarray(row) + 0.5) * self.cell_size
        return x, y

    def offset(self, row: int, col: int) -> "GeoTransform":
        """Transform of a window whose top-left pixel is (row, col)."""
        return GeoTransform(
            self.origin_x + col * self.cell_size,
            self.origin_y - row * self.cell_size,
            self.cell_size,
        )


@dataclass(frozen=True, eq=False)
class Raster:
    """Multi-band grid. ``data`` has shape (bands, height, width)."""

    data: np.ndarray
    transform: GeoTransform = field(default_factory=GeoTransform)
    nodata: float | None = None
    band_names: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ShapeError(f"raster data must be (bands, height, width), got {data.shape}")
        if data.dtype not in _DTYPE_CODES:
            raise ShapeError(f"unsupported raster dtype {data.dtype}; use float32 or uint8")
        if data.dtype.kind == "f" and not np.isfinite(data).all():
            if self.nodata is None or not (np.isnan(self.nodata) and not np.isinf(data).any()):
                raise InputError("raster holds non-finite values that are not the nodata sentinel")
        object.__setattr__(self, "data", data)
        names = tuple(self.band_names) or tuple(f"band{i}" for i in range(data.shape[0]))
        if len(names) != data.shape[0]:
            raise ShapeError(f"{len(names)} band names for {data.shape[0]} bands")
        object.__setattr__(self, "band_names", names)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def nodata_mask(self) -> np.ndarray:
        """(height, width) boolean, True where any band holds the nodata value."""
        if self.nodata is None:
            return np.zeros((self.height, self.width), dtype=bool)
        if np.isnan(self.nodata):
            return np.isnan(self.data).any(axis=0)
        return (self.data == self.data.dtype.type(self.nodata)).any(axis=0)

    def window(self, row: int, col: int, size: int) -> "Raster":
        return replace(
            self,
            data=self.data[:, row : row + size, col : col + size].copy(),
            transform=self.transform.offset(row, col),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.transform == other.transform
            and self.band_names == other.band_names
            and _same_nodata(self.nodata, other.nodata)
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def _same_nodata(a, b) -> bool:
    if a is None or b is None:
        return a is b
    return a == b or (np.isnan(a) and np.isnan(b))


@dataclass(frozen=True)
class ClassScheme:
    labels: tuple[str, ...] = ("NF", "I-II", "III", "IV", "V")

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError("class labels must be unique")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> list[tuple[int, str]]:
        return list(enumerate(self.labels))


DEFAULT_SCHEME = ClassScheme()


@dataclass(frozen=True, eq=False)
class ClassMask:
    """One-hot stack of shape (N, height, width), uint8."""

    layers: np.ndarray

    @property
    def n(self) -> int:
        return self.layers.shape[0]

    @property
    def height(self) -> int:
        return self.layers.shape[1]

    @property
    def width(self) -> int:
        return self.layers.shape[2]

    def labels(self) -> np.ndarray:
        return np.argmax(self.layers, axis=0).astype(np.uint8)


def read_raster(path) -> Raster:
    blob = Path(path).read_bytes()
    if blob[:5] != RASTER_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:5]!r}, expected {RASTER_MAGIC!r}")
    if len(blob) < 9:
        raise CorruptionError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", blob[5:9])
    try:
        header = json.loads(blob[9 : 9 + hlen].decode("utf-8"))
        dtype = _DTYPES[header["dtype"]]
        shape = (int(header["bands"]), int(header["height"]), int(header["width"]))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CorruptionError(f"{path}: unreadable header ({exc})") from None
    payload = blob[9 + hlen :]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise CorruptionError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return Raster(
        data=data,
        transform=GeoTransform(header["origin_x"], header["origin_y"], header["cell_size"]),
        nodata=header["nodata"],
        band_names=tuple(header["band_names"]),
    )


def write_raster(raster: Raster, path) -> None:
    code = _DTYPE_CODES[raster.dtype]
    nodata = raster.nodata
    if nodata is not None and np.isnan(nodata):
        raise InputError("NaN nodata cannot be stored in a JSON header")
    header = {
        "width": raster.width,
        "height": raster.height,
        "bands": raster.bands,
        "dtype": code,
        "nodata": nodata,
        "origin_x": raster.transform.origin_x,
        "origin_y": raster.transform.origin_y,
        "cell_size": raster.transform.cell_size,
        "band_names": list(raster.band_names),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(np.ascontiguousarray(raster.data, dtype=_DTYPES[code]).tobytes())


def downsample_block_mean(raster: Raster, factor: int) -> Raster:
    """Average non-overlapping factor x factor blocks.

    Blocks containing nodata become nodata. Sums accumulate in float64.
    """
    if factor < 1:
        raise DimensionError(f"factor must be a positive integer, got {factor}")
    b, h, w = raster.data.shape
    if h % factor or w % factor:
        raise DimensionError(f"raster {w}x{h} not divisible by factor {factor}")
    blocks = raster.data.astype(np.float64).reshape(b, h // factor, factor, w // factor, factor)
    out = blocks.mean(axis=(2, 4))
    nodata = raster.nodata
    if nodata is not None:
        bad = raster.nodata_mask().reshape(h // factor, factor, w // factor, factor).any(axis=(1, 3))
        out[:, bad] = nodata
    t = raster.transform
    return Raster(
        data=out.astype(np.float32),
        transform=GeoTransform(t.origin_x, t.origin_y, t.cell_size * factor),
        nodata=nodata,
        band_names=raster.band_names,
    )


def normalize_composite(raster: Raster, chm_max: float = DEFAULT_CHM_MAX) -> Raster:
    """Scale spectral bands by 1/255 and the CHM by 1/chm_max (clamped at 1)."""
    if raster.bands != 5:
        raise ShapeError(f"composite must have 5 bands {COMPOSITE_BANDS}, got {raster.bands}")
    if not chm_max > 0:
        raise ConfigError(f"chm_max must be positive, got {chm_max}")
    data = raster.data.astype(np.float64)
    out = np.empty_like(data)
    out[:4] = data[:4] / 255.0
    out[4] = np.minimum(data[4] / chm_max, 1.0)
    if raster.nodata is not None:
        bad = raster.nodata_mask()
        out[:, bad] = raster.nodata
    return Raster(out.astype(np.float32), raster.transform, raster.nodata, raster.band_names)


def one_hot_encode(class_raster: Raster, scheme: ClassScheme = DEFAULT_SCHEME) -> ClassMask:
    if class_raster.bands != 1:
        raise ShapeError(f"class raster must have one band, got {class_raster.bands}")
    labels = class_raster.data[0]
    bad = (labels < 0) | (labels >= scheme.n) | (labels != np.floor(labels))
    if bad.any():
        r, c = (int(v) for v in np.argwhere(bad)[0])
        raise EncodingError(
            f"class id {labels[r, c]!r} at row {r}, col {c} outside 0..{scheme.n - 1}"
        )
    ids = labels.astype(np.intp)
    layers = (ids[None] == np.arange(scheme.n)[:, None, None]).astype(np.uint8)
    return ClassMask(layers)


def decode_argmax(
    probabilities: np.ndarray,
    transform: GeoTransform | None = None,
) -> Raster:
    """Class raster from (N, height, width) scores; ties go to the lowest index."""
    probs = np.asarray(probabilities.layers if isinstance(probabilities, ClassMask) else probabilities)
    if probs.ndim != 3 or probs.shape[0] < 1:
        raise ShapeError(f"expected (N, height, width) scores, got {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise NumericError("non-finite class score")
    labels = np.argmax(probs, axis=0).astype(np.uint8)
    return Raster(labels[None], transform or GeoTransform(), None, ("class",))

