"""Deterministic synthetic forest scenes: imagery, points, stands, class raster."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError
from .preprocess import CLASS_TO_STAGE, PointCloud, StandPolygon, rasterize_stands
from .raster import UNLABELED, GeoTransform, Raster

# class order: NF, I-II, III, IV, V
DEFAULT_PRIORS = (0.15, 0.15, 0.30, 0.18, 0.22)
DEFAULT_HEIGHTS = ((0.0, 0.5), (0.0, 3.0), (5.0, 15.0), (10.0, 20.0), (15.0, 30.0))
DEFAULT_SPECTRA = (
    (140.0, 130.0, 110.0, 70.0),
    (100.0, 120.0, 80.0, 120.0),
    (70.0, 95.0, 60.0, 160.0),
    (55.0, 80.0, 50.0, 190.0),
    (40.0, 60.0, 40.0, 225.0),
)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 256
    height: int = 256
    n_stands: int = 40
    class_priors: tuple[float, ...] = DEFAULT_PRIORS
    heights: tuple[tuple[float, float], ...] = DEFAULT_HEIGHTS
    spectral_means: tuple[tuple[float, ...], ...] = DEFAULT_SPECTRA
    spectral_noise: float = 8.0
    point_density: float = 1.4
    stage_two_share: float = 0.5
    origin: tuple[float, float] = (0.0, 0.0)
    seed: int = 0
    forced_classes: tuple[int, ...] | None = field(default=None)

    def validate(self) -> None:
        if len(self.class_priors) != len(self.heights) or len(self.heights) != len(self.spectral_means):
            raise ConfigError("priors, heights and spectral means must cover the same classes")
        if any(lo < 0 or hi < lo for lo, hi in self.heights):
            raise ConfigError("height ranges must be non-negative and ordered")
        if any(not 0 <= v <= 255 for means in self.spectral_means for v in means):
            raise ConfigError("spectral means must lie in [0, 255]")
        if self.n_stands < 1:
            raise ConfigError("need at least one stand")

    @property
    def transform(self) -> GeoTransform:
        # origin is the top-left corner at 1 m cells
        return GeoTransform(self.origin[0], self.origin[1], 1.0)


class Scene(NamedTuple):
    spectral: Raster
    cloud: PointCloud
    polygons: list[StandPolygon]
    classes: Raster


def _clip_halfplane(poly: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    """Sutherland-Hodgman: keep points p with normal . p <= offset (open polygon)."""
    if len(poly) == 0:
        return poly
    d = poly @ normal - offset
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        dp, dq = d[i], d[(i + 1) % n]
        if dp <= 0:
            out.append(p)
        if (dp <= 0) != (dq <= 0):
            t = dp / (dp - dq)
            out.append(p + t * (q - p))
    return np.array(out).reshape(-1, 2)


def voronoi_cells(sites: np.ndarray, xmin: float, ymin: float, xmax: float, ymax: float) -> list[np.ndarray]:
    """Voronoi cells of ``sites`` clipped to the box, as open vertex arrays."""
    box = np.array([[xmin, ymax], [xmax, ymax], [xmax, ymin], [xmin, ymin]], dtype=np.float64)
    cells = []
    for i, s in enumerate(sites):
        dist = np.linalg.norm(sites - s, axis=1)
        poly = box.copy()
        for j in np.argsort(dist, kind="stable"):
            if j == i:
                continue
            radius = np.max(np.linalg.norm(poly - s, axis=1)) if len(poly) else 0.0
            if dist[j] > 2.0 * radius:
                break
            other = sites[j]
            poly = _clip_halfplane(poly, 2.0 * (other - s), other @ other - s @ s)
        cells.append(poly)
    return cells


def generate_scene(spec: SceneSpec) -> Scene:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    t = spec.transform
    xmin, ymax = t.origin_x, t.origin_y
    xmax, ymin = xmin + spec.width, ymax - spec.height
    sites = np.column_stack([rng.uniform(xmin, xmax, spec.n_stands), rng.uniform(ymin, ymax, spec.n_stands)])
    priors = np.asarray(spec.class_priors, dtype=np.float64)
    if spec.forced_classes is not None:
        stand_classes = np.resize(np.asarray(spec.forced_classes), spec.n_stands)
    else:
        stand_classes = rng.choice(len(priors), size=spec.n_stands, p=priors / priors.sum())
    stage_two = rng.random(spec.n_stands) < spec.stage_two_share
    polygons = []
    for cell, cid, two in zip(voronoi_cells(sites, xmin, ymin, xmax, ymax), stand_classes, stage_two):
        if len(cell) < 3:
            continue
        ring = np.vstack([cell, cell[:1]])
        stage = CLASS_TO_STAGE[int(cid)]
        if stage == 1 and two:
            stage = 2
        polygons.append(StandPolygon((ring,), stage))
    classes = rasterize_stands(polygons, t, spec.width, spec.height)
    # a center exactly on a shared edge can stay unlabeled; tiling drops those pixels
    labels = np.where(classes.data[0] == UNLABELED, 0, classes.data[0])

    means = np.asarray(spec.spectral_means, dtype=np.float64)
    img = means[labels].transpose(2, 0, 1)
    if spec.spectral_noise > 0:
        img = img + rng.normal(0.0, spec.spectral_noise, img.shape)
    spectral = Raster(
        np.clip(np.rint(img), 0, 255).astype(np.uint8), t, None, ("red", "green", "blue", "nir")
    )

    n_pts = int(round(spec.point_density * spec.width * spec.height))
    px = rng.uniform(xmin, xmax, n_pts)
    py = rng.uniform(ymin, ymax, n_pts)
    col = np.clip(np.floor(px - xmin).astype(np.int64), 0, spec.width - 1)
    row = np.clip(np.floor(ymax - py).astype(np.int64), 0, spec.height - 1)
    heights = np.asarray(spec.heights, dtype=np.float64)
    pc = labels[row, col]
    pz = rng.uniform(heights[pc, 0], heights[pc, 1])
    cloud = PointCloud(np.column_stack([px, py, pz]))
    return Scene(spectral, cloud, polygons, classes)
