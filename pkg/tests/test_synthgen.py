import numpy as np
import pytest

from standseg.errors import ConfigError
from standseg.preprocess import build_chm, read_stands_geojson, rasterize_stands, write_stands_geojson
from standseg.raster import UNLABELED
from standseg.synthgen import SceneSpec, generate_scene, voronoi_cells


def test_same_spec_bit_identical():
    a = generate_scene(SceneSpec(width=64, height=48, n_stands=10, seed=4))
    b = generate_scene(SceneSpec(width=64, height=48, n_stands=10, seed=4))
    assert np.array_equal(a.spectral.data, b.spectral.data)
    assert np.array_equal(a.cloud.points, b.cloud.points)
    assert np.array_equal(a.classes.data, b.classes.data)
    assert len(a.polygons) == len(b.polygons)
    assert all(np.array_equal(p.rings[0], q.rings[0]) for p, q in zip(a.polygons, b.polygons))


def test_single_stand_class_five():
    spec = SceneSpec(width=40, height=40, n_stands=1, forced_classes=(4,), seed=1)
    scene = generate_scene(spec)
    assert np.all(scene.classes.data == 4)
    chm = build_chm(scene.cloud, scene.spectral.transform, 40, 40)
    assert 15.0 <= chm.data.mean() <= 30.0


def test_polygons_consistent_with_classes(tmp_path):
    scene = generate_scene(SceneSpec(width=96, height=80, n_stands=25, seed=2))
    write_stands_geojson(scene.polygons, tmp_path / "stands.geojson")
    again = rasterize_stands(read_stands_geojson(tmp_path / "stands.geojson"), scene.classes.transform, 96, 80)
    assert np.array_equal(again.data, scene.classes.data)


def test_cells_partition_box():
    rng = np.random.default_rng(0)
    sites = rng.uniform(0, 50, (30, 2))
    total = 0.0
    for cell in voronoi_cells(sites, 0, 0, 50, 50):
        x, y = cell[:, 0], cell[:, 1]
        total += 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))
    assert total == pytest.approx(2500.0, rel=1e-9)


def test_zero_noise_classes_separable_by_nir():
    scene = generate_scene(SceneSpec(width=64, height=64, n_stands=30, spectral_noise=0.0, seed=3))
    labels = scene.classes.data[0]
    nir = scene.spectral.data[3]
    values = {}
    for cls in np.unique(labels[labels != UNLABELED]):
        v = np.unique(nir[labels == cls])
        assert len(v) == 1
        values[int(cls)] = int(v[0])
    assert len(set(values.values())) == len(values)
    ordered = [values[c] for c in sorted(values)]
    assert ordered == sorted(ordered)


def test_point_density_and_heights():
    spec = SceneSpec(width=100, height=50, n_stands=8, seed=5)
    scene = generate_scene(spec)
    assert len(scene.cloud.points) == 7000
    z = scene.cloud.points[:, 2]
    assert z.min() >= 0 and z.max() <= 30


def test_invalid_spec():
    with pytest.raises(ConfigError):
        generate_scene(SceneSpec(n_stands=0))
    with pytest.raises(ConfigError):
        generate_scene(SceneSpec(heights=((0, 1),) * 4 + ((5, 2),)))
