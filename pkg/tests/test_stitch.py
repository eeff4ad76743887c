import numpy as np
import pytest
from scipy import ndimage

from standseg.errors import ShapeError
from standseg.raster import GeoTransform, Raster
from standseg.stitch import owner_intervals, predict_and_stitch, stitch_windows, window_starts
from standseg.unet import UNetConfig, build_model, forward, predict_proba

GRID = GeoTransform(0.0, 0.0, 1.0)


def warmed_model(seed=0, depth=1):
    model = build_model(UNetConfig(base_filters=4, depth=depth), seed)
    # one train-mode pass seeds the batch-norm running statistics
    forward(model, np.random.default_rng(seed).random((2, 5, 32, 32), dtype=np.float32), "train")
    return model


def smooth_scene(h, w, seed=0):
    rng = np.random.default_rng(seed)
    data = ndimage.gaussian_filter(rng.random((5, h, w)), (0, 4, 4))
    data = (data - data.min()) / (data.max() - data.min())
    return Raster(data.astype(np.float32), GRID)


def test_window_starts():
    assert window_starts(128, 64, 0) == [0, 64]
    assert window_starts(100, 64, 16) == [0, 36]
    assert window_starts(40, 64, 16) == [0]


def test_owner_intervals_partition():
    for length, tile, overlap in ((300, 64, 16), (256, 64, 0), (97, 32, 8)):
        spans = owner_intervals(length, tile, window_starts(length, tile, overlap))
        covered = np.concatenate([np.arange(a, b) for a, b in spans])
        assert np.array_equal(covered, np.arange(length))


def test_overlap_zero_matches_per_tile_argmax():
    model = warmed_model()
    scene = smooth_scene(64, 96)
    got = predict_and_stitch(model, scene, 32, overlap=0).data[0]
    expected = np.zeros((64, 96), dtype=np.uint8)
    for r in range(0, 64, 32):
        for c in range(0, 96, 32):
            p = predict_proba(model, scene.data[None, :, r : r + 32, c : c + 32])[0]
            expected[r : r + 32, c : c + 32] = p.argmax(axis=0)
    assert np.array_equal(got, expected)


def test_identity_function_is_bit_exact():
    data = np.random.default_rng(1).random((5, 96, 160))
    for overlap in (0, 8, 14):
        assert np.array_equal(stitch_windows(data, 32, overlap, lambda b: b), data)


def pointwise_model(batch):
    w = np.random.default_rng(7).standard_normal((5, 5))
    z = np.einsum("kc,nchw->nkhw", w, batch)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_constant_scene_constant_map():
    scene = Raster(np.full((5, 100, 140), 0.4, np.float32), GRID)
    for overlap in (0, 8, 16):
        out = predict_and_stitch(pointwise_model, scene, 64, overlap).data
        assert np.unique(out).size == 1


def test_unet_constant_scene_interior_is_periodic():
    # stride-2 up-convolutions give each output parity its own kernel tap,
    # so a constant scene maps to a 2x2-periodic pattern away from tile borders
    model = warmed_model(2)
    scene = Raster(np.full((5, 64, 64), 0.4, np.float32), GRID)
    out = predict_and_stitch(model, scene, 64, 0).data[0][16:-16, 16:-16]
    assert np.array_equal(out, np.tile(out[:2, :2], (16, 16)))


def test_single_tile_equals_direct_inference():
    model = warmed_model(3)
    scene = smooth_scene(64, 64, 3)
    direct = predict_proba(model, scene.data[None])[0].argmax(axis=0)
    for overlap in (0, 8):
        assert np.array_equal(predict_and_stitch(model, scene, 64, overlap).data[0], direct)


def test_small_input_reflect_padded():
    calls = []

    def fn(batch):
        calls.append(batch.shape)
        return batch

    data = np.random.default_rng(4).random((5, 20, 30))
    out = stitch_windows(data, 32, 0, fn)
    assert calls == [(1, 5, 32, 32)]
    assert np.array_equal(out, data)


def test_overlap_validation():
    for overlap in (-2, 3, 16, 20):
        with pytest.raises(ShapeError):
            stitch_windows(np.zeros((5, 64, 64)), 32, overlap, lambda b: b)


def window_edges(length, tile, overlap):
    edges = set()
    for s in window_starts(length, tile, overlap):
        edges.update((s, s + tile))
    return sorted(edges - {0, length})


def seam_distance(length, edges):
    x = np.arange(length)[:, None] + 0.5
    if not edges:
        return np.full(length, np.inf)
    return np.abs(x - np.asarray(edges)[None, :]).min(axis=1)


def test_seam_differences_stay_near_seams():
    model = warmed_model(5)
    scene = smooth_scene(192, 192, 5)
    tile, small, large = 96, 16, 32
    a = predict_and_stitch(model, scene, tile, small).data[0]
    b = predict_and_stitch(model, scene, tile, large).data[0]
    diff = a != b
    edges = sorted(set(window_edges(192, tile, small)) | set(window_edges(192, tile, large)))
    dr = seam_distance(192, edges)
    dist = np.minimum(dr[:, None], dr[None, :])
    assert np.all(dist[diff] <= 2 * large)
