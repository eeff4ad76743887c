import numpy as np
import pytest

from standseg.preprocess import SplitConfig, build_chm, split_dataset, stack_composite, tile_composite
from standseg.raster import normalize_composite
from standseg.synthgen import SceneSpec, generate_scene


def small_tileset(width=128, height=128, tile=32, n_stands=12, seed=0, noise=8.0):
    scene = generate_scene(SceneSpec(width=width, height=height, n_stands=n_stands, seed=seed, spectral_noise=noise))
    chm = build_chm(scene.cloud, scene.spectral.transform, width, height)
    composite = normalize_composite(stack_composite(scene.spectral, chm))
    tiles = tile_composite(composite, scene.classes, tile)
    return split_dataset(tiles, SplitConfig((0.5, 0.25, 0.25), seed))


@pytest.fixture(scope="session")
def tileset():
    return small_tileset()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
