import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from standseg.cli import main, tree_sha256
from standseg.raster import GeoTransform, Raster, read_raster, write_raster

CONFIG = {
    "synth": {"width": 64, "height": 64, "n_stands": 10},
    "model": {"base_filters": 4, "depth": 2, "filter_size": 3},
    "train": {"max_epochs": 2, "batch_size": 4, "learning_rate": 0.001},
    "search": {"base_filters": [4, 6], "filter_sizes": [3]},
}

STEPS = [
    ["synth"],
    ["build-chm"],
    ["stack"],
    ["tile", "--size", "32"],
    ["split", "--fractions", "0.5,0.25,0.25"],
    ["train"],
    ["evaluate"],
    ["predict", "--size", "32", "--overlap", "8"],
    ["vectorize", "--min-area-ha", "0.005"],
    ["report"],
]


def run(*argv):
    return main([str(a) for a in argv])


def run_pipeline(workdir: Path, config: Path) -> None:
    for step in STEPS:
        assert run(*step, "--workdir", workdir, "--config", config, "--seed", 3) == 0, step


def manifests(workdir: Path) -> dict:
    return {p.parent.name: json.loads(p.read_text()) for p in sorted(workdir.glob("*/manifest.json"))}


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps(CONFIG))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, config_file):
    workdir = tmp_path_factory.mktemp("run")
    run_pipeline(workdir, config_file)
    return workdir


def test_pipeline_outputs(pipeline):
    for rel in (
        "synth/spectral.rstr", "chm/chm.rstr", "stack/composite.rstr", "split/split.json",
        "train/history.jsonl", "train/best.unw", "evaluate/metrics.json", "evaluate/confusion_matrix.csv",
        "predict/classes.rstr", "vectorize/stands.geojson", "report/history.svg",
    ):
        assert (pipeline / rel).exists(), rel
    metrics = json.loads((pipeline / "evaluate" / "metrics.json").read_text())
    assert {"oa", "mmcc", "per_class", "matrix_normalized", "split", "loss"} <= set(metrics)
    assert all({"pa", "ua", "mcc"} <= set(c) for c in metrics["per_class"])


def test_manifest_contents(pipeline):
    man = manifests(pipeline)
    assert set(man) == {"synth", "chm", "stack", "tiles", "split", "train", "evaluate", "predict", "vectorize", "report"}
    tile = man["tiles"]
    assert tile["command"] == "tile" and tile["params"]["size"] == 32
    assert tile["n_tiles"] == 4
    for name, m in man.items():
        for rel, digest in m["outputs"].items():
            if rel not in m.get("volatile", []):
                assert len(digest) == 64
        assert str(pipeline) not in json.dumps(m)


def test_rerun_gives_identical_manifests(pipeline, config_file, tmp_path):
    other = tmp_path / "again"
    run_pipeline(other, config_file)
    assert manifests(other) == manifests(pipeline)
    assert (other / "train" / "history.jsonl").read_bytes() == (pipeline / "train" / "history.jsonl").read_bytes()
    assert (other / "train" / "best.unw").read_bytes() == (pipeline / "train" / "best.unw").read_bytes()
    # rerunning a step in place also reproduces its manifest
    before = manifests(other)["tiles"]
    assert run("tile", "--size", 32, "--workdir", other, "--config", config_file, "--seed", 3) == 0
    assert manifests(other)["tiles"] == before


def test_tile_large_composite(tmp_path):
    grid = GeoTransform(0.0, 1024.0, 1.0)
    comp = np.random.default_rng(0).uniform(0, 255, (5, 1024, 1024)).astype(np.float32)
    comp[4] = comp[4] / 255 * 30
    bands = ("red", "green", "blue", "nir", "chm")
    write_raster(Raster(comp, grid, None, bands), tmp_path / "composite.rstr")
    write_raster(Raster(np.full((1, 1024, 1024), 2, np.uint8), grid, None, ("class",)), tmp_path / "mask.rstr")
    code = run("tile", "--composite", tmp_path / "composite.rstr", "--mask", tmp_path / "mask.rstr",
               "--size", 512, "--workdir", tmp_path)
    assert code == 0
    assert len(list((tmp_path / "tiles" / "composite").glob("*.rstr"))) == 4
    assert len(list((tmp_path / "tiles" / "mask").glob("*.rstr"))) == 4
    assert json.loads((tmp_path / "tiles" / "manifest.json").read_text())["n_tiles"] == 4


def test_split_760(tmp_path):
    comp = tmp_path / "tiles" / "composite"
    comp.mkdir(parents=True)
    for i in range(760):
        (comp / f"r{i // 40:04d}_c{i % 40:04d}.rstr").write_bytes(b"")
    assert run("split", "--seed", 42, "--fractions", "0.7,0.15,0.15", "--workdir", tmp_path) == 0
    man = json.loads((tmp_path / "split" / "manifest.json").read_text())
    assert man["counts"] == {"train": 532, "val": 114, "test": 114}
    first = (tmp_path / "split" / "split.json").read_bytes()
    assert run("split", "--seed", 42, "--fractions", "0.7,0.15,0.15", "--workdir", tmp_path) == 0
    assert (tmp_path / "split" / "split.json").read_bytes() == first


def error_line(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_missing_checkpoint_exits_2(pipeline, tmp_path, capsys):
    code = run("evaluate", "--checkpoint", tmp_path / "none.unw", "--workdir", pipeline)
    assert code == 2
    err = error_line(capsys)
    assert err["exit_code"] == 2 and "checkpoint" in err["message"]


def test_empty_history_report_exits_2(pipeline, tmp_path, capsys):
    empty = tmp_path / "history.jsonl"
    empty.write_text("")
    code = run("report", "--history", empty, "--metrics", pipeline / "evaluate" / "metrics.json", "--workdir", tmp_path)
    assert code == 2
    assert error_line(capsys)["exit_code"] == 2


def test_argument_errors_exit_2(tmp_path, capsys):
    assert run("no-such-command") == 2
    error_line(capsys)
    assert run("split", "--fractions", "a,b,c", "--workdir", tmp_path) == 2
    error_line(capsys)


def test_bad_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"tiles": 3}))
    assert run("synth", "--config", cfg, "--workdir", tmp_path) == 2
    assert error_line(capsys)["error"] == "ConfigError"


def test_thread_flags(pipeline, tmp_path, monkeypatch, capsys):
    assert run("--threads", 1, "vectorize", "--workdir", tmp_path, "--classes", pipeline / "predict" / "classes.rstr") == 0
    assert run("vectorize", "--threads", 1, "--workdir", tmp_path, "--classes", pipeline / "predict" / "classes.rstr") == 0
    assert run("vectorize", "--threads", 0, "--workdir", tmp_path) == 2
    error_line(capsys)
    monkeypatch.setenv("STANDSEG_THREADS", "many")
    assert run("vectorize", "--workdir", tmp_path, "--classes", pipeline / "predict" / "classes.rstr") == 2
    error_line(capsys)
    monkeypatch.setenv("STANDSEG_THREADS", "1")
    assert run("vectorize", "--workdir", tmp_path, "--classes", pipeline / "predict" / "classes.rstr") == 0


def test_predict_covers_scene(pipeline):
    classes = read_raster(pipeline / "predict" / "classes.rstr")
    composite = read_raster(pipeline / "stack" / "composite.rstr")
    assert classes.data.shape == (1, composite.height, composite.width)
    assert classes.data.max() < 5


def test_tune_twenty_trials(pipeline, config_file, tmp_path):
    for d in ("tiles", "split"):
        (tmp_path / d).symlink_to(pipeline / d)
    assert run("tune", "--trials", 20, "--epochs", 1, "--workdir", tmp_path, "--config", config_file, "--seed", 3) == 0
    events = [json.loads(line) for line in (tmp_path / "tune" / "journal.jsonl").read_text().splitlines()]
    finished = [e for e in events if e["event"] == "finish"]
    assert len(finished) == 20
    assert sum(e["status"] == "complete" for e in finished) >= 10
    summary = json.loads((tmp_path / "tune" / "summary.json").read_text())
    assert summary["n_trials"] == 20 and summary["best_trial"] is not None


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "standseg.cli", "evaluate", "--workdir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip())["exit_code"] == 2


def test_tree_hash_ignores_manifest(tmp_path):
    (tmp_path / "a.txt").write_text("x")
    h = tree_sha256(tmp_path)
    (tmp_path / "manifest.json").write_text("{}")
    assert tree_sha256(tmp_path) == h


def test_downsample_default_block(tmp_path):
    data = np.arange(4 * 8 * 8, dtype=np.float32).reshape(4, 8, 8)
    write_raster(Raster(data, GeoTransform(0.0, 2.0, 0.25), None, ("red", "green", "blue", "nir")), tmp_path / "img.rstr")
    assert run("downsample", "--input", tmp_path / "img.rstr", "--workdir", tmp_path) == 0
    out = read_raster(tmp_path / "downsample" / "img.rstr")
    assert out.data.shape == (4, 2, 2) and out.transform.cell_size == 1.0
    assert out.data[0, 0, 0] == data[0, :4, :4].mean()
