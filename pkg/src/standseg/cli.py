"""``standseg`` command line: one subcommand per pipeline step.

Every step writes its outputs under ``<workdir>/<step>/`` together with a
manifest.json that records the parameters and the sha256 of every input and
output. Manifests hold no paths or timestamps, so identical inputs give
identical manifests.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import shutil
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .augment import AugmentConfig
from .errors import ConfigError, InputError, StandsegError
from .losses import LossParams
from .metrics import confusion_matrix, metrics_report
from .preprocess import (
    SplitConfig,
    Tile,
    TileSet,
    build_chm,
    read_stands_geojson,
    read_xyz,
    rasterize_stands,
    split_assignment,
    stack_composite,
    tile_composite,
    write_stands_geojson,
    write_xyz,
)
from .raster import (
    DEFAULT_CHM_MAX,
    Raster,
    decode_argmax,
    downsample_block_mean,
    normalize_composite,
    one_hot_encode,
    read_raster,
    write_raster,
)
from .report import emit_report, write_confusion_csv
from .stitch import predict_and_stitch
from .synthgen import SceneSpec, generate_scene
from .trainer import TrainConfig, evaluate_split, read_history, train
from .tuner import SearchSpace, run_study
from .unet import UNetConfig, build_model, load_weights
from .vectorize import DEFAULT_MIN_AREA_HA, vectorize_classmap

TILE_ID = re.compile(r"^r(\d+)_c(\d+)$")


@dataclass(frozen=True)
class PipelineConfig:
    paths: dict = field(default_factory=dict)
    tile_pixels: int = 512
    chm_max: float = DEFAULT_CHM_MAX
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: UNetConfig = field(default_factory=UNetConfig)
    search: SearchSpace = field(default_factory=SearchSpace)
    synth: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "split" in kw:
            s = kw["split"]
            kw["split"] = SplitConfig(tuple(s.get("fractions", (0.70, 0.15, 0.15))), s.get("seed", 0))
        if "train" in kw:
            kw["train"] = TrainConfig.from_dict(kw["train"])
        if "model" in kw:
            kw["model"] = UNetConfig.from_dict(kw["model"])
        if "search" in kw:
            kw["search"] = SearchSpace.from_dict(kw["search"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        if path is None:
            return cls()
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"bad config {path}: {exc}") from None


# ---------------------------------------------------------------- helpers


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_sha256(path) -> str:
    """Hash of a file, or of a directory's sorted (relative path, file hash) list."""
    p = Path(path)
    if p.is_file():
        return file_sha256(p)
    h = hashlib.sha256()
    for f in sorted(q for q in p.rglob("*") if q.is_file() and q.name != "manifest.json" and q.name not in VOLATILE):
        h.update(f"{f.relative_to(p).as_posix()}\0{file_sha256(f)}\n".encode())
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, np.generic):
        return v.item()
    return v


# wall-clock files are listed in the manifest but not hashed
VOLATILE = ("timings.jsonl",)


def write_manifest(step_dir: Path, command: str, params: dict, inputs: dict, extra: dict | None = None) -> dict:
    files = [f for f in sorted(step_dir.rglob("*")) if f.is_file() and f.name != "manifest.json"]
    outputs = {f.relative_to(step_dir).as_posix(): file_sha256(f) for f in files if f.name not in VOLATILE}
    manifest = {
        "command": command,
        "params": _jsonable(params),
        "inputs": {k: tree_sha256(v) for k, v in sorted(inputs.items())},
        "outputs": outputs,
    }
    volatile = [f.relative_to(step_dir).as_posix() for f in files if f.name in VOLATILE]
    if volatile:
        manifest["volatile"] = volatile
    if extra:
        manifest.update(_jsonable(extra))
    (step_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _step_dir(args, name: str, fresh: bool = True) -> Path:
    """Output directory of one step; ``fresh`` clears what an earlier run left."""
    d = Path(args.workdir) / name
    if fresh and d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _default(args, value, *parts) -> Path:
    return Path(value) if value is not None else Path(args.workdir).joinpath(*parts)


def write_tileset(tileset: TileSet, out: Path, with_masks: bool = True) -> None:
    (out / "composite").mkdir(parents=True, exist_ok=True)
    if with_masks:
        (out / "mask").mkdir(parents=True, exist_ok=True)
    for t in tileset.tiles:
        write_raster(t.composite, out / "composite" / f"{t.tile_id}.rstr")
        if with_masks:
            labels = t.mask.labels().astype(np.uint8)[None]
            write_raster(Raster(labels, t.composite.transform, None, ("class",)), out / "mask" / f"{t.tile_id}.rstr")


def tile_ids(tiles_dir: Path) -> list[str]:
    ids = sorted(f.stem for f in (tiles_dir / "composite").glob("*.rstr"))
    if not ids:
        raise InputError(f"no tiles under {tiles_dir / 'composite'}")
    return ids


def load_tileset(tiles_dir: Path, split_file: Path | None = None) -> TileSet:
    """Tiles written by ``tile``, with split labels from ``split``'s split.json when given."""
    splits = json.loads(split_file.read_text())["assignment"] if split_file is not None else {}
    tiles = []
    size = None
    for tid in tile_ids(tiles_dir):
        m = TILE_ID.match(tid)
        if m is None:
            raise InputError(f"unexpected tile name {tid!r}")
        mask_path = _require(tiles_dir / "mask" / f"{tid}.rstr", "mask tile")
        comp = read_raster(tiles_dir / "composite" / f"{tid}.rstr")
        mask = one_hot_encode(read_raster(mask_path))
        size = comp.width
        tiles.append(Tile(comp, mask, tid, int(m.group(1)), int(m.group(2)), splits.get(tid)))
    return TileSet(tiles, size)


def _parse_fractions(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise InputError(f"fractions must be comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise InputError(f"need three fractions, got {text!r}")
    return vals


def _tuples(v):
    return tuple(_tuples(x) for x in v) if isinstance(v, list) else v


def _seed(args, fallback: int) -> int:
    return fallback if args.seed is None else args.seed


def _train_config(args, cfg: PipelineConfig) -> TrainConfig:
    tc = cfg.train
    if getattr(args, "epochs", None) is not None:
        tc = replace(tc, max_epochs=args.epochs)
    if getattr(args, "batch_size", None) is not None:
        tc = replace(tc, batch_size=args.batch_size)
    if getattr(args, "lr", None) is not None:
        tc = replace(tc, learning_rate=args.lr)
    if getattr(args, "alpha", None) is not None or getattr(args, "gamma", None) is not None:
        a = tc.loss.alpha if args.alpha is None else args.alpha
        g = tc.loss.gamma if args.gamma is None else args.gamma
        tc = replace(tc, loss=LossParams(a, g))
    seed = _seed(args, tc.seed)
    aug = AugmentConfig.disabled(seed) if getattr(args, "no_augment", False) else replace(tc.augment, seed=seed)
    return replace(tc, seed=seed, augment=aug)


def _model_config(args, cfg: PipelineConfig) -> UNetConfig:
    mc = cfg.model
    for flag, name in (("base_filters", "base_filters"), ("depth", "depth"), ("filter_size", "filter_size")):
        v = getattr(args, flag, None)
        if v is not None:
            mc = replace(mc, **{name: v})
    if getattr(args, "dropout", None) is not None:
        mc = replace(mc, dropout_rate=args.dropout)
    mc.validate()
    return mc


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg: PipelineConfig) -> None:
    unknown = set(cfg.synth) - set(SceneSpec.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
    kw = {k: _tuples(v) for k, v in cfg.synth.items()}
    spec = SceneSpec(**kw)
    for flag in ("width", "height", "n_stands", "spectral_noise"):
        v = getattr(args, flag)
        if v is not None:
            spec = replace(spec, **{flag: v})
    spec = replace(spec, seed=_seed(args, spec.seed))
    scene = generate_scene(spec)
    out = _step_dir(args, "synth")
    write_raster(scene.spectral, out / "spectral.rstr")
    write_raster(scene.classes, out / "classes.rstr")
    write_xyz(scene.cloud, out / "points.xyz")
    write_stands_geojson(scene.polygons, out / "stands.geojson")
    write_manifest(out, "synth", asdict(spec), {})


def cmd_build_chm(args, cfg: PipelineConfig) -> None:
    points = _require(_default(args, args.points or cfg.paths.get("points"), "synth", "points.xyz"), "point file")
    grid_path = _require(_default(args, args.grid or cfg.paths.get("orthophoto"), "synth", "spectral.rstr"), "grid raster")
    grid = read_raster(grid_path)
    chm = build_chm(read_xyz(points), grid.transform, grid.width, grid.height)
    out = _step_dir(args, "chm")
    write_raster(chm, out / "chm.rstr")
    write_manifest(out, "build-chm", {}, {"points": points, "grid": grid_path})


def cmd_downsample(args, cfg: PipelineConfig) -> None:
    src = _require(args.input, "input raster")
    result = downsample_block_mean(read_raster(src), args.factor)
    out = _step_dir(args, "downsample")
    write_raster(result, out / src.name)
    write_manifest(out, "downsample", {"factor": args.factor}, {"input": src})


def cmd_stack(args, cfg: PipelineConfig) -> None:
    image = _require(_default(args, args.image or cfg.paths.get("orthophoto"), "synth", "spectral.rstr"), "image")
    chm_path = _require(_default(args, args.chm, "chm", "chm.rstr"), "CHM raster")
    composite = stack_composite(read_raster(image), read_raster(chm_path))
    out = _step_dir(args, "stack")
    write_raster(composite, out / "composite.rstr")
    write_manifest(out, "stack", {}, {"image": image, "chm": chm_path})


def _mask_raster(args, cfg: PipelineConfig, composite: Raster) -> tuple[Raster | None, dict]:
    if args.mask is not None:
        p = _require(args.mask, "mask raster")
        return read_raster(p), {"mask": p}
    stands = args.stands or cfg.paths.get("stands")
    if stands is None:
        default = Path(args.workdir) / "synth" / "stands.geojson"
        stands = default if default.exists() else None
    if stands is None:
        return None, {}
    p = _require(stands, "stand polygons")
    return rasterize_stands(read_stands_geojson(p), composite.transform, composite.width, composite.height), {"stands": p}


def cmd_tile(args, cfg: PipelineConfig) -> None:
    src = _require(_default(args, args.composite, "stack", "composite.rstr"), "composite")
    size = args.size if args.size is not None else cfg.tile_pixels
    chm_max = args.chm_max if args.chm_max is not None else cfg.chm_max
    composite = normalize_composite(read_raster(src), chm_max)
    mask, mask_inputs = _mask_raster(args, cfg, composite)
    with_masks = mask is not None
    if mask is None:
        # inference-only tiling: every class is 0 so only nodata drops a tile
        mask = Raster(np.zeros((1, composite.height, composite.width), np.uint8), composite.transform, None)
    tileset = tile_composite(composite, mask, size)
    out = _step_dir(args, "tiles")
    write_tileset(tileset, out, with_masks)
    write_manifest(
        out,
        "tile",
        {"size": size, "chm_max": chm_max, "masks": with_masks},
        {"composite": src, **mask_inputs},
        {"n_tiles": len(tileset)},
    )


def cmd_split(args, cfg: PipelineConfig) -> None:
    tiles_dir = _require(_default(args, args.tiles, "tiles"), "tile directory")
    fractions = _parse_fractions(args.fractions) if args.fractions else cfg.split.fractions
    config = SplitConfig(fractions, _seed(args, cfg.split.seed))
    ids = tile_ids(tiles_dir)
    labels = split_assignment(len(ids), config)
    counts = {s: labels.count(s) for s in ("train", "val", "test")}
    out = _step_dir(args, "split")
    doc = {"assignment": dict(zip(ids, labels)), "counts": counts}
    (out / "split.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    write_manifest(out, "split", asdict(config), {"tiles": tiles_dir}, {"counts": counts})


def _load_split_tiles(args) -> tuple[Path, Path, TileSet]:
    tiles_dir = _require(_default(args, args.tiles, "tiles"), "tile directory")
    split_file = _require(_default(args, args.split_file, "split", "split.json"), "split assignment")
    return tiles_dir, split_file, load_tileset(tiles_dir, split_file)


def cmd_train(args, cfg: PipelineConfig) -> None:
    tiles_dir, split_file, tileset = _load_split_tiles(args)
    out = _step_dir(args, "train")
    mc = _model_config(args, cfg)
    tc = replace(_train_config(args, cfg), checkpoint_dir=str(out))
    model = build_model(mc, seed=tc.seed)
    _, history = train(model, tileset, tc)
    params = {"model": asdict(mc), "train": {k: v for k, v in tc.to_dict().items() if k != "checkpoint_dir"}}
    write_manifest(
        out, "train", params, {"tiles": tiles_dir, "split": split_file}, {"epochs_run": len(history)}
    )


def cmd_tune(args, cfg: PipelineConfig) -> None:
    tiles_dir, split_file, tileset = _load_split_tiles(args)
    # the journal is kept so an interrupted study resumes
    out = _step_dir(args, "tune", fresh=False)
    mc = _model_config(args, cfg)
    tc = _train_config(args, cfg)
    seed = _seed(args, tc.seed)
    journal = run_study(
        cfg.search, args.trials, tileset, tc, seed=seed, journal_path=out / "journal.jsonl", model_defaults=mc
    )
    (out / "summary.json").write_text(json.dumps(journal.summary(), indent=2, sort_keys=True) + "\n")
    params = {"trials": args.trials, "seed": seed, "search": asdict(cfg.search), "model": asdict(mc)}
    params["train"] = {k: v for k, v in tc.to_dict().items() if k != "checkpoint_dir"}
    write_manifest(out, "tune", params, {"tiles": tiles_dir, "split": split_file})


def cmd_evaluate(args, cfg: PipelineConfig) -> None:
    ckpt = _require(_default(args, args.checkpoint, "train", "best.unw"), "checkpoint")
    tiles_dir, split_file, tileset = _load_split_tiles(args)
    model = load_weights(ckpt)
    loss, _, report = evaluate_split(model, tileset, args.split, cfg.train.loss, cfg.train.batch_size)
    report = {"split": args.split, "loss": loss, **report}
    out = _step_dir(args, "evaluate")
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_confusion_csv(report, out / "confusion_matrix.csv")
    write_manifest(
        out, "evaluate", {"split": args.split}, {"checkpoint": ckpt, "tiles": tiles_dir, "split": split_file}
    )


def cmd_predict(args, cfg: PipelineConfig) -> None:
    ckpt = _require(_default(args, args.checkpoint, "train", "best.unw"), "checkpoint")
    src = _require(_default(args, args.composite, "stack", "composite.rstr"), "composite")
    model = load_weights(ckpt)
    chm_max = args.chm_max if args.chm_max is not None else cfg.chm_max
    composite = normalize_composite(read_raster(src), chm_max)
    size = args.size if args.size is not None else cfg.tile_pixels
    classes = predict_and_stitch(model, composite, size, args.overlap)
    report = None
    if args.reference is not None:
        ref = read_raster(_require(args.reference, "reference class raster"))
        report = metrics_report(confusion_matrix(classes.data[0], ref.data[0], model.config.n_classes))
    out = _step_dir(args, "predict")
    write_raster(classes, out / "classes.rstr")
    if report is not None:
        (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest(
        out,
        "predict",
        {"size": size, "overlap": args.overlap, "chm_max": chm_max},
        {"checkpoint": ckpt, "composite": src, **({"reference": args.reference} if args.reference else {})},
    )


def cmd_vectorize(args, cfg: PipelineConfig) -> None:
    src = _require(_default(args, args.classes, "predict", "classes.rstr"), "class raster")
    raster = read_raster(src)
    if raster.bands != 1 or raster.data.dtype != np.uint8:
        raster = decode_argmax(raster.data, raster.transform)
    polygons = vectorize_classmap(raster, args.min_area_ha)
    out = _step_dir(args, "vectorize")
    write_stands_geojson(polygons, out / "stands.geojson")
    write_manifest(out, "vectorize", {"min_area_ha": args.min_area_ha}, {"classes": src}, {"n_polygons": len(polygons)})


def cmd_report(args, cfg: PipelineConfig) -> None:
    metrics_path = _require(_default(args, args.metrics, "evaluate", "metrics.json"), "metrics file")
    history_path = _require(_default(args, args.history, "train", "history.jsonl"), "history file")
    history = read_history(history_path)
    if not history:
        raise InputError(f"history is empty: {history_path}")
    metrics = json.loads(metrics_path.read_text())
    out = _step_dir(args, "report")
    emit_report(metrics, history, out)
    write_manifest(out, "report", {}, {"metrics": metrics_path, "history": history_path})


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="pipeline config JSON")
    p.add_argument("--seed", type=int, default=d, help="overrides every seed in the config")
    p.add_argument("--workdir", default=d if suppress else ".", help="root for all step outputs")
    p.add_argument("--threads", type=int, default=d, help="BLAS thread cap (env STANDSEG_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="standseg", description="Forest stand segmentation pipeline")
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate a synthetic scene")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--stands", dest="n_stands", type=int)
    p.add_argument("--noise", dest="spectral_noise", type=float)

    p = add("build-chm", cmd_build_chm, "canopy height model from an XYZ point file")
    p.add_argument("--points")
    p.add_argument("--grid", help="raster whose grid the CHM should share")

    p = add("downsample", cmd_downsample, "block-mean downsampling")
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--factor", type=int, default=4, help="block size per axis (0.25 m to 1 m is 4)")

    p = add("stack", cmd_stack, "stack 4 spectral bands and the CHM")
    p.add_argument("--image")
    p.add_argument("--chm")

    p = add("tile", cmd_tile, "normalise and cut the composite into tiles")
    p.add_argument("--composite")
    p.add_argument("--size", type=int)
    p.add_argument("--stands", help="stand polygons (GeoJSON) for the masks")
    p.add_argument("--mask", help="class raster for the masks")
    p.add_argument("--chm-max", type=float)

    p = add("split", cmd_split, "assign tiles to train/val/test")
    p.add_argument("--tiles")
    p.add_argument("--fractions")

    for name, fn, help_ in (("train", cmd_train, "train a U-Net"), ("tune", cmd_tune, "hyperparameter search")):
        p = add(name, fn, help_)
        p.add_argument("--tiles")
        p.add_argument("--split-file")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--base-filters", type=int)
        p.add_argument("--depth", type=int)
        p.add_argument("--filter-size", type=int)
        p.add_argument("--dropout", type=float)
        p.add_argument("--no-augment", action="store_true")
        if name == "tune":
            p.add_argument("--trials", type=int, default=20)

    p = add("evaluate", cmd_evaluate, "metrics for a checkpoint on one split")
    p.add_argument("--checkpoint")
    p.add_argument("--tiles")
    p.add_argument("--split-file")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = add("predict", cmd_predict, "full-scene class map by stitched tile inference")
    p.add_argument("--checkpoint")
    p.add_argument("--composite")
    p.add_argument("--size", type=int)
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--chm-max", type=float)
    p.add_argument("--reference", help="class raster to score the prediction against")

    p = add("vectorize", cmd_vectorize, "class raster to stand polygons")
    p.add_argument("--classes")
    p.add_argument("--min-area-ha", type=float, default=DEFAULT_MIN_AREA_HA)

    p = add("report", cmd_report, "metrics JSON, confusion CSV and history chart")
    p.add_argument("--metrics")
    p.add_argument("--history")
    return parser


def _thread_limit(args) -> int | None:
    if args.threads is not None:
        n = args.threads
    elif os.environ.get("STANDSEG_THREADS"):
        try:
            n = int(os.environ["STANDSEG_THREADS"])
        except ValueError:
            raise InputError(f"STANDSEG_THREADS must be an integer, got {os.environ['STANDSEG_THREADS']!r}") from None
    else:
        return None
    if n < 1:
        raise InputError(f"thread count must be >= 1, got {n}")
    return n


def _fail(exc: Exception, code: int) -> int:
    msg = " ".join(str(exc).split())
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "exit_code": code, "message": msg}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = PipelineConfig.load(args.config)
        if args.workdir == "." and cfg.paths.get("workdir"):
            args.workdir = cfg.paths["workdir"]
        limit = _thread_limit(args)
        Path(args.workdir).mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=limit):
            args.func(args, cfg)
    except StandsegError as exc:
        return _fail(exc, exc.exit_code)
    except (OSError, ValueError) as exc:
        return _fail(exc, 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
