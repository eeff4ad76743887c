"""Mini-batch training with per-epoch validation and best-mMCC checkpointing."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .augment import AugmentConfig, augment_arrays
from .autodiff import Adam
from .errors import InputError, NumericError
from .losses import LossParams, focal_tversky_loss
from .metrics import ConfusionMatrix, confusion_matrix, macro_mcc, metrics_report, overall_accuracy
from .preprocess import TileSet
from .unet import UNetModel, forward, save_weights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 80
    batch_size: int = 16
    learning_rate: float = 1e-4
    loss: LossParams = field(default_factory=LossParams)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    checkpoint_dir: str | None = None

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 1:
            raise InputError("batch_size and max_epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise InputError(f"learning_rate must be non-negative, got {self.learning_rate}")
        self.loss.validate()
        self.augment.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossParams(**{k: v for k, v in d["loss"].items() if k != "beta"})
        if "augment" in d:
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"]["beta"] = self.loss.beta
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_mmcc: float
    val_oa: float
    train_mmcc: float
    train_oa: float
    wall_time: float = 0.0

    def to_json(self) -> str:
        # wall_time is kept out of history.jsonl so identical runs give identical files
        d = asdict(self)
        d.pop("wall_time")
        return json.dumps(d, sort_keys=True)


Predictor = Callable[[np.ndarray], np.ndarray]


def _predict(model, x: np.ndarray, batch_size: int) -> np.ndarray:
    if isinstance(model, UNetModel):
        return np.concatenate(
            [forward(model, x[i : i + batch_size], "infer").data for i in range(0, len(x), batch_size)]
        )
    return np.asarray(model(x))


def evaluate_split(model, tileset: TileSet, split: str, params: LossParams = LossParams(), batch_size: int = 16):
    """Inference-mode loss (mean over tiles), hard confusion matrix, and metrics.

    ``model`` is a :class:`UNetModel` or any callable mapping (n, 5, S, S)
    inputs to (n, N, S, S) probabilities.
    """
    x, masks = tileset.arrays(split)
    if len(x) == 0:
        raise InputError(f"split {split!r} is empty")
    probs = _predict(model, x, batch_size)
    losses = [float(focal_tversky_loss(probs[i : i + 1], masks[i : i + 1], params).data) for i in range(len(x))]
    n = tileset.scheme.n
    cm = confusion_matrix(probs.argmax(axis=1), masks.argmax(axis=1), n, ignore=None)
    return float(np.mean(losses)), cm, metrics_report(cm, tileset.scheme)


class CheckpointWriter:
    def __init__(self, directory: str | None):
        self.dir = Path(directory) if directory else None
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)
            (self.dir / "history.jsonl").write_text("")
            (self.dir / "timings.jsonl").write_text("")

    def record(self, rec: EpochRecord) -> None:
        if self.dir:
            with open(self.dir / "history.jsonl", "a") as fh:
                fh.write(rec.to_json() + "\n")
            with open(self.dir / "timings.jsonl", "a") as fh:
                fh.write(json.dumps({"epoch": rec.epoch, "wall_time": rec.wall_time}) + "\n")

    def save(self, model: UNetModel, epoch: int) -> None:
        if self.dir:
            save_weights(model, self.dir / f"epoch-{epoch:04d}.unw")
            save_weights(model, self.dir / "best.unw")


def train(
    model: UNetModel,
    tileset: TileSet,
    config: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[UNetModel, list[EpochRecord]]:
    """Train in place; return a copy of the best-validation-mMCC model and the history.

    ``on_epoch`` runs after each epoch's record is written; raising from it
    stops training (the tuner uses this for pruning).
    """
    config.validate()
    x_train, m_train = tileset.arrays("train")
    x_val, m_val = tileset.arrays("val")
    if len(x_train) == 0 or len(x_val) == 0:
        raise InputError("training needs non-empty train and val splits")
    keys = [(t.row, t.col) for t in tileset.subset("train")]
    n_classes = tileset.scheme.n
    optimizer = Adam(model.parameters(), config.learning_rate)
    dropout_rng = np.random.default_rng([config.seed, 1])
    writer = CheckpointWriter(config.checkpoint_dir)
    history: list[EpochRecord] = []
    best_model, best_mmcc = None, -math.inf
    bs = config.batch_size
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, 0, epoch]).permutation(len(x_train))
        xe, me = augment_arrays(x_train[order], m_train[order], [keys[i] for i in order], config.augment, epoch)
        loss_sum = 0.0
        train_cm = ConfusionMatrix(np.zeros((n_classes, n_classes), dtype=np.int64))
        for b, start in enumerate(range(0, len(xe), bs)):
            xb, mb = xe[start : start + bs], me[start : start + bs]
            probs = forward(model, xb, "train", dropout_rng)
            loss = focal_tversky_loss(probs, mb, config.loss)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            try:
                optimizer.step()
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from None
            loss_sum += value * len(xb)
            train_cm = train_cm + confusion_matrix(probs.data.argmax(axis=1), mb.argmax(axis=1), n_classes, None)
        val_loss, val_cm, _ = evaluate_split(model, tileset, "val", config.loss, bs)
        rec = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / len(xe),
            val_loss=val_loss,
            val_mmcc=macro_mcc(val_cm),
            val_oa=overall_accuracy(val_cm),
            train_mmcc=macro_mcc(train_cm),
            train_oa=overall_accuracy(train_cm),
            wall_time=time.perf_counter() - t0,
        )
        history.append(rec)
        writer.record(rec)
        log.info(
            "epoch %d loss %.4f val_loss %.4f val_mmcc %.4f val_oa %.4f",
            epoch, rec.train_loss, rec.val_loss, rec.val_mmcc, rec.val_oa,
        )
        if rec.val_mmcc > best_mmcc:
            best_mmcc = rec.val_mmcc
            best_model = model.copy()
            writer.save(best_model, epoch)
        if on_epoch is not None:
            on_epoch(rec)
    return best_model, history


def best_epoch(history: list[EpochRecord]) -> int:
    """Epoch with the highest val_mmcc; ties go to the earlier epoch."""
    best = max(history, key=lambda r: (r.val_mmcc, -r.epoch))
    return best.epoch


def write_history(history: list[EpochRecord], path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in history))


def read_history(path) -> list[EpochRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(EpochRecord(**json.loads(line)))
    return records
