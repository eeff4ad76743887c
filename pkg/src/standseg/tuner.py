"""Random-search hyperparameter study with median pruning and a replayable journal.

journal.jsonl holds one JSON object per event::

    {"event": "start",  "trial": i, "params": {...}}
    {"event": "report", "trial": i, "epoch": e, "value": v}
    {"event": "finish", "trial": i, "status": "complete" | "pruned" | "failed", ...}

A ``start`` for a trial that never finished discards its earlier reports, so
a study killed mid-trial resumes by re-running only that trial.
"""

from __future__ import annotations

import json
import logging
import math
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import InputError, NumericError
from .losses import LossParams
from .preprocess import TileSet
from .trainer import TrainConfig, train
from .unet import UNetConfig, build_model

log = logging.getLogger(__name__)

N_STARTUP_TRIALS = 10
N_WARMUP_EPOCHS = 30
FILTER_SIZES = (3, 5, 7)


@dataclass(frozen=True)
class SearchSpace:
    base_filters: tuple[int, int] = (8, 32)
    filter_sizes: tuple[int, ...] = FILTER_SIZES
    learning_rate: tuple[float, float] = (1e-5, 1e-3)
    dropout_rate: tuple[float, float] = (0.0, 0.5)
    alpha: tuple[float, float] = (0.3, 0.7)
    gamma: tuple[float, float] = (1.0, 3.0)

    def validate(self) -> None:
        lo, hi = self.base_filters
        if not 1 <= lo <= hi:
            raise InputError(f"bad base_filters interval {self.base_filters}")
        if not self.filter_sizes or any(k % 2 == 0 or k < 1 for k in self.filter_sizes):
            raise InputError(f"filter sizes must be odd, got {self.filter_sizes}")
        if not 0 < self.learning_rate[0] <= self.learning_rate[1]:
            raise InputError(f"bad learning-rate interval {self.learning_rate}")
        for name in ("dropout_rate", "alpha", "gamma"):
            a, b = getattr(self, name)
            if a > b:
                raise InputError(f"bad {name} interval {(a, b)}")

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(**{k: tuple(v) for k, v in d.items() if k in cls.__dataclass_fields__})


def sample_params(space: SearchSpace, trial_index: int, seed: int) -> dict:
    """Independent draws, deterministic in (seed, trial_index); beta = 1 - alpha."""
    rng = np.random.default_rng([seed, trial_index])
    lr_lo, lr_hi = (math.log10(v) for v in space.learning_rate)
    alpha = float(rng.uniform(*space.alpha))
    return {
        "base_filters": int(rng.integers(space.base_filters[0], space.base_filters[1] + 1)),
        "filter_size": int(rng.choice(space.filter_sizes)),
        "learning_rate": float(10.0 ** rng.uniform(lr_lo, lr_hi)),
        "dropout_rate": float(rng.uniform(*space.dropout_rate)),
        "alpha": alpha,
        "beta": 1.0 - alpha,
        "gamma": float(rng.uniform(*space.gamma)),
    }


@dataclass
class Trial:
    index: int
    params: dict
    values: dict[int, float] = field(default_factory=dict)
    status: str = "running"
    pruned_epoch: int | None = None
    error: str | None = None

    @property
    def best_value(self) -> float | None:
        return max(self.values.values()) if self.values else None

    @property
    def finished(self) -> bool:
        return self.status in ("complete", "pruned", "failed")


class TrialJournal:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.trials: dict[int, Trial] = {}
        if self.path and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    self._apply(json.loads(line))

    def _apply(self, ev: dict) -> None:
        i = ev["trial"]
        kind = ev["event"]
        if kind == "start":
            self.trials[i] = Trial(i, ev["params"])
        elif kind == "report":
            self.trials[i].values[int(ev["epoch"])] = float(ev["value"])
        elif kind == "finish":
            t = self.trials[i]
            t.status = ev["status"]
            t.pruned_epoch = ev.get("pruned_epoch")
            t.error = ev.get("error")

    def _emit(self, ev: dict) -> None:
        self._apply(ev)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")

    def start(self, index: int, params: dict) -> None:
        self._emit({"event": "start", "trial": index, "params": params})

    def report(self, index: int, epoch: int, value: float) -> None:
        self._emit({"event": "report", "trial": index, "epoch": epoch, "value": value})

    def finish(self, index: int, status: str, pruned_epoch: int | None = None, error: str | None = None) -> None:
        ev = {"event": "finish", "trial": index, "status": status}
        if pruned_epoch is not None:
            ev["pruned_epoch"] = pruned_epoch
        if error is not None:
            ev["error"] = error
        self._emit(ev)

    def ordered(self) -> list[Trial]:
        return [self.trials[i] for i in sorted(self.trials)]

    def best_trial(self) -> Trial | None:
        done = [t for t in self.ordered() if t.status == "complete" and t.values]
        if not done:
            return None
        return max(done, key=lambda t: (t.best_value, -t.index))

    def summary(self) -> dict:
        best = self.best_trial()
        return {
            "n_trials": len(self.trials),
            "status_counts": {
                s: sum(t.status == s for t in self.trials.values()) for s in ("complete", "pruned", "failed", "running")
            },
            "best_trial": None
            if best is None
            else {"trial": best.index, "best_val_mmcc": best.best_value, "params": best.params},
        }


def should_prune(
    journal: TrialJournal,
    trial_index: int,
    epoch: int,
    value: float,
    n_startup_trials: int = N_STARTUP_TRIALS,
    n_warmup_epochs: int = N_WARMUP_EPOCHS,
) -> bool:
    """Median rule over prior trials' values at the same (1-based) epoch."""
    if not math.isfinite(value):
        raise ValueError(f"cannot judge a non-finite value {value}")
    if trial_index < n_startup_trials or epoch <= n_warmup_epochs:
        return False
    prior = [t.values[epoch] for i, t in journal.trials.items() if i < trial_index and epoch in t.values]
    if not prior:
        return False
    return value < statistics.median(prior)


class TrialPruned(Exception):
    def __init__(self, epoch: int):
        super().__init__(f"pruned at epoch {epoch}")
        self.epoch = epoch


# runner(trial_index, params, report) trains one trial, calling report(epoch, val_mmcc)
Runner = Callable[[int, dict, Callable[[int, float], None]], None]


def unet_runner(tileset: TileSet, base: TrainConfig, model_defaults: UNetConfig, seed: int) -> Runner:
    def run(index: int, params: dict, report: Callable[[int, float], None]) -> None:
        cfg = replace(
            model_defaults,
            base_filters=params["base_filters"],
            filter_size=params["filter_size"],
            dropout_rate=params["dropout_rate"],
        )
        trial_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
        model = build_model(cfg, trial_seed)
        config = replace(
            base,
            learning_rate=params["learning_rate"],
            loss=LossParams(params["alpha"], params["gamma"]),
            seed=trial_seed,
            checkpoint_dir=None,
        )
        train(model, tileset, config, on_epoch=lambda rec: report(rec.epoch, rec.val_mmcc))

    return run


def run_study(
    space: SearchSpace,
    n_trials: int,
    tileset: TileSet | None = None,
    base_config: TrainConfig | None = None,
    seed: int = 0,
    journal_path=None,
    model_defaults: UNetConfig = UNetConfig(),
    runner: Runner | None = None,
) -> TrialJournal:
    """Run trials sequentially, skipping any the journal already finished."""
    if n_trials < 1:
        raise InputError("n_trials must be >= 1")
    space.validate()
    if runner is None:
        if tileset is None or base_config is None:
            raise InputError("run_study needs a tileset and base TrainConfig when no runner is given")
        runner = unet_runner(tileset, base_config, model_defaults, seed)
    journal = TrialJournal(journal_path)
    for index in range(n_trials):
        existing = journal.trials.get(index)
        if existing is not None and existing.finished:
            continue
        params = sample_params(space, index, seed)
        journal.start(index, params)

        def report(epoch: int, value: float, index=index) -> None:
            journal.report(index, epoch, value)
            if should_prune(journal, index, epoch, value):
                raise TrialPruned(epoch)

        try:
            runner(index, params, report)
        except TrialPruned as exc:
            journal.finish(index, "pruned", pruned_epoch=exc.epoch)
            log.info("trial %d pruned at epoch %d", index, exc.epoch)
        except NumericError as exc:
            journal.finish(index, "failed", error=str(exc))
            log.warning("trial %d failed: %s", index, exc)
        else:
            journal.finish(index, "complete")
    return journal
