"""Two-phase training: heads on frozen encoders first, then everything unfrozen.

Each phase gets a fresh optimizer whose warm-up is computed over that phase's
own step budget, and stops early once the monitored metric (mean validation
macro F1 over the five heads) has not strictly improved for ``patience``
epochs. The best weights of phase 1 seed phase 2; the overall best weights
are returned.

While the encoders are frozen their outputs cannot change, so phase 1 runs
the encoders once over the data and trains the heads on the cached features.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from .dataio.labels import TASKS
from .dataio.sample import MemeSample, collate
from .errors import CheckpointError, ConfigError, InputError, NumericalError
from .fusion import MemeModel
from .metrics import per_head_macro_f1
from .optim import Optimizer, OptimizerConfig, compute_class_weights, label_histograms, lr_at_step, total_loss
from .tensor import Tape, Tensor, make_rng

log = logging.getLogger(__name__)

PHASES = ("frozen", "unfrozen")
SPLIT_STREAM = 5
SHUFFLE_STREAM = 6
FEATURE_CHUNK = 32


@dataclass
class TrainConfig:
    phase1_lr: float = 5e-4
    phase2_lr: float = 5e-5
    patience: int = 30
    batch_size: int = 16
    max_epochs_per_phase: int = 100
    validation_fraction: float = 0.1
    seed: int = 0
    phases: tuple = PHASES
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def validate(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in (0, 1)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs_per_phase < 1:
            raise ConfigError("batch_size and max_epochs_per_phase must be >= 1")
        self.phases = tuple(self.phases)
        if not self.phases or any(p not in PHASES for p in self.phases):
            raise ConfigError(f"phases must be drawn from {PHASES}, got {self.phases}")
        self.optimizer.validate()
        return self

    def lr_for(self, phase: str) -> float:
        return self.phase1_lr if phase == "frozen" else self.phase2_lr


# --- split / freeze ----------------------------------------------------------------------


def split_train_validation(samples, fraction: float = 0.1, seed: int = 0):
    """Random disjoint split; the validation part has ``round(fraction * N)`` samples."""
    n = len(samples)
    if n < 10:
        raise InputError(f"need at least 10 samples to split, got {n}")
    if not 0.0 < fraction < 1.0:
        raise InputError("validation fraction must be in (0, 1)")
    n_val = int(round(fraction * n))
    order = make_rng(seed, SPLIT_STREAM).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


def set_phase(model: MemeModel, phase: str) -> MemeModel:
    """``frozen``: only the heads train. ``unfrozen``: every parameter trains."""
    if phase not in PHASES:
        raise ConfigError(f"phase must be one of {PHASES}, got {phase!r}")
    encoders = set(model.encoder_parameter_names())
    for name, t in model.named_parameters():
        t.trainable = phase == "unfrozen" or name not in encoders
    return model


class EarlyStopping:
    """Counts epochs without a strict improvement; stops when the count reaches ``patience``."""

    def __init__(self, patience: int, best: float = -math.inf, epochs_since: int = 0):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = patience
        self.best = best
        self.epochs_since = epochs_since

    def update(self, metric: float) -> bool:
        """Record one epoch's metric and report whether it improved."""
        if metric > self.best:
            self.best = metric
            self.epochs_since = 0
            return True
        self.epochs_since += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.epochs_since >= self.patience


# --- state -------------------------------------------------------------------------------


@dataclass
class TrainState:
    phase_index: int = 0
    epoch: int = 0  # epochs completed in the current phase
    global_epoch: int = 0
    global_step: int = 0
    phase_finished: bool = False
    best_metric: float = -math.inf
    best_epoch: int = 0
    stopper_best: float = -math.inf
    epochs_since_improvement: int = 0

    def phase(self, config: TrainConfig) -> str:
        return config.phases[min(self.phase_index, len(config.phases) - 1)]


@dataclass
class EpochLog:
    epoch: int
    phase: str
    lr: float
    train_loss: dict[str, float]
    val_f1: dict[str, float]
    monitored: float

    def line(self) -> str:
        cells = [str(self.epoch), self.phase, f"{self.lr:.8g}"]
        cells += [f"{self.train_loss[t]:.6f}" for t in TASKS]
        cells += [f"{self.val_f1[t]:.6f}" for t in TASKS]
        cells.append(f"{self.monitored:.6f}")
        return "\t".join(cells)

    @staticmethod
    def header() -> str:
        return "\t".join(["epoch", "phase", "lr"] + [f"loss_{t}" for t in TASKS] + [f"f1_{t}" for t in TASKS] + ["monitored"])


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_metric: float
    log: list[EpochLog]
    state: TrainState
    class_weights: dict[str, np.ndarray]
    halted: bool = False

    def log_text(self) -> str:
        return "\n".join([EpochLog.header()] + [e.line() for e in self.log]) + "\n"


# --- epoch mechanics ---------------------------------------------------------------------


def _features(model: MemeModel, samples: list[MemeSample]) -> np.ndarray:
    chunks = [model.encode(collate(samples[i : i + FEATURE_CHUNK])).values for i in range(0, len(samples), FEATURE_CHUNK)]
    return np.concatenate(chunks)


class _Data:
    """Training/validation views; holds cached encoder features while frozen."""

    def __init__(self, train: list[MemeSample], val: list[MemeSample]):
        self.train, self.val = train, val
        self.train_labels = np.array([s.labels.as_tuple() for s in train], dtype=np.int64)
        self.val_labels = np.array([s.labels.as_tuple() for s in val], dtype=np.int64)
        self.train_feats = self.val_feats = None

    def cache(self, model: MemeModel):
        self.train_feats = _features(model, self.train)
        self.val_feats = _features(model, self.val)

    def drop_cache(self):
        self.train_feats = self.val_feats = None

    def forward_train(self, model: MemeModel, idx: np.ndarray):
        if self.train_feats is not None:
            return model.heads(Tensor(self.train_feats[idx]), train=True, rng=model.rng)
        return model.forward(collate([self.train[i] for i in idx]), train=True)

    def predict_val(self, model: MemeModel, batch_size: int) -> np.ndarray:
        preds = []
        for start in range(0, len(self.val), batch_size):
            if self.val_feats is not None:
                probs = model.heads(Tensor(self.val_feats[start : start + batch_size]), train=False)
            else:
                probs = model.forward(collate(self.val[start : start + batch_size]), train=False)
            preds.append(np.stack([probs[t].values.argmax(axis=-1) for t in TASKS], axis=1))
        return np.concatenate(preds)


def _run_epoch(model, data: _Data, optimizer: Optimizer, order_rng, weights, cfg: TrainConfig,
               state: TrainState, total_steps: int, phase: str):
    n = len(data.train)
    order = order_rng.permutation(n)
    sums = {t: 0.0 for t in TASKS}
    seen = 0
    lr = 0.0
    for b, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        with Tape() as tape:
            outputs = data.forward_train(model, idx)
            report = total_loss(outputs, data.train_labels[idx], weights)
            values = report.values()
            for task in TASKS:
                if not np.isfinite(values[task]):
                    ids = [data.train[i].id for i in idx[:3]]
                    raise NumericalError(
                        f"non-finite loss in head {task!r} at {phase} epoch {state.epoch + 1}, "
                        f"batch {b} (first samples {ids})"
                    )
            optimizer.zero_grad()
            tape.backward(report.total)
        lr = lr_at_step(optimizer.state.step + 1, total_steps, optimizer.config)
        optimizer.step(lr)
        state.global_step += 1
        for task in TASKS:
            sums[task] += values[task] * len(idx)
        seen += len(idx)
    return {t: sums[t] / seen for t in TASKS}, lr


# --- checkpoints -------------------------------------------------------------------------


def _save_last(path: Path, model, optimizer, best_state, state: TrainState, log_rows, shuffle_rng):
    arrays = ckpt.model_arrays(model)
    arrays.update({f"best/{k}": v for k, v in best_state.items()})
    arrays.update({f"optim/{k}": v for k, v in optimizer.state_arrays().items()})
    meta = {
        "kind": "train",
        "model_config": model.config.to_dict(),
        "train_state": asdict(state),
        "optimizer_step": optimizer.state.step,
        "dropout_rng": model.rng.bit_generator.state,
        "shuffle_rng": shuffle_rng.bit_generator.state,
        "log": [asdict(e) for e in log_rows],
    }
    tmp = path.with_suffix(".tmp")
    ckpt.save_checkpoint(tmp, arrays, meta)
    tmp.replace(path)


def _float(v):
    return -math.inf if v is None else float(v)


def _load_state(meta) -> TrainState:
    raw = dict(meta["train_state"])
    for k in ("best_metric", "stopper_best"):
        raw[k] = _float(raw[k])
    return TrainState(**raw)


# --- driver ------------------------------------------------------------------------------


def train_two_phase(
    model: MemeModel,
    train: list[MemeSample],
    val: list[MemeSample],
    config: TrainConfig,
    out_dir=None,
    resume_from=None,
    halt: Callable[[TrainState], bool] | None = None,
) -> TrainResult:
    """Run the configured phases and leave the overall best weights loaded in ``model``.

    ``out_dir`` receives ``last.ckpt`` after every epoch, plus ``best.ckpt`` and
    ``train_log.tsv``. ``resume_from`` continues from a ``last.ckpt``. ``halt``
    is consulted after every epoch; returning True stops the run there (as if
    interrupted), with ``TrainResult.halted`` set.
    """
    config.validate()
    if not train or not val:
        raise InputError("training and validation sets must both be non-empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    weights = compute_class_weights(label_histograms([s.labels for s in train]))
    data = _Data(train, val)
    shuffle_rng = make_rng(config.seed, SHUFFLE_STREAM)
    state = TrainState()
    log_rows: list[EpochLog] = []
    best_state = model.state_dict()
    optimizer = None
    resumed = False

    if resume_from is not None:
        arrays, meta = ckpt.load_checkpoint(resume_from)
        if meta.get("kind") != "train":
            raise CheckpointError(f"{resume_from}: not a training checkpoint")
        model.load_state_dict(ckpt.strip_prefix(arrays, "param/"))
        best_state = ckpt.strip_prefix(arrays, "best/")
        state = _load_state(meta)
        model.rng.bit_generator.state = meta["dropout_rng"]
        shuffle_rng.bit_generator.state = meta["shuffle_rng"]
        log_rows = [EpochLog(**e) for e in meta["log"]]
        if state.phase_finished:
            state.phase_index += 1
            state.epoch = 0
            state.phase_finished = False
        else:
            resumed = True
            optimizer = Optimizer(model.named_parameters(), config.optimizer)
            optimizer.load_state_arrays(meta["optimizer_step"], ckpt.strip_prefix(arrays, "optim/"))

    halted = False
    while state.phase_index < len(config.phases):
        phase = config.phases[state.phase_index]
        set_phase(model, phase)
        opt_cfg = dataclasses.replace(config.optimizer, peak_lr=config.lr_for(phase))
        if resumed:
            optimizer.config = opt_cfg.validate()
            resumed = False
        else:
            if state.phase_index > 0:
                model.load_state_dict(best_state)
            optimizer = Optimizer(model.named_parameters(), opt_cfg)
            state.stopper_best = state.best_metric
            state.epochs_since_improvement = 0
        if phase == "frozen":
            data.cache(model)
        else:
            data.drop_cache()
        stopper = EarlyStopping(config.patience, state.stopper_best, state.epochs_since_improvement)
        steps_per_epoch = math.ceil(len(train) / config.batch_size)
        total_steps = steps_per_epoch * config.max_epochs_per_phase

        while state.epoch < config.max_epochs_per_phase and not stopper.should_stop:
            losses, lr = _run_epoch(model, data, optimizer, shuffle_rng, weights, config, state, total_steps, phase)
            state.epoch += 1
            state.global_epoch += 1
            val_f1 = per_head_macro_f1(data.predict_val(model, FEATURE_CHUNK), data.val_labels)
            monitored = float(np.mean([val_f1[t] for t in TASKS]))
            stopper.update(monitored)
            state.stopper_best, state.epochs_since_improvement = stopper.best, stopper.epochs_since
            if monitored > state.best_metric:
                state.best_metric, state.best_epoch = monitored, state.global_epoch
                best_state = model.state_dict()
            row = EpochLog(state.global_epoch, phase, lr, losses, val_f1, monitored)
            log_rows.append(row)
            log.info("epoch %d (%s) lr=%.3g monitored=%.4f", row.epoch, phase, lr, monitored)
            state.phase_finished = stopper.should_stop or state.epoch >= config.max_epochs_per_phase
            if out is not None:
                _save_last(out / "last.ckpt", model, optimizer, best_state, state, log_rows, shuffle_rng)
            if halt is not None and halt(state):
                halted = True
                break
        if halted:
            break
        state.phase_index += 1
        state.epoch = 0
        state.phase_finished = False

    data.drop_cache()
    if not halted:
        model.load_state_dict(best_state)
    result = TrainResult(best_state, state.best_metric, log_rows, state, weights, halted)
    if out is not None:
        (out / "train_log.tsv").write_text(result.log_text(), encoding="utf-8")
        if not halted:
            ckpt.save_checkpoint(
                out / "best.ckpt",
                {f"param/{k}": v for k, v in best_state.items()},
                {"kind": "model", "model_config": model.config.to_dict(), "best_metric": state.best_metric,
                 "best_epoch": state.best_epoch},
            )
    return result


def training_accuracy(model: MemeModel, samples: list[MemeSample], batch_size: int = 32) -> dict[str, float]:
    """Per-head argmax accuracy in eval mode."""
    hits = {t: 0 for t in TASKS}
    for start in range(0, len(samples), batch_size):
        batch = collate(samples[start : start + batch_size])
        pred = model.predict(batch)
        for i, t in enumerate(TASKS):
            hits[t] += int((pred[:, i] == batch.labels[:, i]).sum())
    return {t: hits[t] / len(samples) for t in TASKS}
