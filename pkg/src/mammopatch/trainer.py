"""Deterministic minibatch training with per-epoch history and evaluation.

Training is reproducible bit-for-bit given (spec, data, config): parameter
init, batch order, and augmentation draws all derive from the config seed
through independent named streams. Augmentation, when enabled, applies to
training batches only; validation and test images always pass through
unchanged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentPolicy, random_augment
from .engine.network import Network
from .engine.optim import Adam
from .errors import ConfigError, InputError, TrainingDivergedError
from .modelkit import ModelSpec, instantiate
from .patchset import Label, PatchRecord

HISTORY_COLUMNS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]

# stream tag separating batch-order draws from any other consumer of the seed
_SHUFFLE_STREAM = 2


@dataclass
class TrainConfig:
    """Knobs of one training run; epochs default to 15, or 30 with augmentation."""

    batch_size: int = 32
    epochs: int = 15
    learning_rate: float = 1e-3
    seed: int = 0
    augment_policy: AugmentPolicy | None = None
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1 when set")

    def to_dict(self) -> dict:
        out = {
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "early_stop_patience": self.early_stop_patience,
            "augment_policy": (
                self.augment_policy.to_dict() if self.augment_policy else None
            ),
        }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config field(s): {sorted(unknown)}")
        kwargs = dict(data)
        if kwargs.get("augment_policy") is not None:
            kwargs["augment_policy"] = AugmentPolicy.from_dict(kwargs["augment_policy"])
        return cls(**kwargs)


@dataclass
class TrainHistory:
    """Per-epoch loss/accuracy curves (the loss-vs-epoch plot source data)."""

    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)

    def append(self, epoch, train_loss, train_acc, val_loss, val_acc) -> None:
        for name, value in (("train_acc", train_acc), ("val_acc", val_acc)):
            if not 0.0 <= value <= 1.0:
                raise InputError(f"{name} out of [0, 1]: {value}")
        self.epoch.append(int(epoch))
        self.train_loss.append(float(train_loss))
        self.train_acc.append(float(train_acc))
        self.val_loss.append(float(val_loss))
        self.val_acc.append(float(val_acc))

    def __len__(self) -> int:
        return len(self.epoch)

    def rows(self) -> list[tuple]:
        return list(zip(self.epoch, self.train_loss, self.train_acc,
                        self.val_loss, self.val_acc))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_COLUMNS)
            for epoch, tl, ta, vl, va in self.rows():
                writer.writerow([epoch, repr(tl), repr(ta), repr(vl), repr(va)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "TrainHistory":
        history = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != HISTORY_COLUMNS:
                raise InputError(
                    f"history file {path}: expected columns {','.join(HISTORY_COLUMNS)}"
                )
            for row in reader:
                history.append(int(row["epoch"]), float(row["train_loss"]),
                               float(row["train_acc"]), float(row["val_loss"]),
                               float(row["val_acc"]))
        return history


@dataclass
class EvalResult:
    """Accuracy at a threshold plus the raw per-record scores behind it."""

    accuracy: float
    ids: list[str]
    labels: np.ndarray
    scores: np.ndarray


def records_to_arrays(records: list[PatchRecord]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Stack records into (images, binary labels, ids); label 1 = pathological."""
    if not records:
        raise InputError("no records given")
    x = np.stack([rec.image for rec in records]).astype(np.float32)[..., None]
    y = np.array([1.0 if rec.label is Label.PATHOLOGICAL else 0.0 for rec in records],
                 dtype=np.float32)
    return x, y, [rec.id for rec in records]


def _augment_batch(x_train, indices, policy, epoch, n_train):
    """Augmented copies of the selected rows; draw index = epoch * n + row."""
    out = np.empty((len(indices),) + x_train.shape[1:], dtype=x_train.dtype)
    for j, i in enumerate(indices):
        out[j, :, :, 0] = random_augment(
            x_train[i, :, :, 0], policy, epoch * n_train + int(i)
        )
    return out


def train(
    spec: ModelSpec,
    train_records: list[PatchRecord],
    val_records: list[PatchRecord],
    config: TrainConfig,
) -> tuple[Network, TrainHistory]:
    """Minibatch gradient descent on binary cross-entropy; returns model + history.

    Per-epoch train loss/accuracy are running means over the epoch's
    minibatches (each batch measured before its update); validation metrics
    come from a full pass in inference mode after the epoch.
    """
    if not train_records or not val_records:
        raise InputError("train and validation splits must be non-empty")
    x_train, y_train, _ = records_to_arrays(train_records)
    x_val, y_val, _ = records_to_arrays(val_records)
    if y_train.min() == y_train.max():
        raise InputError("training data contains a single class; cannot fit a classifier")

    network = instantiate(spec, seed=config.seed)
    optimizer = Adam(network.params(), lr=config.learning_rate)
    history = TrainHistory()
    n = len(train_records)
    best_val = np.inf
    since_best = 0
    for epoch in range(config.epochs):
        perm = np.random.default_rng([config.seed, _SHUFFLE_STREAM, epoch]).permutation(n)
        loss_sum = 0.0
        acc_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            if config.augment_policy is not None:
                xb = _augment_batch(x_train, idx, config.augment_policy, epoch, n)
            else:
                xb = x_train[idx]
            loss, acc = network.loss_and_grads(xb, y_train[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"model {spec.name!r}: loss became {loss} at epoch {epoch + 1}, "
                    f"batch {start // config.batch_size + 1}; try a lower learning rate"
                )
            optimizer.step()
            loss_sum += loss * len(idx)
            acc_sum += acc * len(idx)
        val_loss, val_acc = network.evaluate_loss_acc(x_val, y_val)
        history.append(epoch + 1, loss_sum / n, acc_sum / n, val_loss, val_acc)
        if config.early_stop_patience is not None:
            if val_loss < best_val:
                best_val = val_loss
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.early_stop_patience:
                    break
    return network, history


def evaluate(network: Network, records: list[PatchRecord],
             threshold: float = 0.5) -> EvalResult:
    """Accuracy under score >= threshold, plus raw probabilities per record."""
    if not records:
        raise InputError("cannot evaluate an empty split")
    if not 0.0 <= threshold <= 1.0:
        raise InputError(f"threshold must be in [0, 1], got {threshold}")
    x, y, ids = records_to_arrays(records)
    scores = network.predict_proba(x)
    pred = scores >= threshold
    accuracy = float(np.mean(pred == (y > 0.5)))
    return EvalResult(accuracy=accuracy, ids=ids,
                      labels=y.astype(np.int64), scores=scores.astype(np.float64))
