"""Mini-batch Nesterov SGD training, checkpoint averaging and hard-sample fine-tuning."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import AugmentConfig, augment_batch
from .layers import LayerParams, release_buffers
from .metrics import _auc
from .model import Checkpoint, Model

log = logging.getLogger(__name__)

BASE_LR = 0.019326


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = BASE_LR
    momentum: float = 0.9
    batch_size: int = 10
    epochs: int = 30
    lr_halving_epoch: int = 8
    lr_decay: str = "once"  # "once": halve a single time; "every": halve each later epoch
    seed: int = 1234
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    avg_auc_threshold: float = 0.94
    finetune_lr_scale: float = 1e-3
    finetune_epochs: int = 10

    def __post_init__(self):
        if self.base_lr <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("learning rate and batch size must be positive, epochs non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 < self.avg_auc_threshold < 1:
            raise ValueError("avg_auc_threshold must be in (0, 1)")
        if self.lr_decay not in ("once", "every"):
            raise ValueError("lr_decay must be 'once' or 'every'")


@dataclass
class FeatureSet:
    """Feature images (n, frames, bands) with their labels and item ids."""

    item_ids: list[str]
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.item_ids) != len(self.features) or len(self.labels) != len(self.features):
            raise ValueError("ids, features and labels must have equal length")

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "FeatureSet":
        index = np.asarray(index, dtype=np.int64)
        return FeatureSet([self.item_ids[i] for i in index], self.features[index], self.labels[index])

    def batch(self, index) -> tuple[np.ndarray, np.ndarray]:
        return self.features[index][:, None], self.labels[index]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float = math.nan
    valid_err: float = math.nan
    valid_auc: float = math.nan
    checkpoint: Checkpoint | None = field(default=None, repr=False)

    def csv_row(self) -> str:
        return f"{self.epoch},{self.train_loss:.6f},{self.valid_loss:.6f},{self.valid_err:.6f},{self.valid_auc:.6f}"


CSV_HEADER = "epoch,train_loss,valid_loss,valid_err,valid_auc"


@dataclass
class TrainResult:
    model: Model
    records: list[EpochRecord]

    @property
    def checkpoints(self) -> list[Checkpoint]:
        return [r.checkpoint for r in self.records if r.checkpoint is not None]

    def best(self) -> EpochRecord:
        return max(self.records, key=lambda r: (r.valid_auc, -r.epoch))


def nesterov_update(params: LayerParams, lr: float, momentum: float) -> None:
    """v <- mu*v - lr*g;  p <- p + mu*v - lr*g  (in place)."""
    for name, p in params.values.items():
        g = params.grads[name]
        v = params.velocity[name]
        v *= momentum
        v -= lr * g
        p += momentum * v - lr * g


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    if epoch < 1:
        raise ValueError("epochs are numbered from 1")
    if epoch <= config.lr_halving_epoch:
        return config.base_lr
    if config.lr_decay == "once":
        return config.base_lr / 2
    return config.base_lr / 2 ** (epoch - config.lr_halving_epoch)


def epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def predict_proba(model: Model, data: FeatureSet | np.ndarray, batch_size: int = 50) -> np.ndarray:
    """Positive-class probabilities in inference mode."""
    feats = data.features if isinstance(data, FeatureSet) else np.asarray(data, dtype=np.float32)
    out = np.empty(len(feats))
    for start in range(0, len(feats), batch_size):
        probs = model.forward(feats[start:start + batch_size][:, None], "inference")
        out[start:start + batch_size] = probs[:, 1]
    # a retained model would otherwise pin the last batch's activations
    release_buffers(model)
    return out


def evaluate(model: Model, data: FeatureSet) -> tuple[float, float, float]:
    """(mean cross-entropy, error rate, AUC) in inference mode."""
    p1 = predict_proba(model, data)
    y = data.labels
    p_true = np.where(y == 1, p1, 1 - p1)
    loss = float(-np.mean(np.log(np.clip(p_true, 1e-12, None))))
    err = float(np.mean((p1 >= 0.5).astype(int) != y))
    auc = _auc(p1, y) if 0 < y.sum() < len(y) else math.nan
    return loss, err, auc


def train(model: Model, train_set: FeatureSet, valid_set: FeatureSet | None, config: TrainConfig,
          keep_checkpoints: bool = True, lr_fn=None, on_epoch=None) -> TrainResult:
    """Run `config.epochs` epochs of shuffled, augmented mini-batch training.

    After each epoch the model is evaluated on `valid_set` in inference mode
    and, with `keep_checkpoints`, a snapshot is attached to the epoch record.
    """
    lr_fn = lr_fn or (lambda e: lr_schedule(e, config))
    for p in model.params:
        p.reset_velocity()
    n = len(train_set)
    records = []
    for epoch in range(1, config.epochs + 1):
        lr = lr_fn(epoch)
        order = epoch_rng(config.seed, epoch, 0).permutation(n)
        aug_rng = epoch_rng(config.seed, epoch, 1)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x, y = train_set.batch(idx)
            x = augment_batch(x, config.augment, aug_rng)
            loss, _ = model.loss_and_grads(x, y, train=True)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {b} (lr {lr:g})")
            for p in model.params:
                nesterov_update(p, lr, config.momentum)
            total += loss * len(idx)
        record = EpochRecord(epoch, total / max(n, 1))
        if valid_set is not None and len(valid_set):
            record.valid_loss, record.valid_err, record.valid_auc = evaluate(model, valid_set)
        if keep_checkpoints:
            record.checkpoint = model.checkpoint(record.valid_auc, epoch)
        records.append(record)
        log.info("epoch %d lr %.6g train_loss %.4f valid_loss %.4f valid_err %.4f valid_auc %.4f",
                 epoch, lr, record.train_loss, record.valid_loss, record.valid_err, record.valid_auc)
        if on_epoch is not None:
            on_epoch(record)
    release_buffers(model)
    return TrainResult(model, records)


def average_parameters(checkpoints: list[Checkpoint], auc_threshold: float = 0.94) -> dict[str, np.ndarray]:
    """Elementwise mean of every parameter and running statistic over the
    checkpoints whose validation AUC reaches `auc_threshold`."""
    chosen = [c for c in checkpoints if c.valid_auc >= auc_threshold]
    if not chosen:
        raise ValueError(f"no checkpoint reaches the AUC threshold {auc_threshold}")
    # Fixed order keeps the float sum independent of how the list was given.
    chosen.sort(key=lambda c: (c.epoch, c.valid_auc))
    keys = chosen[0].state.keys()
    return {
        k: np.mean([c.state[k].astype(np.float64) for c in chosen], axis=0).astype(np.float32)
        for k in keys
    }


def averaged_model(checkpoints: list[Checkpoint], auc_threshold: float = 0.94) -> Model:
    model = Model(checkpoints[0].config)
    model.load_state(average_parameters(checkpoints, auc_threshold))
    return model


def select_hard_samples(model: Model, data: FeatureSet) -> np.ndarray:
    """Indices of items whose inference-mode argmax disagrees with the label."""
    p1 = predict_proba(model, data)
    # argmax over (1 - p1, p1); an exact tie goes to class 0
    return np.flatnonzero((p1 > 1 - p1).astype(int) != data.labels)


def fine_tune(model: Model, hard_set: FeatureSet, config: TrainConfig) -> Model:
    """Continue training on the hard samples only, at base_lr * finetune_lr_scale."""
    if config.finetune_epochs == 0:
        return model
    if len(hard_set) == 0:
        raise ValueError("fine-tuning needs at least one hard sample")
    lr = config.base_lr * config.finetune_lr_scale
    ft_config = replace(config, epochs=config.finetune_epochs, seed=config.seed + 1)
    train(model, hard_set, None, ft_config, keep_checkpoints=False, lr_fn=lambda e: lr)
    return model


def clone_model(model: Model) -> Model:
    return copy.deepcopy(model)
