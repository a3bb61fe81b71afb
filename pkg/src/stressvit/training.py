"""Training loop, plateau callback, checkpoints and the evaluation harness.

A run owns one seeded generator; it draws, in order, the model init (when no
starting weights are given), then per epoch the batch permutation and the
dropout masks in batch order. Two runs with the same scenario and data are
therefore bit-identical end to end.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import OptimizerConfig, Tape, Tensor, backward, optimizer_step, record_op
from .data import kfold_split, make_batches
from .metrics import EvalReport, evaluate_predictions
from .vit import FreezeSpec, ViTModel, preset_config, set_trainable, vit_forward


class TrainingError(RuntimeError):
    """Aborted training run; message carries epoch/batch diagnostics."""


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def bce_loss(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on raw logits, softplus-stabilised.

    loss_i = y_i * softplus(-z_i) + (1 - y_i) * softplus(z_i); the gradient
    with respect to the logits is (sigmoid(z) - y) / batch.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    z = logits.data.reshape(-1)
    if z.shape != y.shape:
        raise ValueError(f"{z.shape[0]} logits vs {y.shape[0]} labels")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    per_sample = y * _softplus(-z) + (1.0 - y) * _softplus(z)
    out = Tensor._wrap(np.array(per_sample.mean()))

    def grad_fn(g):
        dz = (sigmoid(z) - y) / z.shape[0]
        return (float(g) * dz.reshape(logits.shape),)

    record_op(out, (logits,), grad_fn)
    return out


# ---------------------------------------------------------------------------
# scenario configuration


@dataclass
class ScenarioConfig:
    """One row of the experiment grid: model, freezing, optimizer, callback."""

    model: str = "tiny"
    trainable_blocks: int | str = "all"
    optimizer: str = "adamw"
    lr: float = 1e-3
    patience: int = 5
    factor: float = 0.2
    min_lr: float = 0.0
    early_stop_patience: int | None = None  # defaults to 2 * patience
    batch_size: int = 32
    attn_dropout: float = 0.0
    mlp_dropout: float = 0.0
    max_epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    best_val_loss: float = math.inf
    checkpoint_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "epochs": [vars(e).copy() for e in self.epochs],
            "stop_epoch": self.stop_epoch,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "checkpoint_path": self.checkpoint_path,
        }


class PlateauController:
    """Learning-rate reduction on plateau plus early stopping.

    One patience/factor pair drives both behaviours: after ``patience``
    consecutive epochs without the monitored loss improving by more than
    ``min_delta`` the lr multiplies by ``factor`` (floored at ``min_lr``,
    plateau counter reset); after ``early_stop_patience`` consecutive
    non-improving epochs (2 x patience unless given) training stops. An
    improving epoch resets both counters. ``baseline`` is the pre-training
    validation loss, so the very first epoch can already count as a failure.
    """

    def __init__(self, lr, patience, factor, min_lr=0.0, early_stop_patience=None,
                 min_delta=1e-6, baseline=None):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.early_stop_patience = early_stop_patience or 2 * patience
        self.min_delta = min_delta
        self.best = math.inf if baseline is None else baseline
        self.plateau_count = 0
        self.stall_count = 0

    def update(self, val_loss: float) -> tuple[bool, bool]:
        """Feed one epoch's monitored loss; returns (improved, stop)."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.plateau_count = 0
            self.stall_count = 0
            return True, False
        self.plateau_count += 1
        self.stall_count += 1
        if self.plateau_count >= self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.plateau_count = 0
        return False, self.stall_count >= self.early_stop_patience


# ---------------------------------------------------------------------------
# the loop


def _eval_pass(model, X, y, batch_size=64):
    """Evaluation-mode loss and accuracy over a dataset."""
    losses, correct = 0.0, 0
    for batch in make_batches(np.arange(len(X)), batch_size):
        logits, _ = vit_forward(X[batch], model)
        losses += bce_loss(logits, y[batch]).item() * len(batch)
        scores = sigmoid(logits.data.reshape(-1))
        correct += int(np.sum((scores >= 0.5).astype(int) == y[batch]))
    return losses / len(X), correct / len(X)


def _snapshot(model):
    return [p.value.data.copy() for p in model.parameters()]


def _restore(model, snapshot):
    for p, data in zip(model.parameters(), snapshot):
        p.value.data[...] = data


def run_training(scenario: ScenarioConfig, train_data, val_data,
                 model: ViTModel | None = None):
    """Fine-tune per the scenario; returns (best model, TrainLog).

    ``train_data`` and ``val_data`` are (inputs [n, 3, s, s], labels [n])
    pairs. A fresh model is initialized from the run generator unless
    ``model`` carries starting weights (the transfer-learning path). The
    model comes back holding the best-validation-loss weights.
    """
    X_train, y_train = train_data
    X_val, y_val = val_data
    if len(X_train) == 0 or len(X_val) == 0:
        raise ValueError("train and validation splits must be non-empty")
    if set(np.unique(y_train)) != {0.0, 1.0}:
        raise ValueError("training labels must include both classes")

    rng = np.random.default_rng(scenario.seed)
    if model is None:
        config = preset_config(scenario.model, scenario.attn_dropout, scenario.mlp_dropout)
        model = ViTModel(config, rng)
    set_trainable(model, FreezeSpec(trainable_blocks=scenario.trainable_blocks))
    params = model.parameters()

    val_loss, val_acc = _eval_pass(model, X_val, y_val)
    controller = PlateauController(scenario.lr, scenario.patience, scenario.factor,
                                   scenario.min_lr, scenario.early_stop_patience,
                                   baseline=val_loss)
    log = TrainLog(best_epoch=0, best_val_loss=val_loss)
    best_state = _snapshot(model)

    n = len(X_train)
    for epoch in range(1, scenario.max_epochs + 1):
        lr_used = controller.lr
        opt = OptimizerConfig(kind=scenario.optimizer, lr=lr_used)
        perm = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for bi, batch in enumerate(make_batches(perm, scenario.batch_size)):
            for p in params:
                p.zero_grad()
            tape = Tape()
            with tape:
                logits, _ = vit_forward(X_train[batch], model, training=True, rng=rng)
                loss = bce_loss(logits, y_train[batch])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch}, batch {bi} "
                    f"(lr={lr_used}, batch_size={len(batch)})")
            backward(loss, tape)
            optimizer_step(params, opt)
            loss_sum += value * len(batch)
            scores = sigmoid(logits.data.reshape(-1))
            correct += int(np.sum((scores >= 0.5).astype(int) == y_train[batch]))

        val_loss, val_acc = _eval_pass(model, X_val, y_val)
        log.epochs.append(EpochRecord(epoch, loss_sum / n, correct / n,
                                      val_loss, val_acc, lr_used))
        improved, stop = controller.update(val_loss)
        if improved:
            best_state = _snapshot(model)
            log.best_epoch = epoch
            log.best_val_loss = val_loss
        if stop:
            break

    log.stop_epoch = log.epochs[-1].epoch if log.epochs else 0
    _restore(model, best_state)
    return model, log


def predict_labels(model: ViTModel, inputs, threshold: float = 0.5):
    """Sigmoid scores and thresholded labels; a tied score counts as stressed."""
    from .data import Window, windows_to_arrays

    if isinstance(inputs, (list, tuple)) and inputs and isinstance(inputs[0], Window):
        inputs, _ = windows_to_arrays(inputs, model.config.image_size)
    X = np.asarray(inputs, dtype=np.float64)
    scores = np.empty(len(X))
    for batch in make_batches(np.arange(len(X)), 64):
        logits, _ = vit_forward(X[batch], model)
        scores[batch] = sigmoid(logits.data.reshape(-1))
    return (scores >= threshold).astype(int), scores


def evaluate_model(model: ViTModel, X, y) -> EvalReport:
    labels, scores = predict_labels(model, X)
    return evaluate_predictions(labels, scores, np.asarray(y).astype(int))


# ---------------------------------------------------------------------------
# checkpoints


_CKPT_MAGIC = b"SVCKPT01"


def checkpoint_save(model: ViTModel, path) -> None:
    """Versioned container: per entry a UTF-8 name, trainability flag, shape
    list and little-endian float64 payload, in canonical parameter order."""
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", 1 if p.trainable else 0))
            fh.write(struct.pack("<B", p.value.data.ndim))
            for extent in p.value.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(p.value.data.astype("<f8").tobytes())


def checkpoint_load(path, config) -> ViTModel:
    """Rebuild a model of ``config`` from a checkpoint, bit-exact.

    Names and shapes must match the configuration's parameter layout; all
    offending entries are listed in the error.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    pos = 8
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    entries = {}
    order = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        trainable, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        entries[name] = (bool(trainable), values)
        order.append(name)

    model = ViTModel(config, rng=0)
    problems = []
    for p in model.parameters():
        if p.name not in entries:
            problems.append(f"missing entry {p.name}")
            continue
        trainable, values = entries.pop(p.name)
        if values.shape != p.value.shape:
            problems.append(f"{p.name}: checkpoint shape {values.shape} vs "
                            f"config shape {p.value.shape}")
            continue
        p.value.data[...] = values
        p.trainable = trainable
    problems.extend(f"unexpected entry {name}" for name in entries)
    if problems:
        raise ValueError(f"{path}: checkpoint does not fit the configuration: "
                         + "; ".join(problems))
    return model


# ---------------------------------------------------------------------------
# cross-validation


def kfold_evaluate(train_fn, predict_fn, features, labels, k: int = 5, seed: int = 0) -> EvalReport:
    """k independent fit/eval cycles over seeded folds.

    ``train_fn(X, y)`` returns a predictor; ``predict_fn(predictor, X)``
    returns (labels, scores). The report pools out-of-fold predictions for
    its top-level numbers and attaches per-fold reports, fold means and the
    vertically averaged ROC on a fixed 101-point FPR grid.
    """
    X = np.asarray(features)
    y = np.asarray(labels).astype(int)
    folds = kfold_split(len(X), k, seed)
    per_fold = []
    pooled_labels = np.empty(len(X), dtype=int)
    pooled_scores = np.empty(len(X))
    grid = np.linspace(0.0, 1.0, 101)
    tpr_curves = []
    for fi, held_out in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(len(X)), held_out)
        try:
            predictor = train_fn(X[train_idx], y[train_idx])
            fold_labels, fold_scores = predict_fn(predictor, X[held_out])
        except Exception as exc:
            raise RuntimeError(f"fold {fi} failed: {exc}") from exc
        pooled_labels[held_out] = fold_labels
        pooled_scores[held_out] = fold_scores
        report = evaluate_predictions(fold_labels, fold_scores, y[held_out])
        per_fold.append(report)
        fpr = [p[0] for p in report.roc]
        tpr = [p[1] for p in report.roc]
        tpr_curves.append(np.interp(grid, fpr, tpr))

    pooled = evaluate_predictions(pooled_labels, pooled_scores, y)
    accs = [r.accuracy for r in per_fold]
    aucs = [r.auc for r in per_fold]
    mean_tpr = np.mean(tpr_curves, axis=0)
    pooled.per_fold = per_fold
    pooled.mean_accuracy = float(np.mean(accs))
    pooled.std_accuracy = float(np.std(accs))
    pooled.mean_auc = float(np.mean(aucs))
    pooled.std_auc = float(np.std(aucs))
    pooled.mean_roc = [(float(f), float(t)) for f, t in zip(grid, mean_tpr)]
    return pooled
