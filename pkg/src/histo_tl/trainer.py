"""Training loop with validation-accuracy early stopping and run bookkeeping."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.special import xlogy
from torch.nn import functional as F

from .errors import ConfigurationError, PredictionError
from .model_zoo import ModelHandle, save_checkpoint, to_nchw
from .pipeline import RESAMPLING, BatchStream

log = logging.getLogger(__name__)

BINARY_CE = "binary_crossentropy"
CATEGORICAL_CE = "categorical_crossentropy"
STOP_REASONS = ("early_stop", "max_epochs", "error")
HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    max_epochs: int = 1500
    batch_sizes: dict = field(default_factory=lambda: {"train": 80, "val": 28, "test": 16})
    early_stop_val_acc: float = 0.98
    optimizer: str = "adam"
    seed: int = 0
    # Keras Adam defaults
    adam_beta_1: float = 0.9
    adam_beta_2: float = 0.999
    adam_epsilon: float = 1e-7

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0 <= self.early_stop_val_acc <= 1:
            raise ConfigurationError("early_stop_val_acc must lie in [0, 1]")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.optimizer != "adam":
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}")
        for k in ("train", "val", "test"):
            if int(self.batch_sizes.get(k, 0)) < 1:
                raise ConfigurationError(f"batch_sizes[{k!r}] must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def select_loss(task) -> str:
    """Loss identifier for a task (or a bare class count)."""
    n = task if isinstance(task, int) else task.n_classes
    if n == 2:
        return BINARY_CE
    if n == 3:
        return CATEGORICAL_CE
    raise ConfigurationError(f"no loss defined for {n} classes")


def cross_entropy(kind: str, y_true, y_prob) -> float:
    """Mean cross-entropy of one-hot targets against probability rows.

    The binary form averages the per-unit binary cross-entropy over the two
    softmax units, which for a 2-way softmax equals the categorical form.
    """
    y_true = np.asarray(y_true, dtype=float)
    y_prob = np.asarray(y_prob, dtype=float)
    if kind == CATEGORICAL_CE:
        per_row = -xlogy(y_true, y_prob).sum(axis=1)
    elif kind == BINARY_CE:
        per_row = -(xlogy(y_true, y_prob) + xlogy(1 - y_true, 1 - y_prob)).mean(axis=1)
    else:
        raise ConfigurationError(f"unknown loss {kind!r}")
    return float(per_row.mean())


def _loss_from_logits(kind: str, logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    logp = F.log_softmax(logits, dim=1)
    if kind == CATEGORICAL_CE:
        return F.nll_loss(logp, y)
    onehot = F.one_hot(y, logits.shape[1]).to(logp.dtype)
    # log(1 - p_k) of a 2-way softmax is the other unit's log-probability
    log1mp = logp.flip(1)
    return -(onehot * logp + (1 - onehot) * log1mp).mean(dim=1).mean()


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainRunRecord:
    run_id: str
    task: str
    model_config: dict
    train_config: dict
    augment_config: dict
    epoch_history: list[EpochStats]
    stop_reason: str
    checkpoint_path: str | None
    wall_clock_seconds: float
    best_epoch: int | None = None
    best_val_acc: float | None = None
    error: str | None = None
    error_epoch: int | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunRecord":
        d = dict(d)
        d["epoch_history"] = [EpochStats(**e) for e in d.get("epoch_history", [])]
        return cls(**d)

    def save(self, run_dir) -> Path:
        """Write ``run.json`` and ``history.csv`` into ``run_dir``."""
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / "run.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True) + "\n")
        tmp.replace(path)
        with (run_dir / "history.csv").open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HISTORY_COLUMNS)
            for e in self.epoch_history:
                writer.writerow([e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc])
        return path

    @classmethod
    def load(cls, path) -> "TrainRunRecord":
        path = Path(path)
        if path.is_dir():
            path = path / "run.json"
        return cls.from_dict(json.loads(path.read_text()))


class _FeatureCache:
    """Backbone outputs for every item of a stream (frozen, un-augmented case)."""

    def __init__(self, model: ModelHandle, stream: BatchStream):
        chunks = []
        for idx in range(0, stream.n_items, stream.batch_size):
            batch = np.stack([stream.base_tensor(i) for i in range(idx, min(idx + stream.batch_size, stream.n_items))])
            chunks.append(model.extract_features(batch))
        self.features = torch.cat(chunks)

    def __getitem__(self, idx) -> torch.Tensor:
        return self.features[torch.as_tensor(idx)]


def _batches(model: ModelHandle, stream: BatchStream, epoch: int, cache: _FeatureCache | None):
    """Yield ``(inputs, labels, is_feature)`` for one pass over ``stream``."""
    if cache is not None:
        for idx in stream.batch_indices(epoch):
            yield cache[idx], torch.as_tensor(stream.labels[idx]), True
        return
    for x, y in stream.epoch(epoch):
        yield to_nchw(x), torch.as_tensor(y), False


def _forward_logits(model: ModelHandle, x: torch.Tensor, is_feature: bool) -> torch.Tensor:
    net = model.network
    if is_feature:
        return net.head(x)
    if net.frozen:
        with torch.no_grad():
            feats = net.features(x)
        return net.head(feats)
    return net.logits(x)


def evaluate(model: ModelHandle, stream: BatchStream, loss_kind: str, cache=None) -> tuple[float, float]:
    """Mean loss and accuracy over one order-preserving pass."""
    model.network.eval()
    total_loss, correct, n = 0.0, 0, 0
    with torch.no_grad():
        for x, y, is_feat in _batches(model, stream, 0, cache):
            logits = _forward_logits(model, x, is_feat)
            total_loss += float(_loss_from_logits(loss_kind, logits, y)) * len(y)
            correct += int((logits.argmax(1) == y).sum())
            n += len(y)
    return total_loss / n, correct / n


def _check_arity(model: ModelHandle, stream: BatchStream, what: str):
    if stream.n_classes is not None and stream.n_classes != model.n_classes:
        raise PredictionError(
            f"{what} stream has {stream.n_classes} classes, model outputs {model.n_classes}"
        )
    if len(stream.labels) and (stream.labels.min() < 0 or stream.labels.max() >= model.n_classes):
        raise PredictionError(f"{what} labels fall outside [0, {model.n_classes})")


def train(
    model: ModelHandle,
    train_stream: BatchStream,
    val_stream: BatchStream,
    cfg: TrainConfig,
    run_id: str = "run",
    task: str = "",
    run_dir=None,
    cache_features: bool = True,
) -> TrainRunRecord:
    """Fit the model's trainable weights with Adam.

    Stops the first epoch whose validation accuracy is strictly above
    ``cfg.early_stop_val_acc`` or after ``cfg.max_epochs``. On return the model
    holds the best-validation weights (highest accuracy, earliest epoch on
    ties); with ``run_dir`` they are also written to ``checkpoint.pt`` next to
    ``run.json``.

    When the backbone is frozen and the training stream does not augment,
    backbone features are computed once and reused across epochs.
    """
    _check_arity(model, train_stream, "training")
    _check_arity(model, val_stream, "validation")
    start = time.perf_counter()
    torch.manual_seed(cfg.seed)
    loss_kind = select_loss(model.n_classes)
    net = model.network
    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(
        params,
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta_1, cfg.adam_beta_2),
        eps=cfg.adam_epsilon,
    )

    train_cache = val_cache = None
    if cache_features and net.frozen:
        val_cache = _FeatureCache(model, val_stream)
        if not train_stream.augments:
            train_cache = _FeatureCache(model, train_stream)

    history: list[EpochStats] = []
    stop_reason, error, error_epoch = "max_epochs", None, None
    best_acc, best_epoch, best_state = -1.0, None, None
    for epoch in range(1, cfg.max_epochs + 1):
        net.train()
        total_loss, correct, n = 0.0, 0, 0
        for x, y, is_feat in _batches(model, train_stream, epoch - 1, train_cache):
            logits = _forward_logits(model, x, is_feat)
            loss = _loss_from_logits(loss_kind, logits, y)
            if not torch.isfinite(loss):
                error = f"non-finite training loss at epoch {epoch}"
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(y)
            correct += int((logits.detach().argmax(1) == y).sum())
            n += len(y)
        if error is None:
            val_loss, val_acc = evaluate(model, val_stream, loss_kind, val_cache)
            if not math.isfinite(val_loss):
                error = f"non-finite validation loss at epoch {epoch}"
        if error is not None:
            stop_reason, error_epoch = "error", epoch
            log.error("%s: %s", run_id, error)
            break
        history.append(EpochStats(epoch, total_loss / n, correct / n, val_loss, val_acc))
        log.debug("%s epoch %d: %s", run_id, epoch, history[-1])
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state = copy.deepcopy(net.state_dict())
        if val_acc > cfg.early_stop_val_acc:
            stop_reason = "early_stop"
            break

    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()

    checkpoint_path = None
    if run_dir is not None and best_state is not None:
        checkpoint_path = str(save_checkpoint(model, Path(run_dir) / "checkpoint.pt"))

    record = TrainRunRecord(
        run_id=run_id,
        task=task,
        model_config=model.config.to_dict(),
        train_config=cfg.to_dict(),
        augment_config=train_stream.cfg.to_dict(),
        epoch_history=history,
        stop_reason=stop_reason,
        checkpoint_path=checkpoint_path,
        wall_clock_seconds=time.perf_counter() - start,
        best_epoch=best_epoch,
        best_val_acc=best_acc if best_epoch is not None else None,
        error=error,
        error_epoch=error_epoch,
        metadata={
            "loss": loss_kind,
            "resampling": RESAMPLING,
            "checkpoint_rule": "highest val_acc, earliest epoch on ties",
            "parameter_counts": dict(model.parameter_counts),
            "torch": torch.__version__,
            "python": platform.python_version(),
        },
    )
    if run_dir is not None:
        record.save(run_dir)
    return record


def predict(model: ModelHandle, stream: BatchStream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Class probabilities, argmax predictions and true labels, in stream order."""
    if stream.mode != "eval":
        raise PredictionError("prediction needs an order-preserving eval stream")
    _check_arity(model, stream, "evaluation")
    probs = [model.predict_proba(x) for x, _ in stream.epoch(0)]
    probs = np.concatenate(probs).astype(np.float64)
    return probs, probs.argmax(axis=1), stream.labels.copy()
