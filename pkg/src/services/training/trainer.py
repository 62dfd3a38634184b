"""
Training loop with the epoch-end clean-loss callback.

After all of an epoch's updates, the fully updated model is evaluated in
Eval mode (no perturbation) on the whole training set; that loss is the
number compared against validation loss.
"""
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from infrastructure.errors import ConfigurationError
from infrastructure.logger import log
from services.autodiff import Tape, backward
from services.datasets import Dataset, DatasetSplit
from services.regularizers.masks import Mode
from services.tensor_core import RngStream, draw_permutation
from services.training.losses import LossKind, accuracy, loss, loss_node
from services.training.model import MaskedMLP, ModelConfig, OutputKind
from services.training.optimizer import AdamState, adam_step

DEFAULT_DROP_RATES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

STATUS_OK = "ok"
STATUS_DIVERGED = "diverged"

# excluded when comparing logs for determinism
TIMING_FIELDS = ("epoch_wall_seconds",)


@dataclass(frozen=True)
class TrainConfig:
    drop_rates: tuple = DEFAULT_DROP_RATES
    batch_size: int = 32
    epochs: int = 20
    learning_rate: float = 1e-3
    seed: int = 0
    # patience in epochs on val_loss; None disables early stopping
    early_stop: Optional[int] = None
    val_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "drop_rates", tuple(float(p) for p in self.drop_rates))
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be at least 1, got {self.batch_size}", key="batch_size")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be at least 1, got {self.epochs}", key="epochs")
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be non-negative, got {self.learning_rate}",
                                     key="learning_rate")
        if self.early_stop is not None and self.early_stop < 1:
            raise ConfigurationError(f"early_stop patience must be positive, got {self.early_stop}",
                                     key="early_stop")


@dataclass
class TrainRecord:
    variant: str
    drop_rate: float
    epoch: int
    val_loss: Optional[float]
    val_acc: Optional[float]
    train_loss_clean: Optional[float]
    train_acc_clean: Optional[float]
    epoch_wall_seconds: float
    status: str = STATUS_OK

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, row: dict) -> "TrainRecord":
        return cls(**{k: row[k] for k in cls.__dataclass_fields__ if k in row})

    @property
    def diverged(self) -> bool:
        return self.status == STATUS_DIVERGED


@dataclass
class TrainResult:
    records: list = field(default_factory=list)
    model: Optional[MaskedMLP] = None


def loss_kind_for(config: ModelConfig) -> LossKind:
    return LossKind.CATEGORICAL_CE if config.output is OutputKind.SOFTMAX else LossKind.BINARY_CE


def evaluate(model: MaskedMLP, data: Dataset, params: dict = None) -> tuple:
    """(loss, accuracy) of the unperturbed model over the whole of `data`, in one pass."""
    pred = model.forward(data.x, Mode.EVAL, data.sample_ids, params=params)
    kind = loss_kind_for(model.config)
    return loss(pred, data.y, kind), accuracy(pred, data.y, kind)


def _train_epoch(model, data, train_cfg, state, stream, kind):
    """One pass of minibatch Adam updates. Returns (state, finite)."""
    order = draw_permutation(stream.split("shuffle"), data.n_samples)
    for b, start in enumerate(range(0, data.n_samples, train_cfg.batch_size)):
        idx = order[start:start + train_cfg.batch_size]
        tape = Tape()
        nodes = {name: tape.leaf(value, name) for name, value in model.params.items()}
        probs = model.graph(tape, nodes, tape.constant(data.x[idx]), Mode.TRAIN,
                            data.sample_ids[idx], stream.split(f"batch/{b}"))
        batch_loss = loss_node(tape, probs, data.y[idx], kind)
        if not np.isfinite(batch_loss.value):
            return state, False
        grads = backward(tape, batch_loss)
        named = {name: grads[node.id] for name, node in nodes.items()}
        model.params, state = adam_step(model.params, named, state, train_cfg.learning_rate)
    return state, True


def fit(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: DatasetSplit,
        variant: str = None, on_record: Callable = None) -> TrainResult:
    """Trains one (variant, drop rate) configuration; one TrainRecord per epoch."""
    variant = variant or model_cfg.regularizer.name
    drop_rate = model_cfg.regularizer.spec.drop_rate
    kind = loss_kind_for(model_cfg)
    root = RngStream(train_cfg.seed)

    model = MaskedMLP(model_cfg, stream=root.split("init"))
    state = AdamState()
    result = TrainResult(model=model)
    best_val, since_best = np.inf, 0
    log.info(f"[TRAIN] {variant} p={drop_rate}: {model.parameter_count()} params, "
             f"{dataset.train.n_samples} train / {dataset.val.n_samples} val samples")

    for epoch in range(1, train_cfg.epochs + 1):
        # wall time covers the update loop only, not the callback
        t0 = time.perf_counter()
        state, finite = _train_epoch(model, dataset.train, train_cfg, state, root.split(f"epoch/{epoch}"), kind)
        wall = time.perf_counter() - t0

        metrics = (None, None, None, None)
        if finite:
            train_loss, train_acc = evaluate(model, dataset.train)
            val_loss, val_acc = evaluate(model, dataset.val)
            metrics = (val_loss, val_acc, train_loss, train_acc)
            finite = bool(np.all(np.isfinite(metrics)))

        if not finite:
            record = TrainRecord(variant, drop_rate, epoch, None, None, None, None, wall, STATUS_DIVERGED)
            result.records.append(record)
            if on_record:
                on_record(record)
            log.warning(f"[TRAIN] {variant} p={drop_rate} diverged at epoch {epoch}; run aborted")
            break

        record = TrainRecord(variant, drop_rate, epoch, *metrics, wall)
        result.records.append(record)
        if on_record:
            on_record(record)
        log.debug(f"[EPOCH] {variant} p={drop_rate} ep={epoch} val_loss={record.val_loss:.4f} "
                  f"train_loss_clean={record.train_loss_clean:.4f} ({wall:.2f}s)")

        if train_cfg.early_stop is not None:
            if record.val_loss < best_val:
                best_val, since_best = record.val_loss, 0
            else:
                since_best += 1
                if since_best >= train_cfg.early_stop:
                    log.info(f"[TRAIN] {variant} p={drop_rate} early stop at epoch {epoch}")
                    break

    return result


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: DatasetSplit,
          variant: str = None, on_record: Callable = None) -> list:
    """Runs `fit` and returns its TrainRecords."""
    return fit(model_cfg, train_cfg, dataset, variant, on_record).records


def without_timing(records) -> list:
    """Record dicts with wall-clock fields removed (for determinism comparisons)."""
    rows = []
    for r in records:
        row = r.to_dict() if isinstance(r, TrainRecord) else dict(r)
        for key in TIMING_FIELDS:
            row.pop(key, None)
        rows.append(row)
    return rows
