from enum import Enum

import numpy as np

from infrastructure.errors import DimensionError
from services.autodiff import Tape

# probabilities are clipped here before the log
CLIP = 1e-12


class LossKind(str, Enum):
    CATEGORICAL_CE = "CategoricalCE"
    BINARY_CE = "BinaryCE"


def loss_node(tape: Tape, pred, target, kind: LossKind):
    """Records the batch-mean cross-entropy of `pred` (a tape node) against constant targets."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"Prediction {pred.shape} and target {target.shape} differ")
    batch = pred.shape[0]

    if LossKind(kind) is LossKind.CATEGORICAL_CE:
        log_p = tape.log(tape.clip(pred, CLIP, 1.0))
        per_element = tape.scale(log_p, target)
        return tape.scale(tape.sum(per_element), -1.0 / batch)

    # multi-label: mean over labels, then over the batch
    ones = tape.constant(np.ones(pred.shape))
    log_p = tape.log(tape.clip(pred, CLIP, 1.0 - CLIP))
    log_q = tape.log(tape.clip(tape.add(ones, tape.scale(pred, -1.0)), CLIP, 1.0 - CLIP))
    both = tape.add(tape.scale(log_p, target), tape.scale(log_q, 1.0 - target))
    return tape.scale(tape.mean(both), -1.0)


def loss(pred, target, kind: LossKind) -> float:
    """Batch-mean CategoricalCE (one-hot targets) or BinaryCE (multi-hot targets)."""
    tape = Tape()
    return float(loss_node(tape, tape.constant(pred), target, kind).value)


def accuracy(pred, target, kind: LossKind) -> float:
    """Argmax match for one-hot targets; 0.5-threshold elementwise match for multi-hot."""
    pred, target = np.asarray(pred), np.asarray(target)
    if LossKind(kind) is LossKind.CATEGORICAL_CE:
        return float(np.mean(pred.argmax(axis=1) == target.argmax(axis=1)))
    return float(np.mean((pred > 0.5) == (target > 0.5)))
