"""
Regularization layers: PerNodeDrop and the Dropout / GaussianDropout /
DropConnect / MaskEnsemble baselines.

Each variant exists twice:
  * a functional forward (`*_forward`) over plain tensors, and
  * a slot class used inside models, recording the same computation on an
    autodiff Tape so it can be trained.
Both draw their masks through the same helpers, so a slot and its functional
forward agree exactly for equal streams.
"""
from dataclasses import replace

import numpy as np

from infrastructure.errors import ConfigurationError, ContractError, DimensionError
from infrastructure.logger import log
from services.tensor_core import (
    RngStream, Tensor, _frozen, batched_masked_matmul, draw_permutation, elementwise, matmul,
)
from services.regularizers.masks import (
    FixedScope, Granularity, MaskMode, MaskSpec, Mode, RegularizerKind, RegularizerTag, Stir,
    expected_mask_value, sample_mask,
)


# ----------------------------------
# MASK CONSTRUCTION
# ----------------------------------
def _require_stream(stream):
    if stream is None:
        raise ContractError("Train mode needs an RngStream")
    return stream


def pernode_mask(spec: MaskSpec, batch: int, din: int, dout: int, sample_ids=None,
                 stream: RngStream = None, salt="pernodedrop") -> Tensor:
    """B×Din (node) or B×Din×Dout (connection) mask, one independent slice per sample."""
    per_sample = (din,) if spec.granularity is Granularity.NODE else (din, dout)

    if spec.mode is MaskMode.DYNAMIC:
        return sample_mask(spec, (batch,) + per_sample, _require_stream(stream))

    if spec.fixed_scope is FixedScope.PER_MODEL:
        shared = sample_mask(spec, per_sample, RngStream.for_sample(spec.seed, salt, "model"))
        return _frozen(np.broadcast_to(shared, (batch,) + per_sample))

    if sample_ids is None:
        raise ContractError("Fixed PerNodeDrop masks need the sample_ids of the batch")
    if len(sample_ids) != batch:
        raise DimensionError(f"{len(sample_ids)} sample_ids for a batch of {batch}")
    # regenerated from (seed, sample_id): identical in every epoch and process
    return _frozen(np.stack([
        sample_mask(spec, per_sample, RngStream.for_sample(spec.seed, salt, int(sid)))
        for sid in sample_ids
    ]))


def build_ensemble_masks(din: int, mask_groups: int, spec: MaskSpec, salt="maskensemble") -> Tensor:
    """
    `mask_groups` binary masks over Din units, each keeping round((1−p)·Din)
    units chosen by a seeded permutation. Pure function of its arguments.
    """
    if din % mask_groups != 0:
        raise ConfigurationError(
            f"MaskEnsemble needs mask_groups ({mask_groups}) to divide the input dimension ({din})",
            key="mask_groups",
        )
    keep = max(1, int(round((1.0 - spec.drop_rate) * din)))
    masks = np.zeros((mask_groups, din))
    for g in range(mask_groups):
        perm = draw_permutation(RngStream.for_sample(spec.seed, salt, g), din)
        masks[g, perm[:keep]] = 1.0
    return _frozen(masks)


def route_ensemble(masks: Tensor, batch: int, sample_ids=None) -> Tensor:
    """Picks mask row (sample index mod groups) for every batch row."""
    index = np.arange(batch) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
    return _frozen(masks[index % masks.shape[0]])


# ----------------------------------
# FUNCTIONAL FORWARDS
# ----------------------------------
def pernodedrop_forward(x, W, bias, spec: MaskSpec, mode: Mode, sample_ids=None,
                        stream: RngStream = None, salt="pernodedrop") -> Tensor:
    """x·(W ⊙ M^(k)) + bias with a mask unique to each sample (Train); E[m]·(x·W) + bias (Eval)."""
    x, W = np.asarray(x, dtype=np.float64), np.asarray(W, dtype=np.float64)
    if Mode(mode) is Mode.EVAL:
        scaled = elementwise("mul", matmul(x, W), expected_mask_value(spec))
    else:
        mask = pernode_mask(spec, x.shape[0], W.shape[0], W.shape[1], sample_ids, stream, salt)
        scaled = batched_masked_matmul(x, W, mask)
    return _frozen(scaled + np.asarray(bias, dtype=np.float64))


def dropout_forward(x, spec: MaskSpec, mode: Mode, stream: RngStream = None) -> Tensor:
    """y = m·x with m ~ Bernoulli(1−p) per sample and activation; Eval: (1−p)·x."""
    spec = replace(spec, stir=Stir.BERNOULLI)
    x = np.asarray(x, dtype=np.float64)
    if Mode(mode) is Mode.EVAL:
        return elementwise("mul", x, expected_mask_value(spec))
    return elementwise("mul", x, sample_mask(spec, x.shape, _require_stream(stream)))


def gaussian_dropout_forward(x, spec: MaskSpec, mode: Mode, stream: RngStream = None) -> Tensor:
    """y = m·x with m ~ N(1, σ²); Eval is the identity."""
    spec = replace(spec, stir=Stir.GAUSSIAN)
    x = np.asarray(x, dtype=np.float64)
    if Mode(mode) is Mode.EVAL:
        return _frozen(x)
    return elementwise("mul", x, sample_mask(spec, x.shape, _require_stream(stream)))


def dropconnect_forward(x, W, bias, spec: MaskSpec, mode: Mode, stream: RngStream = None) -> Tensor:
    """x·(W ⊙ M) + bias with ONE Din×Dout mask shared by the whole batch; Eval: x·((1−p)·W) + bias."""
    spec = replace(spec, stir=Stir.BERNOULLI)
    W = np.asarray(W, dtype=np.float64)
    if Mode(mode) is Mode.EVAL:
        effective = elementwise("mul", W, expected_mask_value(spec))
    else:
        effective = elementwise("mul", W, sample_mask(spec, W.shape, _require_stream(stream)))
    return _frozen(matmul(x, effective) + np.asarray(bias, dtype=np.float64))


def maskensemble_forward(x, spec: MaskSpec, mask_groups: int, mode: Mode, sample_ids=None) -> Tensor:
    """Routes each sample through its group's predetermined binary mask (same in Train and Eval)."""
    x = np.asarray(x, dtype=np.float64)
    Mode(mode)  # validates the tag
    masks = build_ensemble_masks(x.shape[1], mask_groups, spec)
    return elementwise("mul", x, route_ensemble(masks, x.shape[0], sample_ids))


# ----------------------------------
# MODEL SLOTS
# ----------------------------------
class RegularizerSlot:
    """
    A regularizer followed by a Dense layer of `units` outputs.
    `apply` returns the pre-activation; weight (din×units) and bias (units)
    are owned by the model and passed in as tape nodes.
    """
    tag = RegularizerTag.PLAIN

    def __init__(self, kind: RegularizerKind, din: int, units: int, salt: str = "slot"):
        self.kind = kind
        self.spec = kind.spec
        self.din = din
        self.units = units
        self.salt = salt

    def regularize_input(self, tape, x, mode, sample_ids, stream):
        return x

    def apply(self, tape, x, weight, bias, mode: Mode, sample_ids=None, stream=None):
        x = self.regularize_input(tape, x, mode, sample_ids, stream)
        return tape.add_bias(tape.matmul(x, weight), bias)


class DropoutSlot(RegularizerSlot):
    tag = RegularizerTag.DROPOUT
    stir = Stir.BERNOULLI

    def __init__(self, kind, din, units, salt="slot"):
        super().__init__(kind, din, units, salt)
        self.spec = replace(kind.spec, stir=self.stir)

    def regularize_input(self, tape, x, mode, sample_ids, stream):
        if mode is Mode.EVAL:
            return tape.scale(x, expected_mask_value(self.spec))
        return tape.scale(x, sample_mask(self.spec, x.shape, _require_stream(stream)))


class GaussianDropoutSlot(DropoutSlot):
    tag = RegularizerTag.GAUSSIAN_DROPOUT
    stir = Stir.GAUSSIAN


class MaskEnsembleSlot(RegularizerSlot):
    tag = RegularizerTag.MASK_ENSEMBLE

    def __init__(self, kind, din, units, salt="slot"):
        super().__init__(kind, din, units, salt)
        self.spec = replace(kind.spec, stir=Stir.BERNOULLI)
        # generated once, constant for the life of the model
        self.masks = build_ensemble_masks(din, kind.mask_groups, self.spec)

    def regularize_input(self, tape, x, mode, sample_ids, stream):
        return tape.scale(x, route_ensemble(self.masks, x.shape[0], sample_ids))


class DropConnectSlot(RegularizerSlot):
    tag = RegularizerTag.DROPCONNECT

    def __init__(self, kind, din, units, salt="slot"):
        super().__init__(kind, din, units, salt)
        self.spec = replace(kind.spec, stir=Stir.BERNOULLI)

    def apply(self, tape, x, weight, bias, mode, sample_ids=None, stream=None):
        if mode is Mode.EVAL:
            effective = tape.scale(weight, expected_mask_value(self.spec))
        else:
            effective = tape.scale(weight, sample_mask(self.spec, weight.shape, _require_stream(stream)))
        return tape.add_bias(tape.matmul(x, effective), bias)


class PerNodeDropSlot(RegularizerSlot):
    """Composite layer: the Dense transformation itself carries the per-sample masks."""
    tag = RegularizerTag.PERNODEDROP

    def apply(self, tape, x, weight, bias, mode, sample_ids=None, stream=None):
        if mode is Mode.EVAL:
            z = tape.scale(tape.matmul(x, weight), expected_mask_value(self.spec))
        else:
            mask = pernode_mask(self.spec, x.shape[0], self.din, self.units, sample_ids, stream, self.salt)
            z = tape.masked_matmul(x, weight, mask)
        return tape.add_bias(z, bias)


SLOT_TYPES = {
    RegularizerTag.PLAIN: RegularizerSlot,
    RegularizerTag.DROPOUT: DropoutSlot,
    RegularizerTag.GAUSSIAN_DROPOUT: GaussianDropoutSlot,
    RegularizerTag.DROPCONNECT: DropConnectSlot,
    RegularizerTag.MASK_ENSEMBLE: MaskEnsembleSlot,
    RegularizerTag.PERNODEDROP: PerNodeDropSlot,
}


def build_slot(kind: RegularizerKind, din: int, units: int, salt: str = "slot") -> RegularizerSlot:
    """Dictionary routing from the regularizer tag to its slot class."""
    slot = SLOT_TYPES[kind.tag](kind, din, units, salt)
    log.debug(f"[SLOT] {kind.name}: {kind.tag.value} {din}->{units} (p={kind.spec.drop_rate})")
    return slot
