"""
Dense classifiers with one interchangeable regularizer slot.

Layout: input → hidden Dense+ReLU layers, with the slot (regularizer + Dense
of `dense_units`, ReLU) inserted at `reg_position`, → Dense head with softmax
or sigmoid. Every variant's slot owns exactly one din×dense_units Dense
layer, so parameter counts match across variants for the same config.
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from infrastructure.errors import ConfigurationError, DimensionError
from infrastructure.logger import log
from services.autodiff import Tape
from services.regularizers.layers import build_slot
from services.regularizers.masks import Mode, RegularizerKind, RegularizerTag
from services.tensor_core import RngStream, draw_uniform


class OutputKind(str, Enum):
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    n_classes: int
    hidden_widths: tuple = (64,)
    regularizer: RegularizerKind = field(default_factory=RegularizerKind)
    # slot goes after this many hidden layers (None: after all of them)
    reg_position: Optional[int] = None
    output: OutputKind = OutputKind.SOFTMAX
    dense_units: int = 64

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        object.__setattr__(self, "output", OutputKind(self.output))
        if self.reg_position is None:
            object.__setattr__(self, "reg_position", len(self.hidden_widths))
        widths = (self.input_dim, self.n_classes, self.dense_units) + self.hidden_widths
        if any(w < 1 for w in widths):
            raise ConfigurationError(f"Layer widths must be positive, got {widths}", key="hidden_widths")
        if not 0 <= self.reg_position <= len(self.hidden_widths):
            raise ConfigurationError(
                f"reg_position {self.reg_position} outside 0..{len(self.hidden_widths)}", key="reg_position"
            )

    def with_regularizer(self, kind: RegularizerKind) -> "ModelConfig":
        return replace(self, regularizer=kind)


class MaskedMLP:
    """A model instance: config, regularizer slot and parameter dict."""

    def __init__(self, config: ModelConfig, params: dict = None, stream: RngStream = None):
        self.config = config
        self.layers = self._layout(config)
        slot_name, slot_din, slot_dout = next(l for l in self.layers if l[0] == "slot")
        # raises ConfigurationError for an incompatible MaskEnsemble grouping
        self.slot = build_slot(config.regularizer, slot_din, slot_dout, salt=f"{slot_name}")
        if params is None:
            params = init_params(self.layers, stream if stream is not None else RngStream(0))
        self.params = params

    @staticmethod
    def _layout(config: ModelConfig):
        """Ordered (name, din, dout) triples; the slot is named 'slot', the output 'head'."""
        layers, din = [], config.input_dim
        for i, width in enumerate(config.hidden_widths):
            if i == config.reg_position:
                layers.append(("slot", din, config.dense_units))
                din = config.dense_units
            layers.append((f"dense{i}", din, width))
            din = width
        if config.reg_position == len(config.hidden_widths):
            layers.append(("slot", din, config.dense_units))
            din = config.dense_units
        layers.append(("head", din, config.n_classes))
        return layers

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def graph(self, tape: Tape, nodes: dict, x, mode: Mode, sample_ids=None, stream: RngStream = None):
        """Records the forward pass on `tape`; `nodes` maps parameter names to tape nodes."""
        h = x
        for name, _din, _dout in self.layers:
            weight, bias = nodes[f"{name}.W"], nodes[f"{name}.b"]
            if name == "slot":
                h = tape.relu(self.slot.apply(tape, h, weight, bias, mode, sample_ids, stream))
            elif name == "head":
                logits = tape.add_bias(tape.matmul(h, weight), bias)
                if self.config.output is OutputKind.SOFTMAX:
                    return tape.softmax(logits)
                return tape.sigmoid(logits)
            else:
                h = tape.relu(tape.add_bias(tape.matmul(h, weight), bias))

    def forward(self, x, mode: Mode = Mode.EVAL, sample_ids=None, stream: RngStream = None,
                params: dict = None):
        return forward(self, x, mode, sample_ids, stream, params)


def forward(model: MaskedMLP, x, mode: Mode = Mode.EVAL, sample_ids=None, stream: RngStream = None,
            params: dict = None) -> np.ndarray:
    """Class probabilities (softmax rows) or label probabilities (sigmoid) for a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise DimensionError(f"Model expects (batch, {model.config.input_dim}) input, got {x.shape}")
    if sample_ids is not None and len(sample_ids) != x.shape[0]:
        raise DimensionError(f"{len(sample_ids)} sample_ids for {x.shape[0]} rows")
    params = model.params if params is None else params
    tape = Tape()
    nodes = {name: tape.constant(value, name) for name, value in params.items()}
    return model.graph(tape, nodes, tape.constant(x), Mode(mode), sample_ids, stream).value


def init_params(layers, stream: RngStream) -> dict:
    """Glorot-uniform weights and zero biases, each weight from its own child stream."""
    params = {}
    for name, din, dout in layers:
        limit = np.sqrt(6.0 / (din + dout))
        u = draw_uniform(stream.split(name), (din, dout))
        params[f"{name}.W"] = (2.0 * u - 1.0) * limit
        params[f"{name}.b"] = np.zeros(dout)
    return params


def without_regularizer(model: MaskedMLP) -> MaskedMLP:
    """Same parameters, slot replaced by a plain Dense layer."""
    plain = model.config.with_regularizer(RegularizerKind(RegularizerTag.PLAIN))
    return MaskedMLP(plain, params=dict(model.params))


def save_params(params: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **params)
    log.debug(f"Model state saved: {path}")
    return path


def load_params(path) -> dict:
    with np.load(Path(path)) as data:
        return {name: np.array(data[name]) for name in data.files}
