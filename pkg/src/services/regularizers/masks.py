"""
Mask descriptions and samplers for the stochastic regularizers.

Masks are raw multiplicative factors: Bernoulli masks are {0, 1} without the
1/(1−p) inverse scaling, Gaussian masks are N(1, σ²). Evaluation instead
scales by `expected_mask_value`.
"""
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from infrastructure.errors import ConfigurationError, DomainError
from services.tensor_core import RngStream, Tensor, draw_normal, draw_uniform, _frozen


class Stir(str, Enum):
    BERNOULLI = "Bernoulli"
    GAUSSIAN = "Gaussian"
    PARTIAL_GAUSSIAN = "PartialGaussian"


class Granularity(str, Enum):
    NODE = "Node"
    CONNECTION = "Connection"


class MaskMode(str, Enum):
    DYNAMIC = "Dynamic"
    FIXED = "Fixed"


class FixedScope(str, Enum):
    PER_INPUT = "PerInput"
    PER_MODEL = "PerModel"


class Mode(str, Enum):
    TRAIN = "Train"
    EVAL = "Eval"


class RegularizerTag(str, Enum):
    PLAIN = "Plain"
    DROPOUT = "Dropout"
    GAUSSIAN_DROPOUT = "GaussianDropout"
    DROPCONNECT = "DropConnect"
    MASK_ENSEMBLE = "MaskEnsemble"
    PERNODEDROP = "PerNodeDrop"


@dataclass(frozen=True)
class MaskSpec:
    stir: Stir = Stir.BERNOULLI
    drop_rate: float = 0.0
    # None: derived from the drop rate as σ² = p/(1−p)
    sigma: Optional[float] = None
    granularity: Granularity = Granularity.NODE
    mode: MaskMode = MaskMode.DYNAMIC
    seed: int = 0
    # None: the piecewise mask compares r against the drop rate
    partial_threshold: Optional[float] = None
    fixed_scope: FixedScope = FixedScope.PER_INPUT

    def __post_init__(self):
        for name, enum_type in (("stir", Stir), ("granularity", Granularity),
                                ("mode", MaskMode), ("fixed_scope", FixedScope)):
            object.__setattr__(self, name, enum_type(getattr(self, name)))
        if not 0.0 <= self.drop_rate < 1.0:
            raise DomainError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        if self.sigma is not None and (self.sigma < 0 or not np.isfinite(self.sigma)):
            raise DomainError(f"sigma must be a finite non-negative number, got {self.sigma}")
        if self.partial_threshold is not None and not 0.0 <= self.partial_threshold <= 1.0:
            raise DomainError(f"partial_threshold must lie in [0, 1], got {self.partial_threshold}")

    @property
    def variance(self) -> float:
        """σ² of the Gaussian component."""
        if self.sigma is not None:
            return float(self.sigma) ** 2
        return self.drop_rate / (1.0 - self.drop_rate)

    @property
    def threshold(self) -> float:
        return self.drop_rate if self.partial_threshold is None else float(self.partial_threshold)

    def with_rate(self, drop_rate: float) -> "MaskSpec":
        return replace(self, drop_rate=drop_rate)


@dataclass(frozen=True)
class RegularizerKind:
    tag: RegularizerTag = RegularizerTag.PLAIN
    spec: MaskSpec = MaskSpec()
    mask_groups: int = 1
    # display label, e.g. "PerNodeBernoulli_Fixed"
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tag", RegularizerTag(self.tag))
        if self.mask_groups < 1:
            raise ConfigurationError(f"mask_groups must be positive, got {self.mask_groups}", key="mask_groups")
        if not self.name:
            object.__setattr__(self, "name", self.tag.value)

    def with_rate(self, drop_rate: float) -> "RegularizerKind":
        return replace(self, spec=self.spec.with_rate(drop_rate))


def _require_stir(spec: MaskSpec, stir: Stir):
    if spec.stir is not stir:
        raise DomainError(f"Sampler for {stir.value} called with a {spec.stir.value} spec")


def sample_bernoulli_mask(spec: MaskSpec, shape, stream: RngStream) -> Tensor:
    """Elements in {0,1} with P(1) = 1 − p."""
    _require_stir(spec, Stir.BERNOULLI)
    r = draw_uniform(stream, shape)
    return _frozen(r >= spec.drop_rate)


def sample_gaussian_mask(spec: MaskSpec, shape, stream: RngStream) -> Tensor:
    """Elements ~ N(1, σ²)."""
    _require_stir(spec, Stir.GAUSSIAN)
    return draw_normal(stream, 1.0, np.sqrt(spec.variance), shape)


def sample_partial_gaussian_mask(spec: MaskSpec, shape, stream: RngStream) -> Tensor:
    """1 where r > threshold, otherwise an N(1, σ²) draw (r ~ U(0,1))."""
    _require_stir(spec, Stir.PARTIAL_GAUSSIAN)
    r = draw_uniform(stream, shape)
    noise = draw_normal(stream, 1.0, np.sqrt(spec.variance), shape)
    return _frozen(np.where(r > spec.threshold, 1.0, noise))


_SAMPLERS = {
    Stir.BERNOULLI: sample_bernoulli_mask,
    Stir.GAUSSIAN: sample_gaussian_mask,
    Stir.PARTIAL_GAUSSIAN: sample_partial_gaussian_mask,
}


def sample_mask(spec: MaskSpec, shape, stream: RngStream) -> Tensor:
    """Dispatches to the sampler of `spec.stir`."""
    return _SAMPLERS[spec.stir](spec, shape, stream)


def expected_mask_value(spec: MaskSpec) -> float:
    if spec.stir is Stir.BERNOULLI:
        return 1.0 - spec.drop_rate
    # both components of the partial mask have mean 1
    return 1.0


def mask_variance(spec: MaskSpec) -> float:
    """Var(m) per element: p(1−p), σ², or t·σ² for the partial mixture."""
    if spec.stir is Stir.BERNOULLI:
        return spec.drop_rate * (1.0 - spec.drop_rate)
    if spec.stir is Stir.GAUSSIAN:
        return spec.variance
    return spec.threshold * spec.variance
