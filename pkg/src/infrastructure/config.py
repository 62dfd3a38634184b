"""
Experiment configuration: a TOML file validated against a JSON Schema before
anything is computed. Unknown keys are rejected everywhere.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import toml

from infrastructure.errors import ConfigurationError, DomainError
from infrastructure.logger import log
from services.datasets import DatasetKind, SyntheticDatasetSpec
from services.regularizers.masks import (FixedScope, Granularity, MaskMode, MaskSpec, RegularizerKind,
                                         RegularizerTag, Stir)
from services.training.model import ModelConfig, OutputKind
from services.training.trainer import DEFAULT_DROP_RATES, TrainConfig

_POSITIVE_INT = {"type": "integer", "minimum": 1}
_PROBABILITY = {"type": "number", "minimum": 0, "maximum": 1}

SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "variants"],
    "properties": {
        "out_dir": {"type": "string"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": [k.value for k in DatasetKind]},
                "n_samples": _POSITIVE_INT,
                "n_features": {"type": "integer", "minimum": 2},
                "n_classes": {"type": "integer", "minimum": 2},
                "label_noise": _PROBABILITY,
                "seed": {"type": "integer", "minimum": 0},
                "features_csv": {"type": "string"},
                "labels_csv": {"type": "string"},
            },
            "dependencies": {"features_csv": ["labels_csv"], "labels_csv": ["features_csv"]},
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden_widths": {"type": "array", "items": _POSITIVE_INT},
                "dense_units": _POSITIVE_INT,
                "reg_position": {"type": "integer", "minimum": 0},
                "output": {"enum": [o.value for o in OutputKind]},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "drop_rates": {"type": "array", "minItems": 1,
                               "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}},
                "batch_size": _POSITIVE_INT,
                "epochs": _POSITIVE_INT,
                "learning_rate": {"type": "number", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "early_stop": _POSITIVE_INT,
                "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "variants": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["tag"],
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "tag": {"enum": [t.value for t in RegularizerTag]},
                    "stir": {"enum": [s.value for s in Stir]},
                    "granularity": {"enum": [g.value for g in Granularity]},
                    "mode": {"enum": [m.value for m in MaskMode]},
                    "fixed_scope": {"enum": [f.value for f in FixedScope]},
                    "sigma": {"type": "number", "minimum": 0},
                    "partial_threshold": _PROBABILITY,
                    "mask_groups": _POSITIVE_INT,
                },
            },
        },
    },
}

DEFAULT_OUT_DIR = "runs"


@dataclass
class ExperimentConfig:
    dataset: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    variants: list = field(default_factory=list)
    out_dir: Path = Path(DEFAULT_OUT_DIR)
    # CSV input instead of a synthetic dataset
    features_csv: Optional[Path] = None
    labels_csv: Optional[Path] = None
    source: Optional[Path] = None

    def model_config(self, input_dim: int, n_classes: int, kind: RegularizerKind) -> ModelConfig:
        return ModelConfig(input_dim=input_dim, n_classes=n_classes, regularizer=kind, **self.model)


def _dotted(path) -> str:
    parts = []
    for p in path:
        if isinstance(p, int):
            parts.append(f"[{p}]")
        else:
            parts.append(("." if parts else "") + str(p))
    return "".join(parts) or "<root>"


def _offending_key(error) -> str:
    """Dotted path of the offending key; for unknown keys the key itself is appended."""
    path = list(error.absolute_path)
    if error.validator == "additionalProperties":
        extra = sorted(set(error.instance) - set(error.schema.get("properties", {})))
        if extra:
            path.append(extra[0])
    elif error.validator == "required":
        missing = [k for k in error.validator_value if k not in error.instance]
        if missing:
            path.append(missing[0])
    return _dotted(path)


def validate(raw: dict):
    """Raises ConfigurationError naming the first offending key (in document path order)."""
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        first = errors[0]
        key = _offending_key(first)
        raise ConfigurationError(f"{key}: {first.message}", key=key)


def _variant(entry: dict, index: int, seed: int) -> RegularizerKind:
    spec_fields = {k: entry[k] for k in ("stir", "granularity", "mode", "fixed_scope", "sigma", "partial_threshold")
                   if k in entry}
    try:
        spec = MaskSpec(seed=seed, **spec_fields)
        return RegularizerKind(tag=entry["tag"], spec=spec, mask_groups=entry.get("mask_groups", 1),
                               name=entry.get("name", ""))
    except DomainError as e:
        raise ConfigurationError(f"variants[{index}]: {e}", key=f"variants[{index}]") from e


def _check_model(model: dict):
    """Builds a throwaway ModelConfig so layout errors surface at load time."""
    try:
        ExperimentConfig(model=model).model_config(input_dim=1, n_classes=2, kind=RegularizerKind())
    except ConfigurationError as e:
        key = f"model.{e.key}" if e.key else "model"
        raise ConfigurationError(f"{key}: {e}", key=key) from e


def from_dict(raw: dict, source: Path = None) -> ExperimentConfig:
    validate(raw)
    train = TrainConfig(**{"drop_rates": DEFAULT_DROP_RATES, **raw.get("train", {})})

    dataset_raw = dict(raw["dataset"])
    features_csv = dataset_raw.pop("features_csv", None)
    labels_csv = dataset_raw.pop("labels_csv", None)
    dataset = SyntheticDatasetSpec(**dataset_raw)

    model = dict(raw.get("model", {}))
    if "hidden_widths" in model:
        model["hidden_widths"] = tuple(model["hidden_widths"])
    _check_model(model)

    variants = [_variant(v, i, train.seed) for i, v in enumerate(raw["variants"])]
    names = [v.name for v in variants]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise ConfigurationError(f"variants: duplicate variant names {duplicates}", key="variants")

    base = source.parent if source is not None else Path(".")
    return ExperimentConfig(
        dataset=dataset,
        model=model,
        train=train,
        variants=variants,
        out_dir=Path(raw.get("out_dir", DEFAULT_OUT_DIR)),
        features_csv=base / features_csv if features_csv else None,
        labels_csv=base / labels_csv if labels_csv else None,
        source=source,
    )


def load_config(path) -> ExperimentConfig:
    """Parses and validates a TOML experiment file; diagnostics name the TOML line or the key path."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}", key="--config")
    try:
        raw = toml.loads(path.read_text(encoding="utf-8"))
    except toml.TomlDecodeError as e:
        raise ConfigurationError(f"{path.name}, line {e.lineno}: {e.msg}", key=f"line {e.lineno}") from e

    try:
        config = from_dict(raw, source=path)
    except ConfigurationError as e:
        log.error(f"[CONFIG] {path.name}: {e}")
        raise
    except (TypeError, ValueError) as e:
        log.error(f"[CONFIG] {path.name}: {e}")
        raise ConfigurationError(f"{path.name}: {e}") from e

    log.info(f"[CONFIG] {path.name}: {len(config.variants)} variants × {len(config.train.drop_rates)} drop rates")
    return config
