"""
Desk-scale datasets: synthetic generators, CSV ingestion and the seeded
train/validation split. Every sample carries a persistent `sample_id`.
"""
import hashlib
import json
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from infrastructure.csv_reader import CsvReader
from infrastructure.errors import ConfigurationError
from infrastructure.logger import log
from services.tensor_core import RngStream, draw_normal, draw_permutation, draw_uniform


class DatasetKind(str, Enum):
    GAUSSIAN_BLOBS = "gaussian_blobs"
    TWO_SPIRALS = "two_spirals"
    NOISY_LABEL_MEMORIZATION = "noisy_label_memorization"


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    kind: DatasetKind = DatasetKind.GAUSSIAN_BLOBS
    n_samples: int = 512
    n_features: int = 8
    n_classes: int = 4
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", DatasetKind(self.kind))
        if self.n_classes < 2:
            raise ConfigurationError(f"n_classes must be at least 2, got {self.n_classes}", key="n_classes")
        if self.n_samples < self.n_classes:
            raise ConfigurationError(
                f"n_samples ({self.n_samples}) must be at least n_classes ({self.n_classes})", key="n_samples"
            )
        if self.n_features < 2:
            raise ConfigurationError(f"n_features must be at least 2, got {self.n_features}", key="n_features")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ConfigurationError(f"label_noise must lie in [0, 1], got {self.label_noise}", key="label_noise")

    @property
    def dataset_id(self) -> str:
        payload = json.dumps({**asdict(self), "kind": self.kind.value}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class Dataset:
    x: np.ndarray
    # one-hot (single-label) or multi-hot targets, n × k
    y: np.ndarray
    sample_ids: np.ndarray
    name: str = ""

    @property
    def n_samples(self) -> int:
        return self.x.shape[0]

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    @property
    def n_classes(self) -> int:
        return self.y.shape[1]

    @property
    def is_multilabel(self) -> bool:
        return bool(np.any(self.y.sum(axis=1) != 1))

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.x[index], self.y[index], self.sample_ids[index], self.name)


@dataclass
class DatasetSplit:
    train: Dataset
    val: Dataset


# ----------------------------------
# GENERATORS
# ----------------------------------
def _balanced_labels(n, k, stream):
    """Exactly balanced (±1) labels in random order."""
    return (np.arange(n) % k)[draw_permutation(stream, n)]


def _class_centers(k, d, separation, stream):
    """k centers at pairwise distance ≥ separation, randomly rotated."""
    if d >= k:
        basis = np.eye(d)[:k]
    else:
        angles = 2 * np.pi * np.arange(k) / k
        basis = np.zeros((k, d))
        basis[:, 0], basis[:, 1] = np.cos(angles), np.sin(angles)
        # adjacent points on the unit circle are 2·sin(π/k) apart
        basis *= np.sqrt(2) / (2 * np.sin(np.pi / k))
    q, _ = np.linalg.qr(draw_normal(stream, 0.0, 1.0, (d, d)))
    return separation / np.sqrt(2) * basis @ q


def _apply_label_noise(labels, fraction, stream):
    """Shuffles the labels of a random `fraction` of samples among themselves (keeps class balance)."""
    n_noisy = int(round(fraction * labels.size))
    if n_noisy == 0:
        return labels
    noisy = draw_permutation(stream, labels.size)[:n_noisy]
    out = labels.copy()
    out[noisy] = labels[noisy][draw_permutation(stream, n_noisy)]
    return out


def _blobs(spec, stream, separation):
    labels = _balanced_labels(spec.n_samples, spec.n_classes, stream.split("labels"))
    centers = _class_centers(spec.n_classes, spec.n_features, separation, stream.split("centers"))
    x = centers[labels] + draw_normal(stream.split("noise"), 0.0, 1.0, (spec.n_samples, spec.n_features))
    return x, labels


def _spirals(spec, stream):
    labels = _balanced_labels(spec.n_samples, spec.n_classes, stream.split("labels"))
    t = draw_uniform(stream.split("position"), spec.n_samples)
    radius = 0.25 + 2.0 * t
    angle = 3.0 * np.pi * t + 2.0 * np.pi * labels / spec.n_classes
    x = np.array(draw_normal(stream.split("noise"), 0.0, 0.08, (spec.n_samples, spec.n_features)))
    x[:, 0] += radius * np.cos(angle)
    x[:, 1] += radius * np.sin(angle)
    return x, labels


def generate(spec: SyntheticDatasetSpec) -> Dataset:
    """Deterministic in `spec.seed`; classes balanced within ±1."""
    stream = RngStream(spec.seed).split(spec.kind.value)
    if spec.kind is DatasetKind.GAUSSIAN_BLOBS:
        x, labels = _blobs(spec, stream, separation=8.0)
    elif spec.kind is DatasetKind.TWO_SPIRALS:
        x, labels = _spirals(spec, stream)
    else:
        # weak class signal: most of what a large net fits here is label noise
        x, labels = _blobs(spec, stream, separation=2.0)

    labels = _apply_label_noise(labels, spec.label_noise, stream.split("label_noise"))
    y = np.eye(spec.n_classes)[labels]
    log.info(f"Generated {spec.kind.value}: n={spec.n_samples}, d={spec.n_features}, "
             f"k={spec.n_classes}, noise={spec.label_noise}")
    return Dataset(x, y, np.arange(spec.n_samples, dtype=np.int64), spec.kind.value)


def split_dataset(dataset: Dataset, val_fraction: float = 0.2, seed: int = 0) -> DatasetSplit:
    """Seeded split; sample_ids travel with their rows."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigurationError(f"val_fraction must lie in (0, 1), got {val_fraction}", key="val_fraction")
    n = dataset.n_samples
    n_val = min(max(1, int(round(val_fraction * n))), n - 1)
    perm = draw_permutation(RngStream(seed).split("split"), n)
    return DatasetSplit(dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val])))


# ----------------------------------
# CSV IO
# ----------------------------------
def write_dataset(dataset: Dataset, out_dir) -> tuple:
    """Writes features.csv (sample_id first) and labels.csv; byte-identical for equal datasets."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    features = pd.DataFrame(dataset.x, columns=[f"f{i}" for i in range(dataset.n_features)])
    features.insert(0, "sample_id", dataset.sample_ids)

    if dataset.is_multilabel:
        labels = pd.DataFrame(dataset.y.astype(np.int64), columns=[f"label_{i}" for i in range(dataset.n_classes)])
    else:
        labels = pd.DataFrame({"label": dataset.y.argmax(axis=1)})
    labels.insert(0, "sample_id", dataset.sample_ids)

    features_path, labels_path = out_dir / "features.csv", out_dir / "labels.csv"
    features.to_csv(features_path, index=False, float_format="%.17g", lineterminator="\n")
    labels.to_csv(labels_path, index=False, lineterminator="\n")
    log.info(f"Dataset written: {features_path} / {labels_path}")
    return features_path, labels_path


def read_dataset(features_csv, labels_csv, n_classes: int = None) -> Dataset:
    reader = CsvReader()
    features = reader.read_features(features_csv)
    labels = reader.read_labels(labels_csv)
    missing = features.index.difference(labels.index)
    if len(missing):
        raise ConfigurationError(f"{len(missing)} sample_ids have features but no label", key="labels_csv")
    labels = labels.loc[features.index]

    if list(labels.columns) == ["label"]:
        classes = labels["label"].to_numpy(dtype=np.int64)
        k = n_classes or int(classes.max()) + 1
        y = np.eye(k)[classes]
    else:
        y = labels.to_numpy(dtype=np.float64)

    return Dataset(features.to_numpy(dtype=np.float64), y,
                   features.index.to_numpy(dtype=np.int64), Path(features_csv).stem)


def file_dataset_id(*paths) -> str:
    digest = hashlib.sha256()
    for path in paths:
        digest.update(Path(path).read_bytes())
    return digest.hexdigest()[:16]
