"""
Grid runner: every configured variant × drop rate, resumable by run key.

Each run owns its RNG streams (all derived from the train seed), so results do
not depend on worker count or completion order.
"""
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import pandas as pd

from infrastructure.config import ExperimentConfig
from infrastructure.errors import ConfigurationError
from infrastructure.logger import log
from infrastructure.run_log import RunLogWriter, read_rows, run_key
from services.datasets import (DatasetKind, DatasetSplit, SyntheticDatasetSpec, file_dataset_id, generate,
                               read_dataset, split_dataset)
from services.regularizers.masks import MaskSpec, RegularizerKind, RegularizerTag
from services.training.model import MaskedMLP, ModelConfig, OutputKind
from services.training.trainer import DEFAULT_DROP_RATES, STATUS_DIVERGED, STATUS_OK, TrainConfig, TrainRecord, fit

STATUS_CONFIG_ERROR = "config_error"


@dataclass
class GridResult:
    log_dir: Path
    records: list = field(default_factory=list)
    executed: int = 0
    skipped: int = 0
    # run key → error message
    errors: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RunPlan:
    key: str
    kind: RegularizerKind
    drop_rate: float


def _plain(obj):
    """JSON-ready copy of nested dataclass dicts (enums by value)."""
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_split(config: ExperimentConfig) -> tuple:
    """(DatasetSplit, dataset_id) for the configured synthetic spec or CSV pair."""
    if config.features_csv is not None:
        dataset = read_dataset(config.features_csv, config.labels_csv)
        dataset_id = file_dataset_id(config.features_csv, config.labels_csv)
    else:
        dataset = generate(config.dataset)
        dataset_id = config.dataset.dataset_id
    return split_dataset(dataset, config.train.val_fraction, config.train.seed), dataset_id


def model_config_for(config: ExperimentConfig, split: DatasetSplit, kind: RegularizerKind) -> ModelConfig:
    model = dict(config.model)
    # multi-hot targets need independent sigmoid outputs
    model.setdefault("output", OutputKind.SIGMOID if split.train.is_multilabel else OutputKind.SOFTMAX)
    return ModelConfig(input_dim=split.train.n_features, n_classes=split.train.n_classes, regularizer=kind, **model)


def plan_runs(config: ExperimentConfig, dataset_id: str) -> list:
    """Run plans in (variant, drop rate) order with their content-derived keys."""
    plans = []
    train = config.train
    for kind in config.variants:
        for p in train.drop_rates:
            payload = {
                "dataset": dataset_id,
                "model": _plain(config.model),
                "variant": _plain(asdict(kind)),
                "drop_rate": p,
                "seed": train.seed,
                "train": {"batch_size": train.batch_size, "epochs": train.epochs,
                          "learning_rate": train.learning_rate, "early_stop": train.early_stop,
                          "val_fraction": train.val_fraction},
            }
            plans.append(RunPlan(run_key(payload), kind.with_rate(p), p))
    return plans


def _execute(plan: RunPlan, config: ExperimentConfig, split: DatasetSplit, writer: RunLogWriter) -> tuple:
    """Runs one plan. Returns (records, status, error)."""
    entry = {"variant": plan.kind.name, "drop_rate": plan.drop_rate}
    try:
        model_cfg = model_config_for(config, split, plan.kind)
        # builds the slot once so an incompatible grouping fails before any file is opened
        MaskedMLP(model_cfg)
        writer.begin(plan.key)
        result = fit(model_cfg, config.train, split, variant=plan.kind.name,
                     on_record=lambda r: writer.append(plan.key, r.to_dict()))
    except ConfigurationError as e:
        # e.g. MaskEnsemble grouping incompatible with the slot input width
        log.warning(f"[GRID] {plan.kind.name} p={plan.drop_rate} skipped: {e}")
        writer.finish(plan.key, {**entry, "status": STATUS_CONFIG_ERROR, "error": str(e)})
        return [], STATUS_CONFIG_ERROR, str(e)

    status = STATUS_DIVERGED if any(r.diverged for r in result.records) else STATUS_OK
    writer.finish(plan.key, {**entry, "status": status, "error": None, "epochs": len(result.records)})
    return result.records, status, None


def run_grid(config: ExperimentConfig, out_dir=None, jobs: int = 1) -> GridResult:
    """
    Executes the full variant × drop-rate cross product under `out_dir/logs`.
    Finished runs (by key) are skipped; interrupted ones are re-run from scratch.
    """
    if jobs < 1:
        raise ConfigurationError(f"--jobs must be at least 1, got {jobs}", key="jobs")
    log_dir = Path(out_dir or config.out_dir) / "logs"
    split, dataset_id = load_split(config)
    writer = RunLogWriter(log_dir)
    writer.discard_partials()

    plans = plan_runs(config, dataset_id)
    pending = [p for p in plans if not writer.is_complete(p.key)]
    result = GridResult(log_dir, skipped=len(plans) - len(pending))
    log.info(f"[GRID] {len(plans)} runs planned, {result.skipped} already complete, {len(pending)} to execute "
             f"on {jobs} worker(s)")

    with ThreadPoolExecutor(max_workers=jobs) as executor:
        futures = {executor.submit(_execute, plan, config, split, writer): plan for plan in pending}
        for future in as_completed(futures):
            plan = futures[future]
            _records, status, error = future.result()
            result.executed += 1
            if error:
                result.errors[plan.key] = error
            log.info(f"[GRID] ({result.executed}/{len(pending)}) {plan.kind.name} p={plan.drop_rate}: {status}")

    result.records = load_records(log_dir)
    return result


def load_records(log_dir) -> list:
    """TrainRecords of every finished run under `log_dir`."""
    return [TrainRecord.from_dict(row) for row in read_rows(log_dir)]


# ----------------------------------
# MEMORIZATION GAP STUDY
# ----------------------------------
def memorization_gap_study(drop_rates=DEFAULT_DROP_RATES, epochs: int = 200, seed: int = 0,
                           n_samples: int = 512, label_noise: float = 0.2,
                           hidden_widths=(128,), dense_units: int = 128) -> pd.DataFrame:
    """
    Plain vs PerNodeDrop on the noisy-label set. One row per run, taken at the
    run's best-val epoch, with gap = val_loss − train_loss_clean.
    """
    spec = SyntheticDatasetSpec(DatasetKind.NOISY_LABEL_MEMORIZATION, n_samples=n_samples, n_features=16,
                                n_classes=4, label_noise=label_noise, seed=seed)
    split = split_dataset(generate(spec), 0.3, seed)
    train_cfg = TrainConfig(drop_rates=drop_rates, epochs=epochs, seed=seed, learning_rate=3e-3)
    variants = [(RegularizerKind(RegularizerTag.PLAIN), (0.0,)),
                (RegularizerKind(RegularizerTag.PERNODEDROP, MaskSpec(seed=seed)), tuple(drop_rates))]

    rows = []
    for kind, rates in variants:
        for p in rates:
            model_cfg = ModelConfig(spec.n_features, spec.n_classes, tuple(hidden_widths),
                                    kind.with_rate(p), dense_units=dense_units)
            records = [r for r in fit(model_cfg, train_cfg, split).records if not r.diverged]
            if not records:
                continue
            best = min(records, key=lambda r: (r.val_loss, r.epoch))
            rows.append({"variant": kind.name, "drop_rate": p, "best_epoch": best.epoch,
                         "val_loss": best.val_loss, "train_loss_clean": best.train_loss_clean,
                         "val_acc": best.val_acc, "train_acc_clean": best.train_acc_clean,
                         "gap": best.val_loss - best.train_loss_clean})
    frame = pd.DataFrame(rows)
    log.info(f"[MEMO] {len(frame)} runs, gaps: {frame.groupby('variant')['gap'].min().to_dict() if rows else {}}")
    return frame
