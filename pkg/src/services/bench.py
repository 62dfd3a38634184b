"""
Epoch timing per variant on identical data and model widths.
"""
from dataclasses import replace

import numpy as np
import pandas as pd

from infrastructure.config import ExperimentConfig
from infrastructure.errors import ConfigurationError
from infrastructure.logger import log
from services.grid import load_split, model_config_for
from services.regularizers.masks import RegularizerTag
from services.training.trainer import fit

MIN_EPOCHS = 5
BASELINE_TAG = RegularizerTag.DROPOUT


def bench(config: ExperimentConfig, epochs: int = MIN_EPOCHS, drop_rate: float = None) -> pd.DataFrame:
    """
    Times `epochs` epochs of every configured variant at one drop rate (the first
    configured one unless given). Columns: variant, tag, epochs, mean_s, std_s,
    ratio_vs_dropout.
    """
    if epochs < MIN_EPOCHS:
        raise ConfigurationError(f"bench needs at least {MIN_EPOCHS} epochs, got {epochs}", key="epochs")
    rate = config.train.drop_rates[0] if drop_rate is None else drop_rate
    train_cfg = replace(config.train, epochs=epochs, early_stop=None, drop_rates=(rate,))
    split, _ = load_split(config)

    rows = []
    for kind in config.variants:
        try:
            model_cfg = model_config_for(config, split, kind.with_rate(rate))
            records = fit(model_cfg, train_cfg, split, variant=kind.name).records
        except ConfigurationError as e:
            log.warning(f"[BENCH] {kind.name} skipped: {e}")
            continue
        seconds = np.array([r.epoch_wall_seconds for r in records])
        rows.append({"variant": kind.name, "tag": kind.tag.value, "epochs": len(seconds),
                     "mean_s": float(seconds.mean()),
                     "std_s": float(seconds.std(ddof=1)) if seconds.size > 1 else 0.0})
        log.info(f"[BENCH] {kind.name}: {rows[-1]['mean_s']:.4f}s ± {rows[-1]['std_s']:.4f}s per epoch")

    table = pd.DataFrame(rows, columns=["variant", "tag", "epochs", "mean_s", "std_s"])
    baseline = table.loc[table["tag"] == BASELINE_TAG.value, "mean_s"]
    table["ratio_vs_dropout"] = table["mean_s"] / baseline.iloc[0] if len(baseline) else np.nan
    return table
