"""
Report emission: top-k tables, rank statistics and the two SVG charts.
"""
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from infrastructure.csv_reader import CsvReader
from infrastructure.errors import ContractError
from infrastructure.logger import log
from services.analysis.ranking import rank_records, select_top_k
from services.analysis.svg_charts import bar_chart, split_scatter
from services.training.trainer import TrainRecord

TOPK_COLUMNS = ["Variant", "DR", "Ep", "V-Acc", "V-Loss", "T-Loss", "T-Acc"]
RANK_COLUMNS = ["variant", "mean_rank", "pooled_mean_rank", "friedman_chi2", "p_value",
                "kendall_w", "n_blocks", "k_variants"]

TOPK_FILE = "topk.csv"
RANK_FILE = "rank_report.csv"
BAR_FILE = "topk_val_loss.svg"
SCATTER_FILE = "val_vs_train_loss.svg"


@dataclass
class ReportResult:
    topk_csv: Path
    rank_csv: Path
    svgs: list = field(default_factory=list)
    n_selected: int = 0
    rank_report: object = None

    @property
    def empty(self) -> bool:
        return self.n_selected == 0


def topk_frame(selected) -> pd.DataFrame:
    return pd.DataFrame(
        [[r.variant, r.drop_rate, r.epoch, r.val_acc, r.val_loss, r.train_loss_clean, r.train_acc_clean]
         for r in selected],
        columns=TOPK_COLUMNS,
    )


def read_topk(path) -> list:
    """Re-reads a topk.csv into TrainRecords (timing fields are not part of the table)."""
    df = CsvReader().read_topk(path)
    return [
        TrainRecord(variant=str(row["Variant"]), drop_rate=float(row["DR"]), epoch=int(row["Ep"]),
                    val_loss=float(row["V-Loss"]), val_acc=float(row["V-Acc"]),
                    train_loss_clean=float(row["T-Loss"]), train_acc_clean=float(row["T-Acc"]),
                    epoch_wall_seconds=0.0)
        for _, row in df.iterrows()
    ]


def emit_report(records, out_dir, k: int = 3, rank_k: int = 5) -> ReportResult:
    """
    Writes topk.csv, rank_report.csv and the bar/scatter SVGs under `out_dir`.
    An empty (or all-diverged) record set still writes both CSVs with headers, but no SVGs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = ReportResult(out_dir / TOPK_FILE, out_dir / RANK_FILE)

    selected = select_top_k(records, k)
    result.n_selected = len(selected)
    topk_frame(selected).to_csv(result.topk_csv, index=False, float_format="%.17g", lineterminator="\n")

    # 1. Rank statistics over the best `rank_k` records per variant
    rank_df = pd.DataFrame(columns=RANK_COLUMNS)
    if selected:
        try:
            result.rank_report = rank_records(records, rank_k)
            rank_df = result.rank_report.to_frame()[RANK_COLUMNS]
        except ContractError as e:
            log.warning(f"[REPORT] rank statistics skipped: {e}")
    rank_df.to_csv(result.rank_csv, index=False, float_format="%.17g", lineterminator="\n")

    if not selected:
        log.warning(f"[REPORT] no usable records; wrote header-only tables to {out_dir}")
        return result

    # 2. Charts
    groups, points = {}, {}
    for r in selected:
        groups.setdefault(r.variant, []).append(r.val_loss)
        points.setdefault(r.variant, []).append((r.val_loss, r.train_loss_clean))
    result.svgs.append(bar_chart(groups, title=f"Lowest {k} validation losses per variant").save(out_dir / BAR_FILE))
    result.svgs.append(split_scatter(points).save(out_dir / SCATTER_FILE))

    log.info(f"[REPORT] {len(selected)} records from {len(groups)} variants → {out_dir}")
    return result
