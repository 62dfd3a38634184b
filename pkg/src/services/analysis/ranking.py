"""
Selection and rank statistics over training logs: per-variant top-k,
Friedman χ² with its chi-square p-value, and Kendall's W.
"""
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from infrastructure.errors import ContractError
from infrastructure.logger import log

EPS = 1e-15
FPMIN = 1e-300
MAX_ITER = 10_000


@dataclass
class RankReport:
    variants: list
    # within-block Friedman mean rank per variant
    mean_ranks: dict
    friedman_chi2: float
    p_value: float
    kendall_w: float
    n_blocks: int
    k_variants: int
    # ranks over all selected values pooled together (table parity)
    pooled_mean_ranks: dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "variant": self.variants,
            "mean_rank": [self.mean_ranks[v] for v in self.variants],
            "pooled_mean_rank": [self.pooled_mean_ranks.get(v, np.nan) for v in self.variants],
            "friedman_chi2": self.friedman_chi2,
            "p_value": self.p_value,
            "kendall_w": self.kendall_w,
            "n_blocks": self.n_blocks,
            "k_variants": self.k_variants,
        })


# ----------------------------------
# TOP-K SELECTION
# ----------------------------------
def _sort_key(record):
    # ties: earlier epoch, then lower drop rate
    return (record.val_loss, record.epoch, record.drop_rate)


def select_top_k(records, k: int, group_by: str = "variant") -> list:
    """
    Per group, the k records with the smallest val_loss over all drop rates and
    epochs (duplicate drop rates allowed). Diverged records are never selected.
    Groups come out in name order, each ascending by val_loss.
    """
    if k < 1:
        raise ContractError(f"k must be positive, got {k}")
    groups = {}
    for record in records:
        if record.diverged or record.val_loss is None:
            continue
        groups.setdefault(getattr(record, group_by), []).append(record)
    selected = []
    for name in sorted(groups):
        selected.extend(sorted(groups[name], key=_sort_key)[:k])
    return selected


def blocks_from_records(selected) -> pd.DataFrame:
    """n×k table: column per variant, row b holds that variant's b-th lowest val_loss."""
    by_variant = {}
    for record in selected:
        by_variant.setdefault(record.variant, []).append(record.val_loss)
    if not by_variant:
        return pd.DataFrame()
    n = min(len(v) for v in by_variant.values())
    return pd.DataFrame({name: sorted(values)[:n] for name, values in sorted(by_variant.items())})


# ----------------------------------
# CHI-SQUARE TAIL
# ----------------------------------
def _gamma_p_series(a, x):
    """Regularized lower incomplete gamma P(a, x) by its power series."""
    ap, delta = a, 1.0 / a
    total = delta
    for _ in range(MAX_ITER):
        ap += 1.0
        delta *= x / ap
        total += delta
        if abs(delta) < abs(total) * EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_continued_fraction(a, x):
    """Regularized upper incomplete gamma Q(a, x) by Lentz's continued fraction."""
    b = x + 1.0 - a
    c = 1.0 / FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < FPMIN:
            d = FPMIN
        c = b + an / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def chi2_sf(x: float, df: int) -> float:
    """P(χ²_df ≥ x)."""
    if df < 1:
        raise ContractError(f"degrees of freedom must be positive, got {df}")
    if x <= 0:
        return 1.0
    a, y = df / 2.0, x / 2.0
    if y < a + 1.0:
        return max(0.0, 1.0 - _gamma_p_series(a, y))
    return _gamma_q_continued_fraction(a, y)


def kendall_w_from_chi2(chi2: float, n_blocks: int, k_variants: int) -> float:
    """W = χ² / (n(k−1))."""
    return chi2 / (n_blocks * (k_variants - 1))


# ----------------------------------
# FRIEDMAN TEST
# ----------------------------------
def friedman_test(blocks, lower_is_better: bool = True, variants=None) -> RankReport:
    """
    Friedman test on an n×k matrix (blocks × treatments), average ranks on ties.
    χ²_F = 12/(n·k·(k+1))·Σ R_j² − 3n(k+1), p from χ²_{k−1}, W = χ²_F/(n(k−1)).
    """
    frame = blocks.copy() if isinstance(blocks, pd.DataFrame) else pd.DataFrame(np.asarray(blocks, dtype=np.float64))
    if variants is not None:
        frame.columns = list(variants)
    n, k = frame.shape
    if n < 2 or k < 2:
        raise ContractError(f"Friedman test needs at least 2 blocks and 2 treatments, got {n}×{k}")
    if frame.isna().any().any():
        raise ContractError("Friedman test needs a complete block matrix (missing cells found)")

    ranks = frame.rank(axis=1, method="average", ascending=lower_is_better)
    rank_sums = ranks.sum(axis=0).to_numpy()
    chi2 = 12.0 / (n * k * (k + 1)) * float(np.sum(rank_sums ** 2)) - 3.0 * n * (k + 1)
    chi2 = max(chi2, 0.0)
    w = min(kendall_w_from_chi2(chi2, n, k), 1.0)
    p_value = chi2_sf(chi2, k - 1)

    names = [str(c) for c in frame.columns]
    mean_ranks = dict(zip(names, (rank_sums / n).tolist()))
    log.info(f"[FRIEDMAN] n={n}, k={k}: chi2={chi2:.3f}, p={p_value:.2e}, W={w:.3f}")
    return RankReport(names, mean_ranks, chi2, p_value, w, n, k)


def pooled_mean_ranks(selected, lower_is_better: bool = True) -> dict:
    """All selected val_losses ranked together (1..N); mean rank per variant."""
    if not selected:
        return {}
    frame = pd.DataFrame({"variant": [r.variant for r in selected], "val_loss": [r.val_loss for r in selected]})
    frame["rank"] = frame["val_loss"].rank(method="average", ascending=lower_is_better)
    return frame.groupby("variant")["rank"].mean().to_dict()


def rank_records(records, k: int = 5) -> RankReport:
    """Top-k per variant → position blocks → Friedman test, plus pooled mean ranks."""
    selected = select_top_k(records, k)
    report = friedman_test(blocks_from_records(selected))
    report.pooled_mean_ranks = pooled_mean_ranks(
        [r for r in selected if r.variant in report.mean_ranks]
    )
    return report
