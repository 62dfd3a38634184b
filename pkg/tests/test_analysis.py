import xml.etree.ElementTree as ET

import numpy as np
import pandas as pd
import pytest
from scipy import integrate, stats

from infrastructure.errors import ContractError, DimensionError
from services.analysis.penalty import closed_form_penalty, general_trace_penalty, mc_expected_loss_gap
from services.analysis.ranking import (
    blocks_from_records, chi2_sf, friedman_test, kendall_w_from_chi2, pooled_mean_ranks, rank_records,
    select_top_k,
)
from services.analysis.report import RANK_COLUMNS, TOPK_COLUMNS, emit_report, read_topk
from services.analysis.svg_charts import bar_chart, median_split, split_scatter
from services.regularizers.masks import MaskSpec, Stir
from services.tensor_core import RngStream
from services.training.trainer import TrainRecord
from services.verify import half_sq_norm, logistic_loss

SVG_NS = "{http://www.w3.org/2000/svg}"


def record(variant, val_loss, epoch=1, drop_rate=0.1, train_loss=None, status="ok"):
    return TrainRecord(variant, drop_rate, epoch, val_loss, 0.5, train_loss if train_loss is not None else val_loss / 2,
                       0.6, 0.01, status)


def synthetic_records(n_variants=3, per_variant=8, seed=0):
    rng = np.random.default_rng(seed)
    return [record(f"V{v}", float(rng.uniform(0.2, 1.5) + 0.1 * v), epoch=e % 4 + 1, drop_rate=0.1 * (e % 5),
                   train_loss=float(rng.uniform(0.05, 1.0)))
            for v in range(n_variants) for e in range(per_variant)]


# ----------------------------------
# PENALTY
# ----------------------------------
class TestPenalty:
    def test_zero_rate_has_no_gap(self):
        est = mc_expected_loss_gap(half_sq_norm, np.array([1.0, 2.0]), MaskSpec(Stir.BERNOULLI, 0.0), 1000,
                                   RngStream(0))
        assert est.mc_gap == 0.0
        assert est.std_err == 0.0
        assert est.closed_form == pytest.approx(0.0, abs=1e-8)

    def test_quadratic_anchor(self):
        W, spec = np.array([1.0, 2.0]), MaskSpec(Stir.BERNOULLI, 0.5)
        assert closed_form_penalty(W, np.ones(2), spec) == pytest.approx(0.625)
        est = mc_expected_loss_gap(half_sq_norm, W, spec, 10_000, RngStream(1))
        assert est.closed_form == pytest.approx(0.625, abs=1e-6)
        assert abs(est.z_score) < 4

    def test_gaussian_with_matched_variance_equals_bernoulli(self):
        W, H, p = np.array([0.3, -1.2, 2.0]), np.array([1.0, 2.0, 0.5]), 0.3
        gaussian = MaskSpec(Stir.GAUSSIAN, p, sigma=np.sqrt(p * (1 - p)))
        assert closed_form_penalty(W, H, gaussian) == pytest.approx(closed_form_penalty(W, H, MaskSpec(Stir.BERNOULLI, p)))

    def test_control_variate_shrinks_error(self):
        rng = np.random.default_rng(2)
        X, y = rng.normal(size=(40, 3)), np.where(rng.random(40) > 0.5, 1.0, -1.0)
        loss_fn, W, spec = logistic_loss(X, y), rng.normal(0.0, 0.3, size=3), MaskSpec(Stir.BERNOULLI, 0.2)
        plain = mc_expected_loss_gap(loss_fn, W, spec, 2000, RngStream(3), with_closed_form=False)
        reduced = mc_expected_loss_gap(loss_fn, W, spec, 2000, RngStream(3), with_closed_form=False,
                                       control_variate=True)
        assert reduced.std_err < plain.std_err
        assert plain.closed_form is None

    def test_too_few_samples(self):
        with pytest.raises(ContractError):
            mc_expected_loss_gap(half_sq_norm, np.ones(2), MaskSpec(), 10, RngStream(0))

    def test_trace_form_reduces_to_diagonal_form(self):
        W, H, p = np.array([0.5, -1.0, 1.5]), np.array([2.0, 1.0, 3.0]), 0.4
        spec = MaskSpec(Stir.BERNOULLI, p)
        trace = general_trace_penalty(W, np.diag(H), p * (1 - p) * np.eye(3))
        assert trace == pytest.approx(closed_form_penalty(W, H, spec), abs=1e-12)

    def test_zero_covariance(self):
        assert general_trace_penalty(np.ones(2), np.eye(2), np.zeros((2, 2))) == 0.0

    def test_asymmetric_hessian(self):
        with pytest.raises(ContractError):
            general_trace_penalty(np.ones(2), np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(2))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            closed_form_penalty(np.ones(2), np.ones(3), MaskSpec())


# ----------------------------------
# RANKING
# ----------------------------------
class TestSelectTopK:
    def test_single_best_per_variant(self):
        records = [record("A", 0.5), record("A", 0.3), record("B", 0.9), record("B", 0.7)]
        assert [r.val_loss for r in select_top_k(records, 1)] == [0.3, 0.7]

    def test_ties_prefer_earlier_epoch_then_lower_rate(self):
        records = [record("A", 0.4, epoch=3, drop_rate=0.1), record("A", 0.4, epoch=2, drop_rate=0.5),
                   record("A", 0.4, epoch=2, drop_rate=0.2)]
        chosen = select_top_k(records, 2)
        assert [(r.epoch, r.drop_rate) for r in chosen] == [(2, 0.2), (2, 0.5)]

    def test_diverged_records_are_never_selected(self):
        records = [record("A", None, status="diverged"), record("A", 0.8)]
        assert [r.val_loss for r in select_top_k(records, 3)] == [0.8]

    def test_matches_sorted_table(self):
        records = synthetic_records(n_variants=4, per_variant=10, seed=1)
        frame = pd.DataFrame([r.to_dict() for r in records])
        expected = (frame.sort_values(["variant", "val_loss", "epoch", "drop_rate"], kind="mergesort")
                    .groupby("variant").head(3))
        chosen = select_top_k(records, 3)
        assert [(r.variant, r.val_loss) for r in chosen] == list(zip(expected["variant"], expected["val_loss"]))

    def test_k_must_be_positive(self):
        with pytest.raises(ContractError):
            select_top_k([], 0)

    def test_blocks_use_shortest_variant(self):
        selected = [record("A", 0.1), record("A", 0.2), record("A", 0.3), record("B", 0.5), record("B", 0.4)]
        blocks = blocks_from_records(selected)
        assert list(blocks.columns) == ["A", "B"]
        np.testing.assert_array_equal(blocks.to_numpy(), [[0.1, 0.4], [0.2, 0.5]])


class TestFriedman:
    def test_perfect_concordance(self):
        report = friedman_test(np.tile(np.arange(1.0, 9.0), (5, 1)))
        assert report.friedman_chi2 == pytest.approx(35.0)
        assert report.kendall_w == pytest.approx(1.0)
        assert report.mean_ranks["0"] == 1.0

    def test_naming_variants_leaves_the_input_frame_alone(self):
        blocks = pd.DataFrame(np.tile(np.arange(1.0, 4.0), (3, 1)))
        report = friedman_test(blocks, variants=["A", "B", "C"])
        assert report.variants == ["A", "B", "C"]
        assert list(blocks.columns) == [0, 1, 2]

    def test_kendall_w_from_chi2(self):
        assert kendall_w_from_chi2(34.6, 5, 8) == pytest.approx(0.98857, abs=1e-5)

    def test_matches_scipy_without_ties(self):
        data = np.random.default_rng(4).normal(size=(6, 4))
        report = friedman_test(data)
        expected = stats.friedmanchisquare(*data.T)
        assert report.friedman_chi2 == pytest.approx(expected.statistic, rel=1e-10)
        assert report.p_value == pytest.approx(expected.pvalue, rel=1e-8)

    def test_rank_invariance(self):
        data = np.random.default_rng(5).uniform(0.1, 2.0, size=(7, 3))
        assert friedman_test(np.exp(data)).friedman_chi2 == pytest.approx(friedman_test(data).friedman_chi2)

    def test_higher_is_better_reverses_ranks(self):
        data = np.tile([1.0, 2.0, 3.0], (4, 1))
        report = friedman_test(data, lower_is_better=False, variants=["a", "b", "c"])
        assert report.mean_ranks == {"a": 3.0, "b": 2.0, "c": 1.0}

    def test_w_stays_in_unit_interval(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            w = friedman_test(rng.integers(0, 3, size=(5, 4)).astype(float)).kendall_w
            assert 0.0 <= w <= 1.0

    def test_needs_two_by_two(self):
        with pytest.raises(ContractError):
            friedman_test(np.ones((1, 3)))
        with pytest.raises(ContractError):
            friedman_test(np.ones((3, 1)))

    def test_missing_cells(self):
        with pytest.raises(ContractError):
            friedman_test(np.array([[1.0, np.nan], [2.0, 3.0]]))


class TestChi2Tail:
    @pytest.mark.parametrize("x, df", [(0.5, 1), (3.0, 2), (7.5, 4), (34.6, 7), (80.0, 9), (1.0, 30)])
    def test_matches_scipy(self, x, df):
        assert chi2_sf(x, df) == pytest.approx(stats.chi2.sf(x, df), rel=1e-9)

    def test_small_tail_by_quadrature(self):
        tail, _ = integrate.quad(lambda t: stats.chi2.pdf(t, 7), 34.6, np.inf)
        assert chi2_sf(34.6, 7) <= 2e-5
        assert chi2_sf(34.6, 7) == pytest.approx(tail, rel=1e-6)

    def test_two_dof_closed_form(self):
        assert chi2_sf(3.0, 2) == pytest.approx(np.exp(-1.5), rel=1e-12)

    def test_non_positive_statistic(self):
        assert chi2_sf(0.0, 3) == 1.0

    def test_bad_dof(self):
        with pytest.raises(ContractError):
            chi2_sf(1.0, 0)


class TestRankRecords:
    def test_report_over_records(self):
        report = rank_records(synthetic_records(seed=2), k=5)
        assert report.variants == ["V0", "V1", "V2"]
        assert report.n_blocks == 5
        assert sum(report.mean_ranks.values()) == pytest.approx(6.0)
        assert set(report.pooled_mean_ranks) == {"V0", "V1", "V2"}

    def test_pooled_ranks(self):
        selected = [record("A", 0.1), record("A", 0.4), record("B", 0.2), record("B", 0.3)]
        assert pooled_mean_ranks(selected) == {"A": 2.5, "B": 2.5}


# ----------------------------------
# REPORT
# ----------------------------------
class TestReport:
    def test_empty_input_writes_headers_only(self, tmp_path):
        result = emit_report([record("A", None, status="diverged")], tmp_path)
        assert result.empty
        assert result.svgs == []
        assert list(pd.read_csv(result.topk_csv).columns) == TOPK_COLUMNS
        assert len(pd.read_csv(result.topk_csv)) == 0
        assert list(pd.read_csv(result.rank_csv).columns) == RANK_COLUMNS

    def test_tables_and_charts(self, tmp_path):
        result = emit_report(synthetic_records(seed=3), tmp_path, k=3)
        assert result.n_selected == 9
        assert result.rank_report is not None
        assert len(pd.read_csv(result.rank_csv)) == 3
        for svg in result.svgs:
            root = ET.parse(svg).getroot()
            assert root.tag == f"{SVG_NS}svg"

    def test_topk_table_round_trips(self, tmp_path):
        records = synthetic_records(seed=4)
        result = emit_report(records, tmp_path, k=2)
        expected = [r.to_dict() | {"epoch_wall_seconds": 0.0} for r in select_top_k(records, 2)]
        assert [r.to_dict() for r in read_topk(result.topk_csv)] == expected

    def test_single_variant_skips_rank_statistics(self, tmp_path):
        result = emit_report([record("A", 0.3), record("A", 0.2)], tmp_path)
        assert result.rank_report is None
        assert len(pd.read_csv(result.rank_csv)) == 0
        assert len(result.svgs) == 2


class TestCharts:
    def test_median_split_even(self):
        left = median_split(np.random.default_rng(7).permutation(24).astype(float))
        assert left.sum() == 12

    def test_median_split_odd(self):
        left = median_split([5.0, 1.0, 4.0, 2.0, 3.0])
        np.testing.assert_array_equal(left, [False, True, False, True, True])

    def test_median_split_with_ties_splits_by_rank(self):
        left = median_split([1.0, 2.0, 2.0, 3.0])
        assert left.sum() == 2
        np.testing.assert_array_equal(left, [True, True, False, False])

    def test_scatter_panels_are_labelled_by_rank(self):
        svg = split_scatter({"A": [(1.0, 0.5), (2.0, 0.4), (2.0, 0.3), (3.0, 0.2)]}).render()
        assert "lower half by val_loss (median 2.000)" in svg
        assert "upper half by val_loss (median 2.000)" in svg
        assert "&gt; median" not in svg and "> median" not in svg

    def test_scatter_draws_every_point(self):
        points = {"A": [(0.1 * i, 0.05 * i) for i in range(12)], "B": [(0.1 * i + 0.05, 0.3) for i in range(12)]}
        root = ET.fromstring(split_scatter(points).render().split("\n", 3)[3])
        assert len(root.findall(f"{SVG_NS}circle")) == 24 + 2

    def test_bar_chart_draws_every_value(self):
        canvas = bar_chart({"A": [0.3, 0.1, 0.2], "B": [0.5, 0.4, 0.6]})
        root = ET.fromstring(canvas.render().split("\n", 3)[3])
        # background plus one bar per value
        assert len(root.findall(f"{SVG_NS}rect")) == 1 + 6

    def test_text_is_escaped(self):
        assert "&lt;b&gt;" in bar_chart({"<b>": [1.0]}).render()

    def test_output_is_deterministic(self):
        points = {"A": [(0.2, 0.1), (0.4, 0.3)]}
        assert split_scatter(points).render() == split_scatter(points).render()
