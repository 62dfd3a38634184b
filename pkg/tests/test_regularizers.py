import numpy as np
import pytest

from infrastructure.errors import ConfigurationError, ContractError, DomainError
from services.regularizers.layers import (
    build_ensemble_masks, build_slot, dropconnect_forward, dropout_forward, gaussian_dropout_forward,
    maskensemble_forward, pernode_mask, pernodedrop_forward,
)
from services.regularizers.masks import (
    FixedScope, Granularity, MaskMode, MaskSpec, Mode, RegularizerKind, RegularizerTag, Stir,
    expected_mask_value, mask_variance, sample_bernoulli_mask, sample_gaussian_mask, sample_mask,
    sample_partial_gaussian_mask,
)
from services.tensor_core import RngStream

N = 100_000


class TestMaskSpec:
    def test_drop_rate_one_is_rejected(self):
        with pytest.raises(DomainError):
            MaskSpec(drop_rate=1.0)

    def test_negative_sigma(self):
        with pytest.raises(DomainError):
            MaskSpec(Stir.GAUSSIAN, 0.2, sigma=-0.1)

    def test_threshold_range(self):
        with pytest.raises(DomainError):
            MaskSpec(Stir.PARTIAL_GAUSSIAN, 0.2, partial_threshold=1.5)

    def test_variance_from_rate(self):
        assert MaskSpec(Stir.GAUSSIAN, 0.5).variance == pytest.approx(1.0)
        assert MaskSpec(Stir.GAUSSIAN, 0.2).variance == pytest.approx(0.25)

    def test_sigma_overrides_rate(self):
        assert MaskSpec(Stir.GAUSSIAN, 0.5, sigma=0.1).variance == pytest.approx(0.01)

    def test_enums_from_strings(self):
        spec = MaskSpec("Gaussian", 0.1, granularity="Connection", mode="Fixed")
        assert spec.stir is Stir.GAUSSIAN
        assert spec.granularity is Granularity.CONNECTION
        assert spec.mode is MaskMode.FIXED

    def test_expected_values(self):
        assert expected_mask_value(MaskSpec(Stir.BERNOULLI, 0.3)) == pytest.approx(0.7)
        assert expected_mask_value(MaskSpec(Stir.GAUSSIAN, 0.3)) == 1.0
        assert expected_mask_value(MaskSpec(Stir.PARTIAL_GAUSSIAN, 0.3)) == 1.0

    def test_mask_variance(self):
        assert mask_variance(MaskSpec(Stir.BERNOULLI, 0.5)) == pytest.approx(0.25)
        assert mask_variance(MaskSpec(Stir.PARTIAL_GAUSSIAN, 0.5, partial_threshold=0.25)) == pytest.approx(0.25)


class TestSamplers:
    def test_bernoulli_zero_rate_is_all_ones(self):
        m = sample_bernoulli_mask(MaskSpec(Stir.BERNOULLI, 0.0), (1000,), RngStream(0))
        np.testing.assert_array_equal(m, np.ones(1000))

    def test_bernoulli_moments(self):
        m = sample_bernoulli_mask(MaskSpec(Stir.BERNOULLI, 0.5), (N,), RngStream(1))
        assert set(np.unique(m)) <= {0.0, 1.0}
        assert abs(m.mean() - 0.5) < 0.005
        assert abs(m.var() - 0.25) < 0.005

    def test_gaussian_zero_rate_is_all_ones(self):
        m = sample_gaussian_mask(MaskSpec(Stir.GAUSSIAN, 0.0), (100,), RngStream(0))
        np.testing.assert_array_equal(m, np.ones(100))

    def test_gaussian_moments(self):
        m = sample_gaussian_mask(MaskSpec(Stir.GAUSSIAN, 0.5), (N,), RngStream(2))
        assert abs(m.mean() - 1.0) < 4 * 1.0 / np.sqrt(N)
        assert abs(m.var() - 1.0) < 0.02

    def test_partial_zero_threshold_is_all_ones(self):
        spec = MaskSpec(Stir.PARTIAL_GAUSSIAN, 0.5, partial_threshold=0.0)
        np.testing.assert_array_equal(sample_partial_gaussian_mask(spec, (1000,), RngStream(3)), np.ones(1000))

    def test_partial_unit_threshold_is_pure_gaussian(self):
        spec = MaskSpec(Stir.PARTIAL_GAUSSIAN, 0.5, partial_threshold=1.0)
        m = sample_partial_gaussian_mask(spec, (N,), RngStream(4))
        assert np.all(m != 1.0)
        assert abs(m.var() - 1.0) < 0.02

    def test_partial_fraction_of_ones(self):
        spec = MaskSpec(Stir.PARTIAL_GAUSSIAN, 0.5, partial_threshold=0.3)
        m = sample_partial_gaussian_mask(spec, (N,), RngStream(5))
        assert abs(np.mean(m == 1.0) - 0.7) < 0.006

    def test_wrong_stir(self):
        with pytest.raises(DomainError):
            sample_gaussian_mask(MaskSpec(Stir.BERNOULLI, 0.1), (3,), RngStream(0))

    def test_dispatch(self):
        spec = MaskSpec(Stir.BERNOULLI, 0.4)
        np.testing.assert_array_equal(sample_mask(spec, (20,), RngStream(6)),
                                      sample_bernoulli_mask(spec, (20,), RngStream(6)))


class TestPerNodeDrop:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.x = rng.normal(size=(16, 8))
        self.W = rng.normal(size=(8, 5))
        self.b = rng.normal(size=5)

    def test_zero_rate_equals_dense(self):
        out = pernodedrop_forward(self.x, self.W, self.b, MaskSpec(Stir.BERNOULLI, 0.0), Mode.TRAIN,
                                  stream=RngStream(0))
        np.testing.assert_allclose(out, self.x @ self.W + self.b, atol=1e-12)

    def test_eval_scales_by_keep_probability(self):
        out = pernodedrop_forward(self.x, self.W, self.b, MaskSpec(Stir.BERNOULLI, 0.4), Mode.EVAL)
        np.testing.assert_allclose(out, 0.6 * (self.x @ self.W) + self.b, atol=1e-12)

    def test_gaussian_eval_is_dense(self):
        out = pernodedrop_forward(self.x, self.W, self.b, MaskSpec(Stir.GAUSSIAN, 0.4), Mode.EVAL)
        np.testing.assert_allclose(out, self.x @ self.W + self.b, atol=1e-12)

    def test_dynamic_rows_get_distinct_masks(self):
        mask = pernode_mask(MaskSpec(Stir.BERNOULLI, 0.5), 16, 8, 5, stream=RngStream(1))
        assert mask.shape == (16, 8)
        assert len({row.tobytes() for row in mask}) > 1

    def test_connection_mask_shape(self):
        spec = MaskSpec(Stir.GAUSSIAN, 0.5, granularity=Granularity.CONNECTION)
        assert pernode_mask(spec, 4, 8, 5, stream=RngStream(1)).shape == (4, 8, 5)

    def test_fixed_masks_repeat_across_epochs(self):
        spec = MaskSpec(Stir.BERNOULLI, 0.5, mode=MaskMode.FIXED, seed=3)
        ids = np.arange(16) + 100
        first = pernodedrop_forward(self.x, self.W, self.b, spec, Mode.TRAIN, sample_ids=ids, stream=RngStream(0))
        second = pernodedrop_forward(self.x, self.W, self.b, spec, Mode.TRAIN, sample_ids=ids, stream=RngStream(9))
        np.testing.assert_array_equal(first, second)

    def test_fixed_mask_follows_sample_not_position(self):
        spec = MaskSpec(Stir.BERNOULLI, 0.5, mode=MaskMode.FIXED, seed=3)
        ids = np.array([4, 7, 9])
        forward = pernode_mask(spec, 3, 8, 5, sample_ids=ids)
        reverse = pernode_mask(spec, 3, 8, 5, sample_ids=ids[::-1])
        np.testing.assert_array_equal(forward, reverse[::-1])

    def test_fixed_per_model_is_shared(self):
        spec = MaskSpec(Stir.BERNOULLI, 0.5, mode=MaskMode.FIXED, fixed_scope=FixedScope.PER_MODEL)
        mask = pernode_mask(spec, 6, 8, 5)
        assert all(np.array_equal(mask[0], row) for row in mask)

    def test_fixed_without_ids(self):
        spec = MaskSpec(Stir.BERNOULLI, 0.5, mode=MaskMode.FIXED)
        with pytest.raises(ContractError):
            pernodedrop_forward(self.x, self.W, self.b, spec, Mode.TRAIN)

    def test_dynamic_without_stream(self):
        with pytest.raises(ContractError):
            pernodedrop_forward(self.x, self.W, self.b, MaskSpec(Stir.BERNOULLI, 0.5), Mode.TRAIN)


class TestBaselines:
    def setup_method(self):
        self.x = np.random.default_rng(2).normal(size=(8, 6))

    def test_dropout_zero_rate_is_identity(self):
        out = dropout_forward(self.x, MaskSpec(drop_rate=0.0), Mode.TRAIN, RngStream(0))
        np.testing.assert_array_equal(out, self.x)

    def test_dropout_zero_fraction(self):
        x = np.ones((100, 1000))
        out = dropout_forward(x, MaskSpec(drop_rate=0.9), Mode.TRAIN, RngStream(1))
        assert abs(np.mean(out == 0.0) - 0.9) < 0.005

    def test_dropout_eval(self):
        out = dropout_forward(self.x, MaskSpec(drop_rate=0.9), Mode.EVAL)
        np.testing.assert_allclose(out, 0.1 * self.x, atol=1e-15)

    def test_gaussian_dropout_zero_rate_and_eval(self):
        spec = MaskSpec(Stir.GAUSSIAN, 0.0)
        np.testing.assert_array_equal(gaussian_dropout_forward(self.x, spec, Mode.TRAIN, RngStream(0)), self.x)
        np.testing.assert_array_equal(gaussian_dropout_forward(self.x, spec.with_rate(0.5), Mode.EVAL), self.x)

    def test_gaussian_dropout_is_unbiased(self):
        x = np.tile([[0.5, -1.0, 2.0]], (N, 1))
        out = gaussian_dropout_forward(x, MaskSpec(Stir.GAUSSIAN, 0.5), Mode.TRAIN, RngStream(2))
        stderr = np.abs([0.5, -1.0, 2.0]) / np.sqrt(N)
        assert np.all(np.abs(out.mean(axis=0) - [0.5, -1.0, 2.0]) < 4 * stderr)

    def test_dropconnect_shares_one_mask_across_the_batch(self):
        x = np.ones((5, 6))
        out = dropconnect_forward(x, np.ones((6, 4)), np.zeros(4), MaskSpec(drop_rate=0.5), Mode.TRAIN, RngStream(3))
        assert all(np.array_equal(out[0], row) for row in out)

    def test_dropconnect_zero_rate(self):
        W, b = np.ones((6, 4)), np.arange(4.0)
        out = dropconnect_forward(self.x, W, b, MaskSpec(drop_rate=0.0), Mode.TRAIN, RngStream(0))
        np.testing.assert_allclose(out, self.x @ W + b, atol=1e-12)

    def test_dropconnect_expectation(self):
        rng = np.random.default_rng(4)
        x, W, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
        spec, stream = MaskSpec(drop_rate=0.3), RngStream(4)
        draws = np.stack([dropconnect_forward(x, W, b, spec, Mode.TRAIN, stream) for _ in range(10_000)])
        stderr = draws.std(axis=0) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - (0.7 * (x @ W) + b)) < 4 * stderr + 1e-12)
        np.testing.assert_allclose(dropconnect_forward(x, W, b, spec, Mode.EVAL), 0.7 * (x @ W) + b, atol=1e-12)

    def test_maskensemble_single_group_zero_rate(self):
        out = maskensemble_forward(self.x, MaskSpec(drop_rate=0.0), 1, Mode.TRAIN)
        np.testing.assert_array_equal(out, self.x)

    def test_maskensemble_is_deterministic(self):
        spec = MaskSpec(drop_rate=0.5, seed=1)
        a = maskensemble_forward(self.x, spec, 2, Mode.TRAIN)
        np.testing.assert_array_equal(a, maskensemble_forward(self.x, spec, 2, Mode.EVAL))

    def test_ensemble_masks_differ_between_groups(self):
        masks = build_ensemble_masks(32, 4, MaskSpec(drop_rate=0.5))
        assert masks.shape == (4, 32)
        np.testing.assert_array_equal(masks.sum(axis=1), np.full(4, 16.0))
        assert len({m.tobytes() for m in masks}) == 4

    def test_ensemble_grouping_must_divide_width(self):
        with pytest.raises(ConfigurationError, match=r"3.*8"):
            build_ensemble_masks(8, 3, MaskSpec(drop_rate=0.5))


class TestSlots:
    @pytest.mark.parametrize("tag", list(RegularizerTag))
    def test_routing(self, tag):
        slot = build_slot(RegularizerKind(tag, MaskSpec(drop_rate=0.2), mask_groups=2), 8, 4)
        assert slot.tag is tag

    def test_kind_defaults_name(self):
        assert RegularizerKind(RegularizerTag.DROPCONNECT).name == "DropConnect"

    def test_kind_rejects_zero_groups(self):
        with pytest.raises(ConfigurationError):
            RegularizerKind(RegularizerTag.MASK_ENSEMBLE, mask_groups=0)
