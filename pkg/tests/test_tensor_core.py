import numpy as np
import pytest
from scipy import stats

from infrastructure.errors import DimensionError, DomainError
from services.tensor_core import (
    RngStream, as_tensor, batched_masked_matmul, draw_normal, draw_permutation, draw_uniform, elementwise,
    label_to_u64, matmul,
)


class TestMatmul:
    def test_small_product(self):
        np.testing.assert_allclose(matmul([[1.0, 2.0]], [[3.0], [4.0]]), [[11.0]])

    def test_identity(self):
        a = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(matmul(a, np.eye(3)), a)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        expected = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(matmul(a, b), expected, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_result_is_read_only(self):
        out = matmul(np.eye(2), np.eye(2))
        assert out.flags.writeable is False


class TestBatchedMaskedMatmul:
    def setup_method(self):
        rng = np.random.default_rng(1)
        self.x = rng.normal(size=(5, 4))
        self.w = rng.normal(size=(4, 3))

    def test_all_ones_mask_equals_matmul(self):
        out = batched_masked_matmul(self.x, self.w, np.ones((5, 4)))
        np.testing.assert_allclose(out, self.x @ self.w, atol=1e-12)

    def test_node_mask_selects_inputs_per_row(self):
        mask = np.zeros((5, 4))
        mask[np.arange(5), np.arange(5) % 4] = 1.0
        out = batched_masked_matmul(self.x, self.w, mask)
        for k in range(5):
            np.testing.assert_allclose(out[k], (self.x[k] * mask[k]) @ self.w, atol=1e-12)

    def test_connection_mask_matches_per_sample_loop(self):
        mask = (np.random.default_rng(2).random((5, 4, 3)) > 0.5).astype(float)
        out = batched_masked_matmul(self.x, self.w, mask)
        for k in range(5):
            np.testing.assert_allclose(out[k], self.x[k] @ (self.w * mask[k]), atol=1e-12)

    def test_connection_mask_constant_along_outputs_is_bit_identical_to_node(self):
        node = (np.random.default_rng(3).random((5, 4)) > 0.3).astype(float)
        connection = np.repeat(node[:, :, None], 3, axis=2)
        np.testing.assert_array_equal(batched_masked_matmul(self.x, self.w, node),
                                      batched_masked_matmul(self.x, self.w, connection))

    def test_bad_mask_shape(self):
        with pytest.raises(DimensionError):
            batched_masked_matmul(self.x, self.w, np.ones((5, 3)))


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(elementwise("relu", [-1.0, 0.0, 2.0]), [0.0, 0.0, 2.0])

    def test_compare(self):
        np.testing.assert_array_equal(elementwise("compare", [0.1, 0.5, 0.9], 0.5), [0.0, 0.0, 1.0])

    def test_log_of_exp(self):
        x = np.array([-2.0, 0.0, 3.5])
        np.testing.assert_allclose(elementwise("log", elementwise("exp", x)), x, atol=1e-12)

    def test_scalar_broadcast(self):
        np.testing.assert_array_equal(elementwise("mul", np.ones((2, 2)), 0.25), np.full((2, 2), 0.25))

    def test_division_by_zero(self):
        with pytest.raises(DomainError):
            elementwise("div", [1.0, 2.0], [1.0, 0.0])

    def test_log_of_zero(self):
        with pytest.raises(DomainError):
            elementwise("log", [1.0, 0.0])

    def test_overflow_is_rejected(self):
        with pytest.raises(DomainError):
            elementwise("exp", [1000.0])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            elementwise("add", np.ones(3), np.ones(2))

    def test_unknown_op(self):
        with pytest.raises(DomainError):
            elementwise("pow", [1.0], 2.0)

    def test_as_tensor_rejects_nan(self):
        with pytest.raises(DomainError):
            as_tensor([1.0, np.nan])


class TestRngStream:
    def test_same_coordinates_same_values(self):
        a = draw_uniform(RngStream(5, 9, 3), (100,))
        b = draw_uniform(RngStream(5, 9, 3), (100,))
        np.testing.assert_array_equal(a, b)

    def test_draw_advances_counter(self):
        stream = RngStream(5)
        first = draw_uniform(stream, (10,))
        assert stream.counter == 10
        assert not np.array_equal(first, draw_uniform(stream, (10,)))

    def test_copy_replays(self):
        stream = RngStream(11)
        draw_uniform(stream, (7,))
        twin = stream.copy()
        np.testing.assert_array_equal(draw_normal(stream, 0.0, 1.0, (5,)), draw_normal(twin, 0.0, 1.0, (5,)))

    def test_split_ignores_parent_counter(self):
        stream = RngStream(2)
        before = draw_uniform(stream.split("layer"), (8,))
        draw_uniform(stream, (50,))
        after = draw_uniform(stream.split("layer"), (8,))
        np.testing.assert_array_equal(before, after)

    def test_split_labels_give_distinct_streams(self):
        stream = RngStream(2)
        assert not np.array_equal(draw_uniform(stream.split("a"), (8,)), draw_uniform(stream.split("b"), (8,)))

    def test_for_sample_is_pure(self):
        a = draw_uniform(RngStream.for_sample(1, "salt", 42), (4,))
        b = draw_uniform(RngStream.for_sample(1, "salt", 42), (4,))
        c = draw_uniform(RngStream.for_sample(1, "salt", 43), (4,))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_split_stream_is_uniform(self):
        draws = draw_uniform(RngStream(0).split("chi2"), (20_000,))
        counts, _ = np.histogram(draws, bins=20, range=(0.0, 1.0))
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_label_hash_is_stable(self):
        assert label_to_u64("slot") == label_to_u64("slot")
        assert label_to_u64(7) == 7

    def test_out_of_range_seed(self):
        with pytest.raises(DomainError):
            RngStream(-1)


class TestDraws:
    def test_zero_std_is_constant(self):
        np.testing.assert_array_equal(draw_normal(RngStream(0), 1.5, 0.0, (3, 3)), np.full((3, 3), 1.5))

    def test_negative_std(self):
        with pytest.raises(DomainError):
            draw_normal(RngStream(0), 0.0, -1.0, (2,))

    def test_uniform_mean(self):
        assert abs(draw_uniform(RngStream(3), (100_000,)).mean() - 0.5) < 0.01

    def test_normal_variance(self):
        assert abs(draw_normal(RngStream(4), 1.0, 0.5, (100_000,)).var() - 0.25) < 0.01

    def test_permutation(self):
        perm = draw_permutation(RngStream(0), 10)
        np.testing.assert_array_equal(np.sort(perm), np.arange(10))

    def test_scalar_draw_keeps_zero_dim_shape(self):
        stream = RngStream(8)
        u = draw_uniform(stream, ())
        assert u.shape == ()
        assert stream.counter == 1
        assert 0.0 <= float(u) < 1.0


class TestScalarShapes:
    def test_as_tensor_scalar(self):
        t = as_tensor(2.0)
        assert t.shape == ()
        assert not t.flags.writeable

    def test_elementwise_scalar(self):
        assert elementwise("exp", 0.0).shape == ()
        assert float(elementwise("exp", 0.0)) == 1.0

    def test_as_tensor_does_not_freeze_the_input(self):
        data = np.ones(3)
        as_tensor(data)
        data[0] = 2.0
        assert data.flags.writeable
