import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tipspool.metrics import (
    ShiftSampler,
    ZeroVarianceError,
    consistency,
    fidelity,
    magnitude_curves,
    model_msb,
    patch_erase,
    patched_consistency,
    pearson_r,
    shift_agreement,
)
from tipspool.shifts import ShiftSpec, apply_shift, circular_shift, standard_shift


class TestStandardShift:
    def test_basic_example(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(standard_shift(x, 1, 0), [[0, 0], [1, 2]])

    def test_full_shift_clears(self):
        x = np.ones((2, 3, 3))
        np.testing.assert_array_equal(standard_shift(x, 3, 3), np.zeros_like(x))

    def test_zero_shift_identity(self):
        x = np.random.default_rng(0).random((1, 4, 4))
        np.testing.assert_array_equal(standard_shift(x, 0, 0), x)

    def test_negative_shift(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(standard_shift(x, -1, 0), [[3, 4], [0, 0]])

    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(min_value=-4, max_value=4),
        st.integers(min_value=-4, max_value=4),
        st.integers(min_value=0, max_value=2 ** 31 - 1),
    )
    def test_never_increases_sum_of_nonnegative(self, dh, dw, seed):
        x = np.abs(np.random.default_rng(seed).standard_normal((2, 4, 4)))
        assert standard_shift(x, dh, dw).sum() <= x.sum() + 1e-9

    def test_oversized_shift_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            standard_shift(np.zeros((2, 2)), 3, 0)


class TestCircularShift:
    def test_basic_example(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(circular_shift(x, 0, 1), [[2, 1], [4, 3]])

    def test_full_cycle_identity(self):
        x = np.random.default_rng(1).random((3, 5, 7))
        np.testing.assert_array_equal(circular_shift(x, 5, 7), x)

    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(min_value=-6, max_value=6),
        st.integers(min_value=-6, max_value=6),
        st.integers(min_value=0, max_value=2 ** 31 - 1),
    )
    def test_group_inverse(self, dh, dw, seed):
        x = np.random.default_rng(seed).random((1, 5, 6))
        np.testing.assert_array_equal(
            circular_shift(circular_shift(x, dh, dw), -dh, -dw), x
        )

    def test_preserves_multiset_per_channel(self):
        x = np.random.default_rng(2).random((3, 4, 4))
        y = circular_shift(x, 1, 2)
        for k in range(3):
            assert sorted(x[k].ravel()) == sorted(y[k].ravel())

    def test_spec_mode_validation(self):
        with pytest.raises(ValueError, match="mode"):
            ShiftSpec("diagonal", 1, 1)
        np.testing.assert_array_equal(
            apply_shift(np.eye(3), "circular", 1, 0), np.roll(np.eye(3), 1, axis=0)
        )


class TestShiftSampler:
    def test_bounds_and_determinism(self):
        sampler = ShiftSampler(seed=3, max_fraction=0.125, pairs_per_image=4)
        a = sampler.sample(10, 32, 32)
        b = sampler.sample(10, 32, 32)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (10, 4, 2, 2)
        assert a.min() >= 0 and a.max() <= 4

    def test_validation(self):
        with pytest.raises(ValueError):
            ShiftSampler(pairs_per_image=0)
        with pytest.raises(ValueError):
            ShiftSampler(max_fraction=0.0)


def constant_predict(batch):
    return np.zeros(len(batch), dtype=np.int64)


def content_predict(batch):
    # prediction depends on total mass: shift-sensitive for standard shift
    return (batch.sum(axis=(1, 2, 3)) * 7).astype(np.int64) % 4


class TestConsistencyFidelity:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.images = rng.random((12, 1, 16, 16)).astype(np.float32)
        self.labels = np.zeros(12, dtype=np.int64)
        self.sampler = ShiftSampler(seed=1, pairs_per_image=3)

    def test_constant_model_consistency_one(self):
        assert consistency(constant_predict, self.images, self.sampler, "standard") == 1.0

    def test_perfect_invariant_model_fidelity_equals_accuracy(self):
        cons, fid = shift_agreement(
            constant_predict, self.images, self.labels, self.sampler, "circular"
        )
        assert cons == 1.0 and fid == 1.0  # labels are all 0 here

    def test_always_wrong_model_zero_fidelity(self):
        labels = np.ones(12, dtype=np.int64)
        fid = fidelity(constant_predict, self.images, labels, self.sampler, "circular")
        assert fid == 0.0

    def test_fidelity_le_consistency(self):
        cons, fid = shift_agreement(
            content_predict, self.images, self.labels, self.sampler, "standard"
        )
        assert 0.0 <= fid <= cons <= 1.0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    def test_fidelity_le_consistency_random_models(self, seed):
        rng = np.random.default_rng(seed)
        images = rng.random((6, 1, 8, 8)).astype(np.float32)
        labels = rng.integers(0, 3, size=6)
        sampler = ShiftSampler(seed=seed & 0xFFFF, pairs_per_image=2)

        def predict(batch):
            return (batch[:, 0, 0, 0] * 100).astype(np.int64) % 3

        cons, fid = shift_agreement(predict, images, labels, sampler, "circular")
        assert 0.0 <= fid <= cons <= 1.0

    def test_symmetric_in_pair_order(self):
        # swapping the two sampled shifts leaves the agreement indicator unchanged
        sampler = ShiftSampler(seed=9, pairs_per_image=5)
        shifts = sampler.sample(len(self.images), 16, 16)
        from tipspool.metrics import _shifted_predictions

        preds = _shifted_predictions(content_predict, self.images, shifts, "standard")
        swapped = _shifted_predictions(
            content_predict, self.images, shifts[:, :, ::-1], "standard"
        )
        np.testing.assert_array_equal(
            preds[:, :, 0] == preds[:, :, 1], swapped[:, :, 0] == swapped[:, :, 1]
        )

    def test_empty_image_set_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            consistency(constant_predict, np.zeros((0, 1, 8, 8)), self.sampler, "standard")

    def test_label_count_mismatch(self):
        with pytest.raises(ValueError, match="labels"):
            fidelity(constant_predict, self.images, np.zeros(5, dtype=int), self.sampler, "standard")

    def test_determinism(self):
        a = shift_agreement(content_predict, self.images, self.labels, self.sampler, "standard")
        b = shift_agreement(content_predict, self.images, self.labels, self.sampler, "standard")
        assert a == b


class TestMagnitudeCurves:
    def test_zero_magnitude_entry_is_one(self):
        rng = np.random.default_rng(0)
        images = rng.random((8, 1, 16, 16)).astype(np.float32)
        labels = rng.integers(0, 4, size=8)
        for mode in ("standard", "circular"):
            rows = magnitude_curves(content_predict, images, labels, mode, 2)
            assert rows[0][0] == 0 and rows[0][1] == 1.0
            assert len(rows) == 3


class TestPatchErase:
    def test_zero_size_identity(self):
        x = np.random.default_rng(0).random((1, 8, 8))
        np.testing.assert_array_equal(patch_erase(x, 0, seed=1), x)

    def test_full_size_clears(self):
        x = np.ones((2, 6, 6))
        np.testing.assert_array_equal(patch_erase(x, 6, seed=1), np.zeros_like(x))

    def test_erased_pixel_count(self):
        x = np.ones((1, 10, 10))
        out = patch_erase(x, 3, seed=5)
        assert int((out == 0).sum()) == 9

    def test_oversized_rejected(self):
        with pytest.raises(ValueError, match="patch_size"):
            patch_erase(np.ones((1, 4, 4)), 5, seed=0)

    def test_patched_consistency_protocol(self):
        rng = np.random.default_rng(0)
        images = rng.random((6, 1, 16, 16)).astype(np.float32)
        labels = np.zeros(6, dtype=np.int64)
        sampler = ShiftSampler(seed=2, pairs_per_image=2)
        cons, fid = patched_consistency(
            constant_predict, images, labels, sampler, "standard", patch_size=4
        )
        assert cons == 1.0 and fid == 1.0


class TestPearson:
    def test_anticorrelated(self):
        xs = [1.0, 2.0, 3.0, 4.0]
        assert pearson_r(xs, [-v for v in xs]) == pytest.approx(-1.0)

    def test_correlated(self):
        xs = [1.0, 2.0, 3.0, 4.0]
        assert pearson_r(xs, xs) == pytest.approx(1.0)

    def test_hand_computed_example(self):
        # mean-centered: xs (-1,0,1), ys (1,-1,0); cov sum -1; norms sqrt2 * sqrt2
        assert pearson_r([1, 2, 3], [6, 4, 5]) == pytest.approx(-0.5)

    def test_zero_variance_error(self):
        with pytest.raises(ZeroVarianceError):
            pearson_r([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_short_input_rejected(self):
        with pytest.raises(ValueError, match="two points"):
            pearson_r([1.0], [2.0])
