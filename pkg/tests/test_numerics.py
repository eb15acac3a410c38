import numpy as np
import numpy.testing as npt
import pytest

from dialectam.numerics import (
    ParamStore,
    Rng,
    grad_check,
    masked_mean_over_time,
    matmul,
    pointwise,
    sigmoid,
)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        npt.assert_array_equal(matmul(np.eye(2), a), a)
        npt.assert_array_equal(matmul(a, np.eye(2)), a)

    def test_dot_product(self):
        out = matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        npt.assert_array_equal(out, np.array([[11.0]]))

    def test_against_triple_loop(self):
        rng = Rng(11)
        a = rng.normal(0, 1, (3, 4))
        b = rng.normal(0, 1, (4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        npt.assert_allclose(matmul(a, b), expected, rtol=0, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 2)))


class TestPointwise:
    def test_tanh_zero(self):
        assert pointwise("tanh", np.zeros(3)).tolist() == [0.0, 0.0, 0.0]

    def test_sigmoid_zero(self):
        assert pointwise("sigmoid", np.zeros(2)).tolist() == [0.5, 0.5]

    def test_tanh_one(self):
        # (e^2 - 1) / (e^2 + 1)
        npt.assert_allclose(pointwise("tanh", np.array([1.0])), [0.7615941559557649],
                            rtol=0, atol=1e-15)

    def test_add_mul(self):
        a = np.array([1.0, 2.0])
        b = np.array([3.0, 5.0])
        npt.assert_array_equal(pointwise("add", a, b), [4.0, 7.0])
        npt.assert_array_equal(pointwise("mul", a, b), [3.0, 10.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            pointwise("add", np.zeros(2), np.zeros(3))

    def test_unknown_op(self):
        with pytest.raises(ValueError, match="unknown pointwise op"):
            pointwise("div", np.zeros(2), np.zeros(2))

    def test_sigmoid_matches_definition(self):
        x = Rng(3).normal(0, 2, 16)
        npt.assert_allclose(sigmoid(x), 1.0 / (1.0 + np.exp(-x)), rtol=0, atol=1e-15)


class TestMaskedMean:
    def test_single_valid_frame(self):
        seq = np.array([[2.0, -3.0]])
        npt.assert_array_equal(masked_mean_over_time(seq, np.array([1.0])), [2.0, -3.0])

    def test_two_valid_frames(self):
        seq = np.array([[1.0, -1.0], [0.0, 0.0]])
        npt.assert_array_equal(masked_mean_over_time(seq, np.ones(2)), [0.5, -0.5])

    def test_padding_excluded(self):
        seq = np.array([[1.0, -1.0], [0.0, 0.0], [9.0, 9.0]])
        mask = np.array([1.0, 1.0, 0.0])
        npt.assert_array_equal(masked_mean_over_time(seq, mask), [0.5, -0.5])

    def test_invariant_to_appending_masked_rows(self):
        rng = Rng(5)
        seq = rng.normal(0, 1, (4, 3))
        mask = np.array([1.0, 0.0, 1.0, 1.0])
        base = masked_mean_over_time(seq, mask)
        extended = np.vstack([seq, rng.normal(0, 1, (2, 3))])
        ext_mask = np.concatenate([mask, [0.0, 0.0]])
        npt.assert_array_equal(masked_mean_over_time(extended, ext_mask), base)

    def test_all_zero_mask_rejected(self):
        with pytest.raises(ValueError, match="all-padded"):
            masked_mean_over_time(np.ones((2, 2)), np.zeros(2))


class TestParamStore:
    def test_add_and_lookup(self):
        store = ParamStore()
        v = store.add("w", np.ones((2, 3)))
        assert v.shape == (2, 3)
        assert store.grad("w").shape == (2, 3)
        assert "w" in store and store.num_values() == 6

    def test_duplicate_name_rejected(self):
        store = ParamStore()
        store.add("w", np.ones(2))
        with pytest.raises(ValueError, match="duplicate"):
            store.add("w", np.ones(2))

    def test_zero_grads(self):
        store = ParamStore()
        store.add("w", np.ones(3))
        store.accumulate("w", np.array([1.0, 2.0, 3.0]))
        store.zero_grads()
        npt.assert_array_equal(store.grad("w"), np.zeros(3))

    def test_insertion_order(self):
        store = ParamStore()
        for name in ["b", "a", "c"]:
            store.add(name, np.zeros(1))
        assert store.names() == ["b", "a", "c"]


class TestRng:
    def test_equal_seeds_byte_identical(self):
        a = Rng(42).normal(0, 1, 100)
        b = Rng(42).normal(0, 1, 100)
        assert a.tobytes() == b.tobytes()

    def test_different_seeds_differ(self):
        assert Rng(1).normal(0, 1, 8).tolist() != Rng(2).normal(0, 1, 8).tolist()

    def test_derive_is_deterministic_and_independent(self):
        r = Rng(9)
        assert Rng(9).derive(3).seed == r.derive(3).seed
        assert r.derive(1).seed != r.derive(2).seed

    def test_known_stream_is_stable(self):
        # Frozen from the Philox 4x64 stream keyed by 42; guards against an
        # accidental generator swap that would silently change every dataset.
        first = Rng(42).uniform(0, 1, 3)
        npt.assert_allclose(first, [0.8201981478608876, 0.18924562408645496, 0.8676608148821462],
                            rtol=0, atol=1e-15)


class TestGradCheck:
    def test_quadratic(self):
        store = ParamStore()
        store.add("theta", np.array([3.0]))

        def f(params):
            params.zero_grads()
            theta = params.value("theta")[0]
            params.grad("theta")[0] = 2.0 * theta
            return theta * theta

        assert grad_check(f, store, eps=1e-5) < 1e-8

    def test_constant_function(self):
        store = ParamStore()
        store.add("theta", np.array([1.0, -2.0]))

        def f(params):
            params.zero_grads()
            return 7.0

        assert grad_check(f, store, eps=1e-5) == 0.0

    def test_wrong_gradient_is_caught(self):
        store = ParamStore()
        store.add("theta", np.array([2.0]))

        def f(params):
            params.zero_grads()
            theta = params.value("theta")[0]
            params.grad("theta")[0] = 3.0 * theta  # deliberately wrong
            return theta * theta

        assert grad_check(f, store, eps=1e-5) > 1e-2

    def test_non_finite_loss_rejected(self):
        store = ParamStore()
        store.add("theta", np.array([1.0]))
        with pytest.raises(FloatingPointError):
            grad_check(lambda p: float("nan"), store)

    def test_bad_eps_rejected(self):
        store = ParamStore()
        store.add("theta", np.array([1.0]))
        with pytest.raises(ValueError):
            grad_check(lambda p: 0.0, store, eps=0.0)
