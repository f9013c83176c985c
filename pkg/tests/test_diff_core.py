import numpy as np
import pytest

from airobject import diff_core as dc


def weighted_sum(weight):
    """Scalar projection so finite_diff_check exercises the full Jacobian."""
    w = dc.as_tensor(weight)
    return lambda t: dc.reduce_sum(dc.elementwise_mul(w, t))


class TestAffine:
    def test_identity_weights(self):
        x = dc.Tensor([[1.0, 2.0], [3.0, 4.0]])
        w = dc.Parameter(np.eye(2), "w")
        b = dc.Parameter(np.zeros(2), "b")
        assert np.allclose(dc.affine(x, w, b).data, x.data)

    def test_hand_matrix_multiply(self):
        x = dc.Tensor([[1.0, 2.0]])
        w = dc.Parameter([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], "w")
        b = dc.Parameter([0.0, 0.0, 1.0], "b")
        assert np.allclose(dc.affine(x, w, b).data, [[1.0, 2.0, 4.0]])

    def test_bias_gradient_is_ones(self):
        x = dc.Tensor(np.random.default_rng(0).normal(size=(5, 3)))
        w = dc.Parameter(np.random.default_rng(1).normal(size=(4, 3)), "w")
        b = dc.Parameter(np.zeros(4), "b")
        dc.reduce_sum(dc.affine(x, w, b)).backward()
        assert np.allclose(b.grad, 5.0)  # 5 rows each contribute 1

    def test_shape_mismatch(self):
        with pytest.raises(dc.ShapeError):
            dc.affine(dc.Tensor(np.zeros((2, 3))), dc.Parameter(np.zeros((4, 5)), "w"),
                      dc.Parameter(np.zeros(4), "b"))


class TestActivations:
    def test_relu_values(self):
        assert np.allclose(dc.relu(dc.Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_leaky_relu_values(self):
        assert np.allclose(dc.leaky_relu(dc.Tensor([-1.0, 2.0]), 0.2).data, [-0.2, 2.0])

    def test_relu_subgradient_at_zero_is_zero(self):
        x = dc.Parameter(np.array([0.0, -1.0, 1.0]), "x")
        dc.reduce_sum(dc.relu(x)).backward()
        assert np.allclose(x.grad, [0.0, 0.0, 1.0])

    def test_finite_diff_away_from_kinks(self):
        rng = np.random.default_rng(3)
        base = rng.normal(size=(4, 4))
        base[np.abs(base) < 0.05] += 0.1  # keep clear of the kink
        w = rng.normal(size=(4, 4))
        for op in (dc.relu, lambda t: dc.leaky_relu(t, 0.2)):
            p = dc.Parameter(base, "p")
            err = dc.finite_diff_check(lambda: weighted_sum(w)(op(p)), [p], eps=1e-6)
            assert err < 1e-6


class TestMaskedSoftmax:
    def test_uniform_two_entries(self):
        out = dc.masked_softmax(dc.Tensor([[0.0, 0.0]]), np.array([[1.0, 1.0]]))
        assert np.allclose(out.data, [[0.5, 0.5]])

    def test_single_unmasked_entry(self):
        out = dc.masked_softmax(dc.Tensor([[500.0, 1e-3]]), np.array([[1.0, 0.0]]))
        assert np.allclose(out.data, [[1.0, 0.0]])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        scores = dc.Tensor(rng.normal(size=(5, 5)) * 10)
        mask = (rng.random((5, 5)) > 0.4).astype(float)
        np.fill_diagonal(mask, 1.0)
        out = dc.masked_softmax(scores, mask)
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out.data[mask == 0] == 0.0)

    def test_all_masked_row_raises(self):
        with pytest.raises(ValueError):
            dc.masked_softmax(dc.Tensor(np.zeros((2, 2))), np.array([[1.0, 0.0], [0.0, 0.0]]))

    def test_large_masked_scores_do_not_overflow(self):
        out = dc.masked_softmax(dc.Tensor([[0.0, 1e8]]), np.array([[1.0, 0.0]]))
        assert np.allclose(out.data, [[1.0, 0.0]])

    def test_gradient(self):
        rng = np.random.default_rng(8)
        mask = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]])
        w = rng.normal(size=(3, 3))
        p = dc.Parameter(rng.normal(size=(3, 3)), "scores")
        err = dc.finite_diff_check(
            lambda: weighted_sum(w)(dc.masked_softmax(p, mask)), [p], eps=1e-6
        )
        assert err < 1e-6


class TestNormalize:
    def test_three_four_five(self):
        assert np.allclose(dc.l2_normalize(dc.Tensor([3.0, 4.0])).data, [0.6, 0.8])

    def test_unit_vector_fixed_point(self):
        v = np.array([0.6, 0.8])
        assert np.allclose(dc.l2_normalize(dc.Tensor(v)).data, v, atol=1e-15)

    def test_output_norm(self):
        v = np.random.default_rng(1).normal(size=16)
        out = dc.l2_normalize(dc.Tensor(v))
        assert abs(np.linalg.norm(out.data) - 1.0) < 1e-9

    def test_zero_vector_raises(self):
        with pytest.raises(dc.ZeroVectorError):
            dc.l2_normalize(dc.Tensor(np.zeros(4)))

    def test_gradient_random_8_vector(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=8)
        p = dc.Parameter(rng.normal(size=8), "v")
        err = dc.finite_diff_check(lambda: weighted_sum(w)(dc.l2_normalize(p)), [p], eps=1e-5)
        assert err < 1e-5

    def test_rows_gradient(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(3, 6))
        p = dc.Parameter(rng.normal(size=(3, 6)), "m")
        err = dc.finite_diff_check(
            lambda: weighted_sum(w)(dc.l2_normalize_rows(p)), [p], eps=1e-5
        )
        assert err < 1e-5

    def test_zero_row_raises(self):
        m = np.ones((3, 4))
        m[1] = 0.0
        with pytest.raises(dc.ZeroVectorError):
            dc.l2_normalize_rows(dc.Tensor(m))


class TestElementwiseAndReductions:
    def test_mul_by_ones(self):
        x = np.random.default_rng(0).normal(size=(3, 3))
        assert np.array_equal(
            dc.elementwise_mul(dc.Tensor(x), dc.Tensor(np.ones((3, 3)))).data, x
        )

    def test_mean_of_copies(self):
        v = np.array([1.0, -2.0, 3.0])
        stacked = dc.Tensor(np.tile(v, (7, 1)))
        assert np.allclose(dc.reduce_mean(stacked, axis=0).data, v)

    def test_concat_columns(self):
        out = dc.concat_columns(dc.Tensor([[1.0]]), dc.Tensor([[2.0, 3.0]]))
        assert np.allclose(out.data, [[1.0, 2.0, 3.0]])

    def test_shape_mismatch(self):
        with pytest.raises(dc.ShapeError):
            dc.concat_columns(dc.Tensor(np.zeros((2, 1))), dc.Tensor(np.zeros((3, 1))))


class TestBackwardMechanics:
    def test_accumulation_is_additive(self):
        x = dc.Parameter(np.array([1.0, 2.0, 3.0]), "x")
        y = dc.reduce_sum(dc.elementwise_mul(x, x))
        y.backward()
        first = x.grad.copy()
        y.backward()
        assert np.array_equal(x.grad, 2.0 * first)

    def test_gradient_flows_through_shared_subexpression(self):
        x = dc.Parameter(np.array([2.0]), "x")
        y = dc.elementwise_mul(x, x)  # x^2
        z = dc.reduce_sum(dc.add(y, y))  # 2 x^2
        z.backward()
        assert np.allclose(x.grad, [8.0])

    def test_no_graph_without_requires_grad(self):
        a = dc.Tensor([1.0, 2.0])
        out = dc.relu(dc.elementwise_mul(a, a))
        assert out._parents == () and out._vjp is None

    def test_non_finite_input_rejected(self):
        with pytest.raises(dc.NumericalError):
            dc.Tensor([np.nan, 1.0])


class TestFiniteDiffCheck:
    def test_quadratic_gradient(self):
        p = dc.Parameter(np.random.default_rng(0).normal(size=6), "x")
        err = dc.finite_diff_check(
            lambda: dc.elementwise_mul(dc.reduce_sum(dc.elementwise_mul(p, p)), 0.5),
            [p],
            eps=1e-5,
        )
        assert err < 1e-8

    def test_corrupted_adjoint_detected(self):
        p = dc.Parameter(np.abs(np.random.default_rng(1).normal(size=6)) + 0.5, "x")
        with dc.corrupt_adjoints(1.5):
            err = dc.finite_diff_check(
                lambda: dc.reduce_sum(dc.relu(p)), [p], eps=1e-5
            )
        assert err > 1e-2


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = dc.Parameter(np.array([1.0, -2.0]), "p")
        opt = dc.Adam([p], lr=0.1)
        opt.step()
        assert np.array_equal(p.data, [1.0, -2.0])
        assert opt.step_count == 1

    def test_first_step_is_lr_times_sign(self):
        # closed form: m_hat = g, v_hat = g^2, update = -lr * g / (|g| + eps)
        g = np.array([0.3, -0.7, 2.0])
        p = dc.Parameter(np.zeros(3), "p")
        p.grad = g.copy()
        opt = dc.Adam([p], lr=0.01)
        opt.step()
        expected = -0.01 * g / (np.abs(g) + 1e-8)
        assert np.allclose(p.data, expected, atol=1e-12)

    def test_descends_quadratic(self):
        p = dc.Parameter(np.array([1.0]), "x")
        opt = dc.Adam([p], lr=0.01)
        for _ in range(2000):
            opt.zero_grad()
            loss = dc.reduce_sum(dc.elementwise_mul(p, p))
            loss.backward()
            opt.step()
        assert abs(float(p.data[0])) < 0.05

    def test_nan_gradient_raises(self):
        p = dc.Parameter(np.zeros(2), "p")
        p.grad = np.array([np.nan, 0.0])
        with pytest.raises(dc.NumericalError):
            dc.Adam([p]).step()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        sections = {
            "enc": {"w": np.arange(6.0).reshape(2, 3), "b": np.array([1.0, 2.0])},
            "tmp": {"k": np.eye(3)},
        }
        path = tmp_path / "ck.npz"
        dc.save_checkpoint(path, sections, {"note": "hi"})
        loaded, meta = dc.load_checkpoint(path)
        assert meta == {"note": "hi"}
        for sec, entries in sections.items():
            for name, arr in entries.items():
                assert np.array_equal(loaded[sec][name], arr)

    def test_shape_mismatch_rejected(self, tmp_path):
        path = tmp_path / "ck.npz"
        dc.save_checkpoint(path, {"enc": {"w": np.zeros((2, 3))}}, {})
        loaded, _ = dc.load_checkpoint(path)
        with pytest.raises(ValueError, match="shape mismatch"):
            dc.take_section(loaded, "enc", {"w": (3, 2)})

    def test_missing_section_rejected(self, tmp_path):
        path = tmp_path / "ck.npz"
        dc.save_checkpoint(path, {"enc": {"w": np.zeros(2)}}, {})
        loaded, _ = dc.load_checkpoint(path)
        with pytest.raises(ValueError, match="missing section"):
            dc.take_section(loaded, "tmp", {"k": (2,)})

    def test_byte_deterministic(self, tmp_path):
        sections = {"s": {"w": np.linspace(0, 1, 7)}}
        a, b = tmp_path / "a.npz", tmp_path / "b.npz"
        dc.save_checkpoint(a, sections, {"x": 1})
        dc.save_checkpoint(b, sections, {"x": 1})
        assert a.read_bytes() == b.read_bytes()
