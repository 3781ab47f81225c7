import numpy as np
import pytest

from raedesk import tensor as T
from raedesk.tensor import Tensor
from raedesk.train import finite_diff_check, gradcheck


class TestMatmul:
    def test_identity_left_factor(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [4.0]])

    def test_zero_right_factor(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[0.0], [0.0]]))
        np.testing.assert_array_equal(out.data, [[0.0]])

    def test_hand_computed_2x2(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]),
                       Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_shift_invariance_large_inputs(self):
        out = T.softmax(Tensor([1000.0, 1000.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_closed_form(self):
        out = T.softmax(Tensor([0.0, np.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-14)

    def test_sums_to_one(self):
        g = T.rng(3)
        x = Tensor(100.0 * g.normal(size=(4, 7)))
        out = T.softmax(x, axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
        assert (out.data > 0).all()


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = Tensor(np.full((2, 5), 3.7))
        out = T.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_already_normalized(self):
        out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)),
                           Tensor(np.zeros(2)), eps=1e-15)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_zero_gain_gives_bias(self):
        g = T.rng(4)
        x = Tensor(g.normal(size=(3, 4)))
        out = T.layer_norm(x, Tensor(np.zeros(4)), Tensor(np.full(4, 2.5)))
        np.testing.assert_allclose(out.data, 2.5)


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        w.sum().backward()
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_square_gradient(self):
        w = Tensor([3.0], requires_grad=True)
        (w * w).sum().backward()
        np.testing.assert_allclose(w.grad, [6.0])

    def test_matmul_matches_finite_differences(self):
        g = T.rng(11)
        w = Tensor(g.normal(size=(3, 3)), requires_grad=True)
        x = Tensor(g.normal(size=(3, 3)))
        err = finite_diff_check(lambda: T.matmul(w, x).sum(), [w])
        assert err <= 1e-6

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (w * w).backward()

    def test_gradients_accumulate_across_uses(self):
        w = Tensor([2.0], requires_grad=True)
        (w + w).sum().backward()
        np.testing.assert_allclose(w.grad, [2.0])


class TestAdamW:
    def test_zero_grad_zero_decay_is_identity(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        state = T.OptimizerState([p], lr=0.1)
        before = p.data.copy()
        T.adamw_step(state)
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_sign_update(self):
        # bias correction makes m_hat = g, sqrt(v_hat) = |g| on step one
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([1.0])
        state = T.OptimizerState([p], lr=0.1, eps=1e-300)
        T.adamw_step(state)
        np.testing.assert_allclose(p.data, [0.9], atol=1e-12)

    def test_decoupled_decay(self):
        p = Tensor([5.0], requires_grad=True)
        state = T.OptimizerState([p], lr=0.1, weight_decay=0.1)
        T.adamw_step(state)
        np.testing.assert_allclose(p.data, [5.0 * 0.99])

    def test_step_count_increments(self):
        p = Tensor([1.0], requires_grad=True)
        state = T.OptimizerState([p])
        T.adamw_step(state)
        T.adamw_step(state)
        assert state.step_count == 2

    def test_betas_validated(self):
        with pytest.raises(ValueError):
            T.OptimizerState([Tensor([1.0])], betas=(1.0, 0.95))


class TestSeededNormal:
    def test_mean_near_zero(self):
        x = T.seeded_normal((10 ** 6,), 123).data
        assert abs(x.mean()) < 4e-3

    def test_variance_near_one(self):
        x = T.seeded_normal((10 ** 6,), 456).data
        assert abs(x.var() - 1.0) < 0.01

    def test_determinism(self):
        a = T.seeded_normal((3, 4), 789).data
        b = T.seeded_normal((3, 4), 789).data
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = T.seeded_normal((8,), 1).data
        b = T.seeded_normal((8,), 2).data
        assert not np.array_equal(a, b)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        g = T.rng(9)
        entries = {"a/w": g.normal(size=(3, 4)).astype(np.float32),
                   "b/bias": g.normal(size=(7,)).astype(np.float32),
                   "scalar": np.array(2.5, dtype=np.float32)}
        p1 = tmp_path / "c1.raet"
        p2 = tmp_path / "c2.raet"
        T.save_checkpoint(p1, entries)
        loaded = T.load_checkpoint(p1)
        for k, v in entries.items():
            np.testing.assert_array_equal(loaded[k], v)
            assert loaded[k].dtype == np.float32
        T.save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_validated(self, tmp_path):
        p = tmp_path / "bad.raet"
        p.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(ValueError):
            T.load_checkpoint(p)


def test_gradcheck_ops_scope():
    results = gradcheck("ops")
    assert results, "empty op suite"
    for name, err in results.items():
        assert err <= 1e-5, f"{name}: {err}"
