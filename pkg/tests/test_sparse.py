import numpy as np
import pytest

from dass import autodiff as ad
from dass.autodiff import Tensor
from dass.optim import SGD
from dass.sparse import (DENSE, MASKED, SCORE_SCALED, SparseConv2d, SparseLinear,
                         SparseParam, binarize_topk, init_scores, layer_k_from_ratio,
                         sparse_forward)

from gradcheck_util import gradcheck


class TestInitScores:
    def test_normalized_by_peak_magnitude(self):
        scores = init_scores(np.array([2.0, -4.0, 1.0], dtype=np.float32))
        assert scores.tolist() == [0.5, -1.0, 0.25]

    def test_single_weight_self_normalizes(self):
        assert init_scores(np.array([-3.7], dtype=np.float32)).tolist() == [-1.0]
        assert init_scores(np.array([0.2], dtype=np.float32)).tolist() == [1.0]

    def test_zero_entries_stay_zero(self):
        assert init_scores(np.array([0.0, 5.0], dtype=np.float32)).tolist() == [0.0, 1.0]

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError, match="all-zero"):
            init_scores(np.zeros(4, dtype=np.float32))

    def test_range_and_peak(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            theta = rng.standard_normal(rng.integers(1, 64)).astype(np.float32)
            s = init_scores(theta)
            assert np.all(np.abs(s) <= 1.0)
            assert np.isclose(np.max(np.abs(s)), 1.0)


class TestBinarizeTopk:
    def test_rank_by_magnitude(self):
        mask = binarize_topk(np.array([0.9, -0.8, 0.1, 0.05], dtype=np.float32), 2)
        assert mask.tolist() == [1.0, 1.0, 0.0, 0.0]

    def test_keep_everything_and_nothing(self):
        s = np.array([0.3, -0.2, 0.7], dtype=np.float32)
        assert binarize_topk(s, 3).tolist() == [1.0, 1.0, 1.0]
        assert binarize_topk(s, 0).tolist() == [0.0, 0.0, 0.0]

    def test_ties_break_to_lowest_flat_index(self):
        mask = binarize_topk(np.array([0.5, -0.5, 0.5, 0.5], dtype=np.float32), 2)
        assert mask.tolist() == [1.0, 1.0, 0.0, 0.0]

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            binarize_topk(np.zeros(3, dtype=np.float32), 4)
        with pytest.raises(ValueError):
            binarize_topk(np.zeros(3, dtype=np.float32), -1)

    def test_popcount_and_dominance_properties(self):
        rng = np.random.default_rng(3)
        for trial in range(100):
            n = int(rng.integers(1, 200))
            # integer-valued scores so ties actually occur
            scores = rng.integers(-3, 4, size=n).astype(np.float32)
            k = int(rng.integers(0, n + 1))
            mask = binarize_topk(scores, k)
            assert int(mask.sum()) == k
            kept = np.abs(scores[mask == 1])
            dropped = np.abs(scores[mask == 0])
            if k and k < n:
                assert kept.min() >= dropped.max()

    def test_multidimensional_shape_preserved(self):
        scores = np.arange(12, dtype=np.float32).reshape(3, 4)
        mask = binarize_topk(scores, 5)
        assert mask.shape == (3, 4)
        assert int(mask.sum()) == 5


class TestLayerK:
    def test_examples(self):
        assert layer_k_from_ratio(1000, 0.99) == 10
        assert layer_k_from_ratio(1000, 0.0) == 1000
        assert layer_k_from_ratio(37, 0.95) == 2

    def test_clamped_to_bounds(self):
        assert layer_k_from_ratio(5, 1.0) == 0
        assert layer_k_from_ratio(0, 0.5) == 0

    def test_invalid_ratio(self):
        with pytest.raises(ValueError):
            layer_k_from_ratio(10, 1.5)


class TestSparseForward:
    def test_masked_all_ones_is_dense(self):
        rng = np.random.default_rng(1)
        p = SparseParam(rng.standard_normal((3, 5)).astype(np.float32))
        x = Tensor(rng.standard_normal((4, 5)).astype(np.float32))
        dense = sparse_forward(x, p, "linear", DENSE)
        masked = sparse_forward(x, p, "linear", MASKED)
        assert dense.data.tobytes() == masked.data.tobytes()

    def test_masked_all_zeros_gives_zero_output(self):
        p = SparseParam(np.ones((2, 3), dtype=np.float32))
        p.set_mask(np.zeros((2, 3), dtype=np.float32))
        out = sparse_forward(Tensor(np.ones((4, 3), dtype=np.float32)), p, "linear", MASKED)
        assert not out.data.any()

    def test_score_scaled_hand_dot_product(self):
        p = SparseParam(np.array([[2.0, 3.0]], dtype=np.float32))
        p.scores.data = np.array([[0.5, 1.0]], dtype=np.float32)
        out = sparse_forward(Tensor(np.array([[1.0, 1.0]], dtype=np.float32)),
                             p, "linear", SCORE_SCALED)
        assert out.data[0, 0] == 4.0

    def test_masked_equals_dense_on_pre_masked_theta(self):
        rng = np.random.default_rng(5)
        p = SparseParam(rng.standard_normal((4, 1, 3, 3)).astype(np.float32))
        p.scores.data = rng.standard_normal(p.shape).astype(np.float32)
        p.k = 6
        p.rebinarize()
        x = Tensor(rng.standard_normal((2, 4, 6, 6)).astype(np.float32))
        masked = sparse_forward(x, p, "conv", MASKED, padding=1, groups=4)
        oracle = SparseParam((p.theta.data * p.mask).astype(np.float32))
        dense = sparse_forward(x, oracle, "conv", DENSE, padding=1, groups=4)
        assert np.allclose(masked.data, dense.data, atol=1e-6)

    def test_masked_positions_get_zero_theta_gradient(self):
        rng = np.random.default_rng(2)
        p = SparseParam(rng.standard_normal((3, 4)).astype(np.float32))
        p.scores.data = rng.standard_normal((3, 4)).astype(np.float32)
        p.k = 5
        p.rebinarize()
        x = Tensor(rng.standard_normal((6, 4)).astype(np.float32))
        loss = ad.tsum(sparse_forward(x, p, "linear", MASKED))
        ad.backward(loss)
        assert not p.theta.grad[p.mask == 0].any()
        assert p.theta.grad[p.mask == 1].any()

    def test_score_scaled_routes_gradient_to_scores(self):
        rng = np.random.default_rng(4)
        p = SparseParam(rng.standard_normal((2, 3)).astype(np.float32))
        p.scores.data = init_scores(p.theta.data)
        x = Tensor(rng.standard_normal((5, 3)).astype(np.float32))
        loss = ad.tsum(sparse_forward(x, p, "linear", SCORE_SCALED))
        ad.backward(loss)
        assert p.scores.grad is not None and p.scores.grad.any()

    def test_unknown_mode_rejected(self):
        p = SparseParam(np.ones((1, 1), dtype=np.float32))
        with pytest.raises(ValueError, match="forward mode"):
            p.effective_weight("sparse")


class TestGradientShielding:
    def test_masked_positions_stay_exactly_zero_through_sgd(self):
        rng = np.random.default_rng(9)
        layer = SparseLinear(rng, 16, 8)
        layer.weight.scores.data = init_scores(layer.weight.theta.data)
        layer.weight.k = 12
        layer.weight.rebinarize()
        mask = layer.weight.mask.copy()
        opt = SGD(layer.theta_parameters(), lr=0.05, momentum=0.9, weight_decay=3e-4)
        for _ in range(25):
            x = Tensor(rng.standard_normal((4, 16)).astype(np.float32))
            loss = ad.tmean(ad.mul(layer(x, MASKED), layer(x, MASKED)))
            ad.backward(loss)
            opt.step()
        effective = layer.weight.theta.data * layer.weight.mask
        assert not effective[mask == 0].any()
        assert layer.weight.mask.tobytes() == mask.tobytes()


class TestSparseModuleGradients:
    """SparseConv2d / SparseLinear against finite differences in all three modes."""

    @pytest.mark.parametrize("mode", [DENSE, SCORE_SCALED, MASKED])
    def test_sparse_linear_modes(self, mode):
        rng = np.random.default_rng(11)
        layer = SparseLinear(rng, 6, 4)
        layer.weight.theta.data = layer.weight.theta.data.astype(np.float64)
        layer.weight.scores.data = init_scores(
            rng.standard_normal((4, 6))).astype(np.float64)
        layer.bias.data = layer.bias.data.astype(np.float64)
        layer.weight.k = 14
        layer.weight.rebinarize()
        x = Tensor(rng.standard_normal((3, 6)))
        labels = np.array([1, 0, 3])
        params = [layer.weight.theta, layer.bias]
        if mode == SCORE_SCALED:
            params.append(layer.weight.scores)

        gradcheck(lambda: ad.cross_entropy(layer(x, mode), labels), params)

    @pytest.mark.parametrize("mode", [DENSE, SCORE_SCALED, MASKED])
    def test_sparse_conv_modes(self, mode):
        rng = np.random.default_rng(12)
        layer = SparseConv2d(rng, 3, 4, 3, padding=1)
        layer.weight.theta.data = layer.weight.theta.data.astype(np.float64)
        layer.weight.scores.data = init_scores(
            rng.standard_normal((4, 3, 3, 3))).astype(np.float64)
        layer.weight.k = 70
        layer.weight.rebinarize()
        x = Tensor(rng.standard_normal((2, 3, 5, 5)))
        probe = Tensor(np.cos(np.arange(200, dtype=np.float64)).reshape(2, 4, 5, 5))
        params = [layer.weight.theta]
        if mode == SCORE_SCALED:
            params.append(layer.weight.scores)

        gradcheck(lambda: ad.tsum(ad.mul(layer(x, mode), probe)), params)
