import numpy as np
import pytest

from dass import autodiff as ad
from dass.autodiff import Tensor
from dass.metrics import count_params
from dass.space import (OP_NAMES, Cell, MixedOp, Supernet, ZeroOp, build_operation,
                        n_edges, operation_set, reduction_positions)
from dass.sparse import DENSE, MASKED


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def micro_supernet(rng, **kw):
    args = dict(n_cells=2, steps=2, init_channels=4, n_classes=4)
    args.update(kw)
    return Supernet(rng, **args)


class TestOperationSet:
    def test_default_order_is_fixed(self):
        assert operation_set() == OP_NAMES
        assert OP_NAMES == (
            "sep_sparse_conv_3x3", "sep_sparse_conv_5x5", "dil_sparse_conv_3x3",
            "dil_sparse_conv_5x5", "max_pool_3x3", "avg_pool_3x3", "skip_connect")

    def test_zero_op_appended_when_enabled(self):
        assert operation_set(include_zero_op=True)[-1] == "none"

    def test_all_ops_shape_preserving(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
        for name in operation_set(include_zero_op=True):
            op = build_operation(name, rng, 4, stride=1)
            assert op(x, DENSE).shape == (2, 4, 8, 8), name

    def test_all_ops_halve_spatial_on_stride_2(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
        for name in operation_set(include_zero_op=True):
            op = build_operation(name, rng, 4, stride=2)
            assert op(x, DENSE).shape == (2, 4, 4, 4), name

    def test_unknown_op_rejected(self, rng):
        with pytest.raises(ValueError):
            build_operation("conv_7x7", rng, 4, 1)


class TestMixedForward:
    def make_edge(self, rng):
        # identity + zero candidates give analytically known mixtures
        return MixedOp(rng, 4, stride=1, op_names=("skip_connect", "none"))

    def test_uniform_alpha_halves_identity(self, rng):
        edge = self.make_edge(rng)
        x = Tensor(np.full((1, 4, 3, 3), 3.0, dtype=np.float32))
        w = ad.softmax(Tensor(np.zeros(2, dtype=np.float32)), axis=0)
        out = edge(x, w, DENSE)
        assert np.allclose(out.data, 1.5, atol=1e-6)

    def test_saturated_softmax_selects_identity(self, rng):
        edge = self.make_edge(rng)
        x = Tensor(rng.standard_normal((1, 4, 3, 3)).astype(np.float32))
        w = ad.softmax(Tensor(np.array([1e6, 0.0], dtype=np.float32)), axis=0)
        out = edge(x, w, DENSE)
        assert np.allclose(out.data, x.data, atol=1e-6)

    def test_log2_alpha_gives_two_thirds(self, rng):
        edge = self.make_edge(rng)
        x = Tensor(np.full((1, 4, 2, 2), 3.0, dtype=np.float32))
        w = ad.softmax(Tensor(np.array([np.log(2.0), 0.0], dtype=np.float32)), axis=0)
        out = edge(x, w, DENSE)
        assert np.allclose(out.data, 2.0, atol=1e-6)

    def test_shape_divergence_rejected(self, rng):
        ops = [build_operation("skip_connect", rng, 4, 1),
               build_operation("max_pool_3x3", rng, 4, 2)]
        x = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
        w = Tensor(np.array([0.5, 0.5], dtype=np.float32))
        outs = [op(x, DENSE) for op in ops]
        with pytest.raises(ad.ShapeError):
            ad.weighted_sum(outs, w)


class TestCellForward:
    def test_concat_channel_arithmetic(self, rng):
        cell = Cell(rng, steps=2, c_pp=4, c_p=4, channels=4, reduction=False,
                    reduction_prev=False, op_names=OP_NAMES)
        x = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
        w = ad.softmax(Tensor(np.zeros((n_edges(2), len(OP_NAMES)), dtype=np.float32)), 1)
        out = cell(x, x, w, DENSE)
        assert out.shape == (2, 2 * 4, 8, 8)

    def test_all_zero_input_gives_all_zero_output(self, rng):
        cell = Cell(rng, steps=2, c_pp=4, c_p=4, channels=4, reduction=False,
                    reduction_prev=False, op_names=OP_NAMES)
        x = Tensor(np.zeros((2, 4, 8, 8), dtype=np.float32))
        w = ad.softmax(Tensor(np.zeros((n_edges(2), len(OP_NAMES)), dtype=np.float32)), 1)
        out = cell(x, x, w, DENSE)
        assert not out.data.any()

    def test_reduction_halves_spatial_size(self, rng):
        cell = Cell(rng, steps=2, c_pp=4, c_p=4, channels=8, reduction=True,
                    reduction_prev=False, op_names=OP_NAMES)
        x = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
        w = ad.softmax(Tensor(np.zeros((n_edges(2), len(OP_NAMES)), dtype=np.float32)), 1)
        out = cell(x, x, w, DENSE)
        assert out.shape == (2, 2 * 8, 4, 4)


class TestBuildSupernet:
    def test_reduction_placement_8_cells(self):
        assert reduction_positions(8) == (2, 5)

    def test_reduction_placement_2_cells_collision_resolved(self):
        # a normal cell must come first, so the lone reduction lands at 1
        assert reduction_positions(2) == (1,)

    def test_reduction_placement_other_sizes(self):
        assert reduction_positions(3) == (1, 2)
        assert reduction_positions(6) == (2, 4)

    def test_channel_doubling_through_reductions(self, rng):
        net = Supernet(rng, n_cells=8, steps=1, init_channels=16, n_classes=10)
        channels = [cell.channels for cell in net.cells]
        assert channels[0] == 16
        assert channels[2] == 32 and channels[5] == 64
        assert net.final_channels == 64  # steps=1 concat

    def test_min_cells_enforced(self, rng):
        with pytest.raises(ValueError):
            Supernet(rng, n_cells=1, steps=2, init_channels=4, n_classes=4)

    def test_classifier_is_sparse_and_stem_is_dense(self, rng):
        net = micro_supernet(rng)
        sparse_names = [n for n, _ in net.named_sparse_params()]
        assert any(n.startswith("classifier") for n in sparse_names)
        assert not any(n.startswith("stem") for n in sparse_names)

    def test_alpha_tables_shared_shapes(self, rng):
        net = micro_supernet(rng)
        assert net.alpha_normal.data.shape == (n_edges(2), len(OP_NAMES))
        assert net.alpha_reduce.data.shape == (n_edges(2), len(OP_NAMES))


class TestSupernetForward:
    def test_forward_shape_and_finite(self, rng):
        net = micro_supernet(rng)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        logits = net(x, DENSE)
        assert logits.shape == (2, 4)
        assert np.isfinite(logits.data).all()

    def test_alpha_shift_invariance(self, rng):
        net = micro_supernet(rng)
        net.set_training(False)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        with ad.no_grad():
            base = net(x, DENSE).data.copy()
            net.alpha_normal.data = net.alpha_normal.data + np.float32(5.0)
            net.alpha_reduce.data = net.alpha_reduce.data + np.float32(5.0)
            shifted = net(x, DENSE).data
        assert np.allclose(base, shifted, atol=1e-5)

    def test_masked_all_ones_equals_dense_bitwise(self, rng):
        net = micro_supernet(rng)
        net.set_training(False)
        for _, sp in net.named_sparse_params():
            assert sp.mask.all()
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        with ad.no_grad():
            dense = net(x, DENSE).data
            masked = net(x, MASKED).data
        assert dense.tobytes() == masked.tobytes()

    def test_full_scale_layout_forward_shapes(self, rng):
        # 8 cells with reductions at 2 and 5: spatial /4, channels x4 at the end
        net = Supernet(rng, n_cells=8, steps=1, init_channels=4, n_classes=10)
        x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
        with ad.no_grad():
            logits, feats = net.forward(x, DENSE, collect=True)
        assert logits.shape == (2, 10)
        assert feats[1].data.shape == (2, 4, 16, 16)
        assert feats[2].data.shape == (2, 8, 8, 8)
        assert feats[5].data.shape == (2, 16, 4, 4)
        assert feats[7].data.shape == (2, 16, 4, 4)

    def test_collect_features_per_cell(self, rng):
        net = micro_supernet(rng)
        feats = net.collect_features(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
        assert len(feats) == 2
        assert feats[0].shape == (2, 8, 8, 8)   # normal cell, 2*4 channels
        assert feats[1].shape == (2, 16, 4, 4)  # reduction cell, doubled + halved

    def test_zero_op_contributes_nothing_to_gradient(self, rng):
        op = ZeroOp(stride=1)
        x = Tensor(rng.standard_normal((1, 4, 5, 5)).astype(np.float32), requires_grad=True)
        out = op(x, DENSE)
        assert not out.data.any() and not out.requires_grad


class TestParameterCensus:
    def test_supernet_sparse_census_matches_hand_formula(self, rng):
        steps, c, classes = 2, 4, 4
        net = micro_supernet(rng, steps=steps, init_channels=c, n_classes=classes)

        def edge_params(cw):
            # separable convs hold two depthwise+pointwise pairs, dilated convs one;
            # pools and skip carry no prunable weights
            sep = lambda k: 2 * (cw * k * k + cw * cw)
            dil = lambda k: cw * k * k + cw * cw
            return sep(3) + sep(5) + dil(3) + dil(5)

        expected = sum(n_edges(steps) * edge_params(cell.channels) for cell in net.cells)
        expected += net.final_channels * classes  # sparse classifier weight
        actual = sum(sp.numel for _, sp in net.named_sparse_params())
        assert actual == expected

    def test_count_params_total_vs_nonzero_with_all_ones_masks(self, rng):
        net = micro_supernet(rng)
        total, nonzero = count_params(net)
        assert total == nonzero
        for _, sp in net.named_sparse_params():
            sp.k = sp.numel // 2
            sp.scores.data = rng.standard_normal(sp.shape).astype(np.float32)
            sp.rebinarize()
        total2, nonzero2 = count_params(net)
        assert total2 == total
        assert nonzero2 < nonzero
