import numpy as np
import pytest

from dass import autodiff as ad
from dass.autodiff import Tensor
from dass.genotype import (Genotype, GenotypeError, argmax_invariance_check,
                           derive, deserialize, instantiate, serialize)
from dass.metrics import count_params
from dass.space import OP_NAMES, Supernet, n_edges, operation_set
from dass.sparse import MASKED


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_genotype(rng, steps=2) -> Genotype:
    def cell():
        pairs = []
        for i in range(steps):
            sources = rng.choice(i + 2, size=2, replace=False)
            for src in sorted(int(s) for s in sources):
                pairs.append((OP_NAMES[int(rng.integers(len(OP_NAMES)))], src))
        return tuple(pairs)

    return Genotype(normal=cell(), reduce=cell(),
                    concat_nodes=tuple(range(2, 2 + steps)))


class TestDerive:
    def test_one_hot_alpha_selects_that_op(self):
        alpha = np.zeros((2, len(OP_NAMES)), dtype=np.float32)
        alpha[0, 3] = 5.0
        alpha[1, 6] = 5.0
        g = derive(alpha, None, OP_NAMES, steps=1)
        assert g.normal == (("dil_sparse_conv_5x5", 0), ("skip_connect", 1))
        assert g.reduce == ()

    def test_exact_tie_takes_lowest_op_index(self):
        alpha = np.zeros((2, len(OP_NAMES)), dtype=np.float32)
        g = derive(alpha, None, OP_NAMES, steps=1)
        assert g.normal == ((OP_NAMES[0], 0), (OP_NAMES[0], 1))

    def test_hand_ranked_three_node_table(self):
        # steps=3 -> edges: node2: rows 0-1, node3: rows 2-4, node4: rows 5-8
        alpha = np.full((n_edges(3), len(OP_NAMES)), -1.0, dtype=np.float32)
        alpha[0, 4] = 3.0   # node2, src0: max_pool (3.0)
        alpha[1, 6] = 2.0   # node2, src1: skip (2.0)
        alpha[2, 0] = 0.5   # node3, src0: sep3 (0.5)
        alpha[3, 1] = 4.0   # node3, src1: sep5 (4.0)
        alpha[4, 2] = 1.0   # node3, src2: dil3 (1.0)
        alpha[5, 3] = 0.2   # node4, src0
        alpha[6, 5] = 0.9   # node4, src1: avg_pool (0.9)
        alpha[7, 4] = 0.8   # node4, src2
        alpha[8, 6] = 6.0   # node4, src3: skip (6.0)
        g = derive(alpha, None, OP_NAMES, steps=3)
        assert g.normal[0:2] == (("max_pool_3x3", 0), ("skip_connect", 1))
        assert g.normal[2:4] == (("sep_sparse_conv_5x5", 1), ("dil_sparse_conv_3x3", 2))
        assert g.normal[4:6] == (("avg_pool_3x3", 1), ("skip_connect", 3))

    def test_zero_op_excluded_from_argmax(self):
        ops = operation_set(include_zero_op=True)
        alpha = np.zeros((2, len(ops)), dtype=np.float32)
        alpha[:, ops.index("none")] = 10.0
        alpha[0, 2] = 1.0
        alpha[1, 5] = 1.0
        g = derive(alpha, None, ops, steps=1)
        assert all(op != "none" for op, _ in g.normal)

    def test_two_edges_per_node_from_every_earlier_node(self, rng):
        alpha_n = rng.standard_normal((n_edges(4), len(OP_NAMES))).astype(np.float32)
        alpha_r = rng.standard_normal((n_edges(4), len(OP_NAMES))).astype(np.float32)
        g = derive(alpha_n, alpha_r, OP_NAMES)
        assert len(g.normal) == 8 and len(g.reduce) == 8
        for node in range(4):
            (_, s1), (_, s2) = g.normal[2 * node: 2 * node + 2]
            assert s1 < s2 < node + 2  # distinct sources, acyclic


class TestArgmaxInvariance:
    def test_shift_and_scale_on_random_tables(self, rng):
        for _ in range(100):
            alpha_n = rng.standard_normal((n_edges(2), len(OP_NAMES))).astype(np.float32)
            alpha_r = rng.standard_normal((n_edges(2), len(OP_NAMES))).astype(np.float32)
            shift = float(rng.uniform(-10, 10))
            scale = float(rng.uniform(0.1, 10))
            assert argmax_invariance_check(alpha_n, alpha_r, shift=shift)
            assert argmax_invariance_check(alpha_n, alpha_r, scale=scale)
            assert argmax_invariance_check(alpha_n, alpha_r, shift=shift, scale=scale)

    def test_nonpositive_scale_rejected(self, rng):
        alpha = rng.standard_normal((2, len(OP_NAMES))).astype(np.float32)
        with pytest.raises(ValueError):
            argmax_invariance_check(alpha, None, scale=0.0)


class TestSerialization:
    def test_round_trip_identity(self, rng):
        for _ in range(100):
            g = random_genotype(rng, steps=int(rng.integers(1, 4)))
            assert deserialize(serialize(g)) == g

    def test_fixture_document_with_sparse_conv_name(self):
        text = """
        {
          "normal": [["sep_sparse_conv_3x3", 0], ["skip_connect", 1]],
          "reduce": [["max_pool_3x3", 0], ["avg_pool_3x3", 1]],
          "concat_nodes": [2]
        }
        """
        g = deserialize(text)
        assert g.normal[0] == ("sep_sparse_conv_3x3", 0)
        assert g.concat_nodes == (2,)

    def test_parse_error_reports_position(self):
        with pytest.raises(GenotypeError, match="position"):
            deserialize('{"normal": [,]}')

    def test_empty_normal_rejected(self):
        with pytest.raises(GenotypeError, match="2 edges per node"):
            deserialize('{"normal": [], "reduce": [], "concat_nodes": []}')

    def test_unknown_op_rejected(self):
        with pytest.raises(GenotypeError, match="unknown operation"):
            deserialize('{"normal": [["conv_9x9", 0], ["skip_connect", 1]], '
                        '"reduce": [], "concat_nodes": [2]}')

    def test_acyclicity_enforced(self):
        with pytest.raises(GenotypeError, match="out of range"):
            deserialize('{"normal": [["skip_connect", 2], ["skip_connect", 0]], '
                        '"reduce": [], "concat_nodes": [2]}')

    def test_missing_fields_rejected(self):
        with pytest.raises(GenotypeError, match="missing fields"):
            deserialize('{"normal": []}')


class TestInstantiate:
    def test_all_skip_genotype_has_no_cell_conv_parameters(self, rng):
        g = Genotype(normal=(("skip_connect", 0), ("skip_connect", 1)),
                     reduce=(("skip_connect", 0), ("skip_connect", 1)),
                     concat_nodes=(2,))
        net = instantiate(g, rng, n_cells=2, init_channels=4, n_classes=4)
        cell_sparse = [n for n, _ in net.named_sparse_params() if n.startswith("cells")]
        assert cell_sparse == []

    def test_parameter_count_matches_hand_sum(self, rng):
        g = Genotype(normal=(("sep_sparse_conv_3x3", 0), ("max_pool_3x3", 1)),
                     reduce=(("skip_connect", 0), ("avg_pool_3x3", 1)),
                     concat_nodes=(2,))
        c, classes = 4, 4
        net = instantiate(g, rng, n_cells=2, init_channels=c, n_classes=classes)
        # macro layout: cell0 normal at c, cell1 reduction at 2c
        stem = 3 * c * 9 + 2 * c                      # conv + bn affine
        pre = lambda cin, cout: cin * cout + 2 * cout  # 1x1 relu-conv-bn
        fact = lambda cin, cout: 2 * cin * (cout // 2) + 2 * cout
        cell0 = pre(c, c) + pre(c, c)                  # preprocessors
        cell0 += 2 * (c * 9 + c * c) + 4 * c           # sep3: 2x(dw+pw) + 2 bn
        c1 = 2 * c
        cell1 = pre(c, c1) + pre(c, c1)
        cell1 += fact(c1, c1)                          # strided skip
        classifier = (1 * c1) * classes + classes      # concat of 1 node, + bias
        expected_total = stem + cell0 + cell1 + classifier
        total, nonzero = count_params(net)
        assert total == expected_total

    def test_one_hot_supernet_matches_derived_network(self, rng):
        # the zero op lets non-retained edges be silenced exactly, so a
        # saturated alpha table makes the supernet equal the derived network
        ops = operation_set(include_zero_op=True)
        sup = Supernet(rng, n_cells=2, steps=2, init_channels=4, n_classes=4,
                       op_names=ops)
        for _, sp in sup.named_sparse_params():
            sp.scores.data = rng.standard_normal(sp.shape).astype(np.float32)
            sp.k = max(sp.numel // 2, 1)
            sp.rebinarize()
        g = derive(sup.alpha_normal.data, sup.alpha_reduce.data, ops, 2)
        net = instantiate(g, np.random.default_rng(1), n_cells=2, init_channels=4,
                          n_classes=4, inherit_from=sup)

        big = np.float32(60.0)
        none_idx = ops.index("none")
        offsets = np.cumsum([0, 2, 3])
        for table, pairs in ((sup.alpha_normal, g.normal), (sup.alpha_reduce, g.reduce)):
            one_hot = np.zeros_like(table.data)
            one_hot[:, none_idx] = big
            for idx, (op, src) in enumerate(pairs):
                edge = int(offsets[idx // 2]) + src
                one_hot[edge, none_idx] = 0.0
                one_hot[edge, ops.index(op)] = big
            table.data = one_hot

        sup.set_training(False)
        net.set_training(False)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        with ad.no_grad():
            sup_out = sup(Tensor(x), MASKED).data
            net_out = net(Tensor(x), MASKED).data
        assert np.allclose(sup_out, net_out, atol=1e-5)

    def test_inheritance_copies_theta_scores_mask(self, rng):
        sup = Supernet(rng, n_cells=2, steps=1, init_channels=4, n_classes=4)
        for _, sp in sup.named_sparse_params():
            sp.scores.data = rng.standard_normal(sp.shape).astype(np.float32)
            sp.k = max(sp.numel // 3, 1)
            sp.rebinarize()
        g = derive(sup.alpha_normal.data, sup.alpha_reduce.data, sup.op_names, 1)
        net = instantiate(g, np.random.default_rng(2), n_cells=2, init_channels=4,
                          n_classes=4, inherit_from=sup)
        sup_cls = dict(sup.named_sparse_params())["classifier.weight"]
        net_cls = dict(net.named_sparse_params())["classifier.weight"]
        assert net_cls.theta.data.tobytes() == sup_cls.theta.data.tobytes()
        assert net_cls.scores.data.tobytes() == sup_cls.scores.data.tobytes()
        assert net_cls.mask.tobytes() == sup_cls.mask.tobytes()
        assert net_cls.k == sup_cls.k

    def test_full_scale_layout_instantiation_forward(self, rng):
        g = random_genotype(rng, steps=1)
        net = instantiate(g, rng, n_cells=8, init_channels=4, n_classes=10)
        x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
        with ad.no_grad():
            logits = net(Tensor(x), MASKED)
        assert logits.shape == (2, 10)
        assert np.isfinite(logits.data).all()

    def test_layout_mismatch_rejected(self, rng):
        g = random_genotype(rng, steps=3)
        sup = Supernet(rng, n_cells=2, steps=2, init_channels=4, n_classes=4)
        with pytest.raises(GenotypeError):
            instantiate(g, rng, n_cells=2, init_channels=4, n_classes=4,
                        inherit_from=sup)
