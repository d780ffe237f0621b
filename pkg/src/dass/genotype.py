"""Discretization of the supernet into a concrete cell description.

``derive`` picks, per edge, the candidate operation with the largest
architecture parameter, then keeps the two strongest incoming edges per
intermediate node.  Rankings use raw alpha values, which makes the result
exactly invariant under additive shifts and positive scalings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .nn import BatchNorm2d, Conv2d, FactorizedReduce, Module, ModuleList, ReLUConvBN
from .sparse import DENSE, SparseLinear
from .space import OP_NAMES, ZERO_OP, Cell, build_operation, reduction_positions
from . import autodiff as ad
from .autodiff import Tensor


class GenotypeError(ValueError):
    """Malformed or inconsistent genotype document."""


@dataclass(frozen=True)
class Genotype:
    """Two retained (op_name, source_node) edges per intermediate node, per cell type."""

    normal: tuple[tuple[str, int], ...]
    reduce: tuple[tuple[str, int], ...]
    concat_nodes: tuple[int, ...]

    @property
    def steps(self) -> int:
        return len(self.normal) // 2


def _derive_cell(alpha: np.ndarray, op_names, steps: int) -> tuple[tuple[str, int], ...]:
    selected: list[tuple[str, int]] = []
    offset = 0
    for i in range(steps):
        n_in = 2 + i
        candidates = []
        for j in range(n_in):
            row = alpha[offset + j].astype(np.float64)
            if ZERO_OP in op_names:
                row = row.copy()
                row[op_names.index(ZERO_OP)] = -np.inf
            op_idx = int(np.argmax(row))  # first maximum: lowest op index on ties
            candidates.append((-row[op_idx], op_idx, j))
        candidates.sort()
        chosen = sorted(candidates[:2], key=lambda t: t[2])
        selected.extend((op_names[op_idx], j) for _, op_idx, j in chosen)
        offset += n_in
    return tuple(selected)


def derive(alpha_normal: np.ndarray, alpha_reduce: np.ndarray | None,
           op_names=OP_NAMES, steps: int | None = None) -> Genotype:
    """Discrete genotype from the two alpha tables."""
    op_names = tuple(op_names)
    if steps is None:
        steps = _steps_from_edges(alpha_normal.shape[0])
    normal = _derive_cell(np.asarray(alpha_normal), op_names, steps)
    reduce_ = (_derive_cell(np.asarray(alpha_reduce), op_names, steps)
               if alpha_reduce is not None else ())
    return Genotype(normal=normal, reduce=reduce_,
                    concat_nodes=tuple(range(2, 2 + steps)))


def _steps_from_edges(edges: int) -> int:
    steps, total = 0, 0
    while total < edges:
        total += 2 + steps
        steps += 1
    if total != edges:
        raise GenotypeError(f"alpha table with {edges} rows does not match any node count")
    return steps


def argmax_invariance_check(alpha_normal: np.ndarray, alpha_reduce: np.ndarray | None,
                            shift: float = 0.0, scale: float = 1.0,
                            op_names=OP_NAMES) -> bool:
    """True when additive shift / positive scaling leaves the derived genotype unchanged."""
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    base = derive(alpha_normal, alpha_reduce, op_names)
    mod_n = alpha_normal * scale + shift
    mod_r = alpha_reduce * scale + shift if alpha_reduce is not None else None
    return derive(mod_n, mod_r, op_names) == base


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _validate(g: Genotype) -> Genotype:
    if not g.normal or len(g.normal) % 2 != 0:
        raise GenotypeError(f"normal cell must list 2 edges per node, got {len(g.normal)}")
    steps = len(g.normal) // 2
    if g.reduce and len(g.reduce) != len(g.normal):
        raise GenotypeError("normal and reduction cells disagree on node count")
    if g.concat_nodes != tuple(range(2, 2 + steps)):
        raise GenotypeError(f"concat_nodes must be all intermediate nodes "
                            f"{tuple(range(2, 2 + steps))}, got {g.concat_nodes}")
    for kind, pairs in (("normal", g.normal), ("reduce", g.reduce)):
        for idx, (op, src) in enumerate(pairs):
            node = idx // 2
            if op not in OP_NAMES:
                raise GenotypeError(f"{kind} edge {idx}: unknown operation {op!r}")
            if not 0 <= src < node + 2:
                raise GenotypeError(f"{kind} node {node + 2}: source {src} out of range")
    return g


def serialize(g: Genotype) -> str:
    _validate(g)
    doc = {
        "normal": [[op, src] for op, src in g.normal],
        "reduce": [[op, src] for op, src in g.reduce],
        "concat_nodes": list(g.concat_nodes),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def deserialize(text: str) -> Genotype:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise GenotypeError(f"genotype parse error at position {e.pos}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise GenotypeError("genotype document must be a JSON object")
    missing = {"normal", "reduce", "concat_nodes"} - doc.keys()
    if missing:
        raise GenotypeError(f"genotype document missing fields: {sorted(missing)}")

    def pairs(key):
        raw = doc[key]
        if not isinstance(raw, list):
            raise GenotypeError(f"{key} must be a list of [op, source] pairs")
        out = []
        for entry in raw:
            if (not isinstance(entry, list) or len(entry) != 2
                    or not isinstance(entry[0], str) or not isinstance(entry[1], int)):
                raise GenotypeError(f"{key}: bad edge entry {entry!r}")
            out.append((entry[0], entry[1]))
        return tuple(out)

    g = Genotype(normal=pairs("normal"), reduce=pairs("reduce"),
                 concat_nodes=tuple(int(v) for v in doc["concat_nodes"]))
    return _validate(g)


# ---------------------------------------------------------------------------
# instantiation as a trainable network
# ---------------------------------------------------------------------------


class FixedCell(Module):
    """Cell with the genotype's two chosen operations per intermediate node."""

    def __init__(self, rng, pairs, steps: int, c_pp: int, c_p: int, channels: int,
                 reduction: bool, reduction_prev: bool, double_sep_conv: bool = True):
        super().__init__()
        self.steps = steps
        self.reduction = reduction
        self.channels = channels
        if reduction_prev:
            self.preprocess0 = FactorizedReduce(rng, c_pp, channels)
        else:
            self.preprocess0 = ReLUConvBN(rng, c_pp, channels, 1)
        self.preprocess1 = ReLUConvBN(rng, c_p, channels, 1)
        ops = ModuleList()
        sources = []
        for op_name, src in pairs:
            stride = 2 if reduction and src < 2 else 1
            ops.append(build_operation(op_name, rng, channels, stride, double_sep_conv))
            sources.append(src)
        self.ops = ops
        self.sources = tuple(sources)

    def forward(self, s0: Tensor, s1: Tensor, mode: str = DENSE) -> Tensor:
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        for i in range(self.steps):
            a = self.ops[2 * i](states[self.sources[2 * i]], mode)
            b = self.ops[2 * i + 1](states[self.sources[2 * i + 1]], mode)
            states.append(ad.add(a, b))
        return ad.concat(states[2:], axis=1)


class DerivedNetwork(Module):
    """Discrete network instantiated from a genotype (same macro layout as the supernet)."""

    def __init__(self, rng, genotype: Genotype, n_cells: int, init_channels: int,
                 n_classes: int, in_channels: int = 3, double_sep_conv: bool = True):
        super().__init__()
        _validate(genotype)
        self.genotype = genotype
        steps = genotype.steps
        self.steps = steps
        self.n_cells = n_cells

        c = init_channels
        self.stem_conv = Conv2d(rng, in_channels, c, 3, padding=1)
        self.stem_bn = BatchNorm2d(c)

        red_pos = reduction_positions(n_cells)
        if red_pos and not genotype.reduce:
            raise GenotypeError("genotype lacks a reduction cell required by the layout")
        cells = ModuleList()
        c_pp, c_p, c_curr = c, c, init_channels
        reduction_prev = False
        for i in range(n_cells):
            reduction = i in red_pos
            if reduction:
                c_curr *= 2
            pairs = genotype.reduce if reduction else genotype.normal
            cells.append(FixedCell(rng, pairs, steps, c_pp, c_p, c_curr, reduction,
                                   reduction_prev, double_sep_conv))
            reduction_prev = reduction
            c_pp, c_p = c_p, steps * c_curr
        self.cells = cells
        self.final_channels = c_p
        self.classifier = SparseLinear(rng, c_p, n_classes)

    def forward(self, x, mode: str = DENSE, collect: bool = False):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        s0 = s1 = self.stem_bn(self.stem_conv(x))
        feats = []
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1, mode)
            if collect:
                feats.append(s1)
        pooled = ad.global_avg_pool(s1)
        logits = self.classifier(pooled, mode)
        if collect:
            return logits, feats
        return logits

    def collect_features(self, x, mode: str = DENSE) -> list[np.ndarray]:
        was_training = self.training
        self.set_training(False)
        with ad.no_grad():
            _, feats = self.forward(x, mode, collect=True)
        self.set_training(was_training)
        return [f.data for f in feats]


def _copy_state(dst: Module, src: Module, masks_only: bool = False):
    dst_params = list(dst.named_parameters())
    src_params = list(src.named_parameters())
    if [n for n, _ in dst_params] != [n for n, _ in src_params]:
        raise GenotypeError("inheritance source does not match the instantiated operation")
    if not masks_only:
        for (_, dp), (_, sp) in zip(dst_params, src_params):
            dp.data = sp.data.copy()
        for (_, db), (_, sb) in zip(dst.named_buffers(), src.named_buffers()):
            db[...] = sb
    for (_, dsp), (_, ssp) in zip(dst.named_sparse_params(), src.named_sparse_params()):
        dsp.set_mask(ssp.mask.copy())
        dsp.k = ssp.k


def instantiate(genotype: Genotype, rng, n_cells: int, init_channels: int,
                n_classes: int, in_channels: int = 3, double_sep_conv: bool = True,
                inherit_from=None, masks_only: bool = False) -> DerivedNetwork:
    """Build the discrete network; with ``inherit_from`` the surviving operations
    copy weights, scores, masks and batch-norm state from the supernet.

    ``masks_only`` keeps the fresh initialization but still carries over the
    sparse structure (masks and per-layer k), for retrain-from-scratch mode.
    """
    net = DerivedNetwork(rng, genotype, n_cells, init_channels, n_classes,
                         in_channels=in_channels, double_sep_conv=double_sep_conv)
    if inherit_from is None:
        return net
    sup = inherit_from
    if len(sup.cells) != n_cells or sup.steps != genotype.steps:
        raise GenotypeError("supernet layout does not match the genotype")
    op_names = sup.op_names
    _copy_state(net.stem_conv, sup.stem_conv, masks_only)
    _copy_state(net.stem_bn, sup.stem_bn, masks_only)
    _copy_state(net.classifier, sup.classifier, masks_only)
    for ci in range(n_cells):
        fixed, mixed_cell = net.cells[ci], sup.cells[ci]
        assert isinstance(mixed_cell, Cell)
        _copy_state(fixed.preprocess0, mixed_cell.preprocess0, masks_only)
        _copy_state(fixed.preprocess1, mixed_cell.preprocess1, masks_only)
        pairs = genotype.reduce if fixed.reduction else genotype.normal
        offsets = np.cumsum([0] + [2 + i for i in range(genotype.steps)])
        for idx, (op_name, src) in enumerate(pairs):
            node = idx // 2
            edge_index = int(offsets[node]) + src
            source_op = mixed_cell.mixed[edge_index].ops[op_names.index(op_name)]
            _copy_state(fixed.ops[idx], source_op, masks_only)
    return net
