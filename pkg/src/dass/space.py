"""Continuous cell-based supernet over the sparse operation set.

Cells are complete DAGs: every intermediate node receives a mixed edge from
each earlier node, where a mixed edge evaluates all candidate operations and
combines them with softmax(alpha) weights.  Normal cells keep spatial size;
reduction cells stride edges from the two input nodes and double channels.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .nn import (BatchNorm2d, Conv2d, FactorizedReduce, Identity, Module,
                 ModuleList, ReLUConvBN)
from .sparse import DENSE, SparseConv2d, SparseLinear

OP_NAMES = (
    "sep_sparse_conv_3x3",
    "sep_sparse_conv_5x5",
    "dil_sparse_conv_3x3",
    "dil_sparse_conv_5x5",
    "max_pool_3x3",
    "avg_pool_3x3",
    "skip_connect",
)
ZERO_OP = "none"


def operation_set(include_zero_op: bool = False) -> tuple[str, ...]:
    return OP_NAMES + (ZERO_OP,) if include_zero_op else OP_NAMES


class SepSparseConv(Module):
    """relu -> depthwise -> pointwise -> bn, applied twice (stride in the first pass)."""

    def __init__(self, rng, channels: int, kernel: int, stride: int, double: bool = True):
        super().__init__()
        pad = (kernel - 1) // 2
        blocks = ModuleList()
        passes = 2 if double else 1
        for i in range(passes):
            s = stride if i == 0 else 1
            blocks.append(SparseConv2d(rng, channels, channels, kernel, stride=s,
                                       padding=pad, groups=channels))
            blocks.append(SparseConv2d(rng, channels, channels, 1))
            blocks.append(BatchNorm2d(channels))
        self.blocks = blocks

    def forward(self, x: Tensor, mode: str = DENSE) -> Tensor:
        out = x
        for i in range(0, len(self.blocks), 3):
            out = ad.relu(out)
            out = self.blocks[i](out, mode)
            out = self.blocks[i + 1](out, mode)
            out = self.blocks[i + 2](out)
        return out


class DilSparseConv(Module):
    """relu -> dilated depthwise -> pointwise -> bn (dilation 2)."""

    def __init__(self, rng, channels: int, kernel: int, stride: int):
        super().__init__()
        pad = kernel - 1  # dilation-2 'same' padding
        self.depthwise = SparseConv2d(rng, channels, channels, kernel, stride=stride,
                                      padding=pad, dilation=2, groups=channels)
        self.pointwise = SparseConv2d(rng, channels, channels, 1)
        self.bn = BatchNorm2d(channels)

    def forward(self, x: Tensor, mode: str = DENSE) -> Tensor:
        return self.bn(self.pointwise(self.depthwise(ad.relu(x), mode), mode))


class Pool(Module):
    def __init__(self, kind: str, stride: int):
        super().__init__()
        self.kind = kind
        self.stride = stride

    def forward(self, x: Tensor, mode: str = DENSE) -> Tensor:
        if self.kind == "max":
            return ad.max_pool2d(x, kernel=3, stride=self.stride, padding=1)
        return ad.avg_pool2d(x, kernel=3, stride=self.stride, padding=1)


class SkipConnect(Module):
    """Identity on normal edges; dense factorized reduce on strided edges."""

    def __init__(self, rng, channels: int, stride: int):
        super().__init__()
        self.op = Identity() if stride == 1 else FactorizedReduce(rng, channels, channels)

    def forward(self, x: Tensor, mode: str = DENSE) -> Tensor:
        return self.op(x)


class ZeroOp(Module):
    def __init__(self, stride: int):
        super().__init__()
        self.stride = stride

    def forward(self, x: Tensor, mode: str = DENSE) -> Tensor:
        n, c, h, w = x.shape
        s = self.stride
        oh = (h - 1) // s + 1
        ow = (w - 1) // s + 1
        return Tensor(np.zeros((n, c, oh, ow), dtype=x.data.dtype))


def build_operation(name: str, rng, channels: int, stride: int,
                    double_sep_conv: bool = True) -> Module:
    if name == "sep_sparse_conv_3x3":
        return SepSparseConv(rng, channels, 3, stride, double=double_sep_conv)
    if name == "sep_sparse_conv_5x5":
        return SepSparseConv(rng, channels, 5, stride, double=double_sep_conv)
    if name == "dil_sparse_conv_3x3":
        return DilSparseConv(rng, channels, 3, stride)
    if name == "dil_sparse_conv_5x5":
        return DilSparseConv(rng, channels, 5, stride)
    if name == "max_pool_3x3":
        return Pool("max", stride)
    if name == "avg_pool_3x3":
        return Pool("avg", stride)
    if name == "skip_connect":
        return SkipConnect(rng, channels, stride)
    if name == ZERO_OP:
        return ZeroOp(stride)
    raise ValueError(f"unknown operation: {name!r}")


class MixedOp(Module):
    """One edge: every candidate op instantiated, outputs blended by softmax(alpha)."""

    def __init__(self, rng, channels: int, stride: int, op_names, double_sep_conv=True):
        super().__init__()
        self.ops = ModuleList(
            [build_operation(n, rng, channels, stride, double_sep_conv) for n in op_names])

    def forward(self, x: Tensor, weights: Tensor, mode: str = DENSE) -> Tensor:
        outs = [op(x, mode) for op in self.ops]
        return ad.weighted_sum(outs, weights)


def n_edges(steps: int) -> int:
    return sum(2 + i for i in range(steps))


class Cell(Module):
    """DAG cell: 2 inputs, ``steps`` intermediate nodes, channelwise-concat output."""

    def __init__(self, rng, steps: int, c_pp: int, c_p: int, channels: int,
                 reduction: bool, reduction_prev: bool, op_names,
                 double_sep_conv: bool = True):
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
        for i in range(steps):
            for j in range(2 + i):
                stride = 2 if reduction and j < 2 else 1
                ops.append(MixedOp(rng, channels, stride, op_names, double_sep_conv))
        self.mixed = ops

    def forward(self, s0: Tensor, s1: Tensor, edge_weights: Tensor,
                mode: str = DENSE) -> Tensor:
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        offset = 0
        for i in range(self.steps):
            parts = [self.mixed[offset + j](h, ad.take_row(edge_weights, offset + j), mode)
                     for j, h in enumerate(states)]
            acc = parts[0]
            for p in parts[1:]:
                acc = ad.add(acc, p)
            states.append(acc)
            offset += len(states) - 1
        return ad.concat(states[2:], axis=1)


def reduction_positions(n_cells: int) -> tuple[int, ...]:
    """Reduction cells at n/3 and 2n/3 depth, clamped so a normal cell comes first."""
    r1 = max(n_cells // 3, 1)
    r2 = (2 * n_cells) // 3
    if r2 <= r1:
        r2 = r1 + 1
    out = [r for r in (r1, r2) if r < n_cells]
    return tuple(dict.fromkeys(out))


class Supernet(Module):
    """Stacked cells with shared alpha tables per cell type, stem and sparse classifier."""

    def __init__(self, rng, n_cells: int, steps: int, init_channels: int,
                 n_classes: int, in_channels: int = 3, op_names=OP_NAMES,
                 double_sep_conv: bool = True, alpha_noise: float = 1e-3):
        super().__init__()
        if n_cells < 2:
            raise ValueError(f"n_cells must be >= 2, got {n_cells}")
        if steps < 1:
            raise ValueError(f"need at least one intermediate node, got steps={steps}")
        self.op_names = tuple(op_names)
        self.steps = steps
        self.n_cells = n_cells

        c = init_channels
        self.stem_conv = Conv2d(rng, in_channels, c, 3, padding=1)
        self.stem_bn = BatchNorm2d(c)

        red_pos = reduction_positions(n_cells)
        self.reduction_at = red_pos
        cells = ModuleList()
        c_pp, c_p, c_curr = c, c, init_channels
        reduction_prev = False
        for i in range(n_cells):
            reduction = i in red_pos
            if reduction:
                c_curr *= 2
            cells.append(Cell(rng, steps, c_pp, c_p, c_curr, reduction, reduction_prev,
                              self.op_names, double_sep_conv))
            reduction_prev = reduction
            c_pp, c_p = c_p, steps * c_curr
        self.cells = cells
        self.final_channels = c_p
        self.classifier = SparseLinear(rng, c_p, n_classes)

        e = n_edges(steps)
        o = len(self.op_names)
        self.alpha_normal = Parameter(
            (alpha_noise * rng.standard_normal((e, o))).astype(np.float32),
            name="alpha_normal")
        if red_pos:
            self.alpha_reduce = Parameter(
                (alpha_noise * rng.standard_normal((e, o))).astype(np.float32),
                name="alpha_reduce")
        else:
            self.alpha_reduce = None

    def alpha_parameters(self) -> list[Parameter]:
        out = [self.alpha_normal]
        if self.alpha_reduce is not None:
            out.append(self.alpha_reduce)
        return out

    def theta_parameters(self):
        return [p for name, p in self.named_parameters()
                if not name.startswith("alpha") and not name.endswith(".scores")]

    def forward(self, x, mode: str = DENSE, collect: bool = False):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        w_normal = ad.softmax(self.alpha_normal, axis=1)
        w_reduce = (ad.softmax(self.alpha_reduce, axis=1)
                    if self.alpha_reduce is not None else None)
        s0 = s1 = self.stem_bn(self.stem_conv(x))
        feats = []
        for cell in self.cells:
            w = w_reduce if cell.reduction else w_normal
            s0, s1 = s1, cell(s0, s1, w, mode)
            if collect:
                feats.append(s1)
        pooled = ad.global_avg_pool(s1)
        logits = self.classifier(pooled, mode)
        if collect:
            return logits, feats
        return logits

    def collect_features(self, x, mode: str = DENSE) -> list[np.ndarray]:
        """Per-cell output activations on a probe batch (evaluation mode, no tape)."""
        was_training = self.training
        self.set_training(False)
        with ad.no_grad():
            _, feats = self.forward(x, mode, collect=True)
        self.set_training(was_training)
        return [f.data for f in feats]
