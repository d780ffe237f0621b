"""Parametric sparse operations: weights paired with trainable pruning scores.

Every prunable weight tensor is a SparseParam carrying three same-shape
arrays: the weights (theta), floating importance scores, and a binary mask
produced by top-k selection over |scores|.  Three forward modes exist:

* ``dense``        - effective weight is theta (scores ignored)
* ``score-scaled`` - theta * scores, the continuous relaxation used while
                     learning scores (top-k is not differentiable)
* ``masked``       - theta * mask; masked positions contribute exactly zero
                     and receive zero gradient
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .nn import Module, conv_init, linear_init

DENSE = "dense"
SCORE_SCALED = "score-scaled"
MASKED = "masked"
FORWARD_MODES = (DENSE, SCORE_SCALED, MASKED)


def init_scores(theta_pre: np.ndarray) -> np.ndarray:
    """Scores proportional to pre-trained weights, normalized by the layer's max |w|."""
    theta_pre = np.asarray(theta_pre)
    if theta_pre.size == 0:
        raise ValueError("init_scores: empty weight tensor")
    peak = np.max(np.abs(theta_pre))
    if peak == 0:
        raise ValueError("init_scores: all-zero weights, normalization undefined")
    return (theta_pre / peak).astype(theta_pre.dtype)


def binarize_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Binary mask keeping the k largest |scores|, ties broken by lowest flat index."""
    scores = np.asarray(scores)
    n = scores.size
    if not 0 <= k <= n:
        raise ValueError(f"binarize_topk: k={k} outside [0, {n}]")
    mask = np.zeros(n, dtype=scores.dtype)
    if k > 0:
        order = np.argsort(-np.abs(scores.ravel()), kind="stable")
        mask[order[:k]] = 1
    return mask.reshape(scores.shape)


def layer_k_from_ratio(numel: int, pruning_ratio: float) -> int:
    """Retained-weight count for one layer under a global pruning ratio."""
    if not 0.0 <= pruning_ratio <= 1.0:
        raise ValueError(f"pruning ratio {pruning_ratio} outside [0, 1]")
    k = int(np.floor(numel * (1.0 - pruning_ratio) + 0.5))
    return min(max(k, 0), numel)


class SparseParam:
    """A weight tensor bundled with same-shape pruning scores and a binary mask."""

    is_sparse_param = True

    def __init__(self, theta: np.ndarray, name: str | None = None):
        theta = np.asarray(theta, dtype=np.float32)
        self.theta = Parameter(theta, name=name)
        self.scores = Parameter(np.zeros_like(theta), name=f"{name}.scores" if name else None)
        self.mask = np.ones_like(theta)
        self.k = theta.size
        self._mask_t: Tensor | None = None

    @property
    def shape(self):
        return self.theta.data.shape

    @property
    def numel(self) -> int:
        return self.theta.data.size

    def popcount(self) -> int:
        return int(np.count_nonzero(self.mask))

    def set_ratio(self, pruning_ratio: float):
        self.k = layer_k_from_ratio(self.numel, pruning_ratio)

    def reset_scores(self, theta_pre: np.ndarray | None = None):
        """Initialize scores from the (pre-trained) weights."""
        src = self.theta.data if theta_pre is None else theta_pre
        self.scores.data = init_scores(src)

    def rebinarize(self):
        """Recompute the mask from the current scores and this layer's k."""
        self.mask = binarize_topk(self.scores.data, self.k)
        self._mask_t = None

    def set_mask(self, mask: np.ndarray):
        mask = np.asarray(mask, dtype=np.float32)
        if mask.shape != self.theta.data.shape:
            raise ad.ShapeError(f"mask shape {mask.shape} vs theta {self.theta.data.shape}")
        self.mask = mask
        self._mask_t = None

    def effective_weight(self, mode: str) -> Tensor:
        if mode == DENSE:
            return self.theta
        if mode == SCORE_SCALED:
            return ad.mul(self.theta, self.scores)
        if mode == MASKED:
            if self._mask_t is None or self._mask_t.data is not self.mask:
                self._mask_t = Tensor(self.mask)
            return ad.mul(self.theta, self._mask_t)
        raise ValueError(f"unknown forward mode: {mode!r}")


class SparseConv2d(Module):
    """Convolution whose kernel is a SparseParam, evaluated per forward mode."""

    def __init__(self, rng, cin: int, cout: int, kernel: int, stride: int = 1,
                 padding: int = 0, dilation: int = 1, groups: int = 1):
        super().__init__()
        self.weight = SparseParam(conv_init(rng, cout, cin // groups, kernel, kernel))
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups

    def forward(self, x: Tensor, mode: str = DENSE) -> Tensor:
        w = self.weight.effective_weight(mode)
        return ad.conv2d(x, w, stride=self.stride, padding=self.padding,
                         dilation=self.dilation, groups=self.groups)


class SparseLinear(Module):
    """Fully connected layer with a prunable weight matrix; the bias is never masked."""

    def __init__(self, rng, nin: int, nout: int, bias: bool = True):
        super().__init__()
        self.weight = SparseParam(linear_init(rng, nout, nin))
        self.bias = Parameter(np.zeros(nout, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor, mode: str = DENSE) -> Tensor:
        w = self.weight.effective_weight(mode)
        return ad.linear(x, w, self.bias)


def sparse_forward(x: Tensor, param: SparseParam, op_kind: str, mode: str = DENSE,
                   stride: int = 1, padding: int = 0, dilation: int = 1,
                   groups: int = 1) -> Tensor:
    """Apply one sparse operation functionally (used by the operation-level oracles)."""
    w = param.effective_weight(mode)
    if op_kind == "linear":
        return ad.linear(x, w, None)
    if op_kind == "conv":
        return ad.conv2d(x, w, stride=stride, padding=padding, dilation=dilation,
                         groups=groups)
    raise ValueError(f"unknown sparse op kind: {op_kind!r}")
