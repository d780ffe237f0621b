"""Differentiable architecture search for sparse networks."""

import os as _os

# single-threaded BLAS: faster on the small GEMMs used here and keeps
# reduction order fixed for bitwise-reproducible runs
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")
try:
    import threadpoolctl as _threadpoolctl

    _threadpoolctl.threadpool_limits(1, "blas")
except Exception:  # pragma: no cover - best effort when numpy is already loaded
    pass

from .autodiff import Parameter, Tensor, backward, no_grad
from .genotype import Genotype, derive, deserialize, instantiate, serialize
from .sparse import (DENSE, MASKED, SCORE_SCALED, SparseConv2d, SparseLinear,
                     SparseParam, binarize_topk, init_scores, layer_k_from_ratio)
from .space import OP_NAMES, Supernet

__all__ = [
    "Parameter", "Tensor", "backward", "no_grad",
    "Genotype", "derive", "deserialize", "instantiate", "serialize",
    "DENSE", "MASKED", "SCORE_SCALED",
    "SparseConv2d", "SparseLinear", "SparseParam",
    "binarize_topk", "init_scores", "layer_k_from_ratio",
    "OP_NAMES", "Supernet",
]

__version__ = "0.1.0"
