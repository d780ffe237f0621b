"""Module containers and the dense layers shared by the search space.

Parameters are registered in construction order, giving every run a stable,
deterministic parameter naming scheme (used by checkpoints and censuses).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class Module:
    """Base container tracking parameters, sparse parameters, sub-modules and buffers."""

    def __init__(self):
        d = object.__getattribute__(self, "__dict__")
        d["_params"] = {}
        d["_sparse"] = {}
        d["_modules"] = {}
        d["_buffers"] = {}
        d["training"] = True

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif getattr(value, "is_sparse_param", False):
            self._sparse[name] = value
        elif isinstance(value, (Module, ModuleList)):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        """All trainable tensors: plain parameters plus theta/scores of sparse ones."""
        for name, p in self._params.items():
            yield f"{prefix}{name}", p
        for name, sp in self._sparse.items():
            yield f"{prefix}{name}.theta", sp.theta
            yield f"{prefix}{name}.scores", sp.scores
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def named_sparse_params(self, prefix: str = ""):
        for name, sp in self._sparse.items():
            yield f"{prefix}{name}", sp
        for name, m in self._modules.items():
            yield from m.named_sparse_params(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield f"{prefix}{name}", b
        for name, sp in self._sparse.items():
            yield f"{prefix}{name}.mask", sp.mask
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def set_training(self, mode: bool):
        self.__dict__["training"] = mode
        for m in self._modules.values():
            m.set_training(mode)

    def theta_parameters(self):
        """Weight-side parameters (everything except pruning scores)."""
        return [p for name, p in self.named_parameters() if not name.endswith(".scores")]

    def score_parameters(self):
        return [p for name, p in self.named_parameters() if name.endswith(".scores")]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList:
    """Ordered module container that participates in recursive traversal."""

    def __init__(self, mods=()):
        self._list = list(mods)

    def append(self, mod):
        self._list.append(mod)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]

    def named_parameters(self, prefix: str = ""):
        for i, m in enumerate(self._list):
            yield from m.named_parameters(f"{prefix}{i}.")

    def named_sparse_params(self, prefix: str = ""):
        for i, m in enumerate(self._list):
            yield from m.named_sparse_params(f"{prefix}{i}.")

    def named_buffers(self, prefix: str = ""):
        for i, m in enumerate(self._list):
            yield from m.named_buffers(f"{prefix}{i}.")

    def set_training(self, mode: bool):
        for m in self._list:
            m.set_training(mode)


def conv_init(rng: np.random.Generator, cout: int, cin_g: int, kh: int, kw: int) -> np.ndarray:
    fan_in = cin_g * kh * kw
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal((cout, cin_g, kh, kw)) * std).astype(np.float32)


def linear_init(rng: np.random.Generator, nout: int, nin: int) -> np.ndarray:
    std = np.sqrt(1.0 / nin)
    return (rng.standard_normal((nout, nin)) * std).astype(np.float32)


class Conv2d(Module):
    """Dense convolution without bias (stems, preprocessing, factorized reduce)."""

    def __init__(self, rng, cin: int, cout: int, kernel: int, stride: int = 1,
                 padding: int = 0, dilation: int = 1, groups: int = 1):
        super().__init__()
        self.weight = Parameter(conv_init(rng, cout, cin // groups, kernel, kernel))
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, stride=self.stride, padding=self.padding,
                         dilation=self.dilation, groups=self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, training=self.training,
                             momentum=self.momentum, eps=self.eps)


class ReLUConvBN(Module):
    """relu -> dense conv -> batch norm (cell input preprocessing)."""

    def __init__(self, rng, cin: int, cout: int, kernel: int = 1, stride: int = 1,
                 padding: int = 0):
        super().__init__()
        self.conv = Conv2d(rng, cin, cout, kernel, stride=stride, padding=padding)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(ad.relu(x)))


class FactorizedReduce(Module):
    """Spatial halving via two offset 1x1 stride-2 convs concatenated channelwise."""

    def __init__(self, rng, cin: int, cout: int):
        super().__init__()
        if cout % 2 != 0:
            raise ad.ShapeError(f"FactorizedReduce: output channels must be even, got {cout}")
        self.conv1 = Conv2d(rng, cin, cout // 2, 1, stride=2)
        self.conv2 = Conv2d(rng, cin, cout // 2, 1, stride=2)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        x = ad.relu(x)
        # second branch sees the input shifted one pixel in both dimensions
        part1 = self.conv1(x)
        part2 = self.conv2(_shift11(x))
        return self.bn(ad.concat([part1, part2], axis=1))


def _shift11(x: Tensor) -> Tensor:
    """Drop the first row/column so the stride-2 grid starts at offset (1, 1)."""
    n, c, h, w = x.shape
    data = x.data[:, :, 1:, 1:]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, :, 1:, 1:] = g
        ad._acc(x, gx)

    return ad._make(data, (x,), bw)


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x
