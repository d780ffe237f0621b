"""Reverse-mode automatic differentiation over dense numpy tensors.

Values are float32 by default (float64 inputs are preserved so numerical
oracles can run the same graph at higher precision).  A computation graph is
recorded while gradients are enabled; ``backward`` on a scalar loss walks it
once in reverse topological order and is then consumed.

Conventions: images are NCHW, convolutions zero-pad, reductions accumulate
in fixed index-ascending order so repeated runs are bitwise identical.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Incompatible operand shapes for a primitive (fatal configuration error)."""


class AutodiffError(RuntimeError):
    """Misuse of the tape (non-scalar loss, double backward, missing grad)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording within the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    """Dense n-dimensional value, optionally participating in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._bw = None
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.grad is not None else 'no'})"

    # small operator algebra, mostly for tests and toy problems
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, bw) -> Tensor:
    """Register an op result on the tape when tracking is on and an input requires grad."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bw = bw
    return out


def _acc(t: Tensor, g: np.ndarray, fresh: bool = True):
    """Accumulate gradient into ``t``; ``fresh`` means ``g`` is owned by the caller."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if fresh else g.copy()
    else:
        t.grad += g


def backward(loss: Tensor):
    """Backpropagate from a scalar loss; each reachable parameter receives its gradient.

    The tape is consumed: a second call on the same loss raises.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward: loss must be a scalar, got shape {loss.data.shape}")
    if loss._consumed:
        raise AutodiffError("backward: tape already consumed for this loss")
    loss._consumed = True
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._bw is not None:
            node._bw(node.grad)
            # interior grads and closures are dropped as soon as they are spent
            node.grad = None
            node._bw = None
            node._parents = ()


# ---------------------------------------------------------------------------
# elementwise and shape primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape), fresh=False)
        _acc(b, _unbroadcast(g, b.data.shape), fresh=False)

    return _make(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape), fresh=False)
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * x.data.dtype.type(c)

    def bw(g):
        _acc(x, g * x.data.dtype.type(c))

    return _make(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bw(g):
        _acc(x, g * (x.data > 0))

    return _make(out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        _acc(x, g * out)

    return _make(out, (x,), bw)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def bw(g):
        _acc(x, g / x.data)

    return _make(out, (x,), bw)


def tsum(x: Tensor) -> Tensor:
    out = x.data.sum(dtype=x.data.dtype).reshape(())

    def bw(g):
        _acc(x, np.broadcast_to(g, x.data.shape), fresh=False)

    return _make(out, (x,), bw)


def tmean(x: Tensor) -> Tensor:
    n = x.data.dtype.type(x.data.size)
    out = (x.data.sum(dtype=x.data.dtype) / n).reshape(())

    def bw(g):
        _acc(x, np.broadcast_to(g / n, x.data.shape).copy())

    return _make(out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        _acc(x, g.reshape(x.data.shape), fresh=False)

    return _make(out, (x,), bw)


def concat(xs: list[Tensor], axis: int = 1) -> Tensor:
    base = list(xs[0].data.shape)
    for t in xs[1:]:
        s = list(t.data.shape)
        if len(s) != len(base) or any(a != b for i, (a, b) in enumerate(zip(s, base)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {base} vs {s} along axis {axis}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    sizes = [t.data.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(t, g[tuple(sl)], fresh=False)

    return _make(out, tuple(xs), bw)


def take_row(x: Tensor, i: int) -> Tensor:
    """Row ``i`` of a 2-D tensor, gradient scattered back into that row."""
    out = x.data[i]

    def bw(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[i] += g

    return _make(out, (x,), bw)


def weighted_sum(xs: list[Tensor], w: Tensor) -> Tensor:
    """sum_i w[i] * xs[i]; ``w`` is a 1-D tensor with one entry per operand."""
    if w.data.ndim != 1 or w.data.shape[0] != len(xs):
        raise ShapeError(f"weighted_sum: weight shape {w.data.shape} vs {len(xs)} operands")
    for t in xs[1:]:
        if t.data.shape != xs[0].data.shape:
            raise ShapeError(
                f"weighted_sum: operand shapes diverge: {xs[0].data.shape} vs {t.data.shape}")
    out = xs[0].data * w.data[0]
    for i in range(1, len(xs)):
        out += xs[i].data * w.data[i]

    def bw(g):
        for i, t in enumerate(xs):
            if t.requires_grad:
                _acc(t, g * w.data[i])
        if w.requires_grad:
            gr = np.ascontiguousarray(g).ravel()
            gw = np.empty_like(w.data)
            for i, t in enumerate(xs):
                gw[i] = np.dot(gr, t.data.ravel())
            _acc(w, gw)

    return _make(out, tuple(xs) + (w,), bw)


# ---------------------------------------------------------------------------
# linear algebra and layer primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            _acc(b, a.data.T @ g)

    return _make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x: [batch, in], w: [out, in], optional bias [out]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear: input {x.data.shape} vs weight {w.data.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out += b.data

    def bw(g):
        if x.requires_grad:
            _acc(x, g @ w.data)
        if w.requires_grad:
            _acc(w, g.T @ x.data)
        if b is not None and b.requires_grad:
            _acc(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def _conv_out_size(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    eff = dilation * (k - 1) + 1
    return (n + 2 * pad - eff) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           dilation: int = 1, groups: int = 1) -> Tensor:
    """NCHW convolution with zero padding.

    ``w`` is [C_out, C_in/groups, KH, KW]; only groups == 1 and full depthwise
    (groups == C_in == C_out) are supported, which covers every operation in
    the search space.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.data.shape} vs kernel {w.data.shape}")
    n, cin, h, wd = x.data.shape
    cout, cin_g, kh, kw = w.data.shape
    if cin_g * groups != cin or cout % groups != 0:
        raise ShapeError(
            f"conv2d: kernel {w.data.shape} incompatible with input {x.data.shape} "
            f"(groups={groups})")
    depthwise = groups > 1
    if depthwise and not (groups == cin == cout and cin_g == 1):
        raise ShapeError(f"conv2d: unsupported group structure groups={groups}, "
                         f"kernel {w.data.shape}")
    oh = _conv_out_size(h, kh, stride, padding, dilation)
    ow = _conv_out_size(wd, kw, stride, padding, dilation)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: empty output for input {x.data.shape}, kernel "
                         f"{w.data.shape}, stride={stride}, padding={padding}, "
                         f"dilation={dilation}")

    if padding:
        xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), dtype=x.data.dtype)
        xp[:, :, padding:padding + h, padding:padding + wd] = x.data
    else:
        xp = x.data

    def tap(arr, ky, kx):
        return arr[:, :, ky * dilation: ky * dilation + stride * oh: stride,
                   kx * dilation: kx * dilation + stride * ow: stride]

    if depthwise:
        out = np.zeros((n, cout, oh, ow), dtype=x.data.dtype)
        for ky in range(kh):
            for kx in range(kw):
                out += tap(xp, ky, kx) * w.data[:, 0, ky, kx][None, :, None, None]
    else:
        # one BLAS contraction per kernel tap, accumulated channels-first
        acc = np.zeros((cout, n, oh, ow), dtype=x.data.dtype)
        for ky in range(kh):
            for kx in range(kw):
                acc += np.tensordot(w.data[:, :, ky, kx], tap(xp, ky, kx),
                                    axes=([1], [1]))
        out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))

    def bw(g):
        need_x = x.requires_grad
        gxp = np.zeros_like(xp) if need_x else None
        if w.requires_grad:
            gw = np.empty_like(w.data)
        if depthwise:
            for ky in range(kh):
                for kx in range(kw):
                    xs = tap(xp, ky, kx)
                    if w.requires_grad:
                        gw[:, 0, ky, kx] = np.einsum("nchw,nchw->c", g, xs)
                    if need_x:
                        tap(gxp, ky, kx)[...] += g * w.data[:, 0, ky, kx][None, :, None, None]
        else:
            for ky in range(kh):
                for kx in range(kw):
                    if w.requires_grad:
                        gw[:, :, ky, kx] = np.tensordot(g, tap(xp, ky, kx),
                                                        axes=([0, 2, 3], [0, 2, 3]))
                    if need_x:
                        gxs = np.tensordot(w.data[:, :, ky, kx], g, axes=([0], [1]))
                        tap(gxp, ky, kx)[...] += gxs.transpose(1, 0, 2, 3)
        if w.requires_grad:
            _acc(w, gw)
        if need_x:
            if padding:
                _acc(x, np.ascontiguousarray(
                    gxp[:, :, padding:padding + h, padding:padding + wd]))
            else:
                _acc(x, gxp)

    return _make(out, (x, w), bw)


_pool_count_cache: dict = {}


def _pool_counts(h: int, w: int, k: int, stride: int, pad: int, dtype) -> np.ndarray:
    """Number of non-padding inputs under each pooling window (for mean pooling)."""
    key = (h, w, k, stride, pad, np.dtype(dtype).str)
    got = _pool_count_cache.get(key)
    if got is None:
        ones = np.pad(np.ones((h, w), dtype=dtype), pad)
        oh = (h + 2 * pad - k) // stride + 1
        ow = (w + 2 * pad - k) // stride + 1
        cnt = np.zeros((oh, ow), dtype=dtype)
        for ky in range(k):
            for kx in range(k):
                cnt += ones[ky: ky + stride * oh: stride, kx: kx + stride * ow: stride]
        got = _pool_count_cache[key] = cnt
    return got


def avg_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Mean pooling; padded positions are excluded from the divisor."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x.data
    out = np.zeros((n, c, oh, ow), dtype=x.data.dtype)
    for ky in range(kernel):
        for kx in range(kernel):
            out += xp[:, :, ky: ky + stride * oh: stride, kx: kx + stride * ow: stride]
    cnt = _pool_counts(h, w, kernel, stride, padding, x.data.dtype)
    out /= cnt

    def bw(g):
        gn = g / cnt
        gxp = np.zeros_like(xp)
        for ky in range(kernel):
            for kx in range(kernel):
                gxp[:, :, ky: ky + stride * oh: stride, kx: kx + stride * ow: stride] += gn
        _acc(x, gxp[:, :, padding:padding + h, padding:padding + w])

    return _make(out, (x,), bw)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: expected NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    xp = np.full((n, c, h + 2 * padding, w + 2 * padding), -np.inf, dtype=x.data.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x.data
    out = np.full((n, c, oh, ow), -np.inf, dtype=x.data.dtype)
    for ky in range(kernel):
        for kx in range(kernel):
            np.maximum(out, xp[:, :, ky: ky + stride * oh: stride,
                               kx: kx + stride * ow: stride], out=out)

    def bw(g):
        # route gradient to the first window position attaining the max
        gxp = np.zeros_like(xp)
        remaining = np.ones(out.shape, dtype=bool)
        for ky in range(kernel):
            for kx in range(kernel):
                xs = xp[:, :, ky: ky + stride * oh: stride, kx: kx + stride * ow: stride]
                hit = (xs == out) & remaining
                gxp[:, :, ky: ky + stride * oh: stride,
                    kx: kx + stride * ow: stride] += g * hit
                remaining &= ~hit
        _acc(x, gxp[:, :, padding:padding + h, padding:padding + w])

    return _make(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    m = x.data.dtype.type(h * w)
    out = x.data.sum(axis=(2, 3), dtype=x.data.dtype) / m

    def bw(g):
        _acc(x, np.broadcast_to((g / m)[:, :, None, None], x.data.shape).copy())

    return _make(out, (x,), bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Channel batch normalization for NCHW inputs.

    Training uses batch statistics and updates the running buffers in place;
    evaluation normalizes with the tracked running statistics.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm: expected NCHW input, got {x.data.shape}")
    dt = x.data.dtype
    axes = (0, 2, 3)
    if training:
        m = dt.type(x.data.shape[0] * x.data.shape[2] * x.data.shape[3])
        mean = x.data.mean(axis=axes, dtype=dt)
        var = np.mean((x.data - mean[None, :, None, None]) ** 2, axis=axes, dtype=dt)
        running_mean *= dt.type(1.0 - momentum)
        running_mean += dt.type(momentum) * mean.astype(running_mean.dtype)
        running_var *= dt.type(1.0 - momentum)
        running_var += dt.type(momentum) * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(dt)
        var = running_var.astype(dt)
    invstd = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        if gamma.requires_grad:
            _acc(gamma, np.sum(g * xhat, axis=axes, dtype=dt))
        if beta.requires_grad:
            _acc(beta, np.sum(g, axis=axes, dtype=dt))
        if x.requires_grad:
            gi = gamma.data[None, :, None, None] * invstd[None, :, None, None]
            if training:
                gsum = np.sum(g, axis=axes, dtype=dt)[None, :, None, None]
                gx_sum = np.sum(g * xhat, axis=axes, dtype=dt)[None, :, None, None]
                _acc(x, gi * (g - gsum / m - xhat * gx_sum / m))
            else:
                _acc(x, gi * g)

    return _make(out, (x, gamma, beta), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True, dtype=x.data.dtype)

    def bw(g):
        dot = np.sum(g * out, axis=axis, keepdims=True, dtype=g.dtype)
        _acc(x, out * (g - dot))

    return _make(out, (x,), bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of [N, K] logits against integer class labels [N]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: expected [batch, classes] logits, got "
                         f"{logits.data.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits "
                         f"{logits.data.shape}")
    dt = logits.data.dtype
    n = logits.data.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1, dtype=dt))
    ll = z[np.arange(n), labels] - lse
    out = np.asarray(-ll.sum(dtype=dt) / dt.type(n)).reshape(())

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        _acc(logits, p * (g / dt.type(n)))

    return _make(out, (logits,), bw)


# ---------------------------------------------------------------------------
# primitive registry (kind-dispatched entry point)
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "add": add,
    "mul": mul,
    "relu": relu,
    "linear": linear,
    "matmul": matmul,
    "conv2d": conv2d,
    "avg_pool2d": avg_pool2d,
    "max_pool2d": max_pool2d,
    "global_avg_pool": global_avg_pool,
    "batch_norm": batch_norm,
    "softmax": softmax,
    "cross_entropy": cross_entropy,
    "concat": concat,
    "weighted_sum": weighted_sum,
}


def forward_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a layer primitive by name; unknown kinds raise ShapeError's sibling."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind: {kind!r}") from None
    return fn(*inputs, **kwargs)
