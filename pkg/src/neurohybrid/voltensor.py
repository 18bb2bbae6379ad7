"""Dense tensors with tape-based reverse-mode differentiation and 3D layers.

Every differentiable operation computes its forward value with numpy and, when
any input requires a gradient, appends a node with its backward rule to the
active :class:`Tape`.  ``Tape.backward`` replays the nodes in reverse.

    >>> with Tape() as tape:
    ...     y = sigmoid(dense(x, w, b))
    ...     loss = y.sum()
    >>> tape.backward(loss)
    >>> w.grad.shape
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "RunningStats",
    "ShapeError",
    "get_dtype",
    "set_precision",
    "precision",
    "conv3d",
    "batchnorm3d",
    "maxpool3d",
    "global_avg_pool",
    "dense",
    "relu",
    "sigmoid",
    "dropout",
    "concat",
    "backward",
]

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype: type = np.float64
_tape_stack: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def get_dtype() -> type:
    return _default_dtype


def set_precision(name: str) -> None:
    """Set the dtype used for newly created tensors (``float32``/``float64``)."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    global _default_dtype
    previous = _default_dtype
    set_precision(name)
    try:
        yield
    finally:
        _default_dtype = previous


class Tensor:
    """N-dimensional array that can take part in gradient recording.

    Parameters
    ----------
    data : array_like
        Values. Floating arrays keep their dtype; anything else is cast to
        the current default precision.
    requires_grad : bool
        Whether backward passes should populate ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __getitem__(self, index) -> "Tensor":
        return _slice(self, index)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed operations.

    Used as a context manager; operations executed inside the ``with`` block
    are recorded in execution order, which is a valid topological order.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def record(self, output: Tensor, inputs: Sequence[Tensor], rule) -> None:
        self.nodes.append(_Node(output, tuple(inputs), rule))

    def tensors(self) -> list[Tensor]:
        """All gradient-requiring tensors referenced by the tape, in first-seen order."""
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in (*node.inputs, node.output):
                if t.requires_grad and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor.

    Tensors that require gradients but are not upstream of ``loss`` receive
    zero gradients.  Gradients accumulate across calls; clear them with
    ``Tape.zero_grad`` or ``Tensor.zero_grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    targets = tape.tensors()
    if loss.requires_grad and all(t is not loss for t in targets):
        targets.append(loss)
    for t in targets:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g.astype(t.data.dtype, copy=False) if t.grad is None else t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], rule) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs and _tape_stack:
        _tape_stack[-1].record(out, inputs, rule)
    return out


def _triple(v, name: str, minimum: int) -> tuple[int, int, int]:
    if np.isscalar(v):
        v = (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3 or any(i < minimum for i in v):
        raise ValueError(f"{name} must be three integers >= {minimum}, got {v}")
    return v


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar."""
    a = _as_tensor(a)
    if np.isscalar(b):
        c = b
        return _result(a.data * c, (a,), lambda g: (g * c,))
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def tsum(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def tmean(x: Tensor) -> Tensor:
    n = x.size
    return _result(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),)
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN so a diverged activation is not silently zeroed
    return _result(np.maximum(x.data, 0).astype(x.data.dtype, copy=False), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- structural


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat: extents {p.shape} incompatible with {ref} on axis {axis}")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def rule(g):
        out = []
        for i in range(len(parts)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)].copy())
        return out

    return _result(np.concatenate([p.data for p in parts], axis=ax), parts, rule)


def _slice(x: Tensor, index) -> Tensor:
    def rule(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result(np.array(x.data[index]), (x,), rule)


# ---------------------------------------------------------------- layers


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weights + bias`` for ``x`` of shape [N, K]."""
    if x.ndim != 2 or weights.ndim != 2 or bias.ndim != 1:
        raise ShapeError(f"dense expects [N,K]x[K,M]+[M], got {x.shape}, {weights.shape}, {bias.shape}")
    if x.shape[1] != weights.shape[0] or weights.shape[1] != bias.shape[0]:
        raise ShapeError(f"dense: inner dimensions disagree: {x.shape}, {weights.shape}, {bias.shape}")

    def rule(g):
        return g @ weights.data.T, x.data.T @ g, g.sum(axis=0)

    return _result(x.data @ weights.data + bias.data, (x, weights, bias), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the three spatial axes: [N,C,D,H,W] -> [N,C]."""
    if x.ndim != 5 or min(x.shape[2:]) < 1:
        raise ShapeError(f"global_avg_pool expects [N,C,D,H,W] with non-empty volume, got {x.shape}")
    n_vox = x.shape[2] * x.shape[3] * x.shape[4]

    def rule(g):
        return (np.broadcast_to((g / n_vox)[:, :, None, None, None], x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3, 4)), (x,), rule)


def _conv_out(size: int, k: int, s: int, p: int, axis: str) -> int:
    span = size + 2 * p - k
    if span < 0 or span % s:
        raise ShapeError(
            f"conv3d: axis {axis} extent {size} with kernel {k}, stride {s}, padding {p} "
            "does not give a positive integer output extent"
        )
    return span // s + 1


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor, stride=1, padding=0) -> Tensor:
    """3D cross-correlation with zero padding.

    Shapes: x [N,C,D,H,W], kernel [F,C,kd,kh,kw], bias [F].  Implemented as
    an unfolded (im2col) matrix product.
    """
    if x.ndim != 5 or kernel.ndim != 5 or bias.ndim != 1:
        raise ShapeError(f"conv3d expects 5D input/kernel and 1D bias, got {x.shape}, {kernel.shape}, {bias.shape}")
    n, c = x.shape[:2]
    f, kc, kd, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv3d: kernel has {kc} channels, input has {c}")
    if bias.shape[0] != f:
        raise ShapeError(f"conv3d: bias length {bias.shape[0]} != filter count {f}")
    s = _triple(stride, "stride", 1)
    p = _triple(padding, "padding", 0)
    od = _conv_out(x.shape[2], kd, s[0], p[0], "D")
    oh = _conv_out(x.shape[3], kh, s[1], p[1], "H")
    ow = _conv_out(x.shape[4], kw, s[2], p[2], "W")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))
    ksize = kd * kh * kw
    offsets = [(i, j, k) for i in range(kd) for j in range(kh) for k in range(kw)]

    def window(i, j, k):
        return (
            slice(None),
            slice(None),
            slice(i, i + s[0] * od, s[0]),
            slice(j, j + s[1] * oh, s[1]),
            slice(k, k + s[2] * ow, s[2]),
        )

    # columns laid out [C, K, N, P] so both products below are plain 2D matmuls
    xt = xp.transpose(1, 0, 2, 3, 4)
    cols = np.empty((c, ksize, n, od, oh, ow), dtype=xp.dtype)
    for t, (i, j, k) in enumerate(offsets):
        cols[:, t] = xt[window(i, j, k)]
    cols = cols.reshape(c * ksize, n * od * oh * ow)
    wmat = kernel.data.reshape(f, c * ksize)
    out = (wmat @ cols).reshape(f, n, od, oh, ow).transpose(1, 0, 2, 3, 4)
    out = out + bias.data[None, :, None, None, None]

    def rule(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(f, -1)
        gw = (g2 @ cols.T).reshape(kernel.shape)
        gb = g2.sum(axis=1)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c, ksize, n, od, oh, ow)
            gxt = np.zeros((c, n, *xp.shape[2:]), dtype=xp.dtype)
            for t, (i, j, k) in enumerate(offsets):
                gxt[window(i, j, k)] += gcols[:, t]
            gx = gxt[
                :,
                :,
                p[0] : p[0] + x.shape[2],
                p[1] : p[1] + x.shape[3],
                p[2] : p[2] + x.shape[4],
            ].transpose(1, 0, 2, 3, 4).copy()
        return gx, gw, gb

    return _result(out, (x, kernel, bias), rule)


def maxpool3d(x: Tensor, window=2, stride=None) -> Tensor:
    """Per-window maximum; ties resolve to the first voxel in row-major order."""
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d expects [N,C,D,H,W], got {x.shape}")
    win = _triple(window, "window", 1)
    st = _triple(win if stride is None else stride, "stride", 1)
    for ax, (size, k) in enumerate(zip(x.shape[2:], win)):
        if k > size:
            raise ShapeError(f"maxpool3d: window {k} larger than extent {size} on axis {ax + 2}")
    outs = [(size - k) // s + 1 for size, k, s in zip(x.shape[2:], win, st)]
    n, c = x.shape[:2]
    view = np.lib.stride_tricks.sliding_window_view(x.data, win, axis=(2, 3, 4))
    view = view[:, :, :: st[0], :: st[1], :: st[2]][:, :, : outs[0], : outs[1], : outs[2]]
    flat = view.reshape(n, c, *outs, -1)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        kd_i, kh_i, kw_i = np.unravel_index(arg, win)
        od_i, oh_i, ow_i = np.meshgrid(*(np.arange(o) for o in outs), indexing="ij")
        d = od_i * st[0] + kd_i
        h = oh_i * st[1] + kh_i
        w = ow_i * st[2] + kw_i
        D, H, W = x.shape[2:]
        base = (np.arange(n * c) * (D * H * W)).reshape(n, c, 1, 1, 1)
        flat_idx = base + (d * H + h) * W + w
        gx = np.bincount(flat_idx.ravel(), weights=g.ravel(), minlength=x.size)
        return (gx.reshape(x.shape).astype(x.data.dtype),)

    return _result(np.ascontiguousarray(out), (x,), rule)


@dataclass
class RunningStats:
    """Per-channel running mean/variance kept by a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=None) -> "RunningStats":
        dtype = dtype or _default_dtype
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Batch normalization over (N, D, H, W) per channel.

    In training mode the batch statistics normalize the input and the running
    statistics are updated in place (unbiased variance, exponential moving
    average with ``momentum``).  In inference mode the running statistics are
    used and nothing is mutated.
    """
    if x.ndim != 5:
        raise ShapeError(f"batchnorm3d expects [N,C,D,H,W], got {x.shape}")
    if x.shape[0] == 0:
        raise ShapeError("batchnorm3d: empty batch")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm3d: gamma/beta must have shape ({c},)")
    bshape = (1, c, 1, 1, 1)
    g_ = gamma.data.reshape(bshape)
    if training:
        axes = (0, 2, 3, 4)
        m = x.shape[0] * x.shape[2] * x.shape[3] * x.shape[4]
        mu = x.data.mean(axis=axes)
        centered = x.data - mu.reshape(bshape)
        var = (centered**2).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv.reshape(bshape)
        unbiased = var * m / (m - 1) if m > 1 else var
        stats.mean[...] = (1 - momentum) * stats.mean + momentum * mu
        stats.var[...] = (1 - momentum) * stats.var + momentum * unbiased

        def rule(g):
            dxhat = g * g_
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = inv.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x.data - stats.mean.reshape(bshape)) * inv.reshape(bshape)

        def rule(g):
            axes = (0, 2, 3, 4)
            return g * g_ * inv.reshape(bshape), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = (xhat * g_ + beta.data.reshape(bshape)).astype(x.data.dtype, copy=False)
    return _result(out, (x, gamma, beta), rule)
