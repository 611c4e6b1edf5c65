# hiernas/microtensor.py
"""
Minimal dense-tensor computation graph with reverse-mode differentiation.

Every primitive returns a new `Tensor` that remembers its parents and a
backward rule mapping the output gradient to one gradient per parent.
Values are float64 throughout.
"""

import json
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from hiernas.common import InvalidArgumentError, ShapeError, ValidationError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """
    Context manager: primitives stop recording parents (evaluation passes).
    """
    old = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Tensor:
    """
    Graph node: value, optional gradient, op tag, parents and backward rule.
    `branch` holds the discrete choices a nondifferentiable op made
    (relu masks, max-pool argmax) so gradient checks can spot kinks.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "backward_fn", "branch")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.branch: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __getitem__(self, index):
        return select(self, index)

    def sum(self) -> "Tensor":
        return total(self)

    def mean(self) -> "Tensor":
        return mean(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), backward_fn=backward_fn)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- traversal


def topological_order(root: Tensor) -> List[Tensor]:
    """
    Parents before children; iterative so deep graphs stay off the recursion limit.
    """
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, store: Optional["ParamStore"] = None) -> None:
    """
    Accumulate d(loss)/d(leaf) into every reachable leaf requiring grad.
    With a store, all its gradients are reset to zero first.
    """
    if loss.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if store is not None:
        store.zero_grad(fill=True)
    if not loss.requires_grad:
        return

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), backward_fn)


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """
    Left-to-right sum of same-shape tensors in one node.
    """
    if not terms:
        raise InvalidArgumentError("add_n needs at least one term")
    if len(terms) == 1:
        return terms[0]
    shape = terms[0].shape
    for t in terms[1:]:
        if t.shape != shape:
            raise ShapeError("add_n", shape, t.shape)
    out = terms[0].data.copy()
    for t in terms[1:]:
        out = out + t.data

    def backward_fn(g):
        return [g] * len(terms)

    return _make(out, "add_n", terms, backward_fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, "mul", (a, b), backward_fn)


def total(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _make(
        np.asarray(a.data.mean()), "mean", (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),)
    )


def select(a: Tensor, index) -> Tensor:
    out = np.asarray(a.data[index])

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, "select", (a,), backward_fn)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape)
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    node = _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))
    node.branch = mask
    return node


def identity(a: Tensor) -> Tensor:
    return _make(a.data, "identity", (a,), lambda g: (g,))


def zero_op(a: Tensor) -> Tensor:
    return _make(np.zeros_like(a.data), "zero", (a,), lambda g: (np.zeros_like(a.data),))


def softmax(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax along `axis`; masked-out entries get exactly zero probability.
    Rows with every entry masked come out all-zero.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    peak = np.max(x, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(x - peak)
    z = e.sum(axis=axis, keepdims=True)
    probs = e / np.where(z == 0, 1.0, z)

    def backward_fn(g):
        return (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),)

    return _make(probs, "softmax", (a,), backward_fn)


def softmax_over_channel(a: Tensor) -> Tensor:
    return softmax(a, axis=1)


# ---------------------------------------------------------------- convolution


def _tap_windows(n: int, k: int, dilation: int, stride: int, pad: int, n_out: int) -> List[Tuple[int, int]]:
    """
    (tap index, padded offset) of the taps that touch at least one real pixel.
    """
    taps = []
    for i in range(k):
        start = i * dilation
        stop = start + stride * (n_out - 1)
        if stop < pad or start >= pad + n:
            continue
        taps.append((i, start))
    return taps


def _window(xp: np.ndarray, r0: int, c0: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    return xp[:, :, r0 : r0 + stride * (h_out - 1) + 1 : stride, c0 : c0 + stride * (w_out - 1) + 1 : stride]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """
    Same-padded 2-D convolution, NCHW. Stride 2 yields ceil(n / 2) outputs.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", x.shape, weight.shape)
    n, c_in, h, w = x.shape
    c_out, c_group, kh, kw = weight.shape
    if (
        kh != kw
        or kh % 2 == 0
        or groups < 1
        or c_in != c_group * groups
        or c_out % groups != 0
        or stride not in (1, 2)
        or dilation < 1
    ):
        raise ShapeError("conv2d", x.shape, weight.shape)
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError("conv2d", weight.shape, bias.shape)

    k = kh
    pad = dilation * (k - 1) // 2
    h_out = (h - 1) // stride + 1
    w_out = (w - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    rows = _tap_windows(h, k, dilation, stride, pad, h_out)
    cols = _tap_windows(w, k, dilation, stride, pad, w_out)
    taps = [(i, j, r0, c0) for i, r0 in rows for j, c0 in cols]
    ti = np.array([t[0] for t in taps])
    tj = np.array([t[1] for t in taps])

    patches = np.stack([_window(xp, r0, c0, stride, h_out, w_out) for _, _, r0, c0 in taps], axis=2)
    wt = weight.data[:, :, ti, tj]  # (c_out, c_group, T)
    og = c_out // groups
    depthwise = groups == c_in and c_group == 1 and c_out == c_in

    if groups == 1:
        out = np.tensordot(patches, wt, axes=([1, 2], [1, 2])).transpose(0, 3, 1, 2)
    elif depthwise:
        out = np.einsum("ncthw,ct->nchw", patches, wt[:, 0, :])
    else:
        pg = patches.reshape(n, groups, c_group, len(taps), h_out, w_out)
        out = np.einsum("ngcthw,goct->ngohw", pg, wt.reshape(groups, og, c_group, len(taps)))
        out = out.reshape(n, c_out, h_out, w_out)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        if groups == 1:
            g_wt = np.tensordot(g, patches, axes=([0, 2, 3], [0, 3, 4]))
            g_patches = np.tensordot(g, wt, axes=([1], [0])).transpose(0, 3, 4, 1, 2)
        elif depthwise:
            g_wt = np.einsum("nchw,ncthw->ct", g, patches)[:, None, :]
            g_patches = g[:, :, None, :, :] * wt[:, 0, :][None, :, :, None, None]
        else:
            gg = g.reshape(n, groups, og, h_out, w_out)
            pg = patches.reshape(n, groups, c_group, len(taps), h_out, w_out)
            wg = wt.reshape(groups, og, c_group, len(taps))
            g_wt = np.einsum("ngohw,ngcthw->goct", gg, pg).reshape(c_out, c_group, len(taps))
            g_patches = np.einsum("ngohw,goct->ngcthw", gg, wg).reshape(n, c_in, len(taps), h_out, w_out)
        g_weight = np.zeros_like(weight.data)
        g_weight[:, :, ti, tj] = g_wt
        g_xp = np.zeros_like(xp)
        for t, (_, _, r0, c0) in enumerate(taps):
            _window(g_xp, r0, c0, stride, h_out, w_out)[...] += g_patches[:, :, t]
        g_x = g_xp[:, :, pad : pad + h, pad : pad + w] if pad else g_xp
        grads = [g_x, g_weight]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "conv2d", parents, backward_fn)


def separable_conv(
    x: Tensor, depthwise: Tensor, pointwise: Tensor, dilation: int = 1, stride: int = 1
) -> Tensor:
    """
    Per-channel k x k conv (kernel size from `depthwise`) followed by a 1x1 mix.
    """
    if depthwise.ndim != 4 or depthwise.shape[:2] != (x.shape[1], 1):
        raise ShapeError("separable_conv", x.shape, depthwise.shape)
    mid = conv2d(x, depthwise, stride=stride, dilation=dilation, groups=x.shape[1])
    return conv2d(mid, pointwise)


# ---------------------------------------------------------------- pooling


def _check_rank4(name: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(name, x.shape, ("N", "C", "H", "W"))


@lru_cache(maxsize=256)
def _avg_counts(h: int, w: int) -> np.ndarray:
    ones = np.pad(np.ones((h, w)), 1)
    counts = sum(ones[i : i + h, j : j + w] for i in range(3) for j in range(3))
    counts.setflags(write=False)
    return counts


def avg_pool_3x3(x: Tensor) -> Tensor:
    """
    3x3 window, stride 1, same padding; padded cells are excluded from the mean.
    """
    _check_rank4("avg_pool_3x3", x)
    _, _, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    counts = _avg_counts(h, w)
    out = sum(xp[:, :, i : i + h, j : j + w] for i in range(3) for j in range(3)) / counts

    def backward_fn(g):
        gs = g / counts
        g_xp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                g_xp[:, :, i : i + h, j : j + w] += gs
        return (g_xp[:, :, 1 : 1 + h, 1 : 1 + w],)

    return _make(out, "avg_pool_3x3", (x,), backward_fn)


def max_pool_3x3(x: Tensor) -> Tensor:
    """
    3x3 window, stride 1, same padding. Ties go to the first maximal tap in
    row-major window order, for both value and gradient.
    """
    _check_rank4("max_pool_3x3", x)
    _, _, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    stacked = np.stack([xp[:, :, i : i + h, j : j + w] for i in range(3) for j in range(3)])
    winner = np.argmax(stacked, axis=0)
    out = np.take_along_axis(stacked, winner[None], axis=0)[0]

    def backward_fn(g):
        g_xp = np.zeros(xp.shape)
        for t in range(9):
            i, j = divmod(t, 3)
            g_xp[:, :, i : i + h, j : j + w] += np.where(winner == t, g, 0.0)
        return (g_xp[:, :, 1 : 1 + h, 1 : 1 + w],)

    node = _make(out, "max_pool_3x3", (x,), backward_fn)
    node.branch = winner
    return node


def global_avg_pool(x: Tensor) -> Tensor:
    _check_rank4("global_avg_pool", x)
    _, _, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _make(out, "global_avg_pool", (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


# ---------------------------------------------------------------- resampling


@lru_cache(maxsize=256)
def interpolation_matrix(n_out: int, n_in: int) -> np.ndarray:
    """
    Half-pixel-centred linear interpolation weights, shape (n_out, n_in).
    Every row sums to one.
    """
    a = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        a[i, i0] += 1.0 - frac
        a[i, i1] += frac
    a.setflags(write=False)
    return a


def bilinear_resize(x: Tensor, height: int, width: int) -> Tensor:
    _check_rank4("bilinear_resize", x)
    if height < 1 or width < 1:
        raise ShapeError("bilinear_resize", x.shape, (height, width))
    _, _, h, w = x.shape
    if (h, w) == (height, width):
        return identity(x)
    ah = interpolation_matrix(height, h)
    aw = interpolation_matrix(width, w)
    out = np.tensordot(np.tensordot(x.data, aw, axes=([3], [1])), ah, axes=([2], [1])).transpose(0, 1, 3, 2)
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        gx = np.tensordot(np.tensordot(g, aw, axes=([3], [0])), ah, axes=([2], [0])).transpose(0, 1, 3, 2)
        return (np.ascontiguousarray(gx),)

    return _make(out, "bilinear_resize", (x,), backward_fn)


def bilinear_upsample_x2(x: Tensor) -> Tensor:
    _check_rank4("bilinear_upsample_x2", x)
    return bilinear_resize(x, 2 * x.shape[2], 2 * x.shape[3])


# ---------------------------------------------------------------- channels


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise InvalidArgumentError("concat_channels needs at least one tensor")
    for p in parts:
        if p.ndim != 4 or p.shape[0] != parts[0].shape[0] or p.shape[2:] != parts[0].shape[2:]:
            raise ShapeError("concat_channels", parts[0].shape, p.shape)
    if len(parts) == 1:
        return parts[0]
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=1)

    def backward_fn(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts))]

    return _make(out, "concat_channels", parts, backward_fn)


def split_channels(x: Tensor, sizes: Sequence[int]) -> List[Tensor]:
    if x.ndim != 4 or sum(sizes) != x.shape[1]:
        raise ShapeError("split_channels", x.shape, tuple(sizes))
    bounds = np.cumsum([0] + list(sizes))
    return [select(x, (slice(None), slice(bounds[i], bounds[i + 1]))) for i in range(len(sizes))]


# ---------------------------------------------------------------- normalization and loss


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """
    Train-mode batch norm: statistics of the current minibatch, no running averages.
    """
    _check_rank4("batch_norm", x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm", x.shape, gamma.shape)
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=axes, keepdims=True) + eps)
    xhat = centered * inv_std
    g4 = gamma.data.reshape(1, c, 1, 1)
    out = g4 * xhat + beta.data.reshape(1, c, 1, 1)

    def backward_fn(g):
        g_gamma = (g * xhat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        dxhat = g * g4
        gx = (inv_std / m) * (
            m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return gx, g_gamma, g_beta

    return _make(out, "batch_norm", (x, gamma, beta), backward_fn)


def cross_entropy_spatial(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """
    Mean per-pixel cross entropy over pixels whose label is not `ignore_index`.
    """
    labels = np.asarray(labels)
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError("cross_entropy_spatial", logits.shape, labels.shape)
    k = logits.shape[1]
    valid = labels != ignore_index
    safe = np.where(valid, labels, 0).astype(np.int64)
    if np.any((safe < 0) | (safe >= k)):
        raise ValidationError(f"cross_entropy_spatial: labels outside 0..{k - 1}")
    count = int(valid.sum())
    peak = logits.data.max(axis=1, keepdims=True)
    logp = logits.data - (peak + np.log(np.exp(logits.data - peak).sum(axis=1, keepdims=True)))
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / max(count, 1)

    def backward_fn(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
        grad *= valid[:, None]
        return (g * grad / max(count, 1),)

    return _make(np.asarray(loss), "cross_entropy_spatial", (logits,), backward_fn)


# ---------------------------------------------------------------- parameters


class ParamStore:
    """
    Named parameters plus per-parameter optimizer state (momentum buffers,
    Adam moments).
    """

    MAGIC = b"HNASPRM1"

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self.state: Dict[str, Dict[str, np.ndarray]] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        param = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterable[Tuple[str, Tensor]]:
        return self._params.items()

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def num_elements(self, names: Optional[Iterable[str]] = None) -> int:
        names = self._params if names is None else names
        return int(sum(self._params[n].size for n in names))

    def zero_grad(self, fill: bool = False) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.data) if fill else None

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            if name not in self._params:
                raise ValidationError(f"unknown parameter {name!r}")
            if self._params[name].shape != np.shape(value):
                raise ShapeError("ParamStore.load_arrays", self._params[name].shape, np.shape(value))
            self._params[name].data = np.array(value, dtype=np.float64)

    def save(self, path: Path) -> Path:
        """
        Layout: magic, uint64 header length, JSON header, little-endian float64 payload.
        """
        header = {"params": {}, "state": {}}
        chunks = []
        offset = 0

        def put(section: Dict, key: str, array: np.ndarray) -> None:
            nonlocal offset
            section[key] = {"offset": offset, "shape": list(array.shape)}
            chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
            offset += array.size

        for name, p in self._params.items():
            put(header["params"], name, p.data)
        for name, slots in self.state.items():
            for slot, array in slots.items():
                put(header["state"], f"{name}#{slot}", array)
        blob = json.dumps(header).encode("utf-8")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(self.MAGIC)
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for chunk in chunks:
                f.write(chunk)
        logger.debug("Saved {} parameters ({} doubles) to {}", len(self._params), offset, path)
        return path

    @classmethod
    def load(cls, path: Path) -> "ParamStore":
        raw = Path(path).read_bytes()
        if raw[:8] != cls.MAGIC:
            raise ValidationError(f"{path}: not a parameter checkpoint")
        (length,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16 : 16 + length].decode("utf-8"))
        payload = np.frombuffer(raw[16 + length :], dtype="<f8")

        def take(entry: Dict) -> np.ndarray:
            size = int(np.prod(entry["shape"], dtype=np.int64))
            return payload[entry["offset"] : entry["offset"] + size].reshape(entry["shape"]).astype(np.float64)

        store = cls()
        for name, entry in header["params"].items():
            store.add(name, take(entry))
        for key, entry in header["state"].items():
            name, slot = key.rsplit("#", 1)
            store.state.setdefault(name, {})[slot] = take(entry)
        return store


# ---------------------------------------------------------------- gradient check


@dataclass
class GradientEntry:
    name: str
    max_rel_error: float
    checked: int
    skipped: int


@dataclass
class GradientReport:
    tolerance: float
    entries: List[GradientEntry] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __getitem__(self, name: str) -> GradientEntry:
        return next(e for e in self.entries if e.name == name)


def _branch_signature(root: Tensor) -> List[np.ndarray]:
    return [n.branch for n in topological_order(root) if n.branch is not None]


def _same_branches(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-4,
    tolerance: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
    abs_floor: float = 1e-6,
) -> GradientReport:
    """
    Compare backward() against central differences, coordinate by coordinate.

    Coordinates whose +h and -h evaluations take different branches of a
    nondifferentiable op (relu sign, max-pool winner) are skipped and noted.
    The relative error is |a - n| / max(|a|, |n|, abs_floor).
    """
    if h <= 0:
        raise InvalidArgumentError(f"step h must be positive, got {h}")
    for p in params.values():
        p.grad = None
    loss = f()
    if loss.size != 1:
        raise InvalidArgumentError(f"gradient_check needs a scalar function, got shape {loss.shape}")
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}

    rng = np.random.default_rng(seed)
    report = GradientReport(tolerance=tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst, checked, skipped = 0.0, 0, 0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            plus = f()
            flat[i] = orig - h
            minus = f()
            flat[i] = orig
            if not _same_branches(_branch_signature(plus), _branch_signature(minus)):
                skipped += 1
                continue
            numeric = (plus.item() - minus.item()) / (2 * h)
            a = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), abs_floor))
            checked += 1
        report.entries.append(GradientEntry(name, worst, checked, skipped))
        if skipped:
            report.notes.append(f"{name}: {skipped} nondifferentiable point(s), skipped")
        logger.trace("gradient check {}: max rel err {:.3e} over {} coords", name, worst, checked)
    return report
