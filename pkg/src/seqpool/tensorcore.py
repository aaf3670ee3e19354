"""Dense float64 tensors with a small reverse-mode autodiff graph.

Values are plain ``numpy.ndarray`` objects of dtype float64.  A :class:`Node`
wraps a value together with the closure that pushes an upstream gradient back
to the node's parents.  Only the handful of operations needed by the models in
this package are provided; each one builds a new node eagerly.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError

__all__ = [
    "Node", "RngStream", "as_tensor", "constant", "parameter", "backward",
    "affine", "tanh_elem", "mean_over_time", "dropout_mask",
    "euclidean_distance", "softmax_xent", "add", "sub", "mul", "scale",
    "square", "relu", "total", "mean_all", "take", "stack", "reshape",
    "conv2d", "maxpool2d",
]


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Convert external input to a finite float64 array (copying)."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise DomainError("tensor contains NaN or Inf")
    return arr


class Node:
    """A value in the computation graph.

    ``grad`` stays ``None`` until a backward pass reaches the node; it is
    allocated as zeros of ``value.shape`` on first accumulation.
    """

    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad")

    def __init__(self, value, parents: tuple = (), backward_fn: Callable | None = None,
                 requires_grad: bool = False):
        self.value = value if isinstance(value, np.ndarray) and value.dtype == np.float64 \
            else np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self._backward = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def constant(x) -> Node:
    return Node(np.asarray(x, dtype=np.float64))


def parameter(x: np.ndarray) -> Node:
    """Leaf node whose gradient is wanted.  Shares memory with ``x``."""
    return Node(x, requires_grad=True)


def _make(value, parents: tuple, backward_fn) -> Node:
    needs = any(p.requires_grad for p in parents)
    return Node(value, parents if needs else (), backward_fn if needs else None, needs)


def backward(root: Node, grad=None) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every reachable node.

    Each node is visited once, in reverse topological order, so gradients from
    several consumers of a shared node are summed before being propagated.
    """
    if not root.requires_grad:
        return
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    pending: dict[int, np.ndarray] = {}
    seed = np.ones_like(root.value) if grad is None else np.asarray(grad, dtype=np.float64)
    pending[id(root)] = seed
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
        node.grad += g
        if node._backward is None:
            continue
        for p, pg in zip(node.parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in pending:
                pending[id(p)] = pending[id(p)] + pg
            else:
                pending[id(p)] = pg


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _same_shape(a: Node, b: Node, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape {a.shape} vs {b.shape}")


def add(a: Node, b: Node) -> Node:
    _same_shape(a, b, "add")
    return _make(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape(a, b, "sub")
    return _make(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Node, c: float) -> Node:
    return _make(a.value * c, (a,), lambda g: (g * c,))


def square(a: Node) -> Node:
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * av * g,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def total(a: Node) -> Node:
    shape = a.shape
    return _make(np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean_all(a: Node) -> Node:
    shape, n = a.shape, a.value.size
    return _make(np.asarray(a.value.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def take(a: Node, index: int) -> Node:
    """Row ``index`` along the leading axis."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _make(a.value[index].copy(), (a,), bw)


def stack(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise DomainError("stack of zero nodes")
    first = nodes[0].shape
    for n in nodes:
        if n.shape != first:
            raise DimensionError(f"stack: shape {n.shape} vs {first}")
    value = np.stack([n.value for n in nodes])
    return _make(value, tuple(nodes), lambda g: tuple(g[i] for i in range(len(nodes))))


def reshape(a: Node, shape) -> Node:
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# model building blocks


def affine(x: Node, W: Node, b: Node | None = None) -> Node:
    """``W @ x + b`` applied over the last axis of ``x``.

    ``x`` may carry leading batch axes, e.g. ``(T, d_in)``.
    """
    if W.value.ndim != 2 or x.shape[-1:] != W.shape[1:]:
        raise DimensionError(f"affine: W {W.shape} cannot act on x {x.shape}")
    if b is not None and b.shape != W.shape[:1]:
        raise DimensionError(f"affine: bias {b.shape} vs W {W.shape}")
    xv, Wv = x.value, W.value
    out = xv @ Wv.T
    if b is not None:
        out = out + b.value
    d_out, d_in = Wv.shape

    def bw(g):
        g2 = g.reshape(-1, d_out)
        gx = g @ Wv
        gW = g2.T @ xv.reshape(-1, d_in)
        gb = g2.sum(axis=0)
        return (gx, gW, gb) if b is not None else (gx, gW)

    parents = (x, W, b) if b is not None else (x, W)
    return _make(out, parents, bw)


def tanh_elem(x: Node) -> Node:
    y = np.tanh(x.value)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def mean_over_time(xs) -> Node:
    """Arithmetic mean of a list of equally shaped nodes, or over axis 0 of one node.

    Summation is strictly left to right over the stored order.
    """
    if isinstance(xs, Node):
        T = xs.shape[0] if xs.value.ndim else 0
        if T == 0:
            raise DomainError("mean over an empty time axis")
        acc = np.zeros(xs.shape[1:])
        for t in range(T):
            acc = acc + xs.value[t]
        inner = xs.shape[1:]
        return _make(acc / T, (xs,), lambda g: (np.broadcast_to(g / T, (T,) + inner).copy(),))
    xs = list(xs)
    if not xs:
        raise DomainError("mean over an empty sequence")
    shape = xs[0].shape
    for x in xs:
        if x.shape != shape:
            raise DimensionError(f"mean_over_time: shape {x.shape} vs {shape}")
    T = len(xs)
    acc = np.zeros(shape)
    for x in xs:
        acc = acc + x.value
    return _make(acc / T, tuple(xs), lambda g: tuple(g / T for _ in range(T)))


def dropout_mask(x: Node, p: float, rng: "RngStream | None", training: bool) -> Node:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` at train time."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return _make(x.value * keep, (x,), lambda g: (g * keep,))


def euclidean_distance(a: Node, b: Node) -> Node:
    """L2 distance over the last axis; rows are treated independently.

    The gradient at ``a == b`` is taken to be zero.
    """
    _same_shape(a, b, "euclidean_distance")
    diff = a.value - b.value
    d = np.sqrt(np.sum(diff * diff, axis=-1))

    def bw(g):
        safe = np.where(d > 0, d, 1.0)
        coef = np.where(d > 0, np.asarray(g) / safe, 0.0)
        ga = coef[..., None] * diff
        return ga, -ga

    return _make(d, (a, b), bw)


def softmax_xent(logits: Node, label) -> Node:
    """Cross-entropy of softmax(logits) against an integer label (per row)."""
    z = logits.value
    C = z.shape[-1]
    lab = np.asarray(label)
    if lab.shape != z.shape[:-1]:
        raise DimensionError(f"labels {lab.shape} vs logits {z.shape}")
    if np.any(lab < 0) or np.any(lab >= C):
        raise DomainError(f"label out of range [0, {C})")
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, lab[..., None].astype(np.intp), axis=-1)[..., 0]
    loss = lse - picked
    probs = np.exp(shifted - lse[..., None])
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, lab[..., None].astype(np.intp), 1.0, axis=-1)

    def bw(g):
        return (np.asarray(g)[..., None] * (probs - onehot),)

    return _make(loss, (logits,), bw)


def conv2d(x: Node, w: Node, b: Node) -> Node:
    """Same-padded, stride-1 cross-correlation of a ``(C, H, W)`` image."""
    if x.value.ndim != 3 or w.value.ndim != 4 or w.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d: kernel {w.shape} vs image {x.shape}")
    if b.shape != w.shape[:1]:
        raise DimensionError(f"conv2d: bias {b.shape} vs kernel {w.shape}")
    C, H, W = x.shape
    K, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.value, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = win.transpose(1, 2, 0, 3, 4).reshape(H * W, C * kh * kw)
    wf = w.value.reshape(K, -1)
    out = (cols @ wf.T + b.value).T.reshape(K, H, W)

    def bw(g):
        gf = g.reshape(K, H * W)
        gw = (gf @ cols).reshape(w.shape)
        gb = gf.sum(axis=1)
        gcols = (gf.T @ wf).reshape(H, W, C, kh, kw)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + H, j:j + W] += gcols[:, :, :, i, j].transpose(2, 0, 1)
        gx = gxp[:, ph:ph + H, pw:pw + W]
        return gx, gw, gb

    return _make(out, (x, w, b), bw)


def maxpool2d(x: Node, k: int = 2) -> Node:
    """Non-overlapping ``k x k`` max pooling; trailing rows/cols are dropped."""
    C, H, W = x.shape
    H2, W2 = H // k, W // k
    if H2 == 0 or W2 == 0:
        raise DimensionError(f"maxpool2d: image {x.shape} smaller than window {k}")
    blocks = x.value[:, :H2 * k, :W2 * k].reshape(C, H2, k, W2, k).transpose(0, 1, 3, 2, 4)
    flat = blocks.reshape(C, H2, W2, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gblocks = gflat.reshape(C, H2, W2, k, k).transpose(0, 1, 3, 2, 4).reshape(C, H2 * k, W2 * k)
        gx = np.zeros((C, H, W))
        gx[:, :H2 * k, :W2 * k] = gblocks
        return (gx,)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------


class RngStream:
    """Seeded PCG64 stream.  Same seed, same draws, on any platform."""

    algorithm = "PCG64"

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2 ** 64:
            raise DomainError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def child(self, *keys: int) -> "RngStream":
        """Independent stream derived from ``(seed, *keys)``; does not advance ``self``."""
        ss = np.random.SeedSequence([self.seed, *(int(k) for k in keys)])
        return RngStream(int(ss.generate_state(1, np.uint64)[0]))

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, items: Iterable, size=None, replace=True):
        return self._gen.choice(np.asarray(list(items)), size=size, replace=replace)
