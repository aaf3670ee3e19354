"""Sequence-processing stage: recurrent (RNN) and feed-forward (FNN) variants.

Both variants share one parameter record ``(W_i, b_i, W_s, b_s)``::

    RNN  o[t] = W_i f[t] + b_i + W_s tanh(o[t-1]) + b_s,      tanh(o[0]) := 0
    FNN  o[t] = W_i f[t] + b_i + W_s tanh(W_i f[t] + b_i) + b_s

so a set of RNN-trained weights can be evaluated by the FNN graph unchanged.
The truncated RNN keeps one step of recurrence through ``W_i f[t-1] + b_i``
and serves as an exact algebraic bridge between the two.

Sequences are arrays or nodes of shape ``(T, d1)``, or ``(T, n, d1)`` for a
batch of ``n`` equal-length sequences.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensorcore as tc
from .binfmt import pack_header, read_floats, unpack_header
from .errors import DimensionError, DomainError
from .tensorcore import Node, RngStream

ARCHS = ("rnn", "fnn")
CHECKPOINT_MAGIC = b"SQSP"


@dataclass
class SeqStageParams:
    W_i: np.ndarray  # (d2, d1)
    b_i: np.ndarray  # (d2,)
    W_s: np.ndarray  # (d2, d2)
    b_s: np.ndarray  # (d2,)

    def __post_init__(self):
        d2, d1 = np.shape(self.W_i)
        for name, shape in (("b_i", (d2,)), ("W_s", (d2, d2)), ("b_s", (d2,))):
            if np.shape(getattr(self, name)) != shape:
                raise DimensionError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")

    @property
    def d1(self) -> int:
        return self.W_i.shape[1]

    @property
    def d2(self) -> int:
        return self.W_i.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W_i": self.W_i, "b_i": self.b_i, "W_s": self.W_s, "b_s": self.b_s}

    def copy(self) -> "SeqStageParams":
        return SeqStageParams(**{k: v.copy() for k, v in self.arrays().items()})

    def equals(self, other: "SeqStageParams") -> bool:
        """Bit equality of every block."""
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.arrays().values(), other.arrays().values()))

    @classmethod
    def init(cls, d1: int, d2: int, rng: RngStream) -> "SeqStageParams":
        """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
        ai, as_ = 1.0 / np.sqrt(d1), 1.0 / np.sqrt(d2)
        return cls(W_i=rng.uniform(-ai, ai, (d2, d1)), b_i=rng.uniform(-ai, ai, d2),
                   W_s=rng.uniform(-as_, as_, (d2, d2)), b_s=rng.uniform(-as_, as_, d2))

    @classmethod
    def zeros(cls, d1: int, d2: int) -> "SeqStageParams":
        return cls(np.zeros((d2, d1)), np.zeros(d2), np.zeros((d2, d2)), np.zeros(d2))

    def to_bytes(self) -> bytes:
        head = pack_header(CHECKPOINT_MAGIC, self.d1, self.d2)
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays().values())
        return head + body

    @classmethod
    def from_bytes(cls, buf: bytes) -> "SeqStageParams":
        (d1, d2), off = unpack_header(buf, CHECKPOINT_MAGIC, 2, "seqstage checkpoint")
        sizes = [d2 * d1, d2, d2 * d2, d2]
        flat = read_floats(buf, off, sum(sizes), "<f8", "seqstage checkpoint")
        parts = np.split(flat, np.cumsum(sizes)[:-1])
        return cls(parts[0].reshape(d2, d1), parts[1].copy(), parts[2].reshape(d2, d2), parts[3].copy())

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SeqStageParams":
        return cls.from_bytes(Path(path).read_bytes())


class StageNodes(NamedTuple):
    W_i: Node
    b_i: Node
    W_s: Node
    b_s: Node


@dataclass(frozen=True)
class Dropout:
    p: float = 0.0
    rng: RngStream | None = None
    training: bool = False


NO_DROPOUT = Dropout()


def _nodes(params) -> StageNodes:
    if isinstance(params, StageNodes):
        return params
    return StageNodes(*(tc.constant(a) for a in params.arrays().values()))


def _input(seq, d1: int) -> Node:
    x = seq if isinstance(seq, Node) else tc.constant(np.asarray(seq, dtype=np.float64))
    if x.value.ndim < 2 or x.shape[0] < 1:
        raise DomainError(f"sequence must have T >= 1 frames, got shape {x.shape}")
    if x.shape[-1] != d1:
        raise DimensionError(f"frame features have dimension {x.shape[-1]}, stage expects {d1}")
    return x


def rnn_forward(seq, params, dropout: Dropout = NO_DROPOUT) -> Node:
    """Stage outputs ``(T, [n,] d2)`` of the recurrent stage."""
    P = _nodes(params)
    x = _input(seq, P.W_i.shape[1])
    h = tc.affine(tc.dropout_mask(x, dropout.p, dropout.rng, dropout.training), P.W_i, P.b_i)
    r = tc.constant(np.zeros(h.shape[1:]))
    outs = []
    for t in range(x.shape[0]):
        r_in = tc.dropout_mask(r, dropout.p, dropout.rng, dropout.training)
        o = tc.add(tc.take(h, t), tc.affine(r_in, P.W_s, P.b_s))
        outs.append(o)
        r = tc.tanh_elem(o)
    return tc.stack(outs)


def fnn_forward(seq, params, dropout: Dropout = NO_DROPOUT) -> Node:
    """Stage outputs of the feed-forward stage; each row depends on its own frame only."""
    P = _nodes(params)
    x = _input(seq, P.W_i.shape[1])
    h = tc.affine(tc.dropout_mask(x, dropout.p, dropout.rng, dropout.training), P.W_i, P.b_i)
    r = tc.dropout_mask(tc.tanh_elem(h), dropout.p, dropout.rng, dropout.training)
    return tc.add(h, tc.affine(r, P.W_s, P.b_s))


def truncated_rnn_forward(seq, params, dropout: Dropout = NO_DROPOUT) -> Node:
    """One-step recurrence: ``o[t] = h[t] + W_s tanh(h[t-1]) + b_s`` with ``h = W_i f + b_i``.

    The first step has no recurrent input.
    """
    P = _nodes(params)
    x = _input(seq, P.W_i.shape[1])
    h = tc.affine(tc.dropout_mask(x, dropout.p, dropout.rng, dropout.training), P.W_i, P.b_i)
    r = tc.tanh_elem(h)
    prev = [tc.constant(np.zeros(h.shape[1:]))] + [tc.take(r, t) for t in range(x.shape[0] - 1)]
    r_prev = tc.dropout_mask(tc.stack(prev), dropout.p, dropout.rng, dropout.training)
    return tc.add(h, tc.affine(r_prev, P.W_s, P.b_s))


FORWARD = {"rnn": rnn_forward, "fnn": fnn_forward}


def pool(outputs) -> Node:
    """Temporal average pooling over axis 0."""
    out = outputs if isinstance(outputs, Node) else tc.constant(outputs)
    return tc.mean_over_time(out)


def describe(seq, params, arch: str) -> np.ndarray:
    """Inference-mode sequence descriptor (dropout off)."""
    return pool(FORWARD[arch](seq, params)).value


def transplant(params: SeqStageParams) -> SeqStageParams:
    """The RNN and FNN graphs share one parameter record; the mapping is the identity."""
    return params.copy()


def correction_term(seq, params: SeqStageParams) -> np.ndarray:
    """``W_s tanh(W_i f[T] + b_i) / T``: exactly pool(FNN) minus pool(truncated RNN)."""
    f = np.asarray(seq, dtype=np.float64)
    T = f.shape[0]
    last = f[T - 1]
    return (np.tanh(last @ params.W_i.T + params.b_i) @ params.W_s.T) / T


def approx_error(seq, params: SeqStageParams) -> tuple[np.ndarray, float]:
    """Per-step and pooled L2 gap between RNN and FNN outputs on one sequence."""
    o = rnn_forward(seq, params).value
    o_ff = fnn_forward(seq, params).value
    per_step = np.linalg.norm(o - o_ff, axis=-1)
    pooled = float(np.linalg.norm(pool(o).value - pool(o_ff).value))
    return per_step, pooled
