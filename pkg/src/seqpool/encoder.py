"""Per-frame feature extraction.

Frames are ``(H, W, 5)`` float arrays: RGB in [0, 1] followed by horizontal
and vertical optical flow in [-1, 1].  The convolutional encoder is a small
stand-in stack (conv3x3 + tanh + maxpool2, twice, then one affine layer);
synthetic feature datasets skip it through :func:`encode_passthrough`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .binfmt import pack_header, unpack_header
from .errors import DimensionError, DomainError, FormatError
from .tensorcore import Node, RngStream

N_CHANNELS = 5
FLOW_X = 3
ENCODER_MAGIC = b"SQEN"


@dataclass
class EncoderParams:
    """Ordered parameter blocks of the conv stack, keyed by name."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    input_hw: tuple[int, int] = (48, 64)

    @property
    def out_dim(self) -> int:
        return self.arrays["fc.W"].shape[0]

    @classmethod
    def init(cls, rng: RngStream, height: int = 48, width: int = 64, d1: int = 128,
             channels: tuple[int, ...] = (8, 16), kernel: int = 3) -> "EncoderParams":
        arrays: dict[str, np.ndarray] = {}
        c_in, h, w = N_CHANNELS, height, width
        for i, c_out in enumerate(channels):
            bound = 1.0 / np.sqrt(c_in * kernel * kernel)
            arrays[f"conv{i}.w"] = rng.uniform(-bound, bound, (c_out, c_in, kernel, kernel))
            arrays[f"conv{i}.b"] = rng.uniform(-bound, bound, c_out)
            c_in, h, w = c_out, h // 2, w // 2
        if h == 0 or w == 0:
            raise DimensionError(f"frame {height}x{width} too small for {len(channels)} pooling stages")
        fan_in = c_in * h * w
        bound = 1.0 / np.sqrt(fan_in)
        arrays["fc.W"] = rng.uniform(-bound, bound, (d1, fan_in))
        arrays["fc.b"] = rng.uniform(-bound, bound, d1)
        return cls(arrays, (height, width))

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.arrays.items()}, self.input_hw)

    def to_bytes(self) -> bytes:
        out = [pack_header(ENCODER_MAGIC, len(self.arrays), *self.input_hw)]
        for name, arr in self.arrays.items():
            key = name.encode()
            out.append(struct.pack("<I", len(key)) + key)
            out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "EncoderParams":
        (count, h, w), off = unpack_header(buf, ENCODER_MAGIC, 3, "encoder checkpoint")
        arrays = {}
        try:
            for _ in range(count):
                (klen,) = struct.unpack_from("<I", buf, off)
                name = buf[off + 4:off + 4 + klen].decode()
                off += 4 + klen
                (ndim,) = struct.unpack_from("<I", buf, off)
                shape = struct.unpack_from(f"<{ndim}I", buf, off + 4)
                off += 4 + 4 * ndim
                n = int(np.prod(shape))
                arrays[name] = np.frombuffer(buf, "<f8", n, off).astype(np.float64).reshape(shape)
                off += 8 * n
        except (struct.error, ValueError) as exc:
            raise FormatError(f"encoder checkpoint: {exc}") from exc
        if off != len(buf):
            raise FormatError("encoder checkpoint: trailing bytes")
        return cls(arrays, (h, w))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EncoderParams":
        return cls.from_bytes(Path(path).read_bytes())


def check_frame(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[-1] != N_CHANNELS:
        raise FormatError(f"frame must be (H, W, {N_CHANNELS}), got {frame.shape}")
    return frame


def encode_frame(frame, params: EncoderParams, rng: RngStream | None = None,
                 training: bool = False, nodes: dict[str, Node] | None = None) -> Node:
    """Feature vector ``(d1,)`` of one frame.

    ``nodes`` supplies trainable parameter nodes; otherwise ``params`` is used
    as constants.  The stack has no stochastic layers, so ``rng`` and
    ``training`` do not change the result; they are accepted so callers can
    treat all encoders alike.
    """
    frame = check_frame(frame)
    P = nodes if nodes is not None else {k: tc.constant(v) for k, v in params.arrays.items()}
    x = tc.constant(frame.transpose(2, 0, 1))
    i = 0
    while f"conv{i}.w" in P:
        x = tc.maxpool2d(tc.tanh_elem(tc.conv2d(x, P[f"conv{i}.w"], P[f"conv{i}.b"])), 2)
        i += 1
    flat = tc.reshape(x, (-1,))
    if flat.shape[0] != P["fc.W"].shape[1]:
        raise DimensionError(f"frame {frame.shape[:2]} does not match encoder input size")
    return tc.affine(flat, P["fc.W"], P["fc.b"])


def encode_passthrough(feature, d1: int) -> Node:
    """Wrap a precomputed frame feature (or a ``(T, d1)`` stack) unchanged."""
    arr = tc.as_tensor(feature)
    if arr.ndim == 0 or arr.shape[-1] != d1:
        raise DimensionError(f"feature dimension {arr.shape[-1:] } does not match d1={d1}")
    return tc.constant(arr)


def mirror(frames: np.ndarray) -> np.ndarray:
    """Horizontal flip of ``(..., H, W, 5)`` frames; horizontal flow changes sign."""
    out = frames[..., :, ::-1, :].copy()
    out[..., FLOW_X] = -out[..., FLOW_X]
    return out


def augment(frames: np.ndarray, rng: RngStream, crop: tuple[int, int],
            mirror_prob: float = 0.5) -> tuple[np.ndarray, bool]:
    """Random crop then optional mirror, one draw shared by all frames.

    ``frames`` is a single ``(H, W, 5)`` frame or a ``(T, H, W, 5)`` stack.
    Returns the augmented frames and whether mirroring was applied.
    """
    frames = np.asarray(frames, dtype=np.float64)
    H, W = frames.shape[-3:-1]
    ch, cw = crop
    if ch > H or cw > W or ch < 1 or cw < 1:
        raise DomainError(f"crop {crop} does not fit frame {H}x{W}")
    if not 0.0 <= mirror_prob <= 1.0:
        raise DomainError(f"mirror probability {mirror_prob} outside [0, 1]")
    top = int(rng.integers(0, H - ch + 1))
    left = int(rng.integers(0, W - cw + 1))
    flip = bool(rng.random() < mirror_prob)
    out = frames[..., top:top + ch, left:left + cw, :]
    return (mirror(out) if flip else out.copy()), flip
