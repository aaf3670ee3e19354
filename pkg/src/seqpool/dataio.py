"""Two-camera identity datasets: on-disk layout, synthetic generation, optical flow.

Dataset tree::

    root/id0001/camA/frame00000.bin ...   (image datasets, one file per frame)
    root/id0001/camA/features.bin         (feature datasets, one file per track)
    root/id0001/camB/...
    root/ignore.txt                       (optional; identity ids to skip)

All integers in file headers are little-endian uint32.
"""
from __future__ import annotations

import json
import re
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .binfmt import pack_header, read_floats, unpack_header
from .encoder import N_CHANNELS
from .errors import DimensionError, DomainError, FormatError
from .tensorcore import RngStream

FRAME_MAGIC = b"SQFR"
FEATURE_MAGIC = b"SQFT"
DESCRIPTOR_MAGIC = b"SQPD"
CAMERAS = ("camA", "camB")
FEATURE_FILE = "features.bin"
DEFAULT_FLOW_CLAMP = 8.0

_ID_DIR = re.compile(r"^id(\d+)$")
_FRAME_FILE = re.compile(r"^frame(\d+)\.bin$")


@dataclass
class IdentityRecord:
    """One person seen by both cameras.

    Each track is ``(T, d1)`` for feature datasets or ``(T, H, W, 5)`` for
    image datasets.
    """

    identity: int
    tracks: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        if len(self.tracks) != 2:
            raise FormatError(f"identity {self.identity}: expected 2 tracks, got {len(self.tracks)}")
        for cam, tr in zip(CAMERAS, self.tracks):
            if len(tr) < 1:
                raise FormatError(f"identity {self.identity}: empty {cam} track")

    @property
    def kind(self) -> str:
        return "features" if self.tracks[0].ndim == 2 else "images"


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    test: tuple[int, ...]
    trial: int
    seed: int


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic stand-in dataset.

    Feature frames are ``signature + track_offset + camera_shift(camB) +
    frame_nuisance + noise``; ``signal``, ``track_noise``, ``frame_nuisance``
    and ``noise`` are per-coordinate standard deviations.  ``camera_shift`` is the length of a fixed random direction
    added to every camB frame.  ``signal_dims`` confines identity signatures to
    a random subspace of that dimension, leaving the rest as pure nuisance.
    With ``image_size`` set, frames are rendered as
    5-channel images instead.
    """

    n_ids: int = 40
    frames: tuple[int, int] = (24, 24)
    dim: int = 32
    signal: float = 1.0
    noise: float = 0.5
    track_noise: float = 0.0
    camera_shift: float = 0.0
    frame_nuisance: float = 0.0
    signal_dims: int | None = None
    seed: int = 0
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        lo, hi = self.frames
        if self.signal_dims is not None and not 1 <= self.signal_dims <= self.dim:
            raise DomainError(f"signal_dims must lie in [1, dim], got {self.signal_dims}")
        if self.n_ids < 1 or lo < 1 or hi < lo or self.dim < 1:
            raise DomainError(f"invalid synthetic spec counts: {self}")
        if min(self.noise, self.track_noise, self.frame_nuisance, self.signal) < 0:
            raise DomainError("noise levels must be non-negative")


# ---------------------------------------------------------------------------
# binary files


def frame_to_bytes(frame: np.ndarray) -> bytes:
    H, W, C = frame.shape
    return pack_header(FRAME_MAGIC, H, W, C) + np.ascontiguousarray(frame, dtype="<f4").tobytes()


def frame_from_bytes(buf: bytes) -> np.ndarray:
    (H, W, C), off = unpack_header(buf, FRAME_MAGIC, 3, "frame file")
    return read_floats(buf, off, H * W * C, "<f4", "frame file").reshape(H, W, C)


def features_to_bytes(feats: np.ndarray) -> bytes:
    T, d = feats.shape
    return pack_header(FEATURE_MAGIC, T, d) + np.ascontiguousarray(feats, dtype="<f8").tobytes()


def features_from_bytes(buf: bytes) -> np.ndarray:
    (T, d), off = unpack_header(buf, FEATURE_MAGIC, 2, "feature file")
    return read_floats(buf, off, T * d, "<f8", "feature file").reshape(T, d)


def save_descriptors(path, mat: np.ndarray) -> None:
    mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    n, d = mat.shape
    Path(path).write_bytes(pack_header(DESCRIPTOR_MAGIC, n, d) + np.ascontiguousarray(mat, dtype="<f8").tobytes())


def load_descriptors(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (n, d), off = unpack_header(buf, DESCRIPTOR_MAGIC, 2, "descriptor file")
    return read_floats(buf, off, n * d, "<f8", "descriptor file").reshape(n, d)


# ---------------------------------------------------------------------------
# dataset tree


def save_dataset(root, records: Sequence[IdentityRecord], metadata: dict | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for rec in records:
        for cam, track in zip(CAMERAS, rec.tracks):
            d = root / f"id{rec.identity:04d}" / cam
            d.mkdir(parents=True, exist_ok=True)
            if track.ndim == 2:
                (d / FEATURE_FILE).write_bytes(features_to_bytes(track))
            else:
                for t, frame in enumerate(track):
                    (d / f"frame{t:05d}.bin").write_bytes(frame_to_bytes(frame))
    if metadata is not None:
        (root / "dataset.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")


def _read_ignore(root: Path) -> set[int]:
    p = root / "ignore.txt"
    if not p.exists():
        return set()
    return {int(tok) for tok in p.read_text().split() if tok.strip()}


def load_dataset(root, fmt: str = "features", ignore: Sequence[int] = ()) -> list[IdentityRecord]:
    """Read a dataset tree, ordered by identity, camera, frame index.

    Identities listed in ``ignore`` or ``root/ignore.txt`` (e.g. single-view
    distractors) are skipped.
    """
    if fmt not in ("features", "images"):
        raise DomainError(f"unknown dataset format {fmt!r}")
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"dataset root {root} is not a directory")
    skip = set(ignore) | _read_ignore(root)
    ids = sorted((int(m.group(1)), p) for p in root.iterdir()
                 if p.is_dir() and (m := _ID_DIR.match(p.name)))
    if not ids:
        warnings.warn(f"dataset at {root} contains no identities", stacklevel=2)
        return []
    records = []
    dims = set()
    for ident, path in ids:
        if ident in skip:
            continue
        tracks = []
        for cam in CAMERAS:
            cdir = path / cam
            if not cdir.is_dir():
                raise FormatError(f"identity {ident}: missing camera track {cam}")
            if fmt == "features":
                f = cdir / FEATURE_FILE
                if not f.exists():
                    raise FormatError(f"identity {ident}: missing {cam}/{FEATURE_FILE}")
                track = features_from_bytes(f.read_bytes())
            else:
                frames = sorted((int(m.group(1)), p) for p in cdir.iterdir()
                                if (m := _FRAME_FILE.match(p.name)))
                if not frames:
                    raise FormatError(f"identity {ident}: {cam} has no frames")
                track = np.stack([frame_from_bytes(p.read_bytes()) for _, p in frames])
            dims.add(track.shape[1:])
            tracks.append(track)
        records.append(IdentityRecord(ident, (tracks[0], tracks[1])))
    if len(dims) > 1:
        raise FormatError(f"mixed frame/feature dimensions in dataset: {sorted(dims)}")
    return records


def by_identity(records: Sequence[IdentityRecord]) -> dict[int, IdentityRecord]:
    return {r.identity: r for r in records}


def make_split(records_or_ids, trial: int, seed: int) -> DatasetSplit:
    """Random half/half identity split, reproducible from ``(seed, trial)``."""
    ids = sorted(r.identity if isinstance(r, IdentityRecord) else int(r) for r in records_or_ids)
    n = len(ids)
    if n < 2:
        raise DomainError(f"need at least 2 identities to split, got {n}")
    perm = RngStream(seed ^ trial).child(0).permutation(n)
    test = tuple(sorted(ids[i] for i in perm[:n // 2]))
    train = tuple(sorted(ids[i] for i in perm[n // 2:]))
    return DatasetSplit(train=train, test=test, trial=trial, seed=seed)


# ---------------------------------------------------------------------------
# synthetic data


def generate_synthetic(spec: SyntheticSpec) -> list[IdentityRecord]:
    rng = RngStream(spec.seed)
    d = spec.dim
    k = spec.signal_dims or d
    q = np.linalg.qr(rng.normal(size=(d, d)))[0]
    # signatures live in the first k columns, track/camera nuisance in the rest
    signal_basis = q[:, :k] if k < d else np.eye(d)
    nuisance = q[:, k:] if k < d else np.eye(d)
    direction = nuisance @ rng.normal(size=nuisance.shape[1])
    shift = spec.camera_shift * direction / np.linalg.norm(direction)
    lo, hi = spec.frames
    records = []
    for ident in range(1, spec.n_ids + 1):
        signature = signal_basis @ rng.normal(0.0, spec.signal, k)
        tracks = []
        for cam in range(2):
            T = int(rng.integers(lo, hi + 1))
            offset = nuisance @ rng.normal(0.0, spec.track_noise, nuisance.shape[1])
            base = signature + offset + (shift if cam == 1 else 0.0)
            wobble = rng.normal(0.0, spec.frame_nuisance, (T, nuisance.shape[1])) @ nuisance.T
            feats = base + wobble + rng.normal(0.0, spec.noise, (T, d))
            if spec.image_size is not None:
                tracks.append(render_frames(feats, spec.image_size, rng))
            else:
                tracks.append(feats)
        records.append(IdentityRecord(ident, (tracks[0], tracks[1])))
    return records


def render_frames(feats: np.ndarray, size: tuple[int, int], rng: RngStream) -> np.ndarray:
    """Paint feature vectors as 5-channel images.

    Rows of the image are split into horizontal bands, one per group of three
    feature coordinates, coloured by a sigmoid of those coordinates.  Flow
    channels start at zero; the ``flow`` command fills them in.
    """
    H, W = size
    T, d = feats.shape
    n_bands = max(1, d // 3)
    colors = 1.0 / (1.0 + np.exp(-feats[:, :n_bands * 3].reshape(T, n_bands, 3)))
    band_of_row = np.minimum(np.arange(H) * n_bands // H, n_bands - 1)
    frames = np.zeros((T, H, W, N_CHANNELS))
    frames[..., :3] = colors[:, band_of_row, None, :]
    # sub-pixel horizontal drift gives the flow stage something to measure
    drift = rng.uniform(-0.5, 0.5)
    xs = np.arange(W)
    for t in range(T):
        texture = 0.05 * np.sin(2 * np.pi * (xs - drift * t) / max(W, 2))
        frames[t, :, :, :3] = np.clip(frames[t, :, :, :3] + texture[None, :, None], 0.0, 1.0)
    return frames


# ---------------------------------------------------------------------------
# optical flow


def luma(frame: np.ndarray) -> np.ndarray:
    return 0.299 * frame[..., 0] + 0.587 * frame[..., 1] + 0.114 * frame[..., 2]


def lucas_kanade(img0: np.ndarray, img1: np.ndarray, window: int = 5,
                 min_eig: float = 1e-4) -> np.ndarray:
    """Dense Lucas-Kanade flow ``(H, W, 2)`` from ``img0`` to ``img1``.

    Per pixel, solves the 2x2 normal equations of brightness constancy summed
    over a ``window x window`` neighbourhood.  Windows whose smaller eigenvalue
    is below ``min_eig * window**2`` get zero flow.
    """
    I0 = np.asarray(img0, dtype=np.float64)
    I1 = np.asarray(img1, dtype=np.float64)
    if I0.shape != I1.shape or I0.ndim != 2:
        raise DimensionError(f"flow needs two equal 2-D images, got {I0.shape} and {I1.shape}")
    if window < 3 or window % 2 == 0:
        raise DomainError(f"window must be odd and >= 3, got {window}")
    avg = 0.5 * (I0 + I1)
    Iy, Ix = np.gradient(avg)
    It = I1 - I0
    area = window * window

    def wsum(a):
        return ndimage.uniform_filter(a, size=window, mode="nearest") * area

    a, b, c = wsum(Ix * Ix), wsum(Ix * Iy), wsum(Iy * Iy)
    p, q = wsum(Ix * It), wsum(Iy * It)
    det = a * c - b * b
    half_tr = 0.5 * (a + c)
    lam_min = half_tr - np.sqrt(np.maximum(half_tr * half_tr - det, 0.0))
    ok = lam_min >= min_eig * area
    safe = np.where(ok, det, 1.0)
    u = np.where(ok, -(c * p - b * q) / safe, 0.0)
    v = np.where(ok, -(a * q - b * p) / safe, 0.0)
    return np.stack([u, v], axis=-1) + 0.0


def normalize_flow(flow: np.ndarray, clamp: float = DEFAULT_FLOW_CLAMP) -> np.ndarray:
    """Clamp to ``[-clamp, clamp]`` and rescale to ``[-1, 1]``."""
    if clamp <= 0:
        raise DomainError(f"flow clamp must be positive, got {clamp}")
    return np.clip(np.asarray(flow, dtype=np.float64), -clamp, clamp) / clamp


def track_flow(track: np.ndarray, window: int = 5, clamp: float = DEFAULT_FLOW_CLAMP) -> np.ndarray:
    """Fill the flow channels of a ``(T, H, W, 5)`` track from consecutive RGB frames.

    Frame ``t`` gets the flow towards ``t+1``; the last frame repeats the
    previous flow, and a single-frame track gets zero flow.
    """
    out = np.array(track, dtype=np.float64)
    T = len(out)
    gray = [luma(f) for f in out]
    flows = [normalize_flow(lucas_kanade(gray[t], gray[t + 1], window), clamp) for t in range(T - 1)]
    if not flows:
        flows = [np.zeros(out.shape[1:3] + (2,))]
    flows.append(flows[-1])
    for t in range(T):
        out[t, ..., 3:5] = flows[t]
    return out


def spec_metadata(spec: SyntheticSpec, flow_clamp: float = DEFAULT_FLOW_CLAMP) -> dict:
    meta = asdict(spec)
    meta["kind"] = "images" if spec.image_size is not None else "features"
    meta["flow_clamp"] = flow_clamp
    return meta
