"""Feature extraction network = encoder + sequence stage + average pooling.

A checkpoint is a directory::

    seqstage.sqsp   stage parameters (W_i, b_i, W_s, b_s)
    encoder.sqen    conv encoder parameters, absent for feature datasets
    meta.json       architecture tag and shapes
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .encoder import EncoderParams, encode_frame
from .errors import ConfigError, FormatError
from .seqstage import ARCHS, FORWARD, SeqStageParams, pool

SEQSTAGE_FILE = "seqstage.sqsp"
ENCODER_FILE = "encoder.sqen"
META_FILE = "meta.json"


@dataclass
class Model:
    stage: SeqStageParams
    arch: str = "rnn"
    encoder: EncoderParams | None = None

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")

    def copy(self) -> "Model":
        return Model(self.stage.copy(), self.arch, self.encoder.copy() if self.encoder else None)

    def with_arch(self, arch: str) -> "Model":
        return Model(self.stage, arch, self.encoder)

    def frame_features(self, track: np.ndarray) -> np.ndarray:
        """``(T, d1)`` features; image tracks are centre-cropped to the encoder input."""
        track = np.asarray(track, dtype=np.float64)
        if self.encoder is None:
            return track
        h, w = self.encoder.input_hw
        H, W = track.shape[1:3]
        top, left = (H - h) // 2, (W - w) // 2
        crop = track[:, top:top + h, left:left + w, :]
        return np.stack([encode_frame(f, self.encoder).value for f in crop])

    def descriptor(self, track: np.ndarray, arch: str | None = None) -> np.ndarray:
        """Inference-mode pooled descriptor of a whole track."""
        feats = self.frame_features(track)
        return pool(FORWARD[arch or self.arch](feats, self.stage)).value

    def checksum(self) -> str:
        h = hashlib.sha256(self.stage.to_bytes())
        if self.encoder is not None:
            h.update(self.encoder.to_bytes())
        return h.hexdigest()

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        self.stage.save(path / SEQSTAGE_FILE)
        if self.encoder is not None:
            self.encoder.save(path / ENCODER_FILE)
        meta = {"arch": self.arch, "d1": self.stage.d1, "d2": self.stage.d2,
                "encoder": self.encoder is not None}
        (path / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Model":
        path = Path(path)
        try:
            meta = json.loads((path / META_FILE).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"checkpoint {path}: unreadable {META_FILE}: {exc}") from exc
        if not (path / SEQSTAGE_FILE).exists():
            raise FormatError(f"checkpoint {path}: missing {SEQSTAGE_FILE}")
        stage = SeqStageParams.load(path / SEQSTAGE_FILE)
        encoder = EncoderParams.load(path / ENCODER_FILE) if meta.get("encoder") else None
        return cls(stage, meta.get("arch", "rnn"), encoder)


def trainable_arrays(model: Model, classifier: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Flat name -> array view of every trainable block (shared memory)."""
    out = {f"seq.{k}": v for k, v in model.stage.arrays().items()}
    if model.encoder is not None:
        out.update({f"enc.{k}": v for k, v in model.encoder.arrays.items()})
    if classifier:
        out.update({f"cls.{k}": v for k, v in classifier.items()})
    return out


def leaf_nodes(arrays: dict[str, np.ndarray]) -> dict[str, tc.Node]:
    return {k: tc.parameter(v) for k, v in arrays.items()}
