"""Siamese training in sequence (SEQ) or single-frame (FRM) mode.

SEQ feeds pairs of ``L``-frame subsequences and alternates positive and
negative iterations; an epoch shows every training identity once as a
positive pair, i.e. ``2 ceil(N/B)`` iterations.  FRM feeds ``B*L`` pairs of
single frames per iteration, half positive and half negative, so an epoch
takes ``ceil(2N / (B*L))`` iterations.  Both modes load ``2*B*L`` images per
iteration.

Loss per pair::

    contrastive   d^2 (positive)  or  max(0, margin - d)^2 (negative)
    identification  softmax cross-entropy of a linear classifier on each member

with ``d`` the Euclidean distance between pooled descriptors; the batch loss
is the mean over pairs of ``contrastive + id_loss_weight * (id_a + id_b)``.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .dataio import IdentityRecord
from .encoder import EncoderParams, augment, encode_frame
from .errors import ConfigError, DivergenceError, DomainError
from .model import Model, leaf_nodes, trainable_arrays
from .seqstage import FORWARD, Dropout, SeqStageParams, StageNodes, pool
from .tensorcore import Node, RngStream

LOSS_FORMULA = "contrastive: positive d^2, negative max(0, margin - d)^2; d = ||v_a - v_b||_2"
SEQ_BASE_LR = 1e-3


def scale_learning_rate(base: float, k: float, rule: str = "linear") -> float:
    """Learning rate for a batch grown by factor ``k`` (``sqrt`` or ``linear`` rule)."""
    if k < 1:
        raise DomainError(f"batch growth factor must be >= 1, got {k}")
    if rule == "linear":
        return base * k
    if rule == "sqrt":
        return base * math.sqrt(k)
    raise DomainError(f"unknown scaling rule {rule!r}")


@dataclass
class TrainConfig:
    mode: str = "seq"
    arch: str = "rnn"
    B: int = 1
    L: int = 16
    feature_dim: int = 128
    margin: float = 2.0
    learning_rate: float | None = None
    epochs: int | None = None
    iterations: int | None = None
    dropout_p: float = 0.6
    seed: int = 0
    id_loss_weight: float = 1.0
    crop: tuple[int, int] | None = None
    mirror_prob: float = 0.5

    def __post_init__(self):
        self.mode = self.mode.lower()
        self.arch = self.arch.lower()
        if self.learning_rate is None:
            self.learning_rate = SEQ_BASE_LR if self.mode == "seq" else scale_learning_rate(SEQ_BASE_LR, self.L)
        if self.epochs is None:
            self.epochs = 1000 if self.mode == "seq" else 1000 * self.L
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("seq", "frm"):
            raise ConfigError(f"mode must be 'seq' or 'frm', got {self.mode!r}")
        if self.arch not in ("rnn", "fnn"):
            raise ConfigError(f"arch must be 'rnn' or 'fnn', got {self.arch!r}")
        if self.mode == "frm" and self.arch == "rnn":
            raise ConfigError("FRM mode requires arch=fnn: frame mode feeds sequences of length 1, "
                              "on which a recurrent stage has no recurrence to learn")
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.B < 1 or self.L < 1 or self.feature_dim < 1:
            raise ConfigError("B, L and feature_dim must be positive")
        if self.mode == "frm" and (self.B * self.L) % 2:
            raise ConfigError(f"FRM splits B*L={self.B * self.L} pairs in half; it must be even")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.epochs < 1 or (self.iterations is not None and self.iterations < 0):
            raise ConfigError("epochs must be positive and iterations non-negative")

    # flat key=value text form -------------------------------------------------

    def to_kv(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = "x".join(str(x) for x in v)
            lines.append(f"{f.name}={'' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str, **overrides) -> "TrainConfig":
        values = parse_kv(text)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


_INT_FIELDS = {"B", "L", "feature_dim", "epochs", "iterations", "seed"}
_FLOAT_FIELDS = {"margin", "learning_rate", "dropout_p", "id_loss_weight", "mirror_prob"}


def parse_kv(text: str) -> dict:
    known = {f.name for f in fields(TrainConfig)}
    out: dict = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"config line {n}: unknown key {key!r}")
        if val == "":
            out[key] = None
        elif key in _INT_FIELDS:
            out[key] = int(val)
        elif key in _FLOAT_FIELDS:
            out[key] = float(val)
        elif key == "crop":
            out[key] = tuple(int(x) for x in val.lower().split("x"))
        else:
            out[key] = val
    return out


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class ClipRef:
    """Frames ``start .. start+length-1`` of one camera track of one identity."""

    identity: int
    camera: int
    start: int
    length: int


@dataclass(frozen=True)
class PairSample:
    a: ClipRef
    b: ClipRef
    positive: bool


@dataclass
class EpochState:
    epoch: int = 0
    iteration: int = 0          # within the current epoch
    positives: list = field(default_factory=list)
    shown: list = field(default_factory=list)   # positive identities shown this epoch


@dataclass(frozen=True)
class EpochLedger:
    iterations_per_epoch: int
    images_per_iteration: int
    positive_slots: int


def iterations_per_epoch(n_ids: int, mode: str, B: int = 1, L: int = 16) -> int:
    if mode == "seq":
        return 2 * math.ceil(n_ids / B)
    return math.ceil(2 * n_ids / (B * L))


def epoch_ledger(n_ids: int, mode: str, B: int = 1, L: int = 16) -> EpochLedger:
    ipe = iterations_per_epoch(n_ids, mode, B, L)
    slots = ipe // 2 * B if mode == "seq" else ipe * (B * L // 2)
    return EpochLedger(ipe, 2 * B * L, slots)


def _clip(rec: IdentityRecord, camera: int, L: int, rng: RngStream) -> ClipRef:
    T = len(rec.tracks[camera])
    length = min(L, T)
    start = int(rng.integers(0, T - length + 1))
    return ClipRef(rec.identity, camera, start, length)


def _negative(records: Sequence[IdentityRecord], L: int, rng: RngStream) -> PairSample:
    i, j = rng.choice(range(len(records)), size=2, replace=False)
    a, b = records[int(i)], records[int(j)]
    return PairSample(_clip(a, int(rng.integers(0, 2)), L, rng),
                      _clip(b, int(rng.integers(0, 2)), L, rng), False)


def _positive(rec: IdentityRecord, L: int, rng: RngStream) -> PairSample:
    return PairSample(_clip(rec, 0, L, rng), _clip(rec, 1, L, rng), True)


def _start_epoch(state: EpochState, n: int, slots: int, rng: RngStream) -> None:
    # one full permutation, then further passes only to fill the padded tail
    queue: list[int] = []
    while len(queue) < slots:
        queue.extend(int(i) for i in rng.permutation(n))
    state.positives = queue[:slots]
    state.shown = []


def _advance(state: EpochState, ipe: int) -> None:
    state.iteration += 1
    if state.iteration == ipe:
        state.iteration = 0
        state.epoch += 1


def sample_seq_batch(records: Sequence[IdentityRecord], state: EpochState, rng: RngStream,
                     B: int = 1, L: int = 16) -> list[PairSample]:
    """``B`` subsequence pairs; even iterations are positive, odd ones negative."""
    if len(records) < 2:
        raise DomainError("SEQ sampling needs at least 2 identities")
    led = epoch_ledger(len(records), "seq", B, L)
    if state.iteration == 0:
        _start_epoch(state, len(records), led.positive_slots, rng)
    if state.iteration % 2 == 0:
        k = state.iteration // 2 * B
        picks = state.positives[k:k + B]
        state.shown.extend(records[i].identity for i in picks)
        batch = [_positive(records[i], L, rng) for i in picks]
    else:
        batch = [_negative(records, L, rng) for _ in range(B)]
    _advance(state, led.iterations_per_epoch)
    return batch


def sample_frm_batch(records: Sequence[IdentityRecord], state: EpochState, rng: RngStream,
                     B: int = 1, L: int = 16) -> list[PairSample]:
    """``B*L`` single-frame pairs, first half positive, second half negative."""
    if (B * L) % 2:
        raise ConfigError(f"B*L={B * L} cannot be split evenly into positive and negative pairs")
    if len(records) < 2:
        raise DomainError("FRM sampling needs at least 2 identities")
    led = epoch_ledger(len(records), "frm", B, L)
    if state.iteration == 0:
        _start_epoch(state, len(records), led.positive_slots, rng)
    half = B * L // 2
    k = state.iteration * half
    picks = state.positives[k:k + half]
    state.shown.extend(records[i].identity for i in picks)
    batch = [_positive(records[i], 1, rng) for i in picks]
    batch += [_negative(records, 1, rng) for _ in range(half)]
    _advance(state, led.iterations_per_epoch)
    return batch


def images_in(batch: Sequence[PairSample]) -> int:
    return sum(p.a.length + p.b.length for p in batch)


# ---------------------------------------------------------------------------
# losses


def contrastive_loss(v_a: Node, v_b: Node, positive, margin: float) -> Node:
    """Per-pair contrastive loss (rows of ``v_a``/``v_b`` are pair members)."""
    d = tc.euclidean_distance(v_a, v_b)
    pos = np.asarray(positive, dtype=np.float64) * np.ones(d.shape)
    pull = tc.mul(tc.square(d), tc.constant(pos))
    push = tc.mul(tc.square(tc.relu(tc.sub(tc.constant(np.full(d.shape, margin)), d))),
                  tc.constant(1.0 - pos))
    return tc.add(pull, push)


def identification_loss(descriptor: Node, label, W: Node, b: Node) -> Node:
    """Softmax cross-entropy of the classifier head over training identities."""
    return tc.softmax_xent(tc.affine(descriptor, W, b), label)


def init_classifier(n_classes: int, d2: int, rng: RngStream) -> dict[str, np.ndarray]:
    bound = 1.0 / math.sqrt(d2)
    return {"W": rng.uniform(-bound, bound, (n_classes, d2)), "b": rng.uniform(-bound, bound, n_classes)}


@dataclass
class BatchLoss:
    total: Node
    contrastive: float
    identification: float


class _Clips:
    """Resolve clip references to frame arrays, with optional augmentation."""

    def __init__(self, records, config: TrainConfig, rng: RngStream, encoder: EncoderParams | None):
        self.by_id = {r.identity: r for r in records}
        self.config = config
        self.rng = rng
        self.encoder = encoder

    def frames(self, ref: ClipRef) -> np.ndarray:
        track = self.by_id[ref.identity].tracks[ref.camera]
        clip = track[ref.start:ref.start + ref.length]
        if self.encoder is None:
            return clip
        crop = self.encoder.input_hw
        return augment(clip, self.rng, crop, self.config.mirror_prob)[0]


def batch_loss(batch: Sequence[PairSample], clips: _Clips, nodes: dict[str, Node], arch: str,
               labels: dict[int, int], config: TrainConfig, dropout: Dropout) -> BatchLoss:
    stage = StageNodes(nodes["seq.W_i"], nodes["seq.b_i"], nodes["seq.W_s"], nodes["seq.b_s"])
    enc = {k[4:]: v for k, v in nodes.items() if k.startswith("enc.")} or None
    forward = FORWARD[arch]

    def features(ref: ClipRef) -> Node:
        frames = clips.frames(ref)
        if enc is None:
            return tc.constant(frames)
        return tc.stack([encode_frame(f, None, nodes=enc) for f in frames])

    single = all(p.a.length == 1 and p.b.length == 1 for p in batch)
    refs = [p.a for p in batch] + [p.b for p in batch]
    if single:
        # all members are length-1 sequences: one (1, 2n, d1) batch
        feats = tc.stack([tc.take(features(r), 0) for r in refs])
        desc = pool(forward(tc.reshape(feats, (1,) + feats.shape), stage, dropout))
    else:
        desc = tc.stack([pool(forward(features(r), stage, dropout)) for r in refs])
    n = len(batch)
    va = tc.stack([tc.take(desc, i) for i in range(n)])
    vb = tc.stack([tc.take(desc, n + i) for i in range(n)])
    con = tc.mean_all(contrastive_loss(va, vb, [p.positive for p in batch], config.margin))
    ident = tc.mean_all(identification_loss(desc, np.array([labels[r.identity] for r in refs]),
                                            nodes["cls.W"], nodes["cls.b"]))
    # mean over 2n members equals half the per-pair sum of both terms
    ident_pair = tc.scale(ident, 2.0)
    total = tc.add(con, tc.scale(ident_pair, config.id_loss_weight))
    return BatchLoss(total, float(con.value), float(ident_pair.value))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class LogRecord:
    iteration: int
    epoch: int
    mode: str
    contrastive: float
    identification: float
    total: float
    images: int
    wall: float

    def line(self) -> str:
        return (f"{self.iteration}\t{self.epoch}\t{self.mode}\t{self.contrastive:.9g}\t"
                f"{self.identification:.9g}\t{self.total:.9g}\t{self.images}\t{self.wall:.3f}")


LOG_HEADER = "# iteration\tepoch\tmode\tcontrastive\tidentification\ttotal\timages\twall"


@dataclass
class TrainResult:
    model: Model
    classifier: dict[str, np.ndarray]
    log: list[LogRecord]
    config: TrainConfig
    iterations: int

    def log_text(self) -> str:
        lines = [f"# {LOSS_FORMULA}", f"# id_loss_weight={self.config.id_loss_weight}", LOG_HEADER]
        lines += [r.line() for r in self.log]
        return "\n".join(lines) + "\n"


def init_model(config: TrainConfig, d1: int, image_hw: tuple[int, int] | None = None) -> Model:
    rng = RngStream(config.seed)
    stage = SeqStageParams.init(d1, config.feature_dim, rng.child(1))
    encoder = None
    if image_hw is not None:
        h, w = config.crop or image_hw
        encoder = EncoderParams.init(rng.child(2), h, w, d1)
    return Model(stage, config.arch, encoder)


def total_iterations(config: TrainConfig, n_ids: int) -> int:
    if config.iterations is not None:
        return config.iterations
    return config.epochs * iterations_per_epoch(n_ids, config.mode, config.B, config.L)


def train(records: Sequence[IdentityRecord], config: TrainConfig, *, d1: int | None = None,
          init: Model | None = None,
          hook: Callable[[int, Model], None] | None = None, hook_every: int = 0,
          log_stream=None) -> TrainResult:
    """Plain SGD on encoder, stage and classifier parameters.

    ``hook(iteration, model)`` is called before the first update (iteration 0)
    and then every ``hook_every`` iterations, always after the last one.
    """
    config.validate()
    records = sorted(records, key=lambda r: r.identity)
    if not records:
        raise DomainError("cannot train on an empty dataset")
    kind = records[0].kind
    if d1 is None:
        d1 = records[0].tracks[0].shape[1] if kind == "features" else 128
    image_hw = records[0].tracks[0].shape[1:3] if kind == "images" else None
    model = init.copy() if init is not None else init_model(config, d1, image_hw)
    model.arch = config.arch
    rng = RngStream(config.seed)
    classifier = init_classifier(len(records), model.stage.d2, rng.child(3))
    sample_rng, drop_rng, aug_rng = rng.child(4), rng.child(5), rng.child(6)
    labels = {r.identity: k for k, r in enumerate(records)}
    clips = _Clips(records, config, aug_rng, model.encoder)
    dropout = Dropout(config.dropout_p, drop_rng, True)
    sampler = sample_seq_batch if config.mode == "seq" else sample_frm_batch
    arrays = trainable_arrays(model, classifier)
    state = EpochState()
    n_iter = total_iterations(config, len(records))
    log: list[LogRecord] = []
    t0 = time.perf_counter()
    if log_stream is not None:
        log_stream.write(f"# {LOSS_FORMULA}\n{LOG_HEADER}\n")
    if hook is not None:
        hook(0, model)
    for it in range(1, n_iter + 1):
        epoch = state.epoch
        batch = sampler(records, state, sample_rng, config.B, config.L)
        nodes = leaf_nodes(arrays)
        loss = batch_loss(batch, clips, nodes, config.arch, labels, config, dropout)
        value = float(loss.total.value)
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} at iteration {it} (epoch {epoch}); "
                                  f"learning rate {config.learning_rate} may be too high")
        tc.backward(loss.total)
        lr = config.learning_rate
        if lr:
            for name, arr in arrays.items():
                g = nodes[name].grad
                if g is not None:
                    arr -= lr * g
        rec = LogRecord(it, epoch, config.mode, loss.contrastive, loss.identification, value,
                        images_in(batch), time.perf_counter() - t0)
        log.append(rec)
        if log_stream is not None:
            log_stream.write(rec.line() + "\n")
        if hook is not None and hook_every and (it % hook_every == 0 or it == n_iter):
            hook(it, model)
    return TrainResult(model, classifier, log, config, n_iter)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
