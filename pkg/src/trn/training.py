"""Supervised training of the detection cell.

The loss has two heads. The encoder head is the mean cross-entropy of
the present-chunk distributions. The decoder head supervises
anticipation: the distribution emitted at chunk t for step i is scored
against the label of chunk t + i, and pairs that reach past the end of
the window are masked out; the head is the mean over surviving pairs.
The two heads are combined with configurable weights (default 1, 1).

Optimization is Adam with bias correction plus decoupled weight decay:
the decay term lr * wd * theta is subtracted directly from the weights
rather than folded into the gradient, so "weight_decay" means the same
thing at any gradient scale.

Batching packs same-length windows as columns of one matrix and runs the
standard cell on column batches; per-sequence results are identical to
running each window alone (up to float reassociation in the gemm).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import dataio as dio
from . import evaluate as ev
from . import model as md
from . import numeric as nm
from .dataio import BadMagicError, HeaderError, TruncatedFileError
from .model import ChunkStreams, FusionVariant, TrnConfig, TrnParams
from .numeric import Tensor, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 5e-4
    batch_size: int = 2
    seq_len: int = 64
    decoder_steps: int = 8
    epochs: int = 10
    seed: int = 0
    lambda_enc: float = 1.0
    lambda_dec: float = 1.0
    eval_every: int = 1  # held-out mAP cadence in epochs; 0 disables

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValidationError("learning_rate must be > 0 and weight_decay >= 0")
        if self.batch_size < 1 or self.seq_len < 1 or self.decoder_steps < 1:
            raise ValidationError("batch_size, seq_len and decoder_steps must be >= 1")
        if self.epochs < 0 or self.eval_every < 0:
            raise ValidationError("epochs and eval_every must be >= 0")
        if self.lambda_enc < 0 or self.lambda_dec < 0:
            raise ValidationError("loss weights must be >= 0")


def decoder_target_pairs(seq_len: int, steps: int) -> list[tuple[int, int]]:
    """All (chunk t, step i) pairs whose target t + i stays inside the
    window; i is 1-based."""
    return [
        (t, i) for t in range(seq_len) for i in range(1, steps + 1) if t + i <= seq_len - 1
    ]


def sequence_loss(
    params: TrnParams,
    config: TrainConfig,
    sequence: list[ChunkStreams],
    labels: np.ndarray,
) -> Tensor:
    """Two-head training loss for one window (vectors or column batches).

    labels: (T,) ints, or (T, B) when the sequence holds column batches.
    """
    classes = params.config.classes
    if params.config.decoder_steps != config.decoder_steps:
        raise ValidationError(
            f"model rolls out {params.config.decoder_steps} decoder steps, "
            f"train config says {config.decoder_steps}"
        )
    labels = np.asarray(labels)
    t_len = len(sequence)
    if labels.shape[0] != t_len:
        raise ValidationError(f"got {labels.shape[0]} labels for {t_len} chunks")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValidationError(
            f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]"
        )

    def lift(v):
        if v is None:
            return None
        v = np.asarray(v, dtype=np.float64)
        return v.reshape(-1, 1) if v.ndim == 1 else v

    sequence = [
        ChunkStreams(appearance=lift(s.appearance), motion=lift(s.motion), pose=lift(s.pose))
        for s in sequence
    ]
    if labels.ndim == 1:
        labels = labels.reshape(-1, 1)
    batch = labels.shape[1]

    enc_logits, dec_logits, _, _ = md.forward_sequence_logits(params, sequence)
    enc_all = nm.concat_cols(enc_logits) if t_len > 1 else enc_logits[0]
    enc_labels = labels.reshape(-1)  # t-major, matching the concat order
    enc_sum = nm.cross_entropy_cols(nm.softmax(enc_all), enc_labels)
    total = nm.scale(enc_sum, config.lambda_enc / (t_len * batch))

    pairs = decoder_target_pairs(t_len, config.decoder_steps)
    if pairs:
        cols = [dec_logits[t][i - 1] for t, i in pairs]
        dec_all = nm.concat_cols(cols) if len(cols) > 1 else cols[0]
        dec_labels = np.concatenate([labels[t + i] for t, i in pairs])
        dec_sum = nm.cross_entropy_cols(nm.softmax(dec_all), dec_labels)
        total = nm.add(total, nm.scale(dec_sum, config.lambda_dec / (len(pairs) * batch)))
    return total


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def init(params: TrnParams) -> "AdamState":
        named = params.named()
        return AdamState(
            m={k: np.zeros_like(p.data) for k, p in named.items()},
            v={k: np.zeros_like(p.data) for k, p in named.items()},
        )


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(
    params: TrnParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> None:
    """One in-place Adam update with decoupled weight decay."""
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    for name, tensor in params.named().items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"non-finite gradient for parameter {name}")
        if g.shape != tensor.data.shape:
            raise ValidationError(
                f"gradient shape {g.shape} does not match parameter {name} {tensor.data.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        tensor.data -= config.learning_rate * update
        if config.weight_decay:
            tensor.data -= config.learning_rate * config.weight_decay * tensor.data


# ---------------------------------------------------------------------------
# dataset plumbing


@dataclass
class Window:
    """A training slice: per-stream (L, D) arrays plus (L,) labels."""

    streams: dict[str, np.ndarray]
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def load_split(
    manifest: dio.Manifest, cmap: dio.ClassMap, split: str
) -> list[tuple[str, dict[str, np.ndarray], np.ndarray]]:
    out = []
    for video in manifest.split(split):
        streams = dio.load_video_streams(manifest, video)
        labels, _ = dio.load_video_labels(manifest, video, cmap)
        out.append((video.video_id, streams, labels))
    return out


def make_windows(videos, seq_len: int) -> list[Window]:
    windows = []
    for _, streams, labels in videos:
        t = len(labels)
        for start in range(0, t, seq_len):
            end = min(start + seq_len, t)
            windows.append(
                Window(
                    streams={k: v[start:end] for k, v in streams.items()},
                    labels=labels[start:end],
                )
            )
    return windows


def _window_batch_sequence(batch: list[Window]) -> tuple[list[ChunkStreams], np.ndarray]:
    length = len(batch[0])
    names = batch[0].streams.keys()
    sequence = []
    for t in range(length):
        cols = {
            name: np.stack([w.streams[name][t] for w in batch], axis=1)
            for name in names
        }
        sequence.append(
            ChunkStreams(
                appearance=cols.get("appearance"),
                motion=cols.get("motion"),
                pose=cols.get("pose"),
            )
        )
    labels = np.stack([w.labels for w in batch], axis=1)
    return sequence, labels


def _streams_for_variant(streams: dict[str, np.ndarray], config: TrnConfig):
    """Drop streams the fusion variant does not consume."""
    keep = {"appearance", "motion", "pose"}
    if config.fusion_variant is FusionVariant.ONE_STREAM:
        keep = {config.one_stream_name}
    elif config.fusion_variant is FusionVariant.TWO_STREAM:
        keep = {"appearance", "motion"}
    missing = keep - streams.keys()
    if missing:
        raise ValidationError(f"dataset lacks streams {sorted(missing)} required by the variant")
    return {k: v for k, v in streams.items() if k in keep}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    heldout_map: float | None = None


def train(
    manifest: dio.Manifest,
    model_config: TrnConfig,
    train_config: TrainConfig,
    params: TrnParams | None = None,
    heldout_split: str = "test",
) -> tuple[TrnParams, list[EpochMetrics]]:
    """Train on the manifest's train split; deterministic given the seed."""
    rng = np.random.default_rng(train_config.seed)
    cmap = dio.read_class_map(manifest.resolve(manifest.class_map))
    if cmap.num_actions != model_config.num_actions:
        raise ValidationError(
            f"class map has {cmap.num_actions} actions, model expects {model_config.num_actions}"
        )
    if params is None:
        params = TrnParams.init(model_config, rng)
    adam = AdamState.init(params)

    train_videos = load_split(manifest, cmap, "train")
    if not train_videos:
        raise ValidationError("manifest has no train videos")
    train_videos = [
        (vid, _streams_for_variant(streams, model_config), labels)
        for vid, streams, labels in train_videos
    ]
    windows = make_windows(train_videos, train_config.seq_len)
    heldout = manifest.split(heldout_split)

    named = params.named()
    metrics: list[EpochMetrics] = []
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(len(windows))
        pending: dict[int, list[Window]] = {}
        batches: list[list[Window]] = []
        for idx in order:
            w = windows[idx]
            bucket = pending.setdefault(len(w), [])
            bucket.append(w)
            if len(bucket) == train_config.batch_size:
                batches.append(bucket.copy())
                bucket.clear()
        for length in sorted(pending):
            if pending[length]:
                batches.append(pending[length])

        losses = []
        for batch in batches:
            sequence, labels = _window_batch_sequence(batch)
            for p in named.values():
                p.zero_grad()
            loss = sequence_loss(params, train_config, sequence, labels)
            loss.backward()
            grads = {k: p.grad for k, p in named.items()}
            adam_step(params, grads, adam, train_config)
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))

        heldout_map = None
        if heldout and train_config.eval_every and epoch % train_config.eval_every == 0:
            dump = predict_manifest(params, manifest, heldout_split)
            gt = ev.GroundTruth(
                intervals=dio.read_annotations(
                    manifest.resolve(heldout[0].annotations)
                ),
                cmap=cmap,
            )
            heldout_map = ev.per_frame_map(dump, gt).mean_ap
        metrics.append(EpochMetrics(epoch=epoch, mean_loss=mean_loss, heldout_map=heldout_map))
        log.info(
            "epoch %d: loss %.4f%s",
            epoch,
            mean_loss,
            "" if heldout_map is None else f", held-out mAP {heldout_map:.4f}",
        )
    return params, metrics


def predict_manifest(
    params: TrnParams, manifest: dio.Manifest, split: str, group_size: int = 16
) -> ev.PredictionDump:
    """Batched whole-sequence inference over a manifest split."""
    cfg = params.config
    videos = manifest.split(split)
    dump = ev.PredictionDump(
        chunk_size=videos[0].chunk_size if videos else cfg.chunk_size,
        fps=videos[0].fps if videos else cfg.fps,
        decoder_steps=cfg.decoder_steps,
        classes=cfg.classes,
    )
    loaded = []
    for video in videos:
        streams = _streams_for_variant(dio.load_video_streams(manifest, video), cfg)
        loaded.append((video.video_id, streams))
    # group equal-length videos into column batches
    by_len: dict[int, list[tuple[str, dict]]] = {}
    for vid, streams in loaded:
        t = next(iter(streams.values())).shape[0]
        by_len.setdefault(t, []).append((vid, streams))
    for t_len, group in by_len.items():
        for at in range(0, len(group), group_size):
            part = group[at : at + group_size]
            names = part[0][1].keys()
            sequence = [
                ChunkStreams(
                    **{
                        name: np.stack([streams[name][t] for _, streams in part], axis=1)
                        if name in names
                        else None
                        for name in ("appearance", "motion", "pose")
                    }
                )
                for t in range(t_len)
            ]
            with nm.no_grad():
                enc_logits, dec_logits, _, _ = md.forward_sequence_logits(params, sequence)
                present = np.stack(
                    [nm.softmax(z).data for z in enc_logits], axis=0
                )  # (T, classes, B)
                anticipated = np.stack(
                    [
                        np.stack([nm.softmax(z).data for z in step_logits], axis=0)
                        for step_logits in dec_logits
                    ],
                    axis=0,
                )  # (T, steps, classes, B)
            for b, (vid, _) in enumerate(part):
                dump.videos[vid] = ev.VideoPredictions(
                    present=present[:, :, b].copy(),
                    anticipated=anticipated[:, :, :, b].copy(),
                )
    return dump


# ---------------------------------------------------------------------------
# checkpoints


CKPT_MAGIC = b"TRNC"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQ")


def _config_to_dict(config: TrnConfig) -> dict:
    return {
        "fusion_variant": config.fusion_variant.value,
        "appearance_dim": config.appearance_dim,
        "motion_dim": config.motion_dim,
        "pose_dim": config.pose_dim,
        "hidden_size": config.hidden_size,
        "decoder_steps": config.decoder_steps,
        "num_actions": config.num_actions,
        "seq_len": config.seq_len,
        "chunk_size": config.chunk_size,
        "fps": config.fps,
    }


def config_from_dict(doc: dict) -> TrnConfig:
    doc = dict(doc)
    doc["fusion_variant"] = FusionVariant(doc["fusion_variant"])
    return TrnConfig(**doc)


def save_checkpoint(
    path: str,
    params: TrnParams,
    adam: AdamState | None = None,
    meta: dict | None = None,
) -> None:
    """Versioned binary container; identical inputs give identical bytes."""
    named = params.named()
    index = [{"name": k, "shape": list(t.data.shape)} for k, t in named.items()]
    doc = {
        "config": _config_to_dict(params.config),
        "tensors": index,
        "adam": None if adam is None else {"t": adam.t},
        "meta": meta or {},
    }
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        f.write(blob)
        for k in named:
            f.write(named[k].data.astype("<f8").tobytes(order="C"))
        if adam is not None:
            for k in named:
                f.write(adam.m[k].astype("<f8").tobytes(order="C"))
            for k in named:
                f.write(adam.v[k].astype("<f8").tobytes(order="C"))


def load_checkpoint(path: str) -> tuple[TrnParams, AdamState | None, dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _CKPT_HEADER.size:
        raise TruncatedFileError(f"{path}: shorter than the checkpoint header")
    magic, version, json_len = _CKPT_HEADER.unpack(blob[: _CKPT_HEADER.size])
    if magic != CKPT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise HeaderError(f"{path}: unsupported checkpoint version {version}")
    at = _CKPT_HEADER.size
    if len(blob) < at + json_len:
        raise TruncatedFileError(f"{path}: truncated checkpoint index")
    try:
        doc = json.loads(blob[at : at + json_len])
    except json.JSONDecodeError as e:
        raise HeaderError(f"{path}: malformed checkpoint index: {e}") from e
    at += json_len
    config = config_from_dict(doc["config"])
    params = TrnParams.zeros(config)
    named = params.named()
    index = doc["tensors"]
    if [e["name"] for e in index] != list(named.keys()):
        raise HeaderError(f"{path}: tensor index does not match the architecture")

    def take(shape):
        nonlocal at
        n = int(np.prod(shape)) * 8
        if len(blob) < at + n:
            raise TruncatedFileError(f"{path}: truncated tensor payload")
        arr = np.frombuffer(blob[at : at + n], dtype="<f8").reshape(shape).copy()
        at += n
        return arr

    for entry in index:
        target = named[entry["name"]]
        if list(target.data.shape) != entry["shape"]:
            raise HeaderError(
                f"{path}: tensor {entry['name']} has shape {entry['shape']}, "
                f"architecture expects {list(target.data.shape)}"
            )
        target.data = take(entry["shape"])
    adam = None
    if doc["adam"] is not None:
        adam = AdamState(
            m={e["name"]: take(e["shape"]) for e in index},
            v={e["name"]: take(e["shape"]) for e in index},
            t=int(doc["adam"]["t"]),
        )
    if at != len(blob):
        raise HeaderError(f"{path}: {len(blob) - at} bytes of trailing data")
    return params, adam, doc.get("meta", {})
