"""Per-frame mAP for detection, horizon-indexed mAP for anticipation,
and fixed-width report tables.

Average precision is non-interpolated: samples are ranked by score and AP
is the mean of precision-at-rank over the positives. Ties are pinned down
deterministically by permuting the pool with a fixed-seed shuffle before
a stable descending sort, so equal scores cannot leak input-order bias.

Evaluation granularity is the chunk: the model emits one distribution per
chunk, so each chunk contributes one sample to its class pools. The
`expand_to_frames` flag replicates every chunk sample chunk_size times
for comparison against per-frame protocols; ranking inside a pool is
unchanged, only pool sizes scale.

Anticipation scoring shifts the target: the distribution emitted at chunk
t for decoder step i is scored against the label of chunk t + i, and
pairs that run past the video end are dropped.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import dataio as dio
from .numeric import ValidationError

log = logging.getLogger(__name__)


def average_precision(scores, positives) -> float:
    """Non-interpolated AP of one ranked pool.

    scores: N reals; positives: N booleans with at least one True.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.ndim != 1 or scores.shape != positives.shape:
        raise ValidationError(
            f"scores and positives must be equal-length vectors, got {scores.shape} vs {positives.shape}"
        )
    if scores.size == 0 or not positives.any():
        raise ValidationError("average_precision needs at least one positive sample")
    # fixed-seed shuffle then stable sort: deterministic tie handling
    perm = np.random.default_rng(0).permutation(scores.size)
    order = perm[np.argsort(-scores[perm], kind="stable")]
    ranked = positives[order]
    tp = np.cumsum(ranked)
    ranks = np.arange(1, scores.size + 1)
    return float((tp[ranked] / ranks[ranked]).mean())


@dataclass
class VideoPredictions:
    """One video's outputs: present (T, classes), anticipated (T, steps, classes)."""

    present: np.ndarray
    anticipated: np.ndarray

    @property
    def num_chunks(self) -> int:
        return self.present.shape[0]


@dataclass
class PredictionDump:
    chunk_size: int
    fps: float
    decoder_steps: int
    classes: int
    videos: dict[str, VideoPredictions] = field(default_factory=dict)


@dataclass
class GroundTruth:
    intervals: dict[str, list[dio.Interval]]
    cmap: dio.ClassMap


@dataclass
class EvalResult:
    mean_ap: float
    per_class: dict[str, float]
    skipped: list[str]


def _video_pools(dump: PredictionDump, gt: GroundTruth, step: int | None):
    """Yield (scores (N, classes), labels (N,)) per video, ambiguous
    chunks removed and anticipation shift applied when step is given."""
    for video_id, pred in dump.videos.items():
        rows = gt.intervals.get(video_id, [])
        actions = [
            (gt.cmap.index_of(iv.class_name), iv.start, iv.end)
            for iv in rows
            if iv.class_name != dio.AMBIGUOUS
        ]
        ambiguous = [(iv.start, iv.end) for iv in rows if iv.class_name == dio.AMBIGUOUS]
        t = pred.num_chunks
        labels = dio.chunk_labels(actions, dump.fps, dump.chunk_size, t)
        excluded = dio.interval_chunk_mask(ambiguous, dump.fps, dump.chunk_size, t)
        if step is None:
            scores = pred.present
            keep = ~excluded
            yield scores[keep], labels[keep]
        else:
            if not (1 <= step <= dump.decoder_steps):
                raise ValidationError(
                    f"step must lie in [1, {dump.decoder_steps}], got {step}"
                )
            if t <= step:
                continue  # every target falls off the video end
            scores = pred.anticipated[: t - step, step - 1, :]
            target_labels = labels[step:]
            keep = ~excluded[step:]
            yield scores[keep], target_labels[keep]


def _pooled_map(
    dump: PredictionDump, gt: GroundTruth, step: int | None, expand_to_frames: bool
) -> EvalResult:
    pools = list(_video_pools(dump, gt, step))
    if pools:
        all_scores = np.concatenate([s for s, _ in pools], axis=0)
        all_labels = np.concatenate([l for _, l in pools], axis=0)
    else:
        all_scores = np.zeros((0, dump.classes))
        all_labels = np.zeros(0, dtype=np.int64)
    if expand_to_frames:
        all_scores = np.repeat(all_scores, dump.chunk_size, axis=0)
        all_labels = np.repeat(all_labels, dump.chunk_size, axis=0)
    per_class: dict[str, float] = {}
    skipped: list[str] = []
    for cls in range(1, len(gt.cmap.names)):
        name = gt.cmap.names[cls]
        positives = all_labels == cls
        if not positives.any():
            skipped.append(name)
            log.warning("class %s has no positive samples; skipped", name)
            continue
        per_class[name] = average_precision(all_scores[:, cls], positives)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalResult(mean_ap=mean, per_class=per_class, skipped=skipped)


def per_frame_map(
    dump: PredictionDump, gt: GroundTruth, expand_to_frames: bool = False
) -> EvalResult:
    """Detection mAP: one pooled ranking per action class across videos."""
    return _pooled_map(dump, gt, None, expand_to_frames)


def anticipation_map(
    dump: PredictionDump, gt: GroundTruth, step: int, expand_to_frames: bool = False
) -> EvalResult:
    """Anticipation mAP at decoder step `step` (1-based)."""
    return _pooled_map(dump, gt, step, expand_to_frames)


# ---------------------------------------------------------------------------
# report rendering


def render_report(
    encoder_map: float,
    step_maps: list[float],
    chunk_size: int = 6,
    fps: float = 30,
) -> str:
    """Fixed-width results table, values in percent.

    Inputs are fractions in [0, 1]. Horizon columns carry two headers:
    the arithmetic lookahead of each decoder step (step * chunk_size /
    fps) and the conventional 0.25 s presentation grid. "Avg" is the
    arithmetic mean of the step columns.
    """
    steps = len(step_maps)
    width = 8
    label_w = 12

    def row(label, cells):
        return label.ljust(label_w) + "".join(c.rjust(width) for c in cells) + "\n"

    avg = float(np.mean(step_maps)) if step_maps else 0.0
    lines = ""
    lines += row(
        "horizon (s)", [""] + [f"{(i + 1) * chunk_size / fps:.2f}" for i in range(steps)] + [""]
    )
    lines += row("grid (s)", [""] + [f"{0.25 * (i + 1):.2f}" for i in range(steps)] + [""])
    lines += row("", ["Encoder"] + [f"step {i + 1}" for i in range(steps)] + ["Avg"])
    lines += row(
        "mAP (%)",
        [f"{100 * encoder_map:.2f}"]
        + [f"{100 * v:.2f}" for v in step_maps]
        + [f"{100 * avg:.2f}"],
    )
    return lines


# ---------------------------------------------------------------------------
# prediction dump files (JSON lines)


def write_prediction_dump(path: str, dump: PredictionDump) -> None:
    with open(path, "w", encoding="utf-8") as f:
        header = {
            "type": "config",
            "chunk_size": dump.chunk_size,
            "fps": dump.fps,
            "decoder_steps": dump.decoder_steps,
            "classes": dump.classes,
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for video_id, pred in dump.videos.items():
            for t in range(pred.num_chunks):
                record = {
                    "type": "chunk",
                    "video": video_id,
                    "chunk": t,
                    "present": pred.present[t].tolist(),
                    "anticipated": pred.anticipated[t].tolist(),
                }
                f.write(json.dumps(record, sort_keys=True) + "\n")


def read_prediction_dump(path: str) -> PredictionDump:
    rows: dict[str, list[tuple[int, list, list]]] = {}
    header = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise dio.FormatError(f"{path}:{lineno}: malformed JSON: {e}") from e
            if doc.get("type") == "config":
                header = doc
            elif doc.get("type") == "chunk":
                rows.setdefault(doc["video"], []).append(
                    (doc["chunk"], doc["present"], doc["anticipated"])
                )
            else:
                raise dio.FormatError(f"{path}:{lineno}: unknown record type {doc.get('type')!r}")
    if header is None:
        raise dio.FormatError(f"{path}: missing config record")
    dump = PredictionDump(
        chunk_size=int(header["chunk_size"]),
        fps=float(header["fps"]),
        decoder_steps=int(header["decoder_steps"]),
        classes=int(header["classes"]),
    )
    for video_id, chunks in rows.items():
        chunks.sort(key=lambda r: r[0])
        if [c for c, _, _ in chunks] != list(range(len(chunks))):
            raise dio.FormatError(f"{path}: {video_id} chunk indices are not contiguous from 0")
        present = np.array([p for _, p, _ in chunks], dtype=np.float64)
        anticipated = np.array([a for _, _, a in chunks], dtype=np.float64)
        if present.shape[1] != dump.classes:
            raise dio.FormatError(
                f"{path}: {video_id} distributions have {present.shape[1]} entries, "
                f"config declares {dump.classes}"
            )
        if anticipated.shape[1:] != (dump.decoder_steps, dump.classes):
            raise dio.FormatError(
                f"{path}: {video_id} anticipated block is {anticipated.shape[1:]}, "
                f"expected ({dump.decoder_steps}, {dump.classes})"
            )
        dump.videos[video_id] = VideoPredictions(present=present, anticipated=anticipated)
    return dump


def ground_truth_from_files(annotations_path: str, class_map_path: str) -> GroundTruth:
    return GroundTruth(
        intervals=dio.read_annotations(annotations_path),
        cmap=dio.read_class_map(class_map_path),
    )
