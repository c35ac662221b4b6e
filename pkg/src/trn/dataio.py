"""File formats and synthetic data.

Feature files are a small binary container (magic "TRNF"): header of four
little-endian u32 fields (magic, version, chunk count T, dimension D)
followed by T*D float32 values, row-major. Values are widened to float64
on load; widening is lossless so write-then-read is bit-exact.

Datasets are described by a JSON manifest listing per-video stream files,
dims, split tags, and annotation references. Annotations are TSV rows of
(video id, class name, start seconds, end seconds); class indices come
from a separate tab-separated class map with background at index 0.

The synthetic generator builds alternating background/action segments
with geometric lengths, Gaussian per-class feature means for the
appearance/motion streams, and synthetic skeletons (a fixed template
deformed per class) rendered through the real pose-normalization pipeline
for the pose stream.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import skeleton as sk
from .numeric import ValidationError

log = logging.getLogger(__name__)

MAGIC = b"TRNF"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIII")

AMBIGUOUS = "Ambiguous"
BACKGROUND_NAME = "Background"


class FormatError(ValueError):
    """A file does not conform to its on-disk format."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class TrailingDataError(FormatError):
    pass


class HeaderError(FormatError):
    pass


class NonFiniteValueError(FormatError):
    pass


# ---------------------------------------------------------------------------
# feature files


def write_features(path: str, data: np.ndarray) -> None:
    """Write a (T, D) feature array as a TRNF file (stored as float32)."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"features must be a nonempty (T, D) array, got {arr.shape}")
    with np.errstate(over="ignore"):  # overflow is reported as ValidationError
        payload = arr.astype("<f4")
    if not np.all(np.isfinite(payload)):
        raise ValidationError("features contain non-finite values after float32 cast")
    t, d = arr.shape
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, FORMAT_VERSION, t, d))
        f.write(payload.tobytes(order="C"))


def read_feature_header(path: str) -> tuple[int, int]:
    """Return (T, D) from a TRNF header without loading the payload."""
    with open(path, "rb") as f:
        head = f.read(HEADER.size)
    if len(head) < HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, version, t, d = HEADER.unpack(head)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise HeaderError(f"{path}: unsupported format version {version}")
    if t < 1 or d < 1:
        raise HeaderError(f"{path}: header declares empty shape ({t}, {d})")
    return t, d


def read_features(path: str) -> np.ndarray:
    """Load a TRNF file as a float64 (T, D) array."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, version, t, d = HEADER.unpack(blob[: HEADER.size])
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise HeaderError(f"{path}: unsupported format version {version}")
    if t < 1 or d < 1:
        raise HeaderError(f"{path}: header declares empty shape ({t}, {d})")
    expected = t * d * 4
    actual = len(blob) - HEADER.size
    if actual < expected:
        raise TruncatedFileError(
            f"{path}: payload holds {actual} bytes, header declares {expected}"
        )
    if actual > expected:
        raise TrailingDataError(
            f"{path}: {actual - expected} bytes of trailing data after the payload"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=HEADER.size).reshape(t, d)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValueError(f"{path}: payload contains non-finite values")
    return values.astype(np.float64)


# ---------------------------------------------------------------------------
# class map / annotations


@dataclass(frozen=True)
class ClassMap:
    """Index-to-name table; index 0 is always the background class."""

    names: list[str]

    def __post_init__(self):
        if len(self.names) < 2:
            raise ValidationError("class map needs background plus at least one action")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("class map has duplicate names")

    @property
    def num_actions(self) -> int:
        return len(self.names) - 1

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown class name {name!r}") from None


def write_class_map(path: str, cmap: ClassMap) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, name in enumerate(cmap.names):
            f.write(f"{i}\t{name}\n")


def read_class_map(path: str) -> ClassMap:
    names = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[0] != str(lineno):
                raise FormatError(f"{path}:{lineno + 1}: expected '<index>\\t<name>' rows in order")
            names.append(parts[1])
    return ClassMap(names)


@dataclass(frozen=True)
class Interval:
    class_name: str
    start: float
    end: float

    def __post_init__(self):
        if not (self.start < self.end):
            raise ValidationError(
                f"interval start must precede end, got [{self.start}, {self.end})"
            )


def write_annotations(path: str, rows: dict[str, list[Interval]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for video_id in rows:
            for iv in rows[video_id]:
                f.write(f"{video_id}\t{iv.class_name}\t{iv.start!r}\t{iv.end!r}\n")


def read_annotations(path: str) -> dict[str, list[Interval]]:
    out: dict[str, list[Interval]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
            video_id, name, start_s, end_s = parts
            try:
                iv = Interval(name, float(start_s), float(end_s))
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from e
            out.setdefault(video_id, []).append(iv)
    return out


# ---------------------------------------------------------------------------
# chunk labeling


def chunk_labels(
    intervals: list[tuple[int, float, float]], fps: float, chunk_size: int, num_chunks: int
) -> np.ndarray:
    """Assign one class index per chunk.

    A chunk takes the class of the interval covering its center timestamp
    (t + 0.5) * chunk_size / fps, intervals half-open [start, end). When
    several intervals cover a center, the earliest-starting one wins.
    Uncovered chunks are background (0).
    """
    if chunk_size < 1 or num_chunks < 0 or fps <= 0:
        raise ValidationError("chunk_labels needs chunk_size >= 1, num_chunks >= 0, fps > 0")
    horizon = num_chunks * chunk_size / fps
    cleaned = []
    for cls, start, end in intervals:
        if not (start < end):
            raise ValidationError(f"interval start must precede end, got [{start}, {end})")
        if start < 0 or end > horizon:
            log.warning(
                "interval [%s, %s) clipped to the video span [0, %s)", start, end, horizon
            )
            start, end = max(start, 0.0), min(end, horizon)
            if not (start < end):
                continue
        cleaned.append((cls, start, end))
    cleaned.sort(key=lambda iv: iv[1])
    labels = np.zeros(num_chunks, dtype=np.int64)
    duration = chunk_size / fps
    for t in range(num_chunks):
        center = (t + 0.5) * duration
        for cls, start, end in cleaned:
            if start <= center < end:
                labels[t] = cls
                break
    return labels


def interval_chunk_mask(
    intervals: list[tuple[float, float]], fps: float, chunk_size: int, num_chunks: int
) -> np.ndarray:
    """Boolean mask of chunks whose center falls inside any interval."""
    mask = np.zeros(num_chunks, dtype=bool)
    duration = chunk_size / fps
    for start, end in intervals:
        for t in range(num_chunks):
            center = (t + 0.5) * duration
            if start <= center < end:
                mask[t] = True
    return mask


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class StreamRef:
    path: str
    dim: int


@dataclass(frozen=True)
class VideoEntry:
    video_id: str
    fps: float
    chunk_size: int
    split: str
    streams: dict[str, StreamRef]
    annotations: str
    num_chunks: int


@dataclass(frozen=True)
class Manifest:
    root: str
    class_map: str
    videos: list[VideoEntry]

    def resolve(self, rel: str) -> str:
        return os.path.join(self.root, rel)

    def split(self, tag: str) -> list[VideoEntry]:
        return [v for v in self.videos if v.split == tag]


def save_manifest(path: str, manifest: Manifest) -> None:
    doc = {
        "class_map": manifest.class_map,
        "videos": [
            {
                "id": v.video_id,
                "fps": v.fps,
                "chunk_size": v.chunk_size,
                "split": v.split,
                "annotations": v.annotations,
                "streams": {
                    name: {"path": ref.path, "dim": ref.dim}
                    for name, ref in sorted(v.streams.items())
                },
            }
            for v in manifest.videos
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_manifest(path: str) -> Manifest:
    """Parse and validate a manifest.

    Every referenced feature file must exist with a header matching the
    declared dimension. Streams of one video must agree on chunk count;
    an off-by-one tail is tolerated (effective count = minimum, with a
    warning), anything worse is an error.
    """
    root = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed manifest JSON: {e}") from e
    if not isinstance(doc, dict) or "videos" not in doc:
        raise FormatError(f"{path}: manifest must be an object with a 'videos' list")
    videos = []
    for entry in doc["videos"]:
        streams = {}
        counts = {}
        for name, ref in entry["streams"].items():
            full = os.path.join(root, ref["path"])
            t, d = read_feature_header(full)
            if d != ref["dim"]:
                raise ValidationError(
                    f"{entry['id']}/{name}: file dim {d} != declared dim {ref['dim']}"
                )
            streams[name] = StreamRef(ref["path"], int(ref["dim"]))
            counts[name] = t
        if not counts:
            raise ValidationError(f"{entry['id']}: no streams")
        lo, hi = min(counts.values()), max(counts.values())
        if hi - lo > 1:
            raise ValidationError(
                f"{entry['id']}: stream chunk counts disagree by more than one: {counts}"
            )
        if hi != lo:
            log.warning("%s: stream chunk counts %s truncated to %d", entry["id"], counts, lo)
        videos.append(
            VideoEntry(
                video_id=entry["id"],
                fps=float(entry["fps"]),
                chunk_size=int(entry["chunk_size"]),
                split=entry["split"],
                streams=streams,
                annotations=entry["annotations"],
                num_chunks=lo,
            )
        )
    return Manifest(root=root, class_map=doc.get("class_map", ""), videos=videos)


def load_video_streams(manifest: Manifest, video: VideoEntry) -> dict[str, np.ndarray]:
    """Load all streams of one video, truncated to its effective length."""
    out = {}
    for name, ref in video.streams.items():
        data = read_features(manifest.resolve(ref.path))
        out[name] = data[: video.num_chunks]
    return out


def load_video_labels(
    manifest: Manifest, video: VideoEntry, cmap: ClassMap
) -> tuple[np.ndarray, np.ndarray]:
    """Per-chunk labels and an ambiguous-chunk mask for one video."""
    rows = read_annotations(manifest.resolve(video.annotations)).get(video.video_id, [])
    actions = [
        (cmap.index_of(iv.class_name), iv.start, iv.end)
        for iv in rows
        if iv.class_name != AMBIGUOUS
    ]
    ambiguous = [(iv.start, iv.end) for iv in rows if iv.class_name == AMBIGUOUS]
    labels = chunk_labels(actions, video.fps, video.chunk_size, video.num_chunks)
    mask = interval_chunk_mask(ambiguous, video.fps, video.chunk_size, video.num_chunks)
    return labels, mask


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 3
    appearance_dim: int = 16
    motion_dim: int = 16
    sigma_ratio: float = 0.2
    mean_segment_len: int = 8
    background_prior: float = 0.5
    num_videos: int = 20
    video_len: int = 64
    train_fraction: float = 0.8
    chunk_size: int = 6
    fps: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if self.appearance_dim < 1 or self.motion_dim < 1:
            raise ValidationError("stream dims must be >= 1")
        if self.sigma_ratio < 0:
            raise ValidationError("sigma_ratio must be >= 0")
        if self.mean_segment_len < 1:
            raise ValidationError("mean_segment_len must be >= 1")
        if not (0.0 <= self.background_prior <= 1.0):
            raise ValidationError("background_prior must lie in [0, 1]")
        if self.num_videos < 1 or self.video_len < 1:
            raise ValidationError("num_videos and video_len must be >= 1")
        if not (0.0 <= self.train_fraction <= 1.0):
            raise ValidationError("train_fraction must lie in [0, 1]")


def _segment_labels(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Alternating background/action segments with geometric lengths."""
    labels = np.zeros(spec.video_len, dtype=np.int64)
    if spec.background_prior >= 1.0:
        return labels
    p_action = min(1.0, 1.0 / spec.mean_segment_len)
    if spec.background_prior <= 0.0:
        p_background = None  # zero-length background segments
    else:
        bg_mean = spec.mean_segment_len * spec.background_prior / (1.0 - spec.background_prior)
        p_background = min(1.0, 1.0 / max(bg_mean, 1.0))
    pos = 0
    in_background = True
    while pos < spec.video_len:
        if in_background:
            length = 0 if p_background is None else int(rng.geometric(p_background))
        else:
            length = int(rng.geometric(p_action))
            cls = int(rng.integers(1, spec.num_classes + 1))
            labels[pos : pos + length] = cls
        pos += length
        in_background = not in_background
    return labels


def _labels_to_intervals(labels: np.ndarray, chunk_duration: float) -> list[Interval]:
    out = []
    t = 0
    n = len(labels)
    while t < n:
        if labels[t] == 0:
            t += 1
            continue
        start = t
        while t < n and labels[t] == labels[start]:
            t += 1
        out.append(
            Interval(f"class_{labels[start]}", start * chunk_duration, t * chunk_duration)
        )
    return out


_POSE_ANCHORS = {
    # plausible standing-person template, pixel units (BODY_25 indices)
    0: (320, 110),  # nose
    1: (320, 160),  # neck
    2: (285, 165),  # r shoulder
    3: (270, 215),  # r elbow
    4: (262, 262),  # r wrist
    5: (355, 165),  # l shoulder
    6: (370, 215),  # l elbow
    7: (378, 262),  # l wrist
    8: (320, 300),  # mid hip
    9: (300, 302),  # r hip
    10: (298, 380),  # r knee
    11: (296, 455),  # r ankle
    12: (340, 302),  # l hip
    13: (342, 380),  # l knee
    14: (344, 455),  # l ankle
    15: (312, 102),  # r eye
    16: (328, 102),  # l eye
    17: (303, 112),  # r ear
    18: (337, 112),  # l ear
    19: (350, 470),  # l big toe
    20: (354, 472),  # l small toe
    21: (340, 468),  # l heel
    22: (290, 470),  # r big toe
    23: (286, 472),  # r small toe
    24: (300, 468),  # r heel
}


def _pose_template() -> np.ndarray:
    """Fixed 67-keypoint template: BODY_25 anchors plus hand clusters."""
    kp = np.zeros((sk.TOTAL_POINTS, 2))
    for idx, (x, y) in _POSE_ANCHORS.items():
        kp[idx] = (x, y)
    # hands fan out around the wrists on a small fixed grid
    grid = np.stack(
        [np.repeat(np.arange(-3, 4), 3)[:21], np.tile(np.arange(-1, 2), 7)[:21]], axis=1
    )
    kp[sk.BODY_POINTS : sk.BODY_POINTS + sk.HAND_POINTS] = kp[7] + 2.5 * grid
    kp[sk.BODY_POINTS + sk.HAND_POINTS :] = kp[4] + 2.5 * grid
    return kp


# keypoints a class gesture displaces: elbows, wrists, both hands
_GESTURE_POINTS = np.concatenate([[3, 4, 6, 7], np.arange(sk.BODY_POINTS, sk.TOTAL_POINTS)])


def _synthetic_pose_frames(
    labels: np.ndarray,
    chunk_size: int,
    gestures: np.ndarray,
    sigma: float,
    rng: np.random.Generator,
) -> list[sk.PoseFrame]:
    """One skeleton per frame: template + class gesture + noise, under a
    random per-video translation and zoom (which normalization removes)."""
    template = _pose_template()
    shift = rng.uniform(-80, 80, size=2)
    zoom = rng.uniform(0.6, 1.6)
    frames = []
    for label in labels:
        for _ in range(chunk_size):
            kp = template + rng.normal(scale=sigma, size=template.shape)
            kp[_GESTURE_POINTS] += gestures[label]
            xy = (kp + shift) * zoom
            person = np.ones((sk.TOTAL_POINTS, 3))
            person[:, :2] = xy
            frames.append(sk.PoseFrame([sk.Person(person)]))
    return frames


def generate_synthetic(spec: SyntheticSpec, out_dir: str) -> str:
    """Write a synthetic dataset under out_dir; returns the manifest path.

    Deterministic: the same spec (seed included) produces identical bytes.
    """
    rng = np.random.default_rng(spec.seed)
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)

    k = spec.num_classes
    # per-class feature means: distinct unit vectors per stream, background
    # included so idle stretches have their own signature
    def class_means(dim):
        m = rng.normal(size=(k + 1, dim))
        return m / np.linalg.norm(m, axis=1, keepdims=True)

    app_means = class_means(spec.appearance_dim)
    mot_means = class_means(spec.motion_dim)
    # class gestures displace arm/hand keypoints by ~a third of torso height
    gestures = np.zeros((k + 1, 2))
    gestures[1:] = 45.0 * np.stack(
        [
            np.cos(2 * np.pi * np.arange(k) / k),
            np.sin(2 * np.pi * np.arange(k) / k) - 0.5,
        ],
        axis=1,
    )
    pose_sigma = 2.0 + 20.0 * spec.sigma_ratio

    cmap = ClassMap([BACKGROUND_NAME] + [f"class_{c}" for c in range(1, k + 1)])
    write_class_map(os.path.join(out_dir, "classes.tsv"), cmap)

    chunk_duration = spec.chunk_size / spec.fps
    n_train = int(round(spec.num_videos * spec.train_fraction))
    annotations: dict[str, list[Interval]] = {}
    videos = []
    for v in range(spec.num_videos):
        video_id = f"synth_{v:04d}"
        labels = _segment_labels(spec, rng)
        annotations[video_id] = _labels_to_intervals(labels, chunk_duration)

        t = spec.video_len
        app = app_means[labels] + rng.normal(scale=spec.sigma_ratio, size=(t, spec.appearance_dim))
        mot = mot_means[labels] + rng.normal(scale=spec.sigma_ratio, size=(t, spec.motion_dim))
        frames = _synthetic_pose_frames(labels, spec.chunk_size, gestures, pose_sigma, rng)
        pose = sk.pose_chunk_matrix(frames, spec.chunk_size, t)

        streams = {}
        for name, data in (("appearance", app), ("motion", mot), ("pose", pose)):
            rel = os.path.join("features", f"{video_id}_{name}.trnf")
            write_features(os.path.join(out_dir, rel), data)
            streams[name] = StreamRef(rel, data.shape[1])
        videos.append(
            VideoEntry(
                video_id=video_id,
                fps=spec.fps,
                chunk_size=spec.chunk_size,
                split="train" if v < n_train else "test",
                streams=streams,
                annotations="annotations.tsv",
                num_chunks=t,
            )
        )

    write_annotations(os.path.join(out_dir, "annotations.tsv"), annotations)
    manifest = Manifest(root=os.path.abspath(out_dir), class_map="classes.tsv", videos=videos)
    manifest_path = os.path.join(out_dir, "manifest.json")
    save_manifest(manifest_path, manifest)
    return manifest_path
