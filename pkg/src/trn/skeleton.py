"""2D skeleton ingestion and normalization for the pose feature stream.

Keypoint layout is BODY_25 plus two 21-point hands: 25 + 21 + 21 = 67
keypoints per person, emitted as a 134-dim vector of normalized (x, y)
pairs. Coordinates are re-expressed relative to the pelvis (MidHip) and
scaled by the pelvis-to-shoulder-midpoint distance, which cancels camera
translation and zoom. Confidence values gate which keypoints count as
detected but are not part of the feature.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .numeric import ValidationError

BODY_POINTS = 25
HAND_POINTS = 21
TOTAL_POINTS = BODY_POINTS + 2 * HAND_POINTS  # 67
FEATURE_DIM = 2 * TOTAL_POINTS  # 134

# BODY_25 indices used by the normalization
NOSE = 0
RSHOULDER = 2
LSHOULDER = 5
MIDHIP = 8

# below this pelvis-to-shoulder distance (pixels) a pose is degenerate
MIN_SCALE = 1e-6


@dataclass(frozen=True)
class Person:
    """One detected person: (67, 3) array of x, y, confidence rows."""

    keypoints: np.ndarray

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64)
        if kp.shape != (TOTAL_POINTS, 3):
            raise ValidationError(
                f"person keypoints must be ({TOTAL_POINTS}, 3), got {kp.shape}"
            )
        conf = kp[:, 2]
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValidationError("keypoint confidences must lie in [0, 1]")
        object.__setattr__(self, "keypoints", kp)

    def confidence_sum(self) -> float:
        return float(self.keypoints[:, 2].sum())


@dataclass(frozen=True)
class PoseFrame:
    people: list[Person]


def select_actor(frame: PoseFrame) -> Person | None:
    """Pick the person with the highest total keypoint confidence.

    Ties go to the earliest-listed person; empty frames give None.
    """
    best = None
    best_sum = -1.0
    for person in frame.people:
        s = person.confidence_sum()
        if s > best_sum:
            best, best_sum = person, s
    return best


def normalize_pose(person: Person) -> np.ndarray | None:
    """134-dim normalized coordinates, or None for a degenerate pose.

    Degenerate means: MidHip undetected, both shoulders undetected, or the
    pelvis-to-shoulder-midpoint distance is below MIN_SCALE. Undetected
    keypoints (confidence 0) map to exact (0, 0) pairs.
    """
    kp = person.keypoints
    conf = kp[:, 2]
    if conf[MIDHIP] == 0:
        return None
    shoulders = [i for i in (RSHOULDER, LSHOULDER) if conf[i] > 0]
    if not shoulders:
        return None
    center = kp[MIDHIP, :2]
    mid_shoulder = kp[shoulders, :2].mean(axis=0)
    s = float(np.linalg.norm(mid_shoulder - center))
    if s < MIN_SCALE:
        return None
    out = (kp[:, :2] - center) / s
    out[conf == 0] = 0.0
    return out.reshape(-1)


def pose_feature_or_zero(person: Person | None) -> np.ndarray:
    if person is not None:
        feat = normalize_pose(person)
        if feat is not None:
            return feat
    return np.zeros(FEATURE_DIM)


def pose_chunk_feature(frames: list[PoseFrame]) -> np.ndarray:
    """Per-chunk pose vector: the center frame's normalized pose.

    Falls back to the nearest frame in the chunk with a valid pose
    (earlier frame wins a distance tie), else the zero vector.
    """
    if not frames:
        raise ValidationError("pose_chunk_feature needs at least one frame")
    center = len(frames) // 2
    order = sorted(range(len(frames)), key=lambda j: (abs(j - center), j))
    for j in order:
        actor = select_actor(frames[j])
        if actor is None:
            continue
        feat = normalize_pose(actor)
        if feat is not None:
            return feat
    return np.zeros(FEATURE_DIM)


def pose_chunk_matrix(frames: list[PoseFrame], chunk_size: int, num_chunks: int) -> np.ndarray:
    """Stack per-chunk pose features for a whole video: (num_chunks, 134).

    Chunks past the end of the frame list get zero vectors.
    """
    if chunk_size < 1:
        raise ValidationError(f"chunk_size must be >= 1, got {chunk_size}")
    out = np.zeros((num_chunks, FEATURE_DIM))
    for t in range(num_chunks):
        block = frames[t * chunk_size : (t + 1) * chunk_size]
        if block:
            out[t] = pose_chunk_feature(block)
    return out


# ---------------------------------------------------------------------------
# per-frame keypoint files (OpenPose-style JSON)


def _person_from_flat(pose, left, right) -> Person:
    parts = []
    for name, flat, n in (
        ("pose_keypoints_2d", pose, BODY_POINTS),
        ("hand_left_keypoints_2d", left, HAND_POINTS),
        ("hand_right_keypoints_2d", right, HAND_POINTS),
    ):
        arr = np.asarray(flat, dtype=np.float64)
        if arr.shape != (3 * n,):
            raise ValidationError(f"{name} must hold {3 * n} numbers, got {arr.size}")
        parts.append(arr.reshape(n, 3))
    return Person(np.concatenate(parts, axis=0))


def person_to_dict(person: Person) -> dict:
    kp = person.keypoints
    return {
        "pose_keypoints_2d": kp[:BODY_POINTS].reshape(-1).tolist(),
        "hand_left_keypoints_2d": kp[BODY_POINTS : BODY_POINTS + HAND_POINTS].reshape(-1).tolist(),
        "hand_right_keypoints_2d": kp[BODY_POINTS + HAND_POINTS :].reshape(-1).tolist(),
    }


def frame_from_dict(doc: dict) -> PoseFrame:
    people = doc.get("people")
    if not isinstance(people, list):
        raise ValidationError("keypoint document must hold a 'people' list")
    out = []
    for entry in people:
        out.append(
            _person_from_flat(
                entry.get("pose_keypoints_2d", []),
                entry.get("hand_left_keypoints_2d", []),
                entry.get("hand_right_keypoints_2d", []),
            )
        )
    return PoseFrame(out)


def frame_to_dict(frame: PoseFrame) -> dict:
    return {"people": [person_to_dict(p) for p in frame.people]}


def keypoint_filename(video_id: str, frame_index: int) -> str:
    return f"{video_id}_{frame_index:012d}_keypoints.json"


def read_pose_frame(path: str) -> PoseFrame:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(f"malformed keypoint file {path}: {e}") from e
    return frame_from_dict(doc)


def write_pose_frame(path: str, frame: PoseFrame) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(frame_to_dict(frame), f)


def read_video_poses(directory: str, video_id: str) -> list[PoseFrame]:
    """Load all `<video_id>_<frame 12 digits>_keypoints.json` files in order.

    Frame indices must start at 0 and be contiguous.
    """
    frames = []
    idx = 0
    while True:
        path = os.path.join(directory, keypoint_filename(video_id, idx))
        if not os.path.exists(path):
            break
        frames.append(read_pose_frame(path))
        idx += 1
    return frames
