"""COCO-17 pose skeletons: distances, visibility tests, and the PCKh metric.

Coordinates are in pixels, confidences in [0, 1]. A joint counts as visible
when its confidence is >= the visibility threshold (default 0.3).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

# COCO keypoint ordering.
NOSE = 0
LEFT_EYE = 1
RIGHT_EYE = 2
LEFT_EAR = 3
RIGHT_EAR = 4
LEFT_SHOULDER = 5
RIGHT_SHOULDER = 6
LEFT_ELBOW = 7
RIGHT_ELBOW = 8
LEFT_WRIST = 9
RIGHT_WRIST = 10
LEFT_HIP = 11
RIGHT_HIP = 12
LEFT_KNEE = 13
RIGHT_KNEE = 14
LEFT_ANKLE = 15
RIGHT_ANKLE = 16

NUM_KEYPOINTS = 17
FLAT_POSE_DIM = 3 * NUM_KEYPOINTS  # (x, y, confidence) per joint

KEYPOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)

# Limb segments between keypoint indices, used for overlays.
SKELETON_EDGES = (
    (0, 1), (0, 2), (1, 3), (2, 4), (5, 7), (7, 9), (6, 8), (8, 10),
    (5, 6), (5, 11), (6, 12), (11, 13), (12, 14), (13, 15), (14, 16),
)

DEFAULT_VISIBILITY_THRESHOLD = 0.3
# Literal majority of 17 joints.
DEFAULT_MAJORITY_COUNT = 9


class MissingJoints(ValueError):
    """A joint required by the computation is below the visibility threshold."""


class NoCommonJoints(ValueError):
    """No joint is visible in both skeletons being compared."""


@dataclass(frozen=True)
class Keypoint:
    """One 2D joint: pixel position plus detector confidence."""

    x: float
    y: float
    confidence: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"keypoint coordinates must be finite, got ({self.x}, {self.y})")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")

    def visible(self, threshold: float) -> bool:
        return self.confidence >= threshold


@dataclass(frozen=True)
class PoseSkeleton:
    """Exactly 17 keypoints in COCO order."""

    keypoints: tuple[Keypoint, ...]

    def __post_init__(self) -> None:
        if len(self.keypoints) != NUM_KEYPOINTS:
            raise ValueError(f"expected {NUM_KEYPOINTS} keypoints, got {len(self.keypoints)}")

    @classmethod
    def from_rows(cls, rows: Iterable[Sequence[float]]) -> "PoseSkeleton":
        """Build from 17 rows of (x, y, confidence)."""
        return cls(tuple(Keypoint(float(x), float(y), float(c)) for x, y, c in rows))

    def to_rows(self) -> list[list[float]]:
        return [[k.x, k.y, k.confidence] for k in self.keypoints]


def flatten_pose(skeleton: PoseSkeleton) -> list[float]:
    """Flatten to a length-51 vector of (x, y, confidence) triplets in joint order."""
    out: list[float] = []
    for k in skeleton.keypoints:
        out.extend((k.x, k.y, k.confidence))
    return out


def unflatten_pose(values: Sequence[float]) -> PoseSkeleton:
    """Inverse of :func:`flatten_pose`."""
    if len(values) != FLAT_POSE_DIM:
        raise ValueError(f"expected {FLAT_POSE_DIM} values, got {len(values)}")
    rows = [values[3 * i : 3 * i + 3] for i in range(NUM_KEYPOINTS)]
    return PoseSkeleton.from_rows(rows)


def visible_joint_count(skeleton: PoseSkeleton, threshold: float) -> int:
    """Number of joints with confidence >= threshold."""
    return sum(1 for k in skeleton.keypoints if k.visible(threshold))


def shoulder_head_length(
    skeleton: PoseSkeleton,
    visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD,
) -> float:
    """Distance from the nose to the midpoint of the shoulders.

    Serves as the skeleton-scale unit for both keyframe motion thresholds and
    the PCKh radius. Raises MissingJoints when the nose or either shoulder is
    not visible.
    """
    nose = skeleton.keypoints[NOSE]
    ls = skeleton.keypoints[LEFT_SHOULDER]
    rs = skeleton.keypoints[RIGHT_SHOULDER]
    missing = [
        name
        for name, k in (("nose", nose), ("left_shoulder", ls), ("right_shoulder", rs))
        if not k.visible(visibility_threshold)
    ]
    if missing:
        raise MissingJoints(f"joints below visibility threshold: {', '.join(missing)}")
    mid_x = (ls.x + rs.x) / 2.0
    mid_y = (ls.y + rs.y) / 2.0
    return math.hypot(nose.x - mid_x, nose.y - mid_y)


def pose_distance(
    a: PoseSkeleton,
    b: PoseSkeleton,
    visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD,
) -> float:
    """Mean Euclidean displacement over joints visible in both skeletons.

    Joints failing the threshold in either skeleton contribute nothing.
    Symmetric in (a, b); raises NoCommonJoints when no joint is shared.
    """
    displacements = [
        math.hypot(ka.x - kb.x, ka.y - kb.y)
        for ka, kb in zip(a.keypoints, b.keypoints)
        if ka.visible(visibility_threshold) and kb.visible(visibility_threshold)
    ]
    if not displacements:
        raise NoCommonJoints("no joint passes the visibility threshold in both skeletons")
    return sum(displacements) / len(displacements)


def pckh(
    predicted: PoseSkeleton,
    ground_truth: PoseSkeleton,
    alpha: float = 0.5,
    visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD,
) -> float:
    """Fraction of ground-truth-visible joints predicted within alpha head units.

    The radius is alpha * shoulder_head_length(ground_truth); the result is an
    exact ratio (hit count / visible count). MissingJoints propagates from the
    head-length computation.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    radius = alpha * shoulder_head_length(ground_truth, visibility_threshold)
    visible = 0
    hits = 0
    for kp, kg in zip(predicted.keypoints, ground_truth.keypoints):
        if not kg.visible(visibility_threshold):
            continue
        visible += 1
        if math.hypot(kp.x - kg.x, kp.y - kg.y) <= radius:
            hits += 1
    return hits / visible


def load_pose_file(path: str | Path) -> dict[int, list[PoseSkeleton]]:
    """Read a JSON Lines pose file into {frame_index: [skeleton, ...]}.

    Each line is ``{"frame_index": int, "keypoints": [[x, y, conf] x 17]}``,
    one line per detection; frames with several detections repeat the index.
    """
    frames: dict[int, list[PoseSkeleton]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            frames.setdefault(int(record["frame_index"]), []).append(
                PoseSkeleton.from_rows(record["keypoints"])
            )
    return frames


def save_pose_file(path: str | Path, frames: dict[int, list[PoseSkeleton]]) -> None:
    """Write the JSON Lines pose format read by :func:`load_pose_file`."""
    with open(path, "w", encoding="utf-8") as fh:
        for frame_index in sorted(frames):
            for skeleton in frames[frame_index]:
                fh.write(
                    json.dumps(
                        {"frame_index": frame_index, "keypoints": skeleton.to_rows()}
                    )
                )
                fh.write("\n")
