"""Synthetic single-person video fixtures.

Draws a stick figure with known joint coordinates on a flat background, so
curation thresholds, pair geometry, and training behavior can be scripted
exactly: translating the figure by d pixels moves every joint by d, making
pose distances and the greedy keep/reject sequence predictable on paper.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .dataset import FrameRecord
from .pose import PoseSkeleton, SKELETON_EDGES, save_pose_file

# Joint offsets from the figure center, canonical units; the shoulder-to-head
# unit of this template is exactly 30 (nose to shoulder midpoint).
_TEMPLATE = (
    (0.0, -80.0),    # nose
    (-6.0, -86.0),   # left eye
    (6.0, -86.0),    # right eye
    (-12.0, -82.0),  # left ear
    (12.0, -82.0),   # right ear
    (-20.0, -50.0),  # left shoulder
    (20.0, -50.0),   # right shoulder
    (-24.0, -20.0),  # left elbow
    (24.0, -20.0),   # right elbow
    (-26.0, 8.0),    # left wrist
    (26.0, 8.0),     # right wrist
    (-12.0, 10.0),   # left hip
    (12.0, 10.0),    # right hip
    (-14.0, 50.0),   # left knee
    (14.0, 50.0),    # right knee
    (-14.0, 88.0),   # left ankle
    (14.0, 88.0),    # right ankle
)

TEMPLATE_HEAD_UNIT = 30.0

# Distinct fill colors, spaced so every color occupies its own histogram bin.
PERSON_COLORS = (
    (200, 40, 40), (40, 200, 40), (40, 40, 200), (200, 200, 40),
    (200, 40, 200), (40, 200, 200), (230, 150, 60), (150, 60, 230),
)

DEFAULT_BACKGROUND = (96, 96, 96)


def head_unit(scale: float) -> float:
    """Shoulder-to-head length of a figure drawn at this scale."""
    return TEMPLATE_HEAD_UNIT * scale


def posed_skeleton(center_x: float, center_y: float, scale: float) -> PoseSkeleton:
    """Template skeleton translated to a center point, all joints confident."""
    return PoseSkeleton.from_rows(
        [(center_x + dx * scale, center_y + dy * scale, 1.0) for dx, dy in _TEMPLATE]
    )


def draw_person(image: np.ndarray, skeleton: PoseSkeleton, color: tuple[int, int, int]) -> np.ndarray:
    """Render the skeleton as a filled stick figure; returns a new image."""
    canvas = Image.fromarray(image.copy())
    draw = ImageDraw.Draw(canvas)
    points = [(k.x, k.y) for k in skeleton.keypoints]

    # Torso quad between the shoulders and hips, then limbs, then a head disk.
    draw.polygon([points[5], points[6], points[12], points[11]], fill=color)
    for i, j in SKELETON_EDGES:
        draw.line([points[i], points[j]], fill=color, width=2)
    nose_x, nose_y = points[0]
    shoulder_mid_y = (points[5][1] + points[6][1]) / 2.0
    head_r = max(2.0, 0.4 * abs(shoulder_mid_y - nose_y))
    draw.ellipse(
        [nose_x - head_r, nose_y - head_r, nose_x + head_r, nose_y + head_r], fill=color
    )
    return np.asarray(canvas)


def render_frame(
    size: int,
    center: tuple[float, float],
    scale: float,
    color: tuple[int, int, int],
    background: tuple[int, int, int] = DEFAULT_BACKGROUND,
) -> tuple[np.ndarray, PoseSkeleton]:
    image = np.full((size, size, 3), background, dtype=np.uint8)
    skeleton = posed_skeleton(center[0], center[1], scale)
    return draw_person(image, skeleton, color), skeleton


def scripted_video(
    video_id: str,
    centers: list[tuple[float, float]],
    size: int = 64,
    scale: float = 0.3,
    backgrounds: list[tuple[int, int, int]] | None = None,
) -> list[FrameRecord]:
    """One frame per center position; person colors cycle so consecutive
    frames differ in histogram without leaving the similarity band."""
    records = []
    for index, center in enumerate(centers):
        background = backgrounds[index] if backgrounds else DEFAULT_BACKGROUND
        image, skeleton = render_frame(
            size, center, scale, PERSON_COLORS[index % len(PERSON_COLORS)], background
        )
        records.append(
            FrameRecord(video_id=video_id, frame_index=index, image=image, poses=(skeleton,))
        )
    return records


def write_video_fixture(
    frames_dir: str | Path, poses_dir: str | Path, records: list[FrameRecord]
) -> None:
    """Persist frames + poses in the on-disk layout the pipeline ingests."""
    frames_dir = Path(frames_dir)
    poses_dir = Path(poses_dir)
    poses_dir.mkdir(parents=True, exist_ok=True)
    by_video: dict[str, list[FrameRecord]] = {}
    for record in records:
        by_video.setdefault(record.video_id, []).append(record)
    for video_id, video_records in by_video.items():
        video_dir = frames_dir / video_id
        video_dir.mkdir(parents=True, exist_ok=True)
        poses = {}
        for record in video_records:
            Image.fromarray(record.image).save(video_dir / f"{record.frame_index:06d}.png")
            poses[record.frame_index] = list(record.poses)
        save_pose_file(poses_dir / f"{video_id}.jsonl", poses)
