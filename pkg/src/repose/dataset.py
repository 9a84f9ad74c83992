"""Video-to-pair dataset curation: filtering, keyframe selection, pair assets.

Input is a directory of pre-extracted frames per video plus a pose JSONL file
per video. Output is a JSON Lines manifest of frame pairs with rendered
masked-target / mask / reference-crop images on disk.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np
from PIL import Image

from .pose import (
    DEFAULT_MAJORITY_COUNT,
    DEFAULT_VISIBILITY_THRESHOLD,
    MissingJoints,
    NoCommonJoints,
    PoseSkeleton,
    pose_distance,
    shoulder_head_length,
    visible_joint_count,
)

HISTOGRAM_BINS = 64
MASK_FILL_VALUE = 128  # mid-gray fill for the masked person region

# Fixed manifest key order keeps reruns byte-identical.
MANIFEST_KEYS = (
    "pair_id",
    "video_id",
    "target_frame_index",
    "reference_frame_index",
    "mask_bbox",
    "reference_crop_bbox",
    "target_pose",
    "reference_pose",
    "caption",
    "masked_target_path",
    "mask_path",
    "reference_crop_path",
)


@dataclass(frozen=True)
class FrameRecord:
    """One decoded video frame with its pose detections."""

    video_id: str
    frame_index: int
    image: np.ndarray  # (H, W, 3) uint8
    poses: tuple[PoseSkeleton, ...]

    def __post_init__(self) -> None:
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.size == 0:
            raise ValueError(f"expected non-empty (H, W, 3) image, got shape {self.image.shape}")


@dataclass(frozen=True)
class FramePair:
    """A (masked target, reference) training sample before asset rendering.

    Bounding boxes are (x0, y0, x1, y1) with exclusive upper bounds, in the
    pixel coordinates of their own frame.
    """

    video_id: str
    target_frame_index: int
    reference_frame_index: int
    mask_bbox: tuple[int, int, int, int]
    reference_crop_bbox: tuple[int, int, int, int]
    target_pose: PoseSkeleton
    reference_pose: PoseSkeleton
    caption: str | None = None

    def __post_init__(self) -> None:
        if self.target_frame_index == self.reference_frame_index:
            raise ValueError("target and reference frames must differ")
        for bbox in (self.mask_bbox, self.reference_crop_bbox):
            x0, y0, x1, y1 = bbox
            if not (x0 < x1 and y0 < y1):
                raise ValueError(f"degenerate bbox {bbox}")

    @property
    def pair_id(self) -> str:
        return f"{self.video_id}_{self.target_frame_index:06d}_{self.reference_frame_index:06d}"


@dataclass(frozen=True)
class ManifestRecord:
    """A serialized FramePair plus the on-disk asset paths."""

    pair: FramePair
    masked_target_path: str
    mask_path: str
    reference_crop_path: str

    def to_json_dict(self) -> dict:
        pair = self.pair
        return {
            "pair_id": pair.pair_id,
            "video_id": pair.video_id,
            "target_frame_index": pair.target_frame_index,
            "reference_frame_index": pair.reference_frame_index,
            "mask_bbox": list(pair.mask_bbox),
            "reference_crop_bbox": list(pair.reference_crop_bbox),
            "target_pose": pair.target_pose.to_rows(),
            "reference_pose": pair.reference_pose.to_rows(),
            "caption": pair.caption,
            "masked_target_path": self.masked_target_path,
            "mask_path": self.mask_path,
            "reference_crop_path": self.reference_crop_path,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "ManifestRecord":
        pair = FramePair(
            video_id=data["video_id"],
            target_frame_index=int(data["target_frame_index"]),
            reference_frame_index=int(data["reference_frame_index"]),
            mask_bbox=tuple(data["mask_bbox"]),
            reference_crop_bbox=tuple(data["reference_crop_bbox"]),
            target_pose=PoseSkeleton.from_rows(data["target_pose"]),
            reference_pose=PoseSkeleton.from_rows(data["reference_pose"]),
            caption=data.get("caption"),
        )
        return cls(
            pair=pair,
            masked_target_path=data["masked_target_path"],
            mask_path=data["mask_path"],
            reference_crop_path=data["reference_crop_path"],
        )

    def with_caption(self, caption: str) -> "ManifestRecord":
        return replace(self, pair=replace(self.pair, caption=caption))


@dataclass
class CurationConfig:
    """Thresholds of the curation pipeline; every default is overridable."""

    visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD
    majority_count: int = DEFAULT_MAJORITY_COUNT
    min_pose_dist_factor: float = 1.0
    sim_min: float = 0.35
    sim_max: float = 0.98
    max_keyframes: int = 5
    mask_dilation: float = 0.1  # fraction of bbox diagonal added on each side
    reference_resolution: int = 64


def frame_filter(
    record: FrameRecord,
    visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD,
    majority_count: int = DEFAULT_MAJORITY_COUNT,
) -> bool:
    """A frame qualifies when exactly one person is detected and the majority
    of that skeleton's joints are visible."""
    if len(record.poses) != 1:
        return False
    return visible_joint_count(record.poses[0], visibility_threshold) >= majority_count


def histogram_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Histogram intersection of 64-bin per-channel histograms, averaged over RGB.

    Histograms are L1-normalized, so the value is in [0, 1], symmetric, and 1.0
    for images with identical color distributions.
    """
    if a.size == 0 or b.size == 0:
        raise ValueError("images must be non-empty")
    total = 0.0
    for channel in range(3):
        ha = np.bincount(a[..., channel].reshape(-1) >> 2, minlength=HISTOGRAM_BINS)
        hb = np.bincount(b[..., channel].reshape(-1) >> 2, minlength=HISTOGRAM_BINS)
        ha = ha / ha.sum()
        hb = hb / hb.sum()
        total += float(np.minimum(ha, hb).sum())
    return total / 3.0


def _has_scale_anchor(pose: PoseSkeleton, threshold: float) -> bool:
    try:
        shoulder_head_length(pose, threshold)
    except MissingJoints:
        return False
    return True


def select_keyframes(
    frames: Sequence[FrameRecord],
    config: CurationConfig,
) -> list[FrameRecord]:
    """Greedy forward keyframe scan over time-ordered, filtered frames.

    The first usable frame is kept; each later frame is kept iff it moved at
    least min_pose_dist_factor shoulder-to-head units from the last kept frame
    and its histogram similarity to that frame stays inside [sim_min, sim_max].
    Kept frames must expose nose + shoulders so they can anchor the next
    comparison. Videos yielding fewer than two keyframes are rejected (empty
    list); the scan stops at max_keyframes.
    """
    kept: list[FrameRecord] = []
    for frame in frames:
        pose = frame.poses[0]
        if not _has_scale_anchor(pose, config.visibility_threshold):
            continue
        if kept:
            last = kept[-1]
            last_pose = last.poses[0]
            try:
                motion = pose_distance(pose, last_pose, config.visibility_threshold)
            except NoCommonJoints:
                continue
            head_unit = shoulder_head_length(last_pose, config.visibility_threshold)
            if motion < config.min_pose_dist_factor * head_unit:
                continue
            similarity = histogram_similarity(frame.image, last.image)
            if not config.sim_min <= similarity <= config.sim_max:
                continue
        kept.append(frame)
        if len(kept) == config.max_keyframes:
            break
    if len(kept) < 2:
        return []
    return kept


def pose_bbox(
    pose: PoseSkeleton,
    image_shape: tuple[int, ...],
    dilation: float,
    visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD,
) -> tuple[int, int, int, int]:
    """Bounding box of the visible joints, dilated and clamped to the image.

    Dilation adds ``dilation * diagonal`` pixels on each side (at least one
    pixel, so a degenerate single-point box still has positive area).
    """
    height, width = image_shape[:2]
    points = [k for k in pose.keypoints if k.visible(visibility_threshold)]
    if not points:
        raise MissingJoints("no visible joints to build a bounding box from")
    x0 = min(k.x for k in points)
    y0 = min(k.y for k in points)
    x1 = max(k.x for k in points)
    y1 = max(k.y for k in points)
    pad = max(1.0, dilation * math.hypot(x1 - x0, y1 - y0))
    bx0 = max(0, int(math.floor(x0 - pad)))
    by0 = max(0, int(math.floor(y0 - pad)))
    bx1 = min(width, int(math.ceil(x1 + pad)))
    by1 = min(height, int(math.ceil(y1 + pad)))
    # Clamping can flatten a box that lies at the border; re-open it inward.
    if bx1 <= bx0:
        bx0, bx1 = max(0, bx1 - 1), min(width, bx0 + 1)
    if by1 <= by0:
        by0, by1 = max(0, by1 - 1), min(height, by0 + 1)
    return bx0, by0, bx1, by1


def make_pairs(keyframes: Sequence[FrameRecord], config: CurationConfig) -> list[FramePair]:
    """All ordered (target, reference) pairs among a video's keyframes.

    Both orderings are emitted: the scene-difference caption is directed, so
    each direction is its own sample.
    """
    if len(keyframes) < 2:
        raise ValueError("need at least two keyframes to form pairs")
    pairs = []
    for target in keyframes:
        for reference in keyframes:
            if target.frame_index == reference.frame_index:
                continue
            pairs.append(
                FramePair(
                    video_id=target.video_id,
                    target_frame_index=target.frame_index,
                    reference_frame_index=reference.frame_index,
                    mask_bbox=pose_bbox(
                        target.poses[0], target.image.shape,
                        config.mask_dilation, config.visibility_threshold,
                    ),
                    reference_crop_bbox=pose_bbox(
                        reference.poses[0], reference.image.shape,
                        config.mask_dilation, config.visibility_threshold,
                    ),
                    target_pose=target.poses[0],
                    reference_pose=reference.poses[0],
                )
            )
    return pairs


class FrameSource(Protocol):
    """Anything that can hand back a frame image by (video_id, frame_index)."""

    def get(self, video_id: str, frame_index: int) -> np.ndarray: ...


class DirectoryFrameSource:
    """Frames laid out as ``<root>/<video_id>/<frame_index:06d>.png`` (or .jpg)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def get(self, video_id: str, frame_index: int) -> np.ndarray:
        stem = self.root / video_id / f"{frame_index:06d}"
        for suffix in (".png", ".jpg", ".jpeg"):
            path = stem.with_suffix(suffix)
            if path.exists():
                with Image.open(path) as img:
                    return np.asarray(img.convert("RGB"))
        raise IOError(f"no frame image for {video_id}/{frame_index} under {self.root}")

    def video_ids(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if p.is_dir())

    def frame_indices(self, video_id: str) -> list[int]:
        indices = {
            int(p.stem)
            for p in (self.root / video_id).iterdir()
            if p.suffix.lower() in (".png", ".jpg", ".jpeg") and p.stem.isdigit()
        }
        return sorted(indices)


class MappingFrameSource:
    """In-memory frame source over {(video_id, frame_index): image}."""

    def __init__(self, frames: Mapping[tuple[str, int], np.ndarray]):
        self.frames = dict(frames)

    def get(self, video_id: str, frame_index: int) -> np.ndarray:
        try:
            return self.frames[(video_id, frame_index)]
        except KeyError as exc:
            raise IOError(f"no frame data for {video_id}/{frame_index}") from exc


def render_pair_assets(
    pair: FramePair,
    frames: FrameSource,
    reference_resolution: int = 64,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Produce (masked target, binary mask, reference crop) for one pair.

    The mask is 1 inside mask_bbox and 0 outside; the masked target is the
    target frame with that region filled mid-gray; the reference crop is the
    reference bbox resized to the model's square reference resolution.
    """
    target = frames.get(pair.video_id, pair.target_frame_index)
    reference = frames.get(pair.video_id, pair.reference_frame_index)

    x0, y0, x1, y1 = pair.mask_bbox
    mask = np.zeros(target.shape[:2], dtype=np.uint8)
    mask[y0:y1, x0:x1] = 1
    masked_target = target.copy()
    masked_target[y0:y1, x0:x1] = MASK_FILL_VALUE

    rx0, ry0, rx1, ry1 = pair.reference_crop_bbox
    crop = Image.fromarray(reference[ry0:ry1, rx0:rx1])
    crop = crop.resize((reference_resolution, reference_resolution), Image.BILINEAR)
    return masked_target, mask, np.asarray(crop)


def write_manifest(path: str | Path, records: Iterable[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json_dict()))
            fh.write("\n")


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(ManifestRecord.from_json_dict(json.loads(line)))
    return records


def validate_manifest(records: Sequence[ManifestRecord], root: str | Path = ".") -> None:
    """Check that every asset file referenced by the manifest exists."""
    root = Path(root)
    for record in records:
        for rel in (record.masked_target_path, record.mask_path, record.reference_crop_path):
            if not (root / rel).exists():
                raise FileNotFoundError(f"manifest references missing asset {rel}")


@dataclass
class ManifestStats:
    videos: int = 0
    frames: int = 0
    pairs: int = 0
    captions: int = 0
    mean_caption_length: float = 0.0

    def format_table(self) -> str:
        """Render in the dataset-summary column layout."""
        header = f"{'Videos':>8} {'Frames':>8} {'Pairs':>8} {'Captions':>10} {'Caption Length':>16}"
        row = (
            f"{self.videos:>8d} {self.frames:>8d} {self.pairs:>8d} "
            f"{self.captions:>10d} {self.mean_caption_length:>16.1f}"
        )
        return header + "\n" + row


def manifest_stats(records: Sequence[ManifestRecord]) -> ManifestStats:
    """Exact counts plus mean caption length (characters, captioned records only)."""
    videos = {r.pair.video_id for r in records}
    frames = {
        (r.pair.video_id, idx)
        for r in records
        for idx in (r.pair.target_frame_index, r.pair.reference_frame_index)
    }
    caption_lengths = [len(r.pair.caption) for r in records if r.pair.caption]
    return ManifestStats(
        videos=len(videos),
        frames=len(frames),
        pairs=len(records),
        captions=len(caption_lengths),
        mean_caption_length=(
            sum(caption_lengths) / len(caption_lengths) if caption_lengths else 0.0
        ),
    )
