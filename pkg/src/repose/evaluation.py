"""Quantitative metrics and rating-study aggregation.

FID compares Gaussian fits of two feature sets; PCKh-over-set averages the
per-pair pose adherence metric; rating records are binary 0/1 answers
aggregated into per-(config, question) percentages.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .conditioning import Variant, parse_variant
from .pose import (
    DEFAULT_VISIBILITY_THRESHOLD,
    MissingJoints,
    PoseSkeleton,
    SKELETON_EDGES,
    pckh,
)

EIGENVALUE_CLAMP_TOL = 1e-10
SQRT_RESIDUAL_TOL = 1e-6

RATING_QUESTIONS = ("identity", "control", "interaction")
RATINGS_CSV_HEADER = ("scene_id", "config", "question", "rater_id", "score")


class DimensionMismatch(ValueError):
    """Feature sets with different dimensionality cannot be compared."""


class NumericalFailure(RuntimeError):
    """The covariance square root did not converge to tolerance."""


class EmptyInput(ValueError):
    """The metric has nothing to average over."""


@dataclass(frozen=True)
class FeatureSet:
    """n feature vectors of dimension d; n >= 2 so covariance is defined."""

    features: np.ndarray  # (n, d)

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] < 2:
            raise ValueError("features must be (n, d) with n >= 2")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def mean(self) -> np.ndarray:
        return self.features.mean(axis=0)

    def cov(self) -> np.ndarray:
        return np.cov(self.features, rowvar=False).reshape(self.d, self.d)


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition with a small clamp."""
    sym = (matrix + matrix.T) / 2.0
    eigenvalues, eigenvectors = np.linalg.eigh(sym)
    scale = max(float(eigenvalues.max(initial=0.0)), 1.0)
    if eigenvalues.min(initial=0.0) < -SQRT_RESIDUAL_TOL * scale:
        raise NumericalFailure(
            f"matrix is not PSD within tolerance (min eigenvalue {eigenvalues.min()})"
        )
    clamped = np.where(eigenvalues < EIGENVALUE_CLAMP_TOL, 0.0, eigenvalues)
    return (eigenvectors * np.sqrt(clamped)) @ eigenvectors.T


def frechet_from_stats(
    mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray
) -> float:
    """Gaussian Frechet distance from explicit first/second moments.

    The cross term trace((cov_a cov_b)^1/2) is computed through the
    symmetrized product cov_a^1/2 cov_b cov_a^1/2, whose square-root residual
    is verified against tolerance.
    """
    mu_a = np.atleast_1d(np.asarray(mu_a, dtype=np.float64))
    mu_b = np.atleast_1d(np.asarray(mu_b, dtype=np.float64))
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise DimensionMismatch(
            f"moment shapes disagree: {mu_a.shape}/{cov_a.shape} vs {mu_b.shape}/{cov_b.shape}"
        )

    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    cross_root = _psd_sqrt(inner)
    residual = np.linalg.norm(cross_root @ cross_root - (inner + inner.T) / 2.0)
    denom = max(np.linalg.norm(inner), 1.0)
    if residual / denom > SQRT_RESIDUAL_TOL:
        raise NumericalFailure(f"square-root residual {residual / denom:.3e} above tolerance")

    mean_term = float(np.sum((mu_a - mu_b) ** 2))
    trace_term = float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross_root))
    return max(mean_term + trace_term, 0.0)


def fid(a: FeatureSet, b: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    if a.d != b.d:
        raise DimensionMismatch(f"feature dimensions differ: {a.d} vs {b.d}")
    return frechet_from_stats(a.mean(), a.cov(), b.mean(), b.cov())


class RandomProjectionFeatures:
    """Fixed seeded random-projection image featurizer.

    Deterministic and weight-free, so desk-scale FID is reproducible; absolute
    values are not comparable to any pretrained-network FID, but trends within
    a run are meaningful.
    """

    def __init__(self, dim: int = 64, seed: int = 0, resolution: int = 32):
        self.dim = dim
        self.resolution = resolution
        rng = np.random.default_rng(seed)
        flat = resolution * resolution * 3
        self.projection = rng.standard_normal((flat, dim)) / math.sqrt(flat)

    def extract(self, images: Sequence[np.ndarray]) -> FeatureSet:
        rows = []
        for image in images:
            resized = Image.fromarray(image).resize(
                (self.resolution, self.resolution), Image.BILINEAR
            )
            pixels = np.asarray(resized, dtype=np.float64).reshape(-1) / 127.5 - 1.0
            rows.append(pixels @ self.projection)
        return FeatureSet(np.stack(rows))


class PckhSetResult(NamedTuple):
    mean: float
    scored: int
    skipped: int


def pckh_over_set(
    predicted_poses: Sequence[PoseSkeleton],
    ground_truth_poses: Sequence[PoseSkeleton],
    alpha: float = 0.5,
    visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD,
) -> PckhSetResult:
    """Mean per-pair PCKh over aligned pose lists.

    Pairs whose ground truth cannot anchor the head-length normalizer are
    skipped and tallied instead of failing the whole set.
    """
    if len(predicted_poses) != len(ground_truth_poses):
        raise ValueError("pose lists must be aligned and equal length")
    if not predicted_poses:
        raise EmptyInput("no pose pairs to evaluate")
    values = []
    skipped = 0
    for pred, truth in zip(predicted_poses, ground_truth_poses):
        try:
            values.append(pckh(pred, truth, alpha, visibility_threshold))
        except MissingJoints:
            skipped += 1
    if not values:
        raise EmptyInput("every pose pair was skipped (no usable ground truth)")
    return PckhSetResult(mean=sum(values) / len(values), scored=len(values), skipped=skipped)


@dataclass(frozen=True)
class RatingRecord:
    scene_id: str
    config: Variant
    question: str
    rater_id: str
    score: int

    def __post_init__(self) -> None:
        if self.score not in (0, 1):
            raise ValueError(f"score must be 0 or 1, got {self.score}")
        if self.question not in RATING_QUESTIONS:
            raise ValueError(f"question must be one of {RATING_QUESTIONS}")


def read_ratings_csv(path) -> list[RatingRecord]:
    """Parse the `scene_id,config,question,rater_id,score` ratings file."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != RATINGS_CSV_HEADER:
            raise ValueError(
                f"ratings CSV header must be {','.join(RATINGS_CSV_HEADER)}"
            )
        for row in reader:
            records.append(
                RatingRecord(
                    scene_id=row["scene_id"],
                    config=parse_variant(row["config"]),
                    question=row["question"],
                    rater_id=row["rater_id"],
                    score=int(row["score"]),
                )
            )
    return records


def aggregate_ratings(records: Sequence[RatingRecord]) -> dict[tuple[Variant, str], float]:
    """Percentage of positive answers per (config, question), order-invariant."""
    totals: dict[tuple[Variant, str], list[int]] = {}
    for record in records:
        counts = totals.setdefault((record.config, record.question), [0, 0])
        counts[0] += record.score
        counts[1] += 1
    return {
        key: (100.0 * ones) / count for key, (ones, count) in totals.items()
    }


def format_percentage(value: float) -> str:
    """61.0 -> '61%', 68.5 -> '68.5%' (matches the rating-table rendering)."""
    return f"{value:g}%"


def ratings_report(records: Sequence[RatingRecord]) -> dict[str, dict[str, str]]:
    """Nested {variant: {question: 'NN%'}} mapping for the metric report."""
    aggregated = aggregate_ratings(records)
    report: dict[str, dict[str, str]] = {}
    for (variant, question), value in sorted(
        aggregated.items(), key=lambda item: (item[0][0].value, item[0][1])
    ):
        report.setdefault(variant.value, {})[question] = format_percentage(value)
    return report


# One fixed color per skeleton edge so overlays are stable across runs.
_EDGE_COLORS = (
    (255, 0, 0), (255, 85, 0), (255, 170, 0), (255, 255, 0), (170, 255, 0),
    (85, 255, 0), (0, 255, 0), (0, 255, 85), (0, 255, 170), (0, 255, 255),
    (0, 170, 255), (0, 85, 255), (0, 0, 255), (85, 0, 255), (170, 0, 255),
)
_KEYPOINT_COLOR = (255, 255, 255)
_MARKER_RADIUS = 2


def pose_overlay(
    image: np.ndarray,
    skeleton: PoseSkeleton,
    visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD,
) -> np.ndarray:
    """Draw visible joints and limb segments over a copy of the image.

    Coordinates are clamped into the frame; a skeleton with no visible joints
    returns the image unchanged.
    """
    height, width = image.shape[:2]
    canvas = Image.fromarray(image.copy())
    draw = ImageDraw.Draw(canvas)

    def clamp(k):
        return (
            min(max(k.x, 0.0), width - 1.0),
            min(max(k.y, 0.0), height - 1.0),
        )

    for edge_index, (i, j) in enumerate(SKELETON_EDGES):
        a, b = skeleton.keypoints[i], skeleton.keypoints[j]
        if a.visible(visibility_threshold) and b.visible(visibility_threshold):
            draw.line([clamp(a), clamp(b)], fill=_EDGE_COLORS[edge_index], width=1)
    for keypoint in skeleton.keypoints:
        if keypoint.visible(visibility_threshold):
            x, y = clamp(keypoint)
            draw.ellipse(
                [x - _MARKER_RADIUS, y - _MARKER_RADIUS, x + _MARKER_RADIUS, y + _MARKER_RADIUS],
                fill=_KEYPOINT_COLOR,
            )
    return np.asarray(canvas)


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio between uint8 images, optionally masked.

    With a mask, only pixels where mask == 1 enter the error; identical
    regions give +inf.
    """
    diff = a.astype(np.float64) - b.astype(np.float64)
    if mask is not None:
        keep = mask.astype(bool)
        diff = diff[keep]
    mse = float(np.mean(diff**2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(255.0**2 / mse)
