"""Cross-attention context assembly for the four conditioning variants.

The context matrix concatenates, in fixed order, the projected reference-image
hidden state (257 rows), an optional text encoding (77 rows), and an optional
pose token (1 row), all at embedding width 768. Each conditional context is
paired with an unconditional one of identical shape, built from the all-zeros
reference image, the null caption, and a canonical neutral pose.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from torch import Tensor, nn

from .pose import PoseSkeleton, flatten_pose

EMBED_DIM = 768
IMAGE_HIDDEN_ROWS = 257
IMAGE_HIDDEN_DIM = 1024
TEXT_ROWS = 77
POSE_DIM = 51


class ModalityMismatch(ValueError):
    """Supplied embeddings do not match what the variant requires."""


class AdapterUnavailable(RuntimeError):
    """The requested encoder backend is not installed or registered."""


class Variant(Enum):
    """The four conditioning configurations."""

    C1_IMG = "c1"
    C2_IMG_POSE = "c2"
    C3_IMG_TEXT = "c3"
    C4_IMG_POSE_TEXT = "c4"

    @property
    def has_pose(self) -> bool:
        return self in (Variant.C2_IMG_POSE, Variant.C4_IMG_POSE_TEXT)

    @property
    def has_text(self) -> bool:
        return self in (Variant.C3_IMG_TEXT, Variant.C4_IMG_POSE_TEXT)

    @property
    def context_rows(self) -> int:
        return IMAGE_HIDDEN_ROWS + (TEXT_ROWS if self.has_text else 0) + (1 if self.has_pose else 0)


_VARIANT_ALIASES = {
    "c1": Variant.C1_IMG,
    "c2": Variant.C2_IMG_POSE,
    "c3": Variant.C3_IMG_TEXT,
    "c4": Variant.C4_IMG_POSE_TEXT,
    "img": Variant.C1_IMG,
    "img-pose": Variant.C2_IMG_POSE,
    "img-text": Variant.C3_IMG_TEXT,
    "img-pose-text": Variant.C4_IMG_POSE_TEXT,
}


def parse_variant(name: str) -> Variant:
    try:
        return _VARIANT_ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(
            f"unknown variant {name!r}; expected one of {sorted(_VARIANT_ALIASES)}"
        ) from None


# Canonical neutral pose: an upright figure centered on a 256x256 canvas,
# arms hanging at the sides, every joint fully confident. Used as the
# unconditional pose token so no dataset image is needed.
NEUTRAL_SKELETON = PoseSkeleton.from_rows(
    [
        (128.0, 70.0, 1.0),   # nose
        (122.0, 64.0, 1.0),   # left eye
        (134.0, 64.0, 1.0),   # right eye
        (116.0, 68.0, 1.0),   # left ear
        (140.0, 68.0, 1.0),   # right ear
        (108.0, 100.0, 1.0),  # left shoulder
        (148.0, 100.0, 1.0),  # right shoulder
        (104.0, 130.0, 1.0),  # left elbow
        (152.0, 130.0, 1.0),  # right elbow
        (102.0, 158.0, 1.0),  # left wrist
        (154.0, 158.0, 1.0),  # right wrist
        (116.0, 160.0, 1.0),  # left hip
        (140.0, 160.0, 1.0),  # right hip
        (114.0, 200.0, 1.0),  # left knee
        (142.0, 200.0, 1.0),  # right knee
        (114.0, 238.0, 1.0),  # left ankle
        (142.0, 238.0, 1.0),  # right ankle
    ]
)


def _hash_seed(*parts: bytes) -> int:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part)
    return int.from_bytes(digest.digest()[:8], "little")


class HashedImageEncoder:
    """Deterministic test-scale stand-in for a pretrained image encoder.

    Pixel content is hashed into a seed for a pseudo-random (257, 1024) hidden
    state, so identical images encode identically and distinct images almost
    surely differ. The all-zeros image maps to the zero hidden state, matching
    the zeroed-out unconditional reference signal.
    """

    name = "hashed"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def encode(self, image: np.ndarray) -> np.ndarray:
        if not image.any():
            return np.zeros((IMAGE_HIDDEN_ROWS, IMAGE_HIDDEN_DIM), dtype=np.float32)
        seed = _hash_seed(
            self.seed.to_bytes(8, "little", signed=True),
            np.asarray(image.shape, dtype=np.int64).tobytes(),
            np.ascontiguousarray(image).tobytes(),
        )
        rng = np.random.default_rng(seed)
        return rng.standard_normal((IMAGE_HIDDEN_ROWS, IMAGE_HIDDEN_DIM)).astype(np.float32)


class HashedTextEncoder:
    """Deterministic test-scale text encoder; blank text is its null caption."""

    name = "hashed"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def encode(self, caption: str) -> np.ndarray:
        seed = _hash_seed(
            self.seed.to_bytes(8, "little", signed=True),
            caption.encode("utf-8"),
        )
        rng = np.random.default_rng(seed)
        return rng.standard_normal((TEXT_ROWS, EMBED_DIM)).astype(np.float32)


_IMAGE_ENCODERS = {"hashed": HashedImageEncoder}
_TEXT_ENCODERS = {"hashed": HashedTextEncoder}


def make_image_encoder(name: str, seed: int = 0):
    try:
        return _IMAGE_ENCODERS[name](seed)
    except KeyError:
        raise AdapterUnavailable(
            f"image encoder {name!r} is not registered (built-in: {sorted(_IMAGE_ENCODERS)})"
        ) from None


def make_text_encoder(name: str, seed: int = 0):
    try:
        return _TEXT_ENCODERS[name](seed)
    except KeyError:
        raise AdapterUnavailable(
            f"text encoder {name!r} is not registered (built-in: {sorted(_TEXT_ENCODERS)})"
        ) from None


class AffineProjection(nn.Module):
    """Learnable affine map to the shared 768-wide embedding space.

    Weights start uniform in +-1/sqrt(in_dim) from a fixed seed; bias starts
    at zero, so a zero input row maps exactly to the bias.
    """

    def __init__(self, in_dim: int, out_dim: int = EMBED_DIM, seed: int = 0):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / in_dim**0.5
        weight = torch.empty(out_dim, in_dim).uniform_(-bound, bound, generator=gen)
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(out_dim))

    def forward(self, x: Tensor) -> Tensor:
        return nn.functional.linear(x, self.weight, self.bias)


@dataclass
class ConditioningBundle:
    """A conditional context and its shape-matched unconditional twin."""

    variant: Variant
    context: Tensor        # (rows, 768)
    uncond_context: Tensor

    def __post_init__(self) -> None:
        expected = (self.variant.context_rows, EMBED_DIM)
        if tuple(self.context.shape) != expected:
            raise ModalityMismatch(
                f"{self.variant.value} context must be {expected}, got {tuple(self.context.shape)}"
            )
        if self.uncond_context.shape != self.context.shape:
            raise ModalityMismatch("unconditional context shape must match the conditional one")


def build_context(
    variant: Variant,
    image_emb: Tensor,
    text_emb: Tensor | None = None,
    pose_emb: Tensor | None = None,
) -> Tensor:
    """Row-concatenate [image; text?; pose?] for the variant.

    Embeddings must be present for exactly the modalities the variant uses.
    """
    if tuple(image_emb.shape) != (IMAGE_HIDDEN_ROWS, EMBED_DIM):
        raise ModalityMismatch(
            f"image embedding must be ({IMAGE_HIDDEN_ROWS}, {EMBED_DIM}), got {tuple(image_emb.shape)}"
        )
    if variant.has_text != (text_emb is not None):
        raise ModalityMismatch(
            f"variant {variant.value} {'requires' if variant.has_text else 'does not take'} a text embedding"
        )
    if variant.has_pose != (pose_emb is not None):
        raise ModalityMismatch(
            f"variant {variant.value} {'requires' if variant.has_pose else 'does not take'} a pose embedding"
        )
    rows = [image_emb]
    if text_emb is not None:
        if tuple(text_emb.shape) != (TEXT_ROWS, EMBED_DIM):
            raise ModalityMismatch(f"text embedding must be ({TEXT_ROWS}, {EMBED_DIM})")
        rows.append(text_emb)
    if pose_emb is not None:
        if tuple(pose_emb.shape) != (1, EMBED_DIM):
            raise ModalityMismatch(f"pose embedding must be (1, {EMBED_DIM})")
        rows.append(pose_emb)
    return torch.cat(rows, dim=0)


def pose_vector(
    target_pose: PoseSkeleton,
    reference_pose: PoseSkeleton | None = None,
    dual_pose: bool = False,
) -> np.ndarray:
    """Flatten the pose conditioning input: (51,) or, with the dual-pose
    variant enabled, target and reference concatenated into (102,)."""
    values = flatten_pose(target_pose)
    if dual_pose:
        if reference_pose is None:
            raise ModalityMismatch("dual-pose conditioning needs the reference pose as well")
        values = values + flatten_pose(reference_pose)
    return np.asarray(values, dtype=np.float32)


class ConditioningPipeline(nn.Module):
    """Encoders plus learnable projections for one training/inference run.

    The image projection (1024 -> 768) and pose projection (51 or 102 -> 768)
    are the run's trainable conditioning parameters; encoders are frozen
    plugins. Both projections always exist so checkpoints have one layout.
    """

    def __init__(
        self,
        variant: Variant,
        image_encoder,
        text_encoder,
        reference_resolution: int = 64,
        dual_pose: bool = False,
        seed: int = 0,
    ):
        super().__init__()
        self.variant = variant
        self.image_encoder = image_encoder
        self.text_encoder = text_encoder
        self.reference_resolution = reference_resolution
        self.dual_pose = dual_pose
        self.image_proj = AffineProjection(IMAGE_HIDDEN_DIM, EMBED_DIM, seed=seed)
        self.pose_proj = AffineProjection(
            2 * POSE_DIM if dual_pose else POSE_DIM, EMBED_DIM, seed=seed + 1
        )

    # Raw encoder outputs; constant per input, safe to precompute and cache.
    def image_hidden(self, image: np.ndarray) -> np.ndarray:
        hidden = self.image_encoder.encode(image)
        if hidden.shape != (IMAGE_HIDDEN_ROWS, IMAGE_HIDDEN_DIM):
            raise AdapterUnavailable(
                f"image encoder returned shape {hidden.shape}, "
                f"expected ({IMAGE_HIDDEN_ROWS}, {IMAGE_HIDDEN_DIM})"
            )
        return hidden

    def text_embedding(self, caption: str | None) -> np.ndarray:
        encoded = self.text_encoder.encode(caption or "")
        if encoded.shape != (TEXT_ROWS, EMBED_DIM):
            raise AdapterUnavailable(
                f"text encoder returned shape {encoded.shape}, expected ({TEXT_ROWS}, {EMBED_DIM})"
            )
        return encoded

    def _dtype(self) -> torch.dtype:
        return self.image_proj.weight.dtype

    def encode_image(self, image: np.ndarray) -> Tensor:
        """Encoder hidden state projected into the (257, 768) context block."""
        hidden = torch.as_tensor(self.image_hidden(image), dtype=self._dtype())
        return self.image_proj(hidden)

    def encode_text(self, caption: str | None) -> Tensor:
        """(77, 768) text block; None or empty text yields the null-caption encoding."""
        return torch.as_tensor(self.text_embedding(caption), dtype=self._dtype())

    def embed_pose(
        self, target_pose: PoseSkeleton, reference_pose: PoseSkeleton | None = None
    ) -> Tensor:
        """Flattened pose through the learnable projection: a single 768-wide row."""
        vec = pose_vector(target_pose, reference_pose, self.dual_pose)
        flat = torch.as_tensor(vec, dtype=self._dtype())
        return self.pose_proj(flat).reshape(1, EMBED_DIM)

    def unconditional_context(self) -> Tensor:
        """Context of the null signals: zeroed reference image, null caption,
        neutral pose; same concatenation order as the conditional context."""
        size = self.reference_resolution
        zero_image = np.zeros((size, size, 3), dtype=np.uint8)
        image_emb = self.encode_image(zero_image)
        text_emb = self.encode_text(None) if self.variant.has_text else None
        pose_emb = (
            self.embed_pose(NEUTRAL_SKELETON, NEUTRAL_SKELETON if self.dual_pose else None)
            if self.variant.has_pose
            else None
        )
        return build_context(self.variant, image_emb, text_emb, pose_emb)

    def assemble_bundle(
        self,
        image_emb: Tensor,
        text_emb: Tensor | None = None,
        pose_emb: Tensor | None = None,
    ) -> ConditioningBundle:
        context = build_context(self.variant, image_emb, text_emb, pose_emb)
        return ConditioningBundle(
            variant=self.variant,
            context=context,
            uncond_context=self.unconditional_context(),
        )

    def bundle_for(
        self,
        reference_crop: np.ndarray,
        caption: str | None = None,
        target_pose: PoseSkeleton | None = None,
        reference_pose: PoseSkeleton | None = None,
    ) -> ConditioningBundle:
        """Bundle straight from raw inputs, applying the variant's modality rules."""
        if caption and not self.variant.has_text:
            raise ModalityMismatch(f"variant {self.variant.value} has no text slot")
        if target_pose is not None and not self.variant.has_pose:
            raise ModalityMismatch(f"variant {self.variant.value} has no pose slot")
        image_emb = self.encode_image(reference_crop)
        text_emb = self.encode_text(caption) if self.variant.has_text else None
        pose_emb = None
        if self.variant.has_pose:
            pose = target_pose if target_pose is not None else NEUTRAL_SKELETON
            ref = reference_pose
            if self.dual_pose and ref is None:
                ref = NEUTRAL_SKELETON
            pose_emb = self.embed_pose(pose, ref)
        return self.assemble_bundle(image_emb, text_emb, pose_emb)

    def batched_context(
        self,
        image_hidden: Tensor,
        text_emb: Tensor | None = None,
        pose_vec: Tensor | None = None,
    ) -> Tensor:
        """Differentiable batched assembly used by the training loop.

        image_hidden: (B, 257, 1024) raw encoder output; text_emb: (B, 77, 768);
        pose_vec: (B, 51 or 102). Returns (B, rows, 768).
        """
        if self.variant.has_text != (text_emb is not None):
            raise ModalityMismatch(f"text embeddings and variant {self.variant.value} disagree")
        if self.variant.has_pose != (pose_vec is not None):
            raise ModalityMismatch(f"pose vectors and variant {self.variant.value} disagree")
        blocks = [self.image_proj(image_hidden)]
        if text_emb is not None:
            blocks.append(text_emb)
        if pose_vec is not None:
            blocks.append(self.pose_proj(pose_vec).unsqueeze(1))
        return torch.cat(blocks, dim=1)
