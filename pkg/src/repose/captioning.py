"""Scene-difference captions for frame pairs.

A pair is rendered as a side-by-side composite (reference left, target right)
and sent to a multimodal captioner with few-shot examples. A deterministic
offline stub stands in for the live endpoint so the pipeline and tests run
without credentials.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Protocol, Sequence

import numpy as np
import requests
from PIL import Image

log = logging.getLogger(__name__)

ENDPOINT_ENV_VAR = "REPOSE_CAPTIONER_ENDPOINT"
API_KEY_ENV_VAR = "REPOSE_CAPTIONER_API_KEY"

MAX_CAPTION_CHARS = 300
DEFAULT_FEWSHOT_COUNT = 10

DEFAULT_PROMPT_TEMPLATE = (
    "The image shows two frames of the same person side by side: the earlier "
    "frame on the left, the later frame on the right. In one present-tense "
    "sentence, describe how the person's posture or action changes from the "
    "left frame to the right frame."
)


class CaptionerUnavailable(RuntimeError):
    """The captioner endpoint could not be reached after all retries."""


class ValidationError(ValueError):
    """The captioner returned text violating the caption contract."""


class UnknownPairId(KeyError):
    """A caption record names a pair that is not in the manifest."""


@dataclass(frozen=True)
class CaptionRequest:
    composite_image: np.ndarray  # (H, 2W, 3) uint8
    fewshot_examples: tuple[tuple[np.ndarray, str], ...] = ()
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE


@dataclass(frozen=True)
class CaptionRecord:
    pair_id: str
    caption: str
    captioner_id: str
    created_at: str

    def to_json_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "caption": self.caption,
            "captioner_id": self.captioner_id,
            "created_at": self.created_at,
        }


def compose_side_by_side(reference: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Concatenate reference (left) and target (right) into one composite.

    The target is first resized, preserving aspect ratio, to the reference
    height; reference pixels are carried over bit-exact.
    """
    ref_h = reference.shape[0]
    if target.shape[0] != ref_h:
        tgt_h, tgt_w = target.shape[:2]
        new_w = max(1, round(tgt_w * ref_h / tgt_h))
        resized = Image.fromarray(target).resize((new_w, ref_h), Image.BILINEAR)
        target = np.asarray(resized)
    return np.concatenate([reference, target], axis=1)


def validate_caption(text: str) -> str:
    """Enforce the caption contract: non-empty single sentence, <= 300 chars."""
    caption = text.strip()
    if not caption:
        raise ValidationError("caption is empty")
    if len(caption) > MAX_CAPTION_CHARS:
        raise ValidationError(f"caption exceeds {MAX_CAPTION_CHARS} characters")
    if "\n" in caption:
        raise ValidationError("caption spans multiple lines")
    # One sentence: at most one terminator, and only in final position.
    interior = caption[:-1]
    if any(ch in interior for ch in ".!?"):
        raise ValidationError("caption must be a single sentence")
    return caption


class CaptionerClient(Protocol):
    """Pluggable captioner backend; must be safe for concurrent calls."""

    captioner_id: str

    def caption(self, request: CaptionRequest) -> str: ...


def _png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return buf.getvalue()


class HttpCaptionerClient:
    """POSTs a base64 composite plus prompt, expects ``{"caption": ...}`` back."""

    captioner_id = "http"

    def __init__(self, endpoint: str, api_key: str | None = None, timeout: float = 30.0):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout

    def caption(self, request: CaptionRequest) -> str:
        payload = {
            "image": base64.b64encode(_png_bytes(request.composite_image)).decode("ascii"),
            "prompt": request.prompt_template,
            "examples": [
                {
                    "image": base64.b64encode(_png_bytes(image)).decode("ascii"),
                    "caption": caption,
                }
                for image, caption in request.fewshot_examples
            ],
        }
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        response = requests.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
        response.raise_for_status()
        return response.json()["caption"]


# Vocabulary for the deterministic stub; hash bytes of the composite select a
# combination, so distinct pairs usually get distinct (but stable) captions.
_STUB_MOTIONS = (
    "raises both arms overhead",
    "lowers the arms to the sides",
    "steps forward with the right leg",
    "leans forward at the waist",
    "turns toward the camera",
    "crouches down slightly",
    "lifts the left knee",
    "reaches out with one hand",
)
_STUB_QUALIFIERS = (
    "while keeping the feet planted",
    "and shifts weight to one side",
    "in a slow continuous motion",
    "while looking straight ahead",
    "as the torso twists slightly",
    "without moving from the spot",
    "and straightens the back",
    "while the head tilts a little",
)


class StubCaptionerClient:
    """Offline captioner: a pure function of (composite pixels, template)."""

    captioner_id = "stub"

    def caption(self, request: CaptionRequest) -> str:
        digest = hashlib.sha256()
        digest.update(request.prompt_template.encode("utf-8"))
        digest.update(np.ascontiguousarray(request.composite_image).tobytes())
        selector = digest.digest()
        motion = _STUB_MOTIONS[selector[0] % len(_STUB_MOTIONS)]
        qualifier = _STUB_QUALIFIERS[selector[1] % len(_STUB_QUALIFIERS)]
        return f"The person {motion} {qualifier}."


def neutral_fewshot_examples(count: int = DEFAULT_FEWSHOT_COUNT) -> tuple[tuple[np.ndarray, str], ...]:
    """Placeholder few-shot exemplars: flat-gray composites with generic captions.

    The original exemplar set is not available, so these only demonstrate the
    expected answer shape to the captioner.
    """
    examples = []
    for i in range(count):
        image = np.full((32, 64, 3), 64 + 16 * (i % 8), dtype=np.uint8)
        motion = _STUB_MOTIONS[i % len(_STUB_MOTIONS)]
        examples.append((image, f"The person {motion}."))
    return tuple(examples)


@dataclass
class RetryPolicy:
    attempts: int = 3
    backoff_base: float = 0.5
    backoff_multiplier: float = 2.0


def request_caption(
    request: CaptionRequest,
    client: CaptionerClient,
    pair_id: str,
    retry: RetryPolicy | None = None,
    _sleep=time.sleep,
) -> CaptionRecord:
    """Fetch and validate one caption, retrying transient failures.

    Validation failures are not retried (the response arrived; it is just
    unusable). Transport failures back off exponentially until the attempt
    budget is spent, then raise CaptionerUnavailable.
    """
    retry = retry or RetryPolicy()
    delay = retry.backoff_base
    last_error: Exception | None = None
    for attempt in range(retry.attempts):
        try:
            text = client.caption(request)
        except (requests.RequestException, ConnectionError, TimeoutError) as exc:
            last_error = exc
            if attempt + 1 < retry.attempts:
                _sleep(delay)
                delay *= retry.backoff_multiplier
            continue
        return CaptionRecord(
            pair_id=pair_id,
            caption=validate_caption(text),
            captioner_id=client.captioner_id,
            created_at=datetime.now(timezone.utc).isoformat(),
        )
    raise CaptionerUnavailable(
        f"captioner failed after {retry.attempts} attempts: {last_error}"
    )


def attach_captions(manifest, caption_records: Sequence[CaptionRecord]):
    """Write captions into their manifest records; returns a new record list.

    Records keep their order; pairs without captions stay unset (they train
    against the blank caption downstream). Duplicate pair_ids resolve
    last-write-wins with a logged warning.
    """
    by_pair: dict[str, CaptionRecord] = {}
    for record in caption_records:
        if record.pair_id in by_pair:
            log.warning("duplicate caption for pair %s; keeping the later one", record.pair_id)
        by_pair[record.pair_id] = record

    known = {entry.pair.pair_id for entry in manifest}
    unknown = set(by_pair) - known
    if unknown:
        raise UnknownPairId(f"caption records for unknown pairs: {sorted(unknown)}")

    updated = []
    for entry in manifest:
        record = by_pair.get(entry.pair.pair_id)
        updated.append(entry.with_caption(record.caption) if record else entry)
    return updated


def write_caption_records(path, records: Sequence[CaptionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json_dict()))
            fh.write("\n")


def read_caption_records(path) -> list[CaptionRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                data = json.loads(line)
                records.append(
                    CaptionRecord(
                        pair_id=data["pair_id"],
                        caption=data["caption"],
                        captioner_id=data["captioner_id"],
                        created_at=data["created_at"],
                    )
                )
    return records
