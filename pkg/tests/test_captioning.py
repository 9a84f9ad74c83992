import logging

import numpy as np
import pytest
import requests

from repose.captioning import (
    CaptionRecord,
    CaptionRequest,
    CaptionerUnavailable,
    RetryPolicy,
    StubCaptionerClient,
    UnknownPairId,
    ValidationError,
    attach_captions,
    compose_side_by_side,
    neutral_fewshot_examples,
    read_caption_records,
    request_caption,
    validate_caption,
    write_caption_records,
)
from repose.dataset import CurationConfig, ManifestRecord, make_pairs
from repose.synthetic import scripted_video


def _image(seed, shape=(64, 64, 3)):
    return np.random.default_rng(seed).integers(0, 256, shape, dtype=np.uint8)


class TestComposeSideBySide:
    def test_width_addition(self):
        composite = compose_side_by_side(_image(0), _image(1))
        assert composite.shape == (64, 128, 3)

    def test_reference_half_lossless(self):
        reference = _image(0)
        composite = compose_side_by_side(reference, _image(1))
        assert np.array_equal(composite[:, :64], reference)

    def test_target_resized_to_reference_height(self):
        reference = _image(0, (64, 64, 3))
        target = _image(1, (128, 128, 3))
        composite = compose_side_by_side(reference, target)
        assert composite.shape == (64, 128, 3)  # 128x128 -> 64x64, widths add


class TestCaptionValidation:
    def test_single_sentence_ok(self):
        assert validate_caption(" She raises her arms. ") == "She raises her arms."

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            validate_caption("   ")

    def test_multi_sentence_rejected(self):
        with pytest.raises(ValidationError):
            validate_caption("He stands. He waves.")

    def test_over_length_rejected(self):
        with pytest.raises(ValidationError):
            validate_caption("x" * 301)


class FlakyClient:
    """Fails a fixed number of times, then answers."""

    captioner_id = "flaky"

    def __init__(self, failures, answer="The person stands up."):
        self.failures = failures
        self.answer = answer
        self.calls = 0

    def caption(self, request):
        self.calls += 1
        if self.calls <= self.failures:
            raise requests.ConnectionError("transient")
        return self.answer


class TestRequestCaption:
    def _request(self):
        return CaptionRequest(composite_image=_image(0), fewshot_examples=neutral_fewshot_examples())

    def test_stub_is_deterministic(self):
        client = StubCaptionerClient()
        request = self._request()
        first = request_caption(request, client, "pair-1")
        second = request_caption(request, client, "pair-1")
        assert first.caption == second.caption
        assert first.captioner_id == "stub"

    def test_stub_depends_on_pixels_and_template(self):
        client = StubCaptionerClient()
        base = client.caption(self._request())
        other_pixels = client.caption(CaptionRequest(composite_image=_image(9)))
        other_template = client.caption(
            CaptionRequest(composite_image=_image(0), prompt_template="different")
        )
        assert base != other_pixels or base != other_template

    def test_stub_output_passes_validation(self):
        record = request_caption(self._request(), StubCaptionerClient(), "pair-1")
        assert validate_caption(record.caption) == record.caption

    def test_retry_then_success(self):
        client = FlakyClient(failures=2)
        record = request_caption(
            self._request(), client, "p", RetryPolicy(attempts=3, backoff_base=0.0), _sleep=lambda s: None
        )
        assert record.caption == "The person stands up."
        assert client.calls == 3

    def test_retries_exhausted(self):
        client = FlakyClient(failures=5)
        with pytest.raises(CaptionerUnavailable):
            request_caption(
                self._request(), client, "p",
                RetryPolicy(attempts=3, backoff_base=0.0), _sleep=lambda s: None,
            )

    def test_empty_answer_is_validation_error(self):
        client = FlakyClient(failures=0, answer="")
        with pytest.raises(ValidationError):
            request_caption(self._request(), client, "p", RetryPolicy(attempts=2, backoff_base=0.0))

    def test_backoff_delays_grow(self):
        sleeps = []
        client = FlakyClient(failures=2)
        request_caption(
            self._request(), client, "p",
            RetryPolicy(attempts=3, backoff_base=0.5, backoff_multiplier=2.0),
            _sleep=sleeps.append,
        )
        assert sleeps == [0.5, 1.0]


def _manifest():
    frames = scripted_video("vid", [(12, 30), (24, 30)], size=64, scale=0.3)
    pairs = make_pairs(frames, CurationConfig())
    return [
        ManifestRecord(
            pair=pair,
            masked_target_path=f"assets/{pair.pair_id}_masked.png",
            mask_path=f"assets/{pair.pair_id}_mask.png",
            reference_crop_path=f"assets/{pair.pair_id}_ref.png",
        )
        for pair in pairs
    ]


def _record(pair_id, caption):
    return CaptionRecord(
        pair_id=pair_id, caption=caption, captioner_id="stub", created_at="2026-01-01T00:00:00+00:00"
    )


class TestAttachCaptions:
    def test_empty_caption_set_is_identity(self):
        manifest = _manifest()
        assert attach_captions(manifest, []) == manifest

    def test_single_match(self):
        manifest = _manifest()
        pair_id = manifest[0].pair.pair_id
        updated = attach_captions(manifest, [_record(pair_id, "The person moves left.")])
        assert updated[0].pair.caption == "The person moves left."
        assert updated[1].pair.caption is None

    def test_order_and_length_preserved(self):
        manifest = _manifest()
        updated = attach_captions(manifest, [_record(manifest[1].pair.pair_id, "A move.")])
        assert [r.pair.pair_id for r in updated] == [r.pair.pair_id for r in manifest]

    def test_unknown_pair_id(self):
        with pytest.raises(UnknownPairId):
            attach_captions(_manifest(), [_record("nope", "A caption.")])

    def test_duplicate_last_write_wins(self, caplog):
        manifest = _manifest()
        pair_id = manifest[0].pair.pair_id
        with caplog.at_level(logging.WARNING):
            updated = attach_captions(
                manifest,
                [_record(pair_id, "First caption."), _record(pair_id, "Second caption.")],
            )
        assert updated[0].pair.caption == "Second caption."
        assert any("duplicate" in message for message in caplog.messages)


def test_caption_records_roundtrip(tmp_path):
    records = [_record("a", "One."), _record("b", "Two.")]
    path = tmp_path / "captions.jsonl"
    write_caption_records(path, records)
    assert read_caption_records(path) == records
