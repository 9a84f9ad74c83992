import numpy as np

from repose.dataset import DirectoryFrameSource, frame_filter, histogram_similarity
from repose.pose import load_pose_file, pose_distance, shoulder_head_length
from repose.synthetic import (
    head_unit,
    posed_skeleton,
    scripted_video,
    write_video_fixture,
)


def test_template_head_unit_scales():
    skeleton = posed_skeleton(50, 50, 0.3)
    assert shoulder_head_length(skeleton) == head_unit(0.3) == 9.0


def test_translation_moves_every_joint_uniformly():
    a = posed_skeleton(20, 30, 0.3)
    b = posed_skeleton(30, 30, 0.3)
    assert pose_distance(a, b) == 10.0


def test_frames_pass_person_filter():
    frames = scripted_video("v", [(20, 30), (34, 30)], size=64, scale=0.3)
    assert all(frame_filter(f) for f in frames)


def test_consecutive_frames_inside_similarity_band():
    frames = scripted_video("v", [(20, 30), (34, 30), (20, 30)], size=64, scale=0.3)
    for a, b in zip(frames, frames[1:]):
        similarity = histogram_similarity(a.image, b.image)
        assert 0.35 <= similarity <= 0.98


def test_fixture_roundtrip(tmp_path):
    frames_dir = tmp_path / "frames"
    poses_dir = tmp_path / "poses"
    records = scripted_video("vid7", [(20, 30), (34, 30)], size=64, scale=0.3)
    write_video_fixture(frames_dir, poses_dir, records)

    source = DirectoryFrameSource(frames_dir)
    assert source.video_ids() == ["vid7"]
    assert source.frame_indices("vid7") == [0, 1]
    loaded = source.get("vid7", 0)
    assert np.array_equal(loaded, records[0].image)

    poses = load_pose_file(poses_dir / "vid7.jsonl")
    assert poses[0][0] == records[0].poses[0]
    assert poses[1][0] == records[1].poses[0]
