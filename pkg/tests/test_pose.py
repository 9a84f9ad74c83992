import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repose.pose import (
    MissingJoints,
    NoCommonJoints,
    NUM_KEYPOINTS,
    PoseSkeleton,
    flatten_pose,
    load_pose_file,
    pckh,
    pose_distance,
    save_pose_file,
    shoulder_head_length,
    unflatten_pose,
    visible_joint_count,
)

coords = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)
confidences = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


@st.composite
def skeletons(draw):
    rows = [
        (draw(coords), draw(coords), draw(confidences)) for _ in range(NUM_KEYPOINTS)
    ]
    return PoseSkeleton.from_rows(rows)


@st.composite
def visible_skeletons(draw):
    """Skeletons whose every joint passes the default 0.3 threshold."""
    rows = [
        (draw(coords), draw(coords), draw(st.floats(min_value=0.3, max_value=1.0)))
        for _ in range(NUM_KEYPOINTS)
    ]
    return PoseSkeleton.from_rows(rows)


def uniform_skeleton(x=0.0, y=0.0, conf=1.0):
    return PoseSkeleton.from_rows([(x, y, conf)] * NUM_KEYPOINTS)


def test_skeleton_requires_17_joints():
    with pytest.raises(ValueError):
        PoseSkeleton.from_rows([(0, 0, 1)] * 16)


def test_keypoint_rejects_bad_confidence():
    with pytest.raises(ValueError):
        PoseSkeleton.from_rows([(0, 0, 1.5)] + [(0, 0, 1)] * 16)


def test_flatten_length_and_placement():
    rows = [(float(i), float(i) + 0.5, 1.0) for i in range(NUM_KEYPOINTS)]
    rows[0] = (3.0, 4.0, 0.5)
    flat = flatten_pose(PoseSkeleton.from_rows(rows))
    assert len(flat) == 51
    assert flat[0:3] == [3.0, 4.0, 0.5]
    assert flat[3:6] == [1.0, 1.5, 1.0]


def test_flatten_zero_skeleton():
    assert flatten_pose(uniform_skeleton(conf=0.0)) == [0.0] * 51


@given(skeletons())
def test_flatten_unflatten_bijection(skeleton):
    assert unflatten_pose(flatten_pose(skeleton)) == skeleton


def test_shoulder_head_length_hand_geometry():
    rows = [(0.0, 0.0, 1.0)] * NUM_KEYPOINTS
    rows[5] = (-10.0, 20.0, 1.0)
    rows[6] = (10.0, 20.0, 1.0)
    assert shoulder_head_length(PoseSkeleton.from_rows(rows)) == 20.0


def test_shoulder_head_length_345_triangle():
    rows = [(0.0, 0.0, 1.0)] * NUM_KEYPOINTS
    rows[5] = (3.0, 0.0, 1.0)
    rows[6] = (3.0, 8.0, 1.0)
    assert shoulder_head_length(PoseSkeleton.from_rows(rows)) == 5.0


def test_shoulder_head_length_degenerate_zero():
    assert shoulder_head_length(uniform_skeleton(5.0, 5.0)) == 0.0


def test_shoulder_head_length_missing_joints():
    rows = [(0.0, 0.0, 1.0)] * NUM_KEYPOINTS
    rows[0] = (0.0, 0.0, 0.1)  # nose below threshold
    with pytest.raises(MissingJoints):
        shoulder_head_length(PoseSkeleton.from_rows(rows))


def test_pose_distance_identity():
    s = uniform_skeleton(3.0, 7.0)
    assert pose_distance(s, s) == 0.0


def test_pose_distance_uniform_translation():
    a = uniform_skeleton(0.0, 0.0)
    b = uniform_skeleton(3.0, 4.0)
    assert pose_distance(a, b) == 5.0


def test_pose_distance_single_common_joint():
    rows_a = [(0.0, 0.0, 0.0)] * NUM_KEYPOINTS
    rows_a[4] = (0.0, 0.0, 1.0)
    rows_b = [(0.0, 0.0, 0.0)] * NUM_KEYPOINTS
    rows_b[4] = (6.0, 8.0, 1.0)
    assert pose_distance(PoseSkeleton.from_rows(rows_a), PoseSkeleton.from_rows(rows_b)) == 10.0


def test_pose_distance_no_common_joints():
    with pytest.raises(NoCommonJoints):
        pose_distance(uniform_skeleton(conf=0.0), uniform_skeleton(conf=1.0))


@given(visible_skeletons(), visible_skeletons())
def test_pose_distance_symmetric(a, b):
    assert pose_distance(a, b) == pose_distance(b, a)


@given(visible_skeletons(), visible_skeletons(), st.floats(min_value=0.1, max_value=100.0))
@settings(max_examples=50)
def test_pose_distance_scales_linearly(a, b, k):
    def scaled(s):
        return PoseSkeleton.from_rows([(p.x * k, p.y * k, p.confidence) for p in s.keypoints])

    expected = k * pose_distance(a, b)
    assert pose_distance(scaled(a), scaled(b)) == pytest.approx(expected, rel=1e-9, abs=1e-9)


def test_visible_joint_count_all_and_none():
    assert visible_joint_count(uniform_skeleton(conf=1.0), 0.3) == 17
    assert visible_joint_count(uniform_skeleton(conf=0.0), 0.3) == 0


def test_visible_joint_count_mixed():
    rows = [(0.0, 0.0, 0.5)] * 9 + [(0.0, 0.0, 0.1)] * 8
    assert visible_joint_count(PoseSkeleton.from_rows(rows), 0.3) == 9


def _pckh_ground_truth():
    # nose/shoulders placed so the head unit is exactly 8.
    rows = [(float(10 * i), 100.0, 1.0) for i in range(NUM_KEYPOINTS)]
    rows[0] = (0.0, 0.0, 1.0)
    rows[5] = (-6.0, 8.0, 1.0)
    rows[6] = (6.0, 8.0, 1.0)
    skeleton = PoseSkeleton.from_rows(rows)
    assert shoulder_head_length(skeleton) == pytest.approx(8.0)
    return skeleton


def test_pckh_perfect_prediction():
    truth = _pckh_ground_truth()
    assert pckh(truth, truth, alpha=0.5) == 1.0


def test_pckh_all_outside():
    truth = _pckh_ground_truth()
    unit = shoulder_head_length(truth)
    displaced = PoseSkeleton.from_rows(
        [(k.x + 10 * unit, k.y, k.confidence) for k in truth.keypoints]
    )
    assert pckh(displaced, truth, alpha=0.5) == 0.0


def test_pckh_exact_fraction():
    truth = _pckh_ground_truth()
    unit = shoulder_head_length(truth)
    rows = []
    for i, k in enumerate(truth.keypoints):
        offset = 0.0 if i < 8 else 10 * unit  # exactly 8 joints inside the radius
        rows.append((k.x + offset, k.y, k.confidence))
    predicted = PoseSkeleton.from_rows(rows)
    assert pckh(predicted, truth, alpha=0.5) == 8 / 17


def test_pckh_propagates_missing_joints():
    rows = [(0.0, 0.0, 0.0)] * NUM_KEYPOINTS
    truth = PoseSkeleton.from_rows(rows)
    with pytest.raises(MissingJoints):
        pckh(truth, truth, alpha=0.5)


@given(visible_skeletons(), visible_skeletons(),
       st.floats(min_value=0.05, max_value=2.0), st.floats(min_value=0.0, max_value=3.0))
@settings(max_examples=50)
def test_pckh_monotone_in_alpha(predicted, truth, alpha, bump):
    assert pckh(predicted, truth, alpha) <= pckh(predicted, truth, alpha + bump)


@given(visible_skeletons(), visible_skeletons(), st.floats(min_value=0.05, max_value=5.0))
@settings(max_examples=50)
def test_pckh_is_exact_ratio(predicted, truth, alpha):
    value = pckh(predicted, truth, alpha)
    assert 0.0 <= value <= 1.0
    assert value == pytest.approx(round(value * 17) / 17, abs=1e-12)


def test_pose_file_roundtrip(tmp_path):
    frames = {
        0: [uniform_skeleton(1.0, 2.0, 0.9)],
        3: [uniform_skeleton(4.0, 5.0, 0.8), uniform_skeleton(6.0, 7.0, 0.7)],
    }
    path = tmp_path / "poses.jsonl"
    save_pose_file(path, frames)
    loaded = load_pose_file(path)
    assert loaded == frames
