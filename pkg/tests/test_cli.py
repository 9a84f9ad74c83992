import json

import numpy as np
import pytest
import yaml
from PIL import Image

from repose.cli import main
from repose.dataset import read_manifest
from repose.pose import save_pose_file
from repose.synthetic import posed_skeleton, render_frame, scripted_video, write_video_fixture

SCRIPTED_CENTERS = [
    (10, 30), (12, 30), (14, 30), (20, 30), (22, 30), (30, 30), (31, 30), (40, 30),
]
SCRIPTED_KEEP = [0, 3, 5, 7]


@pytest.fixture
def workspace(tmp_path):
    frames_dir = tmp_path / "frames"
    poses_dir = tmp_path / "poses"
    out_dir = tmp_path / "out"
    records = scripted_video("vid0", SCRIPTED_CENTERS, size=64, scale=0.3)
    write_video_fixture(frames_dir, poses_dir, records)
    config = {
        "seed": 0,
        "variant": "c4",
        "paths": {
            "frames_dir": str(frames_dir),
            "poses_dir": str(poses_dir),
            "out_dir": str(out_dir),
        },
        "curation": {"reference_resolution": 32},
        "diffusion": {
            "timesteps": 10,
            "base_width": 4,
            "channel_mults": [1],
            "attn_dim": 2,
            "epochs": 2,
            "batch_size": 4,
            "checkpoint_every": 0,
            "sample_steps": 5,
        },
    }
    config_path = tmp_path / "config.yaml"
    config_path.write_text(yaml.safe_dump(config))
    return tmp_path, config_path, out_dir


def test_dataset_build_oracle_and_determinism(workspace, capsys):
    tmp_path, config_path, out_dir = workspace
    assert main(["--config", str(config_path), "dataset", "build"]) == 0
    manifest_path = out_dir / "manifest.jsonl"
    first_bytes = manifest_path.read_bytes()

    records = read_manifest(manifest_path)
    kept = sorted({r.pair.target_frame_index for r in records})
    assert kept == SCRIPTED_KEEP
    assert len(records) == len(SCRIPTED_KEEP) * (len(SCRIPTED_KEEP) - 1)
    for record in records:
        for rel in (record.masked_target_path, record.mask_path, record.reference_crop_path):
            assert (out_dir / rel).exists()

    # Byte-identical rerun, also with parallel workers.
    assert main(["--config", str(config_path), "dataset", "build", "--jobs", "3"]) == 0
    assert manifest_path.read_bytes() == first_bytes

    stats = json.loads((out_dir / "dataset_stats.json").read_text())
    assert stats["seed"] == 0
    assert stats["pairs"] == 12
    assert stats["videos"] == 1


def test_dataset_build_empty_input(tmp_path, capsys):
    frames_dir = tmp_path / "frames"
    frames_dir.mkdir()
    config_path = tmp_path / "c.yaml"
    config_path.write_text(yaml.safe_dump({
        "paths": {
            "frames_dir": str(frames_dir),
            "poses_dir": str(tmp_path / "poses"),
            "out_dir": str(tmp_path / "out"),
        }
    }))
    assert main(["--config", str(config_path), "dataset", "build"]) == 0
    manifest = (tmp_path / "out" / "manifest.jsonl").read_text()
    assert manifest == ""
    out = capsys.readouterr().out
    assert "0" in out


def test_dataset_build_unreadable_input(tmp_path):
    config_path = tmp_path / "c.yaml"
    config_path.write_text(yaml.safe_dump({
        "paths": {
            "frames_dir": str(tmp_path / "missing"),
            "poses_dir": str(tmp_path / "poses"),
            "out_dir": str(tmp_path / "out"),
        }
    }))
    assert main(["--config", str(config_path), "dataset", "build"]) == 2


def test_dataset_build_missing_pose_file_cleans_partials(workspace):
    tmp_path, config_path, out_dir = workspace
    # Second video with frames but no pose file.
    bad_dir = tmp_path / "frames" / "vid1"
    bad_dir.mkdir()
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(bad_dir / "000000.png")
    assert main(["--config", str(config_path), "dataset", "build"]) == 2
    assert not (out_dir / "manifest.jsonl").exists()
    assert list((out_dir / "assets").glob("*.png")) == []


def test_caption_stub_deterministic_and_no_overwrite(workspace):
    _, config_path, out_dir = workspace
    assert main(["--config", str(config_path), "dataset", "build"]) == 0
    assert main(["--config", str(config_path), "caption", "--stub"]) == 0
    manifest_path = out_dir / "manifest.jsonl"
    first = [r.pair.caption for r in read_manifest(manifest_path)]
    assert all(first)

    assert main(["--config", str(config_path), "caption", "--stub"]) == 0
    second = [r.pair.caption for r in read_manifest(manifest_path)]
    assert second == first

    # Manually edit one caption; --no-overwrite must keep it.
    from repose.dataset import write_manifest

    records = read_manifest(manifest_path)

    records[0] = records[0].with_caption("Hand-edited caption.")
    write_manifest(manifest_path, records)
    assert main(["--config", str(config_path), "caption", "--stub", "--no-overwrite"]) == 0
    kept = read_manifest(manifest_path)[0].pair.caption
    assert kept == "Hand-edited caption."
    assert (out_dir / "captions.jsonl").exists()


def test_caption_without_endpoint_exits_3(workspace, monkeypatch):
    _, config_path, _ = workspace
    assert main(["--config", str(config_path), "dataset", "build"]) == 0
    monkeypatch.delenv("REPOSE_CAPTIONER_ENDPOINT", raising=False)
    assert main(["--config", str(config_path), "caption"]) == 3


def test_train_edit_eval_roundtrip(workspace, tmp_path):
    _, config_path, out_dir = workspace
    assert main(["--config", str(config_path), "dataset", "build"]) == 0
    assert main(["--config", str(config_path), "caption", "--stub"]) == 0
    assert main(["--config", str(config_path), "train", "--epochs", "1"]) == 0
    checkpoints = sorted((out_dir / "checkpoints").glob("checkpoint_*.pt"))
    assert checkpoints
    loss_lines = (out_dir / "loss_log.csv").read_text().strip().splitlines()
    assert loss_lines[0] == "step,epoch,loss"
    assert len(loss_lines) - 1 == 1 * 3  # 12 pairs / batch 4 = 3 steps

    # edit: C4 checkpoint accepts caption + pose
    scene, _ = render_frame(64, (32, 30), 0.3, (10, 200, 30))
    scene_path = tmp_path / "scene.png"
    Image.fromarray(scene).save(scene_path)
    reference, _ = render_frame(64, (32, 30), 0.3, (200, 30, 10))
    reference_path = tmp_path / "ref.png"
    Image.fromarray(reference).save(reference_path)
    pose_path = tmp_path / "pose.jsonl"
    save_pose_file(pose_path, {0: [posed_skeleton(32, 30, 0.3)]})
    out_path = tmp_path / "edit.png"

    args = [
        "--config", str(config_path), "edit",
        "--checkpoint", str(checkpoints[-1]),
        "--scene", str(scene_path),
        "--bbox", "16,4,48,60",
        "--reference", str(reference_path),
        "--caption", "The person stands tall.",
        "--pose", str(pose_path),
        "--out", str(out_path),
        "--overlay",
    ]
    assert main(args) == 0
    assert out_path.exists()
    assert (tmp_path / "edit_overlay.png").exists()
    first_bytes = out_path.read_bytes()
    assert main(args) == 0
    assert out_path.read_bytes() == first_bytes  # seeded determinism

    # eval: identical sets give ~zero FID; ratings fixture renders exactly.
    gen_dir = tmp_path / "gen"
    ref_dir = tmp_path / "refs"
    gen_dir.mkdir()
    ref_dir.mkdir()
    rng = np.random.default_rng(0)
    for i in range(6):
        image = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        Image.fromarray(image).save(gen_dir / f"{i}.png")
        Image.fromarray(image).save(ref_dir / f"{i}.png")
    ratings_path = tmp_path / "ratings.csv"
    rows = ["scene_id,config,question,rater_id,score"]
    for i in range(200):
        rows.append(f"s{i},c4,identity,r1,{1 if i < 137 else 0}")
    ratings_path.write_text("\n".join(rows) + "\n")

    report_path = tmp_path / "report.json"
    assert main([
        "--config", str(config_path), "eval",
        "--generated", str(gen_dir), "--reference", str(ref_dir),
        "--ratings", str(ratings_path), "--out", str(report_path),
    ]) == 0
    report = json.loads(report_path.read_text())
    assert report["fid"] <= 1e-6
    assert report["ratings"]["c4"]["identity"] == "68.5%"
    assert report["seed"] == 0


def test_edit_modality_mismatch_exit_5(workspace, tmp_path):
    _, config_path, out_dir = workspace
    # c1 checkpoint refuses a caption
    import yaml as yaml_mod

    config = yaml_mod.safe_load(config_path.read_text())
    config["variant"] = "c1"
    c1_path = tmp_path / "c1.yaml"
    c1_path.write_text(yaml_mod.safe_dump(config))

    assert main(["--config", str(c1_path), "dataset", "build"]) == 0
    assert main(["--config", str(c1_path), "train", "--epochs", "0"]) == 0
    checkpoint = sorted((out_dir / "checkpoints").glob("checkpoint_*.pt"))[-1]

    scene, _ = render_frame(64, (32, 30), 0.3, (10, 200, 30))
    scene_path = tmp_path / "scene.png"
    Image.fromarray(scene).save(scene_path)

    code = main([
        "--config", str(c1_path), "edit",
        "--checkpoint", str(checkpoint),
        "--scene", str(scene_path),
        "--bbox", "16,4,48,60",
        "--reference", str(scene_path),
        "--caption", "Not allowed here.",
        "--out", str(tmp_path / "e.png"),
    ])
    assert code == 5


def test_edit_zero_area_bbox_usage_error(workspace, tmp_path):
    _, config_path, _ = workspace
    with pytest.raises(SystemExit) as excinfo:
        main([
            "--config", str(config_path), "edit",
            "--checkpoint", "x.pt", "--scene", "s.png",
            "--bbox", "10,10,10,20", "--reference", "r.png",
        ])
    assert excinfo.value.code == 2


def test_eval_malformed_ratings_exit_6(workspace, tmp_path):
    _, config_path, _ = workspace
    gen_dir = tmp_path / "gen"
    gen_dir.mkdir()
    for i in range(3):
        Image.fromarray(np.full((8, 8, 3), 50 * i, np.uint8)).save(gen_dir / f"{i}.png")
    bad = tmp_path / "bad.csv"
    bad.write_text("scene_id,config,question,rater_id,score\ns1,c1,identity,r1,7\n")
    code = main([
        "--config", str(config_path), "eval",
        "--generated", str(gen_dir), "--reference", str(gen_dir),
        "--ratings", str(bad), "--out", str(tmp_path / "r.json"),
    ])
    assert code == 6


def test_eval_missing_poses_warns_but_runs(workspace, tmp_path, caplog):
    _, config_path, _ = workspace
    gen_dir = tmp_path / "gen"
    gen_dir.mkdir()
    for i in range(3):
        Image.fromarray(np.full((8, 8, 3), 40 * i, np.uint8)).save(gen_dir / f"{i}.png")
    report_path = tmp_path / "r.json"
    assert main([
        "--config", str(config_path), "eval",
        "--generated", str(gen_dir), "--reference", str(gen_dir),
        "--generated-poses", str(tmp_path / "absent.jsonl"),
        "--reference-poses", str(tmp_path / "absent2.jsonl"),
        "--out", str(report_path),
    ]) == 0
    report = json.loads(report_path.read_text())
    assert "fid" in report
    assert "pckh" not in report
