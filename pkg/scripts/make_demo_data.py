#!/usr/bin/env python3
"""Build a synthetic demo workspace: scripted video, poses, and a run config.

Usage: python scripts/make_demo_data.py [workdir]

Afterwards:
    repose --config <workdir>/run.yaml dataset build
    repose --config <workdir>/run.yaml caption --stub
    repose --config <workdir>/run.yaml train --epochs 20
"""

import sys
from pathlib import Path

import yaml

from repose.synthetic import scripted_video, write_video_fixture

# Shoulder-to-head unit is 9 px at scale 0.3: moves of >= 9 px qualify.
CENTERS = {
    "walk_right": [(10, 30), (12, 30), (20, 30), (22, 30), (30, 30), (40, 30)],
    "pace": [(20, 30), (34, 30), (20, 30), (34, 30), (20, 30)],
}


def main() -> int:
    workdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_workspace")
    frames_dir = workdir / "frames"
    poses_dir = workdir / "poses"
    records = []
    for video_id, centers in CENTERS.items():
        records.extend(scripted_video(video_id, centers, size=64, scale=0.3))
    write_video_fixture(frames_dir, poses_dir, records)

    config = {
        "seed": 0,
        "variant": "c4",
        "paths": {
            "frames_dir": str(frames_dir),
            "poses_dir": str(poses_dir),
            "out_dir": str(workdir / "out"),
        },
        "curation": {"reference_resolution": 64},
        "diffusion": {
            "timesteps": 100,
            "base_width": 32,
            "channel_mults": [1, 2],
            "epochs": 20,
            "batch_size": 2,
            "checkpoint_every": 10,
        },
    }
    config_path = workdir / "run.yaml"
    config_path.write_text(yaml.safe_dump(config, sort_keys=False))
    print(f"wrote {len(records)} frames across {len(CENTERS)} videos under {workdir}/")
    print(f"run config: {config_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
