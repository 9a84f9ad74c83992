import pytest
import yaml

from repose.config import RunConfig, config_from_dict, load_config


def test_defaults():
    config = RunConfig()
    assert config.seed == 0
    assert config.variant == "c4"
    assert config.curation.sim_min == 0.35
    assert config.curation.sim_max == 0.98
    assert config.curation.min_pose_dist_factor == 1.0
    assert config.curation.visibility_threshold == 0.3
    assert config.curation.majority_count == 9
    assert config.diffusion.timesteps == 100
    assert config.diffusion.beta_start == 1e-4
    assert config.diffusion.beta_end == 0.02
    assert config.diffusion.guidance_weight == 3.0
    assert config.diffusion.cond_dropout == 0.1


def test_every_default_overridable(tmp_path):
    data = {
        "seed": 7,
        "variant": "c2",
        "curation": {"sim_min": 0.2, "max_keyframes": 3},
        "diffusion": {"timesteps": 50, "channel_mults": [1, 2, 4]},
        "conditioning": {"dual_pose": True},
    }
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(data))
    config = load_config(path)
    assert config.seed == 7
    assert config.variant == "c2"
    assert config.curation.sim_min == 0.2
    assert config.curation.max_keyframes == 3
    assert config.curation.sim_max == 0.98  # untouched default
    assert config.diffusion.timesteps == 50
    assert config.diffusion.channel_mults == (1, 2, 4)
    assert config.conditioning.dual_pose is True


def test_missing_file_gives_defaults():
    assert load_config(None) == RunConfig()


def test_unknown_key_rejected():
    with pytest.raises(ValueError):
        config_from_dict({"tpyo": 1})
    with pytest.raises(ValueError):
        config_from_dict({"curation": {"no_such_threshold": 2}})


def test_paths_derived(tmp_path):
    config = config_from_dict({"paths": {"out_dir": str(tmp_path / "x")}})
    assert config.paths.manifest_path.name == "manifest.jsonl"
    assert config.paths.assets_dir.parent == tmp_path / "x"
