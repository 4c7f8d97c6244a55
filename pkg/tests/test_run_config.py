from pathlib import Path

import pytest
import yaml

from errors import ValidationError
from run_config import RESOLVED_CONFIG_FILE, RunConfig, load_run_config, save_resolved_config

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def write_yaml(path, payload):
    path.write_text(yaml.safe_dump(payload))
    return path


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ValidationError, match="colour"):
        load_run_config(write_yaml(tmp_path / "a.yaml", {"colour": "red"}))
    with pytest.raises(ValidationError, match="mining"):
        load_run_config(write_yaml(tmp_path / "b.yaml", {"mining": {"lr": 1.0}}))
    with pytest.raises(ValidationError, match="datasets.source"):
        load_run_config(write_yaml(tmp_path / "c.yaml", {"datasets": {"source": {"root": "x", "folder": "y"}}}))


def test_seed_reaches_every_stage():
    config = load_run_config(seed=11, base=RunConfig.toy())
    assert config.seed == 11
    assert config.mining.seed == config.concept.seed == config.source_train.seed == config.adapt.seed == 11


def test_missing_seed_keeps_the_file_value(tmp_path):
    config = load_run_config(write_yaml(tmp_path / "a.yaml", {"seed": 4, "adapt": {"seed": 4}}))
    assert config.seed == 4 and config.adapt.seed == 4


def test_reference_defaults():
    config = RunConfig.reference().validate()
    assert config.backend == "clip-RN50"
    assert config.mining.iterations == 100
    assert config.mining.learning_rate == 1.0
    assert config.mining.momentum == 0.9
    assert config.adapt.iterations == 2000
    assert config.adapt.batch_size == 8
    assert config.adapt.lr_init == 0.01
    assert config.source_train.lr_classifier == 0.1
    assert config.dataset("target").num_classes == 19


@pytest.mark.parametrize("name", ["toy.yaml", "reference.yaml"])
def test_shipped_configs_load(name):
    config = load_run_config(CONFIG_DIR / name)
    assert "source" in config.datasets and "target" in config.datasets


def test_shipped_reference_matches_builtin():
    from_file = load_run_config(CONFIG_DIR / "reference.yaml")
    builtin = RunConfig.reference()
    assert from_file.mining == builtin.mining
    assert from_file.adapt == builtin.adapt
    assert from_file.dataset("target") == builtin.dataset("target")


def test_presets_resolve_in_yaml(tmp_path):
    payload = {"datasets": {"night": {"preset": "acdc-night", "root": "/data/acdc", "split": "val"}}}
    spec = load_run_config(write_yaml(tmp_path / "a.yaml", payload)).dataset("night")
    assert spec.remap == "cityscapes" and spec.split == "val"


def test_dataset_without_root_is_rejected(tmp_path):
    with pytest.raises(ValidationError, match="root"):
        load_run_config(write_yaml(tmp_path / "a.yaml", {"datasets": {"source": {"split": "train"}}}))


def test_unknown_dataset_name():
    with pytest.raises(ValidationError, match="not configured"):
        RunConfig.toy().dataset("target")


def test_missing_dataset_root_is_reported(tmp_path):
    config = RunConfig.reference()
    with pytest.raises(ValidationError, match="does not exist"):
        config.validate_paths(["source"])


def test_invalid_values_are_rejected(tmp_path):
    with pytest.raises(ValidationError):
        load_run_config(write_yaml(tmp_path / "a.yaml", {"backend": "vit-huge"}))
    with pytest.raises(ValidationError):
        load_run_config(write_yaml(tmp_path / "b.yaml", {"workers": 0}))
    with pytest.raises(ValidationError):
        load_run_config(tmp_path / "missing.yaml")


def test_resolved_config_round_trips(tmp_path):
    config = RunConfig.reference().with_seed(5)
    path = save_resolved_config(config, tmp_path / "out")
    assert path.name == RESOLVED_CONFIG_FILE
    assert load_run_config(path) == config
