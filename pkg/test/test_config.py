from pathlib import Path

import pytest

from src.config import SEED_ENV, ConfigError, RunConfig, load_config, parse_config

EXAMPLE = Path(__file__).resolve().parents[1] / "configs" / "example.yaml"


def write_yaml(tmp_path, text):
    path = tmp_path / "run.yaml"
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults_are_valid():
    config = parse_config({})
    assert isinstance(config, RunConfig)
    assert config.command == "train"
    assert config.run_seeds == (0,)
    assert config.variants[0].label == "Full"
    assert config.dataset_seed == 0


def test_example_config_loads(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    config = load_config(EXAMPLE, "train")
    assert [v.label for v in config.variants] == [
        "Full",
        "FS@0.0625",
        "BS@0.0625",
        "VDN-mixed+FS@0.0625",
        "NS@0.03125",
    ]
    assert config.run_seeds == (0, 1, 2, 3, 4)
    assert config.analysis.speedup_cases == ((401408, 0.03125),)
    assert config.model.conv_channels == (8, 8, 8)


def test_unknown_keys_are_named():
    with pytest.raises(ConfigError) as info:
        parse_config({"train": {"epochs": 2, "epochz": 3}})
    assert info.value.field == "train.epochz"
    with pytest.raises(ConfigError) as info:
        parse_config({"trian": {}})
    assert info.value.field == "trian"


def test_out_of_range_ratio_names_the_field():
    raw = {"variants": [{"strategy": "Full"}, {"strategy": "FS", "ratio": 1.5}]}
    with pytest.raises(ConfigError) as info:
        parse_config(raw)
    assert info.value.field == "variants[1].ratio"
    assert "ratio" in str(info.value)


@pytest.mark.parametrize(
    "raw,field",
    [
        ({"variants": [{"strategy": "Full", "ratio": 0.5}]}, "variants[0].ratio"),
        ({"variants": [{"strategy": "XS"}]}, "variants[0].strategy"),
        ({"variants": [{"strategy": "FS", "ratio": 0.5}, {"strategy": "FS", "ratio": 0.5}]}, "variants[1].name"),
        ({"microbn": {"statistic_batch": 5}}, "microbn.statistic_batch"),
        ({"microbn": {"policies": ["gn"]}}, "microbn.policies"),
        ({"train": {"decay": 0.0}}, "train.decay"),
        ({"bench": {"repetitions": 3}}, "bench.repetitions"),
        ({"seeds": []}, "seeds"),
    ],
)
def test_invalid_values(raw, field):
    with pytest.raises(ConfigError) as info:
        parse_config(raw)
    assert info.value.field == field


def test_batch_larger_than_train_split_only_matters_for_training():
    raw = {"dataset": {"classes": 2, "per_class": 8}, "train": {"batch_size": 64}}
    with pytest.raises(ConfigError) as info:
        parse_config(raw, "train")
    assert info.value.field == "train.batch_size"
    assert parse_config(raw, "bench").command == "bench"


def test_seed_overrides(tmp_path, monkeypatch):
    path = write_yaml(tmp_path, "seed: 3\nseeds: [0, 10]\n")
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert load_config(path).run_seeds == (3, 13)
    monkeypatch.setenv(SEED_ENV, "7")
    assert load_config(path).seed == 7
    assert load_config(path, seed=11).seed == 11
    monkeypatch.setenv(SEED_ENV, "seven")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.field == "seed"


def test_flags_override_out_and_jobs(tmp_path, monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    path = write_yaml(tmp_path, "out: somewhere\njobs: 2\n")
    config = load_config(path, "bench", out=tmp_path / "elsewhere", jobs=3)
    assert config.out == tmp_path / "elsewhere"
    assert config.jobs == 3
    assert config.command == "bench"


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="file not found"):
        load_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(write_yaml(tmp_path, "train: [1, 2\n"))
    with pytest.raises(ConfigError, match="mapping"):
        load_config(write_yaml(tmp_path, "- 1\n- 2\n"))
