import os

import pytest
import yaml

from src.config import DEFAULTS, RESOLVED_CONFIG_FILE, RunConfig, build_from_config, dump_run_config, load_run_config
from src.errors import ConfigError
from src.peft import DeltaSpec, LoRAConfig, count_parameters


def write_yaml(path, mapping):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(mapping, fh)
    return str(path)


def test_defaults():
    cfg = RunConfig.from_mapping(None)
    assert cfg.encoder.embed_dim == 64
    assert cfg.lora.targets == ("query", "value")
    assert cfg.adapter is None
    assert cfg.train.lambda_ce == 0.2
    assert cfg.target_size == 64
    assert cfg.granularity == "micro"


def test_nested_and_dotted_keys(tmp_path):
    path = write_yaml(
        tmp_path / "run.yaml",
        {"encoder": {"preset": "vit_b"}, "lora.rank": "8", "train": {"epochs": 3, "lr0": "1e-3"}},
    )
    cfg = load_run_config(path)
    assert cfg.encoder.embed_dim == 768
    assert cfg.lora.rank == 8
    assert cfg.train.epochs == 3
    assert cfg.train.lr0 == pytest.approx(1e-3)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="lora.alpha"):
        RunConfig.from_mapping({"lora": {"alpha": 16}})


@pytest.mark.parametrize(
    "mapping",
    [
        {"lora.targets": "query,gate"},
        {"train.lambda_ce": 2.0},
        {"eval.granularity": "pixel"},
        {"adapter.enabled": "maybe"},
        {"encoder.preset": "vit_xl"},
    ],
)
def test_invalid_values(mapping):
    with pytest.raises(ConfigError):
        cfg = RunConfig.from_mapping(mapping)
        cfg.lora, cfg.train, cfg.adapter, cfg.encoder


@pytest.mark.parametrize("key", ["train.epochs", "lora.rank", "train.batch_size", "encoder.image_size"])
def test_fractional_value_for_integer_key(key):
    with pytest.raises(ConfigError, match=key):
        RunConfig.from_mapping({key: 2.5})


def test_whole_float_for_integer_key():
    cfg = RunConfig.from_mapping({"train.epochs": 3.0, "data.target_size": 32.0})
    assert cfg.train.epochs == 3
    assert isinstance(cfg["train.epochs"], int)
    assert cfg.target_size == 32


def test_delta_spec_from_config():
    assert RunConfig.from_mapping(None).delta == DeltaSpec(None, LoRAConfig(4, ("query", "value")))
    delta = RunConfig.from_mapping({"lora.enabled": False, "adapter.enabled": True, "adapter.middle_dim": 8}).delta
    assert delta.lora is None
    assert delta.adapter.middle_dim == 8


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "absent.yaml"))
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        load_run_config(str(bad))


def test_override_and_dump(tmp_path):
    cfg = RunConfig.from_mapping({"run": {"output_dir": str(tmp_path)}})
    updated = cfg.override(train_epochs=2, lora_enabled=False)
    assert updated.train.epochs == 2
    assert updated.lora is None
    assert cfg.train.epochs == DEFAULTS["train.epochs"]

    path = dump_run_config(updated)
    assert path == os.path.join(str(tmp_path), RESOLVED_CONFIG_FILE)
    assert load_run_config(path).to_dict() == updated.to_dict()


def test_build_from_config_counts():
    cfg = RunConfig.from_mapping({"encoder.preset": "vit_h", "lora.rank": 1})
    model, mask = build_from_config(cfg, materialize=False)
    assert count_parameters(model, "delta") == 163_840
    assert len(mask) == sum(1 for _, p in model.named_parameters() if p.tunable)


def test_build_from_config_is_deterministic():
    cfg = RunConfig.from_mapping({"adapter.enabled": True, "adapter.middle_dim": 4, "run.seed": 5})
    a, _ = build_from_config(cfg)
    b, _ = build_from_config(cfg)
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert (pa.data == pb.data).all(), name
