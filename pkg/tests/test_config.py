import pytest

from a2s.config import (RunConfig, apply_overrides, load_run_config,
                        parse_config_text)
from a2s.corruption import Stage
from a2s.errors import ContractViolation, DataError, UsageError


def test_parse_values_and_sections():
    raw = parse_config_text("""
# comment
[train]
batch_size = 16
lr_start = 4e-4
lr_schedule = "linear"

[curriculum]
stage_epochs = [2, 3, 1]
finetune_mode = autoregressive

[dataset]
precompute_embeddings = false
""")
    assert raw["train"]["batch_size"] == 16
    assert raw["train"]["lr_start"] == pytest.approx(4e-4)
    assert raw["curriculum"]["stage_epochs"] == [2, 3, 1]
    assert raw["dataset"]["precompute_embeddings"] is False


def test_inline_comments_and_quotes():
    raw = parse_config_text('[transcriber]\nweights = "w#1.pt"  # path with hash\n')
    assert raw["transcriber"]["weights"] == "w#1.pt"


def test_build_run_config_roundtrip(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text("""
[model]
conv_channels = 8
conv_kernel = [4, 12]

[train]
batch_size = 4

[corruption]
stage = pretrain
seed = 42
""")
    cfg = load_run_config(p)
    assert cfg.model.conv_channels == 8
    assert cfg.model.conv_kernel == (4, 12)
    assert cfg.train.batch_size == 4
    assert cfg.corruption.stage is Stage.PRETRAIN
    assert cfg.corruption.seed == 42
    # untouched sections keep defaults
    assert cfg.train.lr_start == pytest.approx(4e-4)
    assert cfg.train.lr_end == pytest.approx(6e-4)


def test_unknown_section_and_key():
    with pytest.raises(DataError):
        load_run_config_from_text("[nope]\nx = 1\n")
    with pytest.raises(DataError):
        load_run_config_from_text("[train]\nbanana = 1\n")


def load_run_config_from_text(text):
    from a2s.config import build_run_config
    return build_run_config(parse_config_text(text))


def test_overrides():
    cfg = RunConfig()
    cfg = apply_overrides(cfg, ["train.batch_size=3", "curriculum.stage_steps=[5,6,7]",
                                "model.variant=chord_only"])
    assert cfg.train.batch_size == 3
    assert cfg.curriculum.stage_steps == (5, 6, 7)
    assert cfg.model.variant == "chord_only"
    with pytest.raises(UsageError):
        apply_overrides(cfg, ["notdotted=3"])


def test_config_validation():
    with pytest.raises(ContractViolation):
        apply_overrides(RunConfig(), ["model.variant=bogus"])
    with pytest.raises(ContractViolation):
        apply_overrides(RunConfig(), ["curriculum.beta_high=0.9"])
    with pytest.raises(ContractViolation):
        apply_overrides(RunConfig(), ["curriculum.stage_epochs=[0,1,2]"])


def test_missing_config_file():
    with pytest.raises(DataError):
        load_run_config("/nonexistent/config.toml")
