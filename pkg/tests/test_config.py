"""
tests/test_config.py — run-config parsing, validation and hashing.

Run with: pytest tests/test_config.py -v
"""
from pathlib import Path

import pytest

from app import config
from app.config import ConfigError, TrainConfig, config_hash, load_train_config, parse_train_config


def _write(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    return path


class TestParsing:
    def test_file_values_are_coerced(self, tmp_path):
        path = _write(tmp_path, "# comment\niterations=12\nlr_gen=1e-4\ntrunk_widths=32,16\nlabel_rule=theta\n")
        cfg = load_train_config(path)
        assert cfg.iterations == 12
        assert cfg.lr_gen == pytest.approx(1e-4)
        assert cfg.trunk_widths == (32, 16)
        assert cfg.label_rule == "theta"

    def test_overrides_win_and_none_is_ignored(self, tmp_path):
        path = _write(tmp_path, "seed=3\n")
        assert load_train_config(path, seed=9).seed == 9
        assert load_train_config(path, seed=None).seed == 3

    def test_extra_keys_are_kept(self):
        cfg = parse_train_config({"extra.note": "smoke"})
        assert cfg.extra == {"note": "smoke"}

    def test_no_path_gives_defaults(self):
        assert load_train_config(None) == TrainConfig()


class TestValidation:
    @pytest.mark.parametrize("key,value", [
        ("d_steps", "0"),
        ("classes", "7"),
        ("image_size", "20"),
        ("image_size", "4"),
        ("generator_loss", "hinge"),
        ("zero_shot_direction", "sideways"),
        ("lambda_cycle", "-1"),
        ("iterations", "many"),
    ])
    def test_bad_value_names_field(self, key, value):
        with pytest.raises(ConfigError) as exc:
            parse_train_config({key: value})
        assert exc.value.field == key

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            parse_train_config({"learning_rate": "0.1"})
        assert exc.value.field == "learning_rate"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError) as exc:
            load_train_config(tmp_path / "nope.cfg")
        assert exc.value.field == "config"


class TestHash:
    def test_hash_is_stable_and_short(self):
        assert config_hash(TrainConfig()) == config_hash(TrainConfig())
        assert len(config_hash(TrainConfig())) == 12

    def test_hash_changes_with_any_field(self):
        base = TrainConfig()
        assert config_hash(base) != config_hash(base.with_overrides(lfs=base.lfs + 1))
        assert config_hash(base) != config_hash(base.with_overrides(lr_disc=base.lr_disc * 2))

    def test_canonical_text_is_sorted(self):
        keys = [line.split("=", 1)[0] for line in TrainConfig().canonical_text().splitlines()]
        assert keys == sorted(keys)


class TestEnvironment:
    @pytest.mark.parametrize("raw,expected", [
        ("1", True), ("true", True), ("YES", True), ("0", False), ("off", False), (None, False),
    ])
    def test_truthy(self, raw, expected):
        assert config._truthy(raw) is expected

    def test_optional_reads_environment(self, monkeypatch):
        monkeypatch.setenv("ADP_SOMETHING", "x")
        assert config._optional("ADP_SOMETHING") == "x"
        monkeypatch.delenv("ADP_SOMETHING")
        assert config._optional("ADP_SOMETHING", "fallback") == "fallback"
