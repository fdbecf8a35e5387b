import json
import logging

import pytest

from core.errors import ConfigError
from core.log import LOG_LEVEL_ENV, configure_logging
from core.settings import DEFAULT_CONFIG_PATH, SCGAConfig, allocate_heads, build_config, load_config
from tests.conftest import tiny_values


class TestLoadConfig:
    def test_project_config_loads(self):
        config = load_config(DEFAULT_CONFIG_PATH)
        assert config.d % config.K == 0
        assert config.head_assignment() == {1: 1, 2: 1, 3: 2, 4: 4}

    def test_overrides_take_precedence_and_none_is_ignored(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(tiny_values()), encoding="utf-8")
        config = load_config(path, {"epochs": 5, "beam": None})
        assert config.epochs == 5
        assert config.beam == SCGAConfig.model_fields["beam"].default

    def test_comment_keys_are_skipped(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"_note": "toy", **tiny_values()}), encoding="utf-8")
        assert load_config(path).d == 16

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(path)


class TestValidation:
    def test_width_must_divide_into_heads(self):
        with pytest.raises(ConfigError, match="not divisible"):
            build_config(tiny_values(K=3))

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="colour"):
            build_config(tiny_values(colour="red"))

    def test_distances_strictly_increasing(self):
        with pytest.raises(ConfigError):
            build_config(tiny_values(distances=[2, 1]))

    def test_head_allocation_must_sum_to_K(self):
        with pytest.raises(ConfigError, match="sum to K"):
            build_config(tiny_values(heads_per_distance={1: 1, 2: 1}))

    def test_drift_below_temporal_threshold(self):
        with pytest.raises(ConfigError, match="drift"):
            build_config(tiny_values(drift=0.3))


class TestAllocateHeads:
    def test_default_distances(self):
        assert allocate_heads([1, 2, 3, 4], 8) == {1: 1, 2: 1, 3: 2, 4: 4}

    def test_extra_heads_go_to_the_widest_neighborhood(self):
        assert allocate_heads([1, 2], 4) == {1: 1, 2: 3}

    def test_too_few_heads(self):
        with pytest.raises(ConfigError):
            allocate_heads([1, 2, 3], 2)


class TestLogging:
    def test_level_from_environment(self, monkeypatch):
        monkeypatch.setenv(LOG_LEVEL_ENV, "debug")
        assert configure_logging() == logging.DEBUG

    def test_unknown_level_falls_back_to_warning(self, monkeypatch):
        monkeypatch.delenv(LOG_LEVEL_ENV, raising=False)
        assert configure_logging("chatty") == logging.WARNING
