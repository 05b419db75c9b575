import logging

import allure
import pytest

from scene4d.config import (DEFAULT_PROFILE, PROFILES, PipelineConfig,
                            config_from_text, configure_logging, load_config,
                            parse_key_values)
from scene4d.errors import ConfigError


@allure.feature("Конфигурация")
class TestPipelineConfig:

    @allure.title("Значения по умолчанию совпадают с профилем odzemok")
    @pytest.mark.positive
    def test_defaults(self):
        config = PipelineConfig()
        assert config.profile == DEFAULT_PROFILE
        assert (config.lambda_data, config.lambda_contrast,
                config.lambda_smooth, config.lambda_color) \
            == PROFILES["odzemok"]
        assert config.depth_samples + 1 == 128
        assert config.photo_unknown_cost == pytest.approx(1.5)

    @pytest.mark.positive
    @pytest.mark.parametrize("name", sorted(PROFILES))
    def test_profile_weights(self, name):
        config = config_from_text(f"profile = {name}\n")
        assert config.profile == name
        assert (config.lambda_data, config.lambda_contrast,
                config.lambda_smooth, config.lambda_color) == PROFILES[name]

    @allure.title("Явный ключ файла перекрывает профиль")
    @pytest.mark.positive
    def test_explicit_key_wins(self):
        config = config_from_text("profile = juggler\nlambda_smooth = 0.01\n")
        assert config.lambda_data == 0.5
        assert config.lambda_smooth == 0.01

    @pytest.mark.positive
    def test_cli_profile_overrides_file(self):
        config = config_from_text("profile = juggler\n", profile="office")
        assert config.profile == "office"
        assert config.lambda_data == 0.4

    @pytest.mark.positive
    @pytest.mark.parametrize("text, key, expected", [
        ("continue_on_error = yes", "continue_on_error", True),
        ("continue_on_error = off", "continue_on_error", False),
        ("unknown_cost = 0.75", "unknown_cost", 0.75),
        ("unknown_cost = none", "unknown_cost", None),
        ("num_frames = 5  # five frames", "num_frames", 5),
        ("frame_pattern = img/{t}_{view}.ppm", "frame_pattern",
         "img/{t}_{view}.ppm"),
    ])
    def test_value_parsing(self, text, key, expected):
        assert getattr(config_from_text(text), key) == expected

    @pytest.mark.positive
    def test_explicit_unknown_cost(self):
        config = config_from_text("unknown_cost = 0.2\nk_photoconsistent = 4")
        assert config.photo_unknown_cost == 0.2
        assert config_from_text("k_photoconsistent = 4").photo_unknown_cost \
            == 2.0

    @pytest.mark.negative
    @pytest.mark.parametrize("text, line", [
        ("lambda_data = 0.4\nmystery = 1\n", 2),
        ("depth_samples = many\n", 1),
        ("\n\nlambda_data 0.4\n", 3),
        ("num_frames = 2\nnum_frames = 3\n", 2),
        ("base_dir = /tmp\n", 1),
    ])
    def test_bad_lines_name_line(self, text, line):
        with pytest.raises(ConfigError) as info:
            config_from_text(text)
        assert info.value.line == line
        assert f"line {line}" in str(info.value)

    @pytest.mark.negative
    @pytest.mark.parametrize("text", [
        "lambda_data = -1",
        "percentile_trim = 0.5",
        "gmm_components = 0",
        "geodesic_gamma = 1.5",
        "patch_window = 4",
        "num_frames = 0",
        "epsilon_consistency = 0",
    ])
    def test_validation(self, text):
        with pytest.raises(ConfigError):
            config_from_text(text)

    @pytest.mark.negative
    def test_unknown_profile(self):
        with pytest.raises(ConfigError, match="unknown profile"):
            config_from_text("profile = ballet\n")


@allure.feature("Конфигурация")
class TestConfigFiles:

    @pytest.mark.positive
    def test_load_resolves_relative_paths(self, tmp_path):
        path = tmp_path / "scene" / "config.txt"
        path.parent.mkdir()
        path.write_text("calibration = cams.txt\n", encoding="utf-8")
        config = load_config(path)
        assert config.resolve(config.calibration) == path.parent / "cams.txt"
        assert config.resolve("/abs/file").as_posix() == "/abs/file"

    @pytest.mark.negative
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read config"):
            load_config(tmp_path / "absent.txt")

    @pytest.mark.positive
    def test_parse_key_values_keeps_line_numbers(self):
        raw = parse_key_values("# comment\n\na = 1\nb = x = y\n")
        assert raw == {"a": ("1", 3), "b": ("x = y", 4)}

    @pytest.mark.positive
    def test_configure_logging_is_idempotent(self):
        configure_logging("DEBUG")
        configure_logging("INFO")
        root = logging.getLogger("scene4d")
        assert len(root.handlers) == 1
        assert root.level == logging.INFO


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
