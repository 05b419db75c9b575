import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path

from scene4d.errors import ConfigError

logger = logging.getLogger(__name__)

# (lambda_data, lambda_contrast, lambda_smooth, lambda_color)
PROFILES: dict[str, tuple[float, float, float, float]] = {
    "magician": (0.4, 5.0, 0.0005, 0.6),
    "dance2": (0.4, 5.0, 0.0005, 0.6),
    "juggler": (0.5, 5.0, 0.0005, 0.4),
    "odzemok": (0.4, 3.0, 0.001, 0.6),
    "dance1": (0.4, 3.0, 0.001, 0.6),
    "office": (0.4, 3.0, 0.001, 0.6),
}
DEFAULT_PROFILE = "odzemok"

_WEIGHT_KEYS = ("lambda_data", "lambda_contrast", "lambda_smooth",
                "lambda_color")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class PipelineConfig:
    """
    Все параметры конвейера. Каждое поле соответствует ключу
    `key = value` в конфигурационном файле.
    """

    # веса энергии, по умолчанию строка "odzemok"
    lambda_data: float = 0.4
    lambda_contrast: float = 3.0
    lambda_smooth: float = 0.001
    lambda_color: float = 0.6
    profile: str = DEFAULT_PROFILE

    # |D| - 1 числовых глубин, вместе с U получается |D| = 128
    depth_samples: int = 127
    unknown_cost: float | None = None
    k_photoconsistent: int = 3
    patch_window: int = 5
    dmax_factor: float = 50.0
    contrast_epsilon: float = 1e-2
    near_far_margin: float = 0.1

    gmm_components: int = 5
    uniform_weight: float = 0.1
    background_stride: int = 4

    geodesic_gamma: float = 0.7

    epsilon_consistency: float = 2.0
    percentile_trim: float = 0.05
    median_window: int = 5
    dynamic_threshold_factor: float = 0.005
    temporal_search_frac: float = 0.2

    harris_k: float = 0.04
    harris_sigma: float = 1.0
    harris_threshold: float = 0.01
    nms_radius: int = 3
    max_features: int = 2000
    match_ratio: float = 0.8
    epipolar_tolerance: float = 2.0
    max_reproj_error: float = 1.5
    cluster_radius: float = 0.3
    min_cluster_size: int = 20
    max_object_extent: float = 0.5

    flow_levels: int = 3
    flow_window: int = 15
    flow_iterations: int = 10
    flow_fb_threshold: float = 1.0
    dense_stride: int = 2

    region_margin: int = 6
    max_sweeps: int = 5
    convergence_tolerance: float = 1e-6

    voxel_size: float = 0.05
    correspondence_radius: float = 2.0

    calibration: str = "calibration.txt"
    frame_pattern: str = "frames/t{t:03d}_cam{view}.ppm"
    num_frames: int = 1
    continue_on_error: bool = False
    seed: int = 0
    base_dir: str = "."

    @property
    def photo_unknown_cost(self) -> float:
        """M_U: по умолчанию половина худшей фотосогласованности k видов."""
        if self.unknown_cost is not None:
            return self.unknown_cost
        return 0.5 * self.k_photoconsistent

    def resolve(self, path: str) -> Path:
        """Путь относительно каталога конфигурационного файла."""
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def with_profile(self, name: str) -> "PipelineConfig":
        """
        Возвращает копию с весами из именованного профиля.

        Args:
            name: имя профиля из таблицы PROFILES

        Returns:
            PipelineConfig: новый экземпляр с заменёнными весами
        """
        if name not in PROFILES:
            raise ConfigError(
                f"unknown profile '{name}', "
                f"expected one of {sorted(PROFILES)}")
        weights = dict(zip(_WEIGHT_KEYS, PROFILES[name]))
        return replace(self, profile=name, **weights)

    def validate(self) -> "PipelineConfig":
        for key in _WEIGHT_KEYS:
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")
        if not 0 <= self.percentile_trim < 0.5:
            raise ConfigError("percentile_trim must be in [0, 0.5)")
        if self.gmm_components < 1:
            raise ConfigError("gmm_components must be >= 1")
        if self.depth_samples < 2:
            raise ConfigError("depth_samples must be >= 2")
        if not 0.0 <= self.geodesic_gamma <= 1.0:
            raise ConfigError("geodesic_gamma must be in [0, 1]")
        if self.k_photoconsistent < 1:
            raise ConfigError("k_photoconsistent must be >= 1")
        if self.unknown_cost is not None and self.unknown_cost < 0:
            raise ConfigError("unknown_cost must be non-negative")
        if not 0.0 <= self.uniform_weight <= 1.0:
            raise ConfigError("uniform_weight must be in [0, 1]")
        if self.epsilon_consistency <= 0:
            raise ConfigError("epsilon_consistency must be positive")
        if self.cluster_radius <= 0:
            raise ConfigError("cluster_radius must be positive")
        if self.median_window < 1:
            raise ConfigError("median_window must be >= 1")
        if self.num_frames < 1:
            raise ConfigError("num_frames must be >= 1")
        if self.patch_window < 1 or self.patch_window % 2 == 0:
            raise ConfigError("patch_window must be a positive odd number")
        return self


def _parse_value(name: str, raw: str, default, line: int):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            if default is None and raw.lower() in ("none", ""):
                return None
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for '{name}': {e}", line=line) from e


def parse_key_values(text: str) -> dict[str, tuple[str, int]]:
    """
    Разбирает строки `key = value`; `#` начинает комментарий.

    Returns:
        словарь key -> (сырое значение, номер строки)
    """
    result: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}",
                              line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", line=lineno)
        if key in result:
            raise ConfigError(f"duplicate key '{key}'", line=lineno)
        result[key] = (value, lineno)
    return result


def config_from_text(text: str, profile: str | None = None,
                     base_dir: str = ".") -> PipelineConfig:
    """
    Строит PipelineConfig из текста конфигурации.

    Веса профиля применяются первыми, явные ключи файла их перекрывают.

    Args:
        text: содержимое файла `key = value`
        profile: профиль из командной строки (перекрывает ключ profile)
        base_dir: каталог для разрешения относительных путей

    Returns:
        PipelineConfig: проверенная конфигурация
    """
    raw = parse_key_values(text)
    known = {f.name: f for f in fields(PipelineConfig)}
    defaults = PipelineConfig()

    name = profile or raw.get("profile", (DEFAULT_PROFILE, 0))[0]
    config = defaults.with_profile(name)

    values = {}
    for key, (value, lineno) in raw.items():
        if key == "profile":
            continue
        if key not in known or key == "base_dir":
            raise ConfigError(f"unknown key '{key}'", line=lineno)
        values[key] = _parse_value(key, value, getattr(defaults, key), lineno)
    config = replace(config, base_dir=base_dir, **values)
    return config.validate()


def load_config(path: str | Path,
                profile: str | None = None) -> PipelineConfig:
    """Читает конфигурационный файл; пути в нём относительны файлу."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    config = config_from_text(text, profile=profile,
                              base_dir=str(path.parent))
    logger.info("config loaded from %s (profile=%s)", path, config.profile)
    return config


def configure_logging(level: str | int = logging.INFO) -> None:
    """Один обработчик на корневой логгер пакета."""
    root = logging.getLogger("scene4d")
    root.setLevel(level)
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(
            "%(asctime)s %(levelname)s %(name)s %(message)s"))
        root.addHandler(handler)
