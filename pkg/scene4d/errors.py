class Scene4DError(Exception):
    """Базовое исключение пакета scene4d."""


class ConfigError(Scene4DError, ValueError):
    """Ошибка в файле конфигурации или в значении параметра."""

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CalibrationError(Scene4DError, ValueError):
    """
    Ошибка разбора калибровки или нарушение инвариантов камеры.

    Args:
        message: текст ошибки
        line: номер строки файла (если ошибка разбора)
        camera_id: идентификатор камеры (если нарушен инвариант)
    """

    def __init__(self, message: str, line: int | None = None,
                 camera_id: int | None = None) -> None:
        self.line = line
        self.camera_id = camera_id
        if camera_id is not None:
            message = f"camera {camera_id}: {message}"
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(Scene4DError, ValueError):
    """Файл растра, маски или сетки повреждён либо не совпадает по размеру."""


class DegenerateInputError(Scene4DError, ValueError):
    """Вырожденная геометрия: коллинеарные/компланарные точки и т.п."""


class StageError(Scene4DError, RuntimeError):
    """
    Сбой стадии конвейера на конкретном кадре.

    Args:
        frame: индекс кадра
        stage: имя стадии
        cause: исходное исключение
    """

    def __init__(self, frame: int, stage: str, cause: BaseException) -> None:
        self.frame = frame
        self.stage = stage
        self.cause = cause
        super().__init__(
            f"frame {frame}, stage '{stage}': "
            f"{type(cause).__name__}: {cause}")
