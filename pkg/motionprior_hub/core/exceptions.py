class MotionPriorError(Exception):
    """Базовая ошибка конвейера семантических карт."""


class DataError(MotionPriorError):
    """Некорректные входные данные (файлы карт, аннотации, размеры)."""


class ConfigurationError(MotionPriorError):
    """Некорректная конфигурация запуска или архитектуры."""


class ContractError(MotionPriorError):
    """Нарушение контракта вызова (формы, диапазоны, согласованность)."""


class NumericError(MotionPriorError):
    """Нечисловое значение (NaN/Inf) в режиме проверки."""

    def __init__(self, op: str) -> None:
        super().__init__(f"Операция '{op}' вернула NaN или Inf")


class DimensionError(ContractError):
    """Несогласованные размерности тензоров."""

    def __init__(self, op: str, shape_a: tuple, shape_b: tuple) -> None:
        super().__init__(
            f"{op}: несовместимые размерности {tuple(shape_a)} и {tuple(shape_b)}"
        )


class AnnotationParseError(DataError):
    """Строка аннотации SDD не разбирается."""

    def __init__(self, line_no: int, token: str, reason: str) -> None:
        self.line_no = line_no
        self.token = token
        super().__init__(
            f"Строка {line_no}: некорректный токен '{token}' ({reason})"
        )


class MapFormatError(DataError):
    """Файл SMAP/PGRID/весов повреждён или имеет неверный формат."""

    def __init__(self, path: str, line_no: int | None, reason: str) -> None:
        where = f"{path}:{line_no}" if line_no is not None else str(path)
        super().__init__(f"Ошибка формата {where}: {reason}")


class ClassIndexError(DataError):
    """Индекс класса вне допустимого диапазона."""

    def __init__(self, row: int, col: int, value: int, num_classes: int) -> None:
        super().__init__(
            f"Ячейка ({row}, {col}): класс {value} вне диапазона 0..{num_classes - 1}"
        )


class MapTooSmallError(DataError):
    """Карта меньше требуемого кропа."""

    def __init__(self, height: int, width: int, size: int) -> None:
        super().__init__(
            f"Карта {height}x{width} меньше кропа {size}x{size}"
        )


class UnknownConfigKeyError(ConfigurationError):
    """Неизвестный ключ в конфигурационном файле."""

    def __init__(self, key: str, source: str) -> None:
        super().__init__(f"Неизвестный ключ '{key}' в {source}")


class UnknownLabelError(ConfigurationError):
    """Неизвестная метка агента в фильтре."""

    def __init__(self, label: str, known: tuple[str, ...]) -> None:
        super().__init__(
            f"Неизвестная метка '{label}', допустимые: {', '.join(known)}"
        )


class EmdCapExceededError(ContractError):
    """Точная задача EMD превышает допустимый размер."""

    def __init__(self, pairs: int, cap: int) -> None:
        self.pairs = pairs
        self.cap = cap
        super().__init__(
            f"Точный EMD: {pairs} пар носителей больше лимита {cap}; "
            "используйте emd_grid с режимом downsample или entropic"
        )


class ConvergenceError(MotionPriorError):
    """Итерационный метод не сошёлся."""

    def __init__(self, iterations: int, residual: float) -> None:
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"Нет сходимости за {iterations} итераций (невязка {residual:.3e})"
        )


class TrainingError(MotionPriorError):
    """Сбой оптимизации (нечисловой градиент и т.п.)."""

    def __init__(self, param_name: str, step: int) -> None:
        self.param_name = param_name
        self.step = step
        super().__init__(
            f"Нечисловой градиент параметра '{param_name}' на шаге {step}"
        )


class UnreachableGoalError(DataError):
    """Синтетический пешеход не смог построить маршрут."""

    def __init__(self, walker: int, retries: int) -> None:
        super().__init__(
            f"Пешеход {walker}: цель недостижима после {retries} попыток"
        )
