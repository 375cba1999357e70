import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path

from motionprior_hub.infra.settings import SettingsLoader


def setup_logging(log_dir: Path | None = None) -> logging.Logger:
    """
    Строковый лог в stderr; при заданном каталоге ещё и ротируемый файл.

    Файл пишется только внутрь каталога вывода команды (<out>/logs).
    """

    settings = SettingsLoader()

    formatter = logging.Formatter(
        settings.get("LOG_FORMAT", "%(levelname)s %(asctime)s %(message)s"),
        datefmt="%Y-%m-%dT%H:%M:%S",
    )

    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(formatter)

    root = logging.getLogger("motionprior")
    root.setLevel(settings.get("LOG_LEVEL", "INFO"))
    for old in root.handlers:
        old.close()
    root.handlers.clear()
    root.addHandler(stream)

    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        handler = RotatingFileHandler(
            log_dir / settings.get("LOG_FILE_NAME", "actions.log"),
            maxBytes=1_000_000,
            backupCount=5,
            encoding="utf-8",
        )
        handler.setFormatter(formatter)
        root.addHandler(handler)

    return root
