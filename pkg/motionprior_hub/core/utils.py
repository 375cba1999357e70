import hashlib
import zlib
from datetime import datetime, timezone
from pathlib import Path

import numpy as np


def utc_now_iso() -> str:
    """UTC timestamp в ISO-формате с суффиксом Z."""
    return (
        datetime.now(timezone.utc)
        .replace(microsecond=0)
        .isoformat()
        .replace("+00:00", "Z")
    )


def _name_key(name: object) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name) & 0xFFFFFFFF
    return zlib.crc32(str(name).encode("utf-8"))


def substream(seed: int, *names: object) -> np.random.Generator:
    """
    Независимый генератор для именованного подпотока корневого зерна.

    substream(7, "fold", 2, "init") всегда даёт один и тот же поток
    и не пересекается с substream(7, "fold", 3, "init").
    """
    key = tuple(_name_key(n) for n in names)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def format_float(value: float) -> str:
    """Кратчайшее десятичное представление, читаемое обратно без потерь."""
    return repr(float(value))
