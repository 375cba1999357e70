"""
Файл весов SMP2W1.

Формат (little-endian):
  b"SMP2W1\\n"
  текстовый блок "key = value\\n"... с описанием ArchConfig и масштабов целей,
  завершённый строкой "END\\n"
  uint32 число массивов
  для каждого массива в порядке model.parameter_shapes():
    uint16 длина имени, имя UTF-8, uint8 ndim, uint32 × ndim размеры,
    uint32 CRC32 данных, float32 × prod(shape) данные
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np

from motionprior_hub.core.exceptions import MapFormatError
from motionprior_hub.core.model import ArchConfig, ModelWeights, parameter_shapes
from motionprior_hub.core.utils import format_float

MAGIC = b"SMP2W1\n"
_SCALE_PREFIX = "target_scale."


def dumps_weights(weights: ModelWeights) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    header = [f"{k} = {v}" for k, v in weights.arch.to_dict().items()]
    header += [
        f"{_SCALE_PREFIX}{head} = {format_float(scale)}"
        for head, scale in weights.target_scales.items()
    ]
    buf.write(("\n".join(header) + "\nEND\n").encode("utf-8"))
    buf.write(struct.pack("<I", len(weights.params)))
    for name, _shape in parameter_shapes(weights.arch):
        value = np.ascontiguousarray(weights.params[name], dtype="<f4")
        raw = value.tobytes()
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(struct.pack("<I", zlib.crc32(raw)))
        buf.write(raw)
    return buf.getvalue()


def save_weights(weights: ModelWeights, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps_weights(weights))
    tmp.replace(path)
    return path


def _read_exact(stream: io.BytesIO, size: int, path: str) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise MapFormatError(path, None, "файл весов обрезан")
    return data


def loads_weights(data: bytes, path: str = "<bytes>") -> ModelWeights:
    stream = io.BytesIO(data)
    if stream.read(len(MAGIC)) != MAGIC:
        raise MapFormatError(path, None, "нет сигнатуры SMP2W1")
    header: dict[str, str] = {}
    scales: dict[str, float] = {}
    while True:
        line = stream.readline()
        if not line:
            raise MapFormatError(path, None, "нет завершения заголовка END")
        text = line.decode("utf-8").rstrip("\n")
        if text == "END":
            break
        key, sep, value = text.partition(" = ")
        if not sep:
            raise MapFormatError(path, None, f"строка заголовка '{text}'")
        if key.startswith(_SCALE_PREFIX):
            scales[key[len(_SCALE_PREFIX) :]] = float(value)
        else:
            header[key] = value
    arch = ArchConfig.from_dict(header)
    expected = dict(parameter_shapes(arch))
    (count,) = struct.unpack("<I", _read_exact(stream, 4, path))
    if count != len(expected):
        raise MapFormatError(path, None, f"{count} массивов, ожидалось {len(expected)}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(stream, 2, path))
        name = _read_exact(stream, name_len, path).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(stream, 1, path))
        shape = struct.unpack(f"<{ndim}I", _read_exact(stream, 4 * ndim, path))
        (crc,) = struct.unpack("<I", _read_exact(stream, 4, path))
        raw = _read_exact(stream, 4 * int(np.prod(shape, dtype=np.int64)), path)
        if zlib.crc32(raw) != crc:
            raise MapFormatError(path, None, f"контрольная сумма массива '{name}'")
        if name in params:
            raise MapFormatError(path, None, f"массив '{name}' повторяется")
        if expected.get(name) != tuple(shape):
            raise MapFormatError(
                path, None, f"массив '{name}' формы {shape} не ожидается"
            )
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    ordered = {name: params[name] for name in expected}
    return ModelWeights(arch, ordered, scales or {h: 1.0 for h in arch.heads_out})


def load_weights(path: str | Path) -> ModelWeights:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise MapFormatError(str(path), None, f"не удалось прочитать: {e}") from e
    return loads_weights(data, str(path))
