# motionprior_hub/infra/storage.py
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import numpy as np

from motionprior_hub.core.exceptions import ConfigurationError, MapFormatError
from motionprior_hub.core.mapgrid import (
    CLASS_NAMES,
    LEGACY9_NAMES,
    VOID,
    MapSample,
    ProbGrid,
    SemanticMap,
)
from motionprior_hub.core.utils import format_float


def atomic_write_text(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)
    return path


def atomic_write_bytes(path: Path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def write_json(path: Path, data: Any) -> Path:
    text = json.dumps(data, indent=2, ensure_ascii=False)
    return atomic_write_text(path, text + "\n")


def read_json(path: Path, default: Any) -> Any:
    path = Path(path)
    if not path.exists():
        return default
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except Exception:
        return default


def _read_lines(path: Path) -> list[str]:
    try:
        return Path(path).read_text(encoding="utf-8").split("\n")
    except OSError as e:
        raise MapFormatError(str(path), None, f"не удалось прочитать: {e}") from e


# --- SMAP ----------------------------------------------------------------------


def dumps_smap(smap: SemanticMap) -> str:
    lines = [
        "SMAP1",
        f"{smap.height} {smap.width}",
        format_float(smap.resolution),
        str(smap.num_classes),
    ]
    lines += [" ".join(str(int(v)) for v in row) for row in smap.cells]
    return "\n".join(lines) + "\n"


def write_smap(path: Path, smap: SemanticMap) -> Path:
    return atomic_write_text(path, dumps_smap(smap))


def read_smap(path: Path) -> SemanticMap:
    """
    SMAP1 / "<h> <w>" / разрешение / число классов / H строк по W целых.
    """
    lines = _read_lines(path)
    name = str(path)
    if not lines or lines[0].strip() != "SMAP1":
        raise MapFormatError(name, 1, "ожидалась сигнатура SMAP1")
    try:
        h, w = (int(v) for v in lines[1].split())
        resolution = float(lines[2])
        class_count = int(lines[3])
    except (IndexError, ValueError) as e:
        raise MapFormatError(name, 2, f"заголовок: {e}") from e
    if class_count not in (len(CLASS_NAMES), len(LEGACY9_NAMES)):
        raise MapFormatError(name, 4, f"неподдерживаемое число классов {class_count}")
    class_names = CLASS_NAMES if class_count == len(CLASS_NAMES) else LEGACY9_NAMES
    cells = np.empty((h, w), dtype=np.int64)
    for r in range(h):
        line_no = 5 + r
        try:
            row = [int(v) for v in lines[4 + r].split()]
        except IndexError as e:
            raise MapFormatError(name, line_no, "не хватает строк карты") from e
        except ValueError as e:
            raise MapFormatError(name, line_no, f"не целое значение: {e}") from e
        if len(row) != w:
            raise MapFormatError(name, line_no, f"{len(row)} значений вместо {w}")
        cells[r] = row
    if ((cells > VOID) | (cells < 0)).any():
        raise MapFormatError(name, None, "значения вне диапазона 0..255")
    return SemanticMap(cells, resolution, class_names)


# --- PGRID ---------------------------------------------------------------------


def dumps_pgrid(mass: np.ndarray) -> str:
    mass = np.asarray(mass, dtype=np.float64)
    h, w = mass.shape
    lines = ["PGRID1", f"{h} {w}"]
    lines += [" ".join(format_float(v) for v in row) for row in mass]
    return "\n".join(lines) + "\n"


def write_pgrid(path: Path, grid: ProbGrid | np.ndarray) -> Path:
    mass = grid.mass if isinstance(grid, ProbGrid) else grid
    return atomic_write_text(path, dumps_pgrid(mass))


def read_pgrid_array(path: Path) -> np.ndarray:
    lines = _read_lines(path)
    name = str(path)
    if not lines or lines[0].strip() != "PGRID1":
        raise MapFormatError(name, 1, "ожидалась сигнатура PGRID1")
    try:
        h, w = (int(v) for v in lines[1].split())
    except (IndexError, ValueError) as e:
        raise MapFormatError(name, 2, f"заголовок: {e}") from e
    mass = np.empty((h, w), dtype=np.float64)
    for r in range(h):
        line_no = 3 + r
        try:
            row = [float(v) for v in lines[2 + r].split()]
        except IndexError as e:
            raise MapFormatError(name, line_no, "не хватает строк сетки") from e
        except ValueError as e:
            raise MapFormatError(name, line_no, f"не число: {e}") from e
        if len(row) != w:
            raise MapFormatError(name, line_no, f"{len(row)} значений вместо {w}")
        mass[r] = row
    return mass


def read_pgrid(path: Path) -> ProbGrid:
    mass = read_pgrid_array(path)
    if (mass < 0).any():
        raise MapFormatError(str(path), None, "отрицательная масса")
    total = mass.sum()
    return ProbGrid(mass, normalized=abs(total - 1.0) <= 1e-9, degenerate=total <= 0)


# --- key = value ---------------------------------------------------------------


def read_kv_file(path: Path) -> dict[str, str]:
    """Плоский файл key = value; строки с '#' пропускаются."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Файл конфигурации '{path}' не найден")
    out: dict[str, str] = {}
    for i, raw in enumerate(path.read_text(encoding="utf-8").split("\n"), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"{path}:{i}: ожидалось 'key = value'")
        out[key.strip()] = value.strip()
    return out


def dumps_kv(data: dict[str, Any]) -> str:
    def fmt(v: Any) -> str:
        if isinstance(v, float):
            return format_float(v)
        if isinstance(v, (tuple, list)):
            return ",".join(str(x) for x in v)
        return str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in data.items())


def write_kv_file(path: Path, data: dict[str, Any]) -> Path:
    return atomic_write_text(path, dumps_kv(data))


# --- датасет -------------------------------------------------------------------


class DatasetStorage:
    """Карты датасета: по одному сжатому .npz на карту."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    def map_path(self, map_id: str) -> Path:
        return self.root / f"{map_id}.npz"

    def save(self, sample: MapSample) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        arrays: dict[str, np.ndarray] = {
            "cells": sample.semantic_map.cells,
            "resolution": np.array(sample.semantic_map.resolution),
            "class_count": np.array(sample.semantic_map.num_classes),
            "crop_origins": sample.crop_origins,
            "crop_transforms": sample.crop_transforms,
        }
        for name, grid in sample.targets.items():
            arrays[f"target_{name}"] = np.asarray(grid, dtype=np.float64)
        path = self.map_path(sample.map_id)
        tmp = path.with_name(path.stem + ".tmp.npz")
        np.savez_compressed(tmp, **arrays)
        os.replace(tmp, path)
        return path

    def load(self, map_id: str) -> MapSample:
        path = self.map_path(map_id)
        try:
            with np.load(path) as data:
                class_count = int(data["class_count"])
                legacy = class_count != len(CLASS_NAMES)
                names = LEGACY9_NAMES if legacy else CLASS_NAMES
                smap = SemanticMap(data["cells"], float(data["resolution"]), names)
                targets = {
                    key[len("target_") :]: data[key].copy()
                    for key in data.files
                    if key.startswith("target_")
                }
                return MapSample(
                    map_id,
                    smap,
                    targets,
                    data["crop_origins"].copy(),
                    data["crop_transforms"].copy(),
                )
        except (OSError, KeyError, ValueError) as e:
            raise MapFormatError(str(path), None, f"карта датасета: {e}") from e

    def map_ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.npz") if ".tmp" not in p.name)

    def load_all(self) -> list[MapSample]:
        return [self.load(map_id) for map_id in self.map_ids()]
