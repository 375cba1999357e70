"""
Предсказание по всей карте: разбиение на кропы и усреднение.

Каждый пиксель получает среднее предсказаний всех кропов плана, которые
его содержат. Вывод всегда без маскирования (ρ=0).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from motionprior_hub.core import tensor as T
from motionprior_hub.core.exceptions import ContractError, DataError, MapTooSmallError
from motionprior_hub.core.mapgrid import (
    TARGET_POLICY,
    VOID,
    MapSample,
    ProbGrid,
    SemanticMap,
    one_hot_encode,
)
from motionprior_hub.core.model import ModelWeights, forward, unpatchify
from motionprior_hub.core.utils import format_float
from motionprior_hub.infra.storage import atomic_write_bytes, write_kv_file, write_pgrid

logger = logging.getLogger("motionprior")

HEATMAP_FORMATS = ("pgrid", "pgm16")
PGM_MAXVAL = 65_535


def _axis_starts(length: int, size: int, stride: int) -> list[int]:
    starts = list(range(0, length - size + 1, stride))
    if starts[-1] != length - size:
        starts.append(length - size)
    return starts


@dataclass(frozen=True)
class ReconstructionPlan:
    """Начала кропов (строка, столбец) и покрытие каждого пикселя."""

    height: int
    width: int
    crop_size: int
    origins: np.ndarray
    coverage: np.ndarray
    stride: int | None = None

    @classmethod
    def from_origins(
        cls,
        height: int,
        width: int,
        crop_size: int,
        origins: np.ndarray,
        stride: int | None = None,
    ) -> ReconstructionPlan:
        origins = np.asarray(origins, dtype=np.int64).reshape(-1, 2)
        # Разностная схема: +1 в углах прямоугольника, затем префиксные суммы.
        diff = np.zeros((height + 1, width + 1), dtype=np.int64)
        for r, c in origins:
            diff[r, c] += 1
            diff[r, c + crop_size] -= 1
            diff[r + crop_size, c] -= 1
            diff[r + crop_size, c + crop_size] += 1
        coverage = diff.cumsum(axis=0).cumsum(axis=1)[:height, :width]
        return cls(height, width, crop_size, origins, coverage, stride)

    @property
    def num_crops(self) -> int:
        return int(self.origins.shape[0])

    @property
    def uncovered(self) -> int:
        return int(np.count_nonzero(self.coverage == 0))


def plan_reconstruction(
    height: int, width: int, crop_size: int, stride: int
) -> ReconstructionPlan:
    """Скользящее окно с шагом stride плюс прижатые к краю строка и столбец."""
    if height < crop_size or width < crop_size:
        raise MapTooSmallError(height, width, crop_size)
    if stride < 1:
        raise ContractError(f"Шаг окна должен быть ≥ 1: {stride}")
    rows = _axis_starts(height, crop_size, stride)
    cols = _axis_starts(width, crop_size, stride)
    origins = np.array([(r, c) for r in rows for c in cols], dtype=np.int64)
    return ReconstructionPlan.from_origins(height, width, crop_size, origins, stride)


def random_plan(
    height: int, width: int, crop_size: int, count: int, rng: np.random.Generator
) -> ReconstructionPlan:
    """count случайных кропов; непокрытые пиксели получают 0."""
    if height < crop_size or width < crop_size:
        raise MapTooSmallError(height, width, crop_size)
    if count < 1:
        raise ContractError(f"Число случайных кропов должно быть ≥ 1: {count}")
    rows = rng.integers(0, height - crop_size + 1, size=count)
    cols = rng.integers(0, width - crop_size + 1, size=count)
    return ReconstructionPlan.from_origins(
        height, width, crop_size, np.stack([rows, cols], axis=1)
    )


def _inference_weights(weights: ModelWeights) -> ModelWeights:
    dtype = T.default_dtype()
    first = next(iter(weights.params.values()))
    return weights if first.dtype == dtype else weights.astype(dtype)


def _predict_batch(
    weights: ModelWeights, channels: np.ndarray
) -> dict[str, np.ndarray]:
    arch = weights.arch
    preds, _ = forward(channels, weights, ratio=0.0)
    out: dict[str, np.ndarray] = {}
    for head, tokens in preds.items():
        grid = unpatchify(tokens.numpy(), arch.patch_size)
        scale = weights.target_scales.get(head, 1.0) or 1.0
        out[head] = grid.astype(np.float64) / scale
    return out


def predict_crop(
    weights: ModelWeights, crop: SemanticMap | np.ndarray
) -> dict[str, np.ndarray]:
    """
    Предсказание для одного кропа: {голова: [S, S]} в единицах цели.

    crop: SemanticMap нужного размера или готовые каналы [C, S, S].
    """
    arch = weights.arch
    if isinstance(crop, SemanticMap):
        if crop.num_classes != arch.in_channels:
            raise ContractError(
                f"Карта с {crop.num_classes} классами, модель ждёт {arch.in_channels}"
            )
        channels = one_hot_encode(crop, dtype=T.default_dtype())
    else:
        channels = np.asarray(crop)
    if channels.shape != (arch.in_channels, arch.crop_size, arch.crop_size):
        raise ContractError(
            f"Кроп формы {channels.shape} не соответствует архитектуре "
            f"({arch.in_channels}, {arch.crop_size}, {arch.crop_size})"
        )
    weights = _inference_weights(weights)
    return _predict_batch(weights, channels)


@dataclass(frozen=True)
class MapPrediction:
    """
    grids: итог по головам: occupancy/stops нормированы, velocity в м/с.
    raw: средние по кропам до нормировки; raw_sums: их суммы.
    """

    grids: dict[str, ProbGrid]
    raw: dict[str, np.ndarray]
    plan: ReconstructionPlan
    raw_sums: dict[str, float] = field(default_factory=dict)


def predict_map(
    weights: ModelWeights,
    smap: SemanticMap,
    stride: int | None = None,
    mode: str = "sliding",
    count: int = 500,
    rng: np.random.Generator | None = None,
    batch_size: int = 16,
    jobs: int = 1,
) -> MapPrediction:
    """
    Полная карта из перекрывающихся кропов.

    mode="sliding": детерминированное окно (по умолчанию шаг S/2);
    mode="random": count случайных кропов.
    Суммирование идёт в порядке плана, результат не зависит от jobs.
    """
    arch = weights.arch
    size = arch.crop_size
    if smap.num_classes != arch.in_channels:
        raise ContractError(
            f"Карта с {smap.num_classes} классами, модель ждёт {arch.in_channels}"
        )
    if smap.height < size or smap.width < size:
        raise MapTooSmallError(smap.height, smap.width, size)
    if mode == "sliding":
        plan = plan_reconstruction(smap.height, smap.width, size, stride or size // 2)
    elif mode == "random":
        plan = random_plan(
            smap.height,
            smap.width,
            size,
            count,
            rng if rng is not None else np.random.default_rng(0),
        )
    else:
        raise ContractError(f"Неизвестный режим предсказания '{mode}'")

    weights = _inference_weights(weights)
    dtype = T.default_dtype()
    shape = (smap.height, smap.width)
    sums = {h: np.zeros(shape, dtype=np.float64) for h in arch.heads_out}

    def run(start: int) -> dict[str, np.ndarray]:
        origins = plan.origins[start : start + batch_size]
        cells = np.stack([smap.cells[r : r + size, c : c + size] for r, c in origins])
        return _predict_batch(weights, one_hot_encode(cells, smap.num_classes, dtype))

    starts = list(range(0, plan.num_crops, batch_size))
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        for start, batch in zip(starts, pool.map(run, starts)):
            for b, (r, c) in enumerate(plan.origins[start : start + batch_size]):
                for head, values in batch.items():
                    sums[head][r : r + size, c : c + size] += values[b]

    covered = plan.coverage > 0
    grids: dict[str, ProbGrid] = {}
    raw: dict[str, np.ndarray] = {}
    raw_sums: dict[str, float] = {}
    for head, total in sums.items():
        mean = np.zeros_like(total)
        mean[covered] = total[covered] / plan.coverage[covered]
        raw[head] = mean
        raw_sums[head] = float(mean.sum())
        if TARGET_POLICY[head] == "mass":
            grids[head] = ProbGrid.from_counts(np.clip(mean, 0.0, None))
        else:
            grids[head] = ProbGrid(mean, normalized=False)
    logger.info(
        "Predicted map %dx%d: crops=%d mode=%s uncovered=%d",
        smap.height,
        smap.width,
        plan.num_crops,
        mode,
        plan.uncovered,
    )
    return MapPrediction(grids, raw, plan, raw_sums)


# --- базовые модели ------------------------------------------------------------


def uniform_baseline(smap: SemanticMap) -> ProbGrid:
    return ProbGrid.uniform(smap.height, smap.width)


class ClassFrequencyBaseline:
    """
    Средняя плотность цели по классу семантики, перенесённая на новую карту.

    Плотность карты — цель, нормированная так, что равномерное
    распределение даёт 1 в каждой ячейке (скорости остаются в м/с).
    """

    def __init__(self, head: str, num_classes: int) -> None:
        self.head = head
        self.num_classes = num_classes
        self.class_values = np.zeros(num_classes, dtype=np.float64)
        self.fallback = 0.0

    def fit(self, samples: list[MapSample]) -> ClassFrequencyBaseline:
        sums = np.zeros(self.num_classes, dtype=np.float64)
        counts = np.zeros(self.num_classes, dtype=np.int64)
        total, cells = 0.0, 0
        for sample in samples:
            if self.head not in sample.targets:
                raise DataError(f"Карта '{sample.map_id}' без цели '{self.head}'")
            density = np.asarray(sample.targets[self.head], dtype=np.float64)
            if TARGET_POLICY[self.head] == "mass":
                mass = density.sum()
                if mass <= 0:
                    continue
                density = density * (density.size / mass)
            classes = sample.semantic_map.cells.astype(np.int64)
            valid = classes != VOID
            sums += np.bincount(
                classes[valid], weights=density[valid], minlength=self.num_classes
            )[: self.num_classes]
            counts += np.bincount(classes[valid], minlength=self.num_classes)[
                : self.num_classes
            ]
            total += float(density.sum())
            cells += density.size
        seen = counts > 0
        self.class_values = np.zeros(self.num_classes, dtype=np.float64)
        self.class_values[seen] = sums[seen] / counts[seen]
        self.fallback = total / cells if cells else 0.0
        self.class_values[~seen] = self.fallback
        return self

    def predict(self, smap: SemanticMap) -> np.ndarray:
        lut = np.full(256, self.fallback, dtype=np.float64)
        lut[: self.num_classes] = self.class_values
        return lut[smap.cells]

    def predict_grid(self, smap: SemanticMap) -> ProbGrid:
        values = self.predict(smap)
        if TARGET_POLICY[self.head] == "mass":
            return ProbGrid.from_counts(values)
        return ProbGrid(values, normalized=False)


# --- экспорт -------------------------------------------------------------------


def pgm16_bytes(values: np.ndarray) -> tuple[bytes, float, float]:
    """
    Бинарный PGM (P5, maxval 65535, big-endian) с линейным min-max.

    Постоянная сетка даёт один уровень 65535.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or not np.all(np.isfinite(values)):
        raise ContractError("PGM16: нужна конечная 2D сетка")
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        levels = np.rint((values - lo) / (hi - lo) * PGM_MAXVAL)
    else:
        levels = np.full(values.shape, PGM_MAXVAL)
    h, w = values.shape
    header = f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii")
    return header + levels.astype(">u2").tobytes(), lo, hi


def read_pgm16(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise DataError(f"'{path}' не является PGM P5")
    w, h = (int(v) for v in parts[1].split())
    raw = parts[3]
    return np.frombuffer(raw, dtype=">u2", count=w * h).reshape(h, w).astype(np.int64)


def export_heatmap(
    grid: ProbGrid | np.ndarray,
    path: str | Path,
    fmt: str = "pgrid",
    meta: dict[str, object] | None = None,
) -> tuple[Path, Path]:
    """Пишет сетку и sidecar <файл>.meta; возвращает оба пути."""
    if fmt not in HEATMAP_FORMATS:
        raise ContractError(f"Неизвестный формат тепловой карты '{fmt}'")
    raw = grid.mass if isinstance(grid, ProbGrid) else grid
    values = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ContractError("Тепловая карта содержит NaN/Inf")
    path = Path(path)
    info: dict[str, object] = {
        "format": fmt,
        "height": values.shape[0],
        "width": values.shape[1],
    }
    if fmt == "pgrid":
        write_pgrid(path, values)
    else:
        data, lo, hi = pgm16_bytes(values)
        atomic_write_bytes(path, data)
        info.update(
            {
                "min": format_float(lo),
                "max": format_float(hi),
                "scale": format_float((hi - lo) / PGM_MAXVAL),
            }
        )
    info.update(meta or {})
    meta_path = path.with_name(path.name + ".meta")
    write_kv_file(meta_path, info)
    return path, meta_path
