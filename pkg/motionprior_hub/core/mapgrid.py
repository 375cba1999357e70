"""
Семантические карты, распределения на сетке и геометрия кропов.

Классы карты индексируются 0..12, VOID=255 кодируется нулями во всех каналах.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from motionprior_hub.core.exceptions import (
    ClassIndexError,
    ContractError,
    DataError,
    MapTooSmallError,
)

VOID = 255
RESOLUTION_M_PER_PX = 0.4

CLASS_NAMES: tuple[str, ...] = (
    "pedestrian_area",
    "vehicle_road",
    "bicycle_road",
    "grass",
    "tree_foliage",
    "building",
    "entrance",
    "obstacle",
    "parking",
    "sitting_area",
    "stairs",
    "shaded_area",
    "intersection_zone",
)
NUM_CLASSES = len(CLASS_NAMES)
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}

# Исходный набор из 9 классов: добавленные классы сворачиваются в ближайшие.
LEGACY9_NAMES: tuple[str, ...] = CLASS_NAMES[:9]
_LEGACY9_FOLD = {
    "sitting_area": "pedestrian_area",
    "stairs": "pedestrian_area",
    "shaded_area": "pedestrian_area",
    "intersection_zone": "vehicle_road",
}
CLASS_SETS = {"full13": CLASS_NAMES, "legacy9": LEGACY9_NAMES}

TARGETS: tuple[str, ...] = ("occupancy", "stops", "velocity")
DIHEDRAL_SIZE = 8


@dataclass(frozen=True)
class SemanticMap:
    cells: np.ndarray
    resolution: float = RESOLUTION_M_PER_PX
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self) -> None:
        cells = np.asarray(self.cells)
        if cells.ndim != 2:
            raise DataError(f"Семантическая карта должна быть 2D, форма {cells.shape}")
        if not self.resolution > 0:
            raise DataError(f"Разрешение карты должно быть > 0: {self.resolution}")
        _check_classes(cells, len(self.class_names))
        cells = cells.astype(np.uint8)
        cells.flags.writeable = False
        object.__setattr__(self, "cells", cells)

    @property
    def height(self) -> int:
        return int(self.cells.shape[0])

    @property
    def width(self) -> int:
        return int(self.cells.shape[1])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def crop(self, row: int, col: int, size: int) -> SemanticMap:
        if row < 0 or col < 0 or row + size > self.height or col + size > self.width:
            raise ContractError(
                f"Кроп ({row}, {col}, {size}) "
                f"выходит за карту {self.height}x{self.width}"
            )
        return SemanticMap(
            self.cells[row : row + size, col : col + size],
            self.resolution,
            self.class_names,
        )


def _check_classes(cells: np.ndarray, num_classes: int) -> None:
    bad = ((cells >= num_classes) & (cells != VOID)) | (cells < 0)
    if bad.any():
        idx = tuple(np.argwhere(bad)[0])
        raise ClassIndexError(int(idx[-2]), int(idx[-1]), int(cells[idx]), num_classes)


@dataclass(frozen=True)
class ProbGrid:
    """Неотрицательная сетка; при normalized=True сумма равна 1."""

    mass: np.ndarray
    normalized: bool = True
    degenerate: bool = False

    def __post_init__(self) -> None:
        mass = np.asarray(self.mass, dtype=np.float64)
        if mass.ndim != 2:
            raise DataError(f"ProbGrid должна быть 2D, форма {mass.shape}")
        if not np.all(np.isfinite(mass)):
            raise DataError("ProbGrid содержит NaN/Inf")
        if self.normalized and (mass < 0).any():
            raise DataError("Нормированная ProbGrid содержит отрицательные значения")
        mass.flags.writeable = False
        object.__setattr__(self, "mass", mass)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mass.shape

    @classmethod
    def from_counts(cls, counts: np.ndarray) -> ProbGrid:
        """Нормирует счётчики; нулевая масса даёт вырожденную нулевую сетку."""
        counts = np.asarray(counts, dtype=np.float64)
        total = counts.sum()
        if total <= 0:
            return cls(np.zeros_like(counts), normalized=True, degenerate=True)
        return cls(counts / total, normalized=True, degenerate=False)

    @classmethod
    def uniform(cls, height: int, width: int) -> ProbGrid:
        return cls(np.full((height, width), 1.0 / (height * width)))

    def as_distribution(self) -> ProbGrid:
        """Обрезка отрицательных значений и нормировка (для предсказаний)."""
        return ProbGrid.from_counts(np.clip(self.mass, 0.0, None))


@dataclass(frozen=True)
class CropPair:
    input: np.ndarray
    targets: dict[str, np.ndarray]
    origin: tuple[int, int]
    transform_id: int = 0

    @property
    def size(self) -> int:
        return int(self.input.shape[-1])


def remap_class_set(smap: SemanticMap, class_set: str) -> SemanticMap:
    """Переводит карту из 13 классов в выбранный набор классов."""
    if class_set not in CLASS_SETS:
        raise ContractError(f"Неизвестный набор классов '{class_set}'")
    if class_set == "full13":
        return smap
    lut = np.full(256, VOID, dtype=np.uint8)
    for i, name in enumerate(CLASS_NAMES):
        target = _LEGACY9_FOLD.get(name, name)
        lut[i] = LEGACY9_NAMES.index(target)
    return SemanticMap(lut[smap.cells], smap.resolution, LEGACY9_NAMES)


def one_hot_encode(
    cells: SemanticMap | np.ndarray,
    num_classes: int = NUM_CLASSES,
    dtype: type = np.float32,
) -> np.ndarray:
    """
    Канальное представление [..., C, H, W].

    Канал c равен 1 там, где класс ячейки c; ячейки VOID дают нули.
    """
    if isinstance(cells, SemanticMap):
        num_classes = cells.num_classes
        cells = cells.cells
    cells = np.asarray(cells)
    _check_classes(cells, num_classes)
    classes = np.arange(num_classes, dtype=cells.dtype).reshape(num_classes, 1, 1)
    return (cells[..., None, :, :] == classes).astype(dtype)


def sample_crop_origins(
    height: int, width: int, count: int, size: int, rng: np.random.Generator
) -> np.ndarray:
    """Равномерные начала кропов [count, 2] (строка, столбец) внутри карты."""
    if height < size or width < size:
        raise MapTooSmallError(height, width, size)
    rows = rng.integers(0, height - size + 1, size=count)
    cols = rng.integers(0, width - size + 1, size=count)
    return np.stack([rows, cols], axis=1).astype(np.int64)


def sample_crops(
    smap: SemanticMap,
    targets: dict[str, np.ndarray],
    count: int = 500,
    size: int = 64,
    rng: np.random.Generator | None = None,
) -> list[CropPair]:
    rng = rng if rng is not None else np.random.default_rng(0)
    for name, grid in targets.items():
        if np.shape(grid) != smap.cells.shape:
            raise DataError(
                f"Цель '{name}' формы {np.shape(grid)} не совпадает с картой "
                f"{smap.cells.shape}"
            )
    origins = sample_crop_origins(smap.height, smap.width, count, size, rng)
    crops: list[CropPair] = []
    for r, c in origins:
        window = (slice(r, r + size), slice(c, c + size))
        crops.append(
            CropPair(
                input=smap.cells[window],
                targets={k: np.asarray(v)[window] for k, v in targets.items()},
                origin=(int(r), int(c)),
            )
        )
    return crops


def apply_dihedral(array: np.ndarray, transform_id: int) -> np.ndarray:
    """
    Элемент группы диэдра по двум последним осям.

    id = k + 4·m: сначала зеркало (m=1, отражение по столбцам),
    затем k поворотов на 90° по часовой стрелке.
    """
    if not 0 <= int(transform_id) < DIHEDRAL_SIZE:
        raise ContractError(f"transform_id {transform_id} вне диапазона 0..7")
    out = np.asarray(array)
    if transform_id >= 4:
        out = np.flip(out, axis=-1)
    k = int(transform_id) % 4
    if k:
        out = np.rot90(out, k=-k, axes=(-2, -1))
    return np.ascontiguousarray(out)


def inverse_transform(transform_id: int) -> int:
    if not 0 <= int(transform_id) < DIHEDRAL_SIZE:
        raise ContractError(f"transform_id {transform_id} вне диапазона 0..7")
    if transform_id >= 4:
        return int(transform_id)
    return (4 - int(transform_id)) % 4


def augment(crop: CropPair, transform_id: int) -> CropPair:
    return CropPair(
        input=apply_dihedral(crop.input, transform_id),
        targets={k: apply_dihedral(v, transform_id) for k, v in crop.targets.items()},
        origin=crop.origin,
        transform_id=int(transform_id),
    )


def draw_augmentations(rng: np.random.Generator, count: int = 5) -> np.ndarray:
    """Различные неединичные преобразования для одного кропа."""
    if not 0 <= count <= DIHEDRAL_SIZE - 1:
        raise ContractError(f"Число аугментаций {count} вне 0..7")
    return rng.choice(np.arange(1, DIHEDRAL_SIZE), size=count, replace=False)


@dataclass(frozen=True)
class NormalizedTarget:
    grid: np.ndarray
    scale: float
    degenerate: bool


def normalize_target(
    gt: np.ndarray,
    crop_size: int,
    parent_mass: float | None = None,
    policy: str = "mass",
) -> NormalizedTarget:
    """
    Приведение цели к масштабу O(1) для MSE.

    policy="mass": gt / parent_mass · S², равномерная карта даёт 1.
    policy="max": gt / max(gt) (карта скоростей).
    """
    gt = np.asarray(gt, dtype=np.float64)
    if (gt < 0).any():
        raise ContractError("normalize_target: отрицательные значения цели")
    if policy == "mass":
        total = float(gt.sum()) if parent_mass is None else float(parent_mass)
        if total <= 0:
            return NormalizedTarget(np.zeros_like(gt), 0.0, True)
        factor = crop_size * crop_size / total
    elif policy == "max":
        peak = float(gt.max()) if gt.size else 0.0
        if peak <= 0:
            return NormalizedTarget(np.zeros_like(gt), 0.0, True)
        factor = 1.0 / peak
    else:
        raise ContractError(f"Неизвестная политика нормировки '{policy}'")
    return NormalizedTarget(gt * factor, factor, False)


TARGET_POLICY = {"occupancy": "mass", "stops": "mass", "velocity": "max"}


@dataclass
class MapSample:
    """
    Карта датасета: семантика, исходные цели и индекс кропов.

    targets: occupancy/stops как распределения, velocity как средняя
    скорость в м/с. Кропы материализуются лениво из индекса.
    """

    map_id: str
    semantic_map: SemanticMap
    targets: dict[str, np.ndarray]
    crop_origins: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    crop_transforms: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def training_targets(self, crop_size: int) -> dict[str, NormalizedTarget]:
        return {
            name: normalize_target(grid, crop_size, policy=TARGET_POLICY[name])
            for name, grid in self.targets.items()
        }

    def crop_pair(self, index: int, crop_size: int) -> CropPair:
        r, c = (int(v) for v in self.crop_origins[index])
        window = (slice(r, r + crop_size), slice(c, c + crop_size))
        raw = CropPair(
            input=self.semantic_map.cells[window],
            targets={k: np.asarray(v)[window] for k, v in self.targets.items()},
            origin=(r, c),
        )
        return augment(raw, int(self.crop_transforms[index]))


class CropDataset:
    """Плоский индекс кропов по нескольким картам для обучения."""

    def __init__(
        self,
        samples: list[MapSample],
        heads: tuple[str, ...],
        crop_size: int,
        num_classes: int = NUM_CLASSES,
    ) -> None:
        self.samples = samples
        self.heads = tuple(heads)
        self.crop_size = crop_size
        self.num_classes = num_classes
        self._targets = []
        for s in samples:
            missing = [h for h in self.heads if h not in s.targets]
            if missing:
                raise DataError(f"Карта '{s.map_id}' без целей {missing}")
            normalized = s.training_targets(crop_size)
            self._targets.append({h: normalized[h] for h in self.heads})
        self._index = np.array(
            [(i, j) for i, s in enumerate(samples) for j in range(len(s.crop_origins))],
            dtype=np.int64,
        ).reshape(-1, 2)

    def __len__(self) -> int:
        return int(self._index.shape[0])

    def target_scale(self, head: str) -> float:
        """Средний множитель нормировки цели, обратный ему применяется при выводе."""
        if TARGET_POLICY[head] == "mass":
            return float(self.crop_size * self.crop_size)
        scales = [t[head].scale for t in self._targets if not t[head].degenerate]
        return float(np.mean(scales)) if scales else 1.0

    def batch(
        self, indices: np.ndarray, dtype: type = np.float32
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Каналы [B, C, S, S] и цели {head: [B, S, S]} для строк индекса."""
        s = self.crop_size
        classes = np.empty((len(indices), s, s), dtype=np.uint8)
        targets = {h: np.empty((len(indices), s, s), dtype=dtype) for h in self.heads}
        for b, row in enumerate(indices):
            i, j = (int(v) for v in self._index[row])
            sample = self.samples[i]
            r, c = (int(v) for v in sample.crop_origins[j])
            tid = int(sample.crop_transforms[j])
            window = (slice(r, r + s), slice(c, c + s))
            classes[b] = apply_dihedral(sample.semantic_map.cells[window], tid)
            for h in self.heads:
                targets[h][b] = apply_dihedral(self._targets[i][h].grid[window], tid)
        return one_hot_encode(classes, self.num_classes, dtype), targets
