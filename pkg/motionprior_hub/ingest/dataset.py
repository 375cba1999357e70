"""
Сборка датасета: сцены -> семантика, целевые сетки и индекс кропов.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from motionprior_hub.core.exceptions import DataError
from motionprior_hub.core.mapgrid import (
    MapSample,
    SemanticMap,
    draw_augmentations,
    remap_class_set,
    sample_crop_origins,
)
from motionprior_hub.core.utils import substream
from motionprior_hub.infra.storage import (
    DatasetStorage,
    read_smap,
    write_json,
    write_pgrid,
)
from motionprior_hub.ingest.annotations import (
    TrajectorySet,
    parse_sdd_annotations,
    tracks_to_trajectories,
)
from motionprior_hub.ingest.config import IngestConfig, read_scene_file
from motionprior_hub.ingest.rasterize import (
    GridGeometry,
    rasterize_occupancy,
    rasterize_stops,
    rasterize_velocity,
)

logger = logging.getLogger("motionprior")

MAPS_DIR = "maps"
TARGETS_DIR = "targets"
SUMMARY_FILE = "dataset_summary.json"


class MapSource(Protocol):
    """Источник одной карты: семантика и траектории в метрах."""

    map_id: str

    def load(self, config: IngestConfig) -> tuple[SemanticMap, TrajectorySet]: ...


@dataclass
class SddSceneSource:
    """Сцена из файла *.scene: SMAP + аннотации SDD."""

    scene_path: Path
    map_id: str = ""

    def __post_init__(self) -> None:
        self.scene_path = Path(self.scene_path)
        self.map_id = self.map_id or self.scene_path.stem

    def load(self, config: IngestConfig) -> tuple[SemanticMap, TrajectorySet]:
        scene = read_scene_file(self.scene_path)
        cfg = config.with_scene(scene)
        smap = read_smap(scene.map_path)
        with open(scene.tracks_path, encoding="utf-8") as f:
            records = parse_sdd_annotations(f)
        trajset = tracks_to_trajectories(
            records, cfg.METERS_PER_SOURCE_PX, cfg.FPS, cfg.LABEL_FILTER
        )
        return smap, trajset


@dataclass
class InMemorySource:
    map_id: str
    semantic_map: SemanticMap
    trajectories: TrajectorySet

    def load(self, config: IngestConfig) -> tuple[SemanticMap, TrajectorySet]:
        return self.semantic_map, self.trajectories


def discover_scenes(inputs: Path) -> list[SddSceneSource]:
    return [SddSceneSource(p) for p in sorted(Path(inputs).glob("*.scene"))]


@dataclass
class MapReport:
    map_id: str
    height: int
    width: int
    trajectories: int
    samples: int
    lost_dropped: int
    out_of_bounds: dict[str, int]
    degenerate: dict[str, bool]
    crops: int
    training_crops: int


@dataclass
class DatasetSummary:
    crop_size: int
    resolution: float
    crops_per_map: int
    augmentations_per_crop: int
    class_set: str
    seed: int
    maps: list[MapReport] = field(default_factory=list)

    def to_dict(self) -> dict[str, object]:
        return {
            "crop_size": self.crop_size,
            "resolution": self.resolution,
            "crops_per_map": self.crops_per_map,
            "augmentations_per_crop": self.augmentations_per_crop,
            "class_set": self.class_set,
            "seed": self.seed,
            "maps": [vars(m) for m in self.maps],
        }


def build_targets(
    smap: SemanticMap, trajset: TrajectorySet, config: IngestConfig
) -> tuple[dict[str, np.ndarray], dict[str, int], dict[str, bool]]:
    """Цели карты: occupancy/stops как распределения, velocity в м/с."""
    if abs(smap.resolution - config.RESOLUTION_M_PER_PX) > 1e-9:
        raise DataError(
            f"Разрешение карты {smap.resolution} м/пиксель, рабочая сетка "
            f"{config.RESOLUTION_M_PER_PX} м/пиксель"
        )
    geom = GridGeometry(smap.height, smap.width, smap.resolution)
    occupancy = rasterize_occupancy(trajset, geom)
    stops = rasterize_stops(trajset, geom, config.V_STOP, config.T_STOP)
    velocity = rasterize_velocity(trajset, geom)
    targets = {
        "occupancy": np.array(occupancy.grid.mass),
        "stops": np.array(stops.grid.mass),
        "velocity": velocity.mean_speed,
    }
    oob = {
        "occupancy": occupancy.out_of_bounds,
        "stops": stops.out_of_bounds,
        "velocity": velocity.out_of_bounds,
    }
    degenerate = {
        "occupancy": occupancy.grid.degenerate,
        "stops": stops.grid.degenerate,
        "velocity": not velocity.coverage.any(),
    }
    return targets, oob, degenerate


def crop_index(
    height: int,
    width: int,
    config: IngestConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """
    CROPS_PER_MAP начал кропов, каждое повторено AUGMENTATIONS_PER_CROP раз
    с разными неединичными преобразованиями (без аугментаций хранится тождество).
    """
    origins = sample_crop_origins(
        height, width, config.CROPS_PER_MAP, config.CROP_SIZE, rng
    )
    k = config.AUGMENTATIONS_PER_CROP
    if k == 0:
        return origins, np.zeros(len(origins), dtype=np.int64)
    transforms = np.stack([draw_augmentations(rng, k) for _ in range(len(origins))])
    return np.repeat(origins, k, axis=0), transforms.reshape(-1).astype(np.int64)


@dataclass
class DatasetBuilder:
    config: IngestConfig
    storage: DatasetStorage
    seed: int = 0
    targets_dir: Path | None = None

    def build_one(self, source: MapSource) -> MapReport:
        smap, trajset = source.load(self.config)
        smap = remap_class_set(smap, self.config.CLASS_SET)
        targets, oob, degenerate = build_targets(smap, trajset, self.config)
        rng = substream(self.seed, "crops", source.map_id)
        origins, transforms = crop_index(smap.height, smap.width, self.config, rng)
        sample = MapSample(source.map_id, smap, targets, origins, transforms)
        self.storage.save(sample)
        if self.targets_dir is not None:
            for head, grid in targets.items():
                write_pgrid(self.targets_dir / f"{source.map_id}.{head}.pgrid", grid)
        if any(oob.values()):
            logger.info("Map %s: out-of-bounds samples %s", source.map_id, oob)
        return MapReport(
            map_id=source.map_id,
            height=smap.height,
            width=smap.width,
            trajectories=len(trajset),
            samples=trajset.num_samples,
            lost_dropped=trajset.lost_dropped,
            out_of_bounds=oob,
            degenerate=degenerate,
            crops=self.config.CROPS_PER_MAP,
            training_crops=len(origins),
        )

    def build(self, sources: list[MapSource], jobs: int = 1) -> DatasetSummary:
        """Карты обрабатываются независимо, отчёт идёт в порядке sources."""
        with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
            reports = list(pool.map(self.build_one, sources))
        summary = DatasetSummary(
            crop_size=self.config.CROP_SIZE,
            resolution=self.config.RESOLUTION_M_PER_PX,
            crops_per_map=self.config.CROPS_PER_MAP,
            augmentations_per_crop=self.config.AUGMENTATIONS_PER_CROP,
            class_set=self.config.CLASS_SET,
            seed=self.seed,
            maps=reports,
        )
        write_json(self.storage.root.parent / SUMMARY_FILE, summary.to_dict())
        logger.info("Dataset built: maps=%d", len(reports))
        return summary


def load_dataset(root: str | Path) -> list[MapSample]:
    """Все карты датасета из <root>/maps в порядке идентификаторов."""
    return DatasetStorage(Path(root) / MAPS_DIR).load_all()
