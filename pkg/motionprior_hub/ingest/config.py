from dataclasses import dataclass, fields, replace
from pathlib import Path

from motionprior_hub.core.exceptions import (
    ConfigurationError,
    UnknownConfigKeyError,
    UnknownLabelError,
)
from motionprior_hub.core.mapgrid import CLASS_SETS, RESOLUTION_M_PER_PX
from motionprior_hub.infra.storage import read_kv_file

KNOWN_LABELS: tuple[str, ...] = ("Pedestrian", "Biker", "Skater", "Cart", "Car", "Bus")


@dataclass(frozen=True)
class IngestConfig:
    FPS: float = 30.0
    METERS_PER_SOURCE_PX: float = 0.04
    LABEL_FILTER: tuple[str, ...] = ("Pedestrian",)

    RESOLUTION_M_PER_PX: float = RESOLUTION_M_PER_PX
    V_STOP: float = 0.25
    T_STOP: float = 1.0

    CROPS_PER_MAP: int = 500
    AUGMENTATIONS_PER_CROP: int = 5
    CROP_SIZE: int = 64
    CLASS_SET: str = "full13"

    def __post_init__(self) -> None:
        if self.FPS <= 0:
            raise ConfigurationError(f"fps должен быть > 0: {self.FPS}")
        if self.METERS_PER_SOURCE_PX <= 0 or self.RESOLUTION_M_PER_PX <= 0:
            raise ConfigurationError("Масштабы в м/пиксель должны быть > 0")
        if self.V_STOP <= 0 or self.T_STOP <= 0:
            raise ConfigurationError("Пороги остановки v_stop и t_stop должны быть > 0")
        if self.CLASS_SET not in CLASS_SETS:
            raise ConfigurationError(f"Неизвестный набор классов '{self.CLASS_SET}'")
        for label in self.LABEL_FILTER:
            if label not in KNOWN_LABELS:
                raise UnknownLabelError(label, KNOWN_LABELS)

    def with_scene(self, scene: "SceneEntry") -> "IngestConfig":
        return replace(
            self,
            FPS=scene.fps,
            METERS_PER_SOURCE_PX=scene.meters_per_source_px,
            LABEL_FILTER=scene.label_filter or self.LABEL_FILTER,
        )

    def to_dict(self) -> dict[str, object]:
        return {f.name.lower(): getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class SceneEntry:
    """
    Описание одной сцены (файл *.scene, key = value).

    map и tracks: пути к SMAP и файлу аннотаций относительно файла сцены.
    """

    map_id: str
    map_path: Path
    tracks_path: Path
    fps: float
    meters_per_source_px: float
    label_filter: tuple[str, ...] = ()


SCENE_KEYS = ("map", "tracks", "fps", "meters_per_source_px", "label_filter")


def read_scene_file(path: str | Path) -> SceneEntry:
    path = Path(path)
    values = read_kv_file(path)
    for key in values:
        if key not in SCENE_KEYS:
            raise UnknownConfigKeyError(key, str(path))
    required = ("map", "tracks", "fps", "meters_per_source_px")
    missing = [k for k in required if k not in values]
    if missing:
        raise ConfigurationError(f"{path}: не заданы ключи {', '.join(missing)}")
    try:
        fps = float(values["fps"])
        mpp = float(values["meters_per_source_px"])
    except ValueError as e:
        raise ConfigurationError(f"{path}: некорректное число: {e}") from e
    labels = tuple(
        x.strip() for x in values.get("label_filter", "").split(",") if x.strip()
    )
    return SceneEntry(
        map_id=path.stem,
        map_path=path.parent / values["map"],
        tracks_path=path.parent / values["tracks"],
        fps=fps,
        meters_per_source_px=mpp,
        label_filter=labels,
    )


def scene_values(entry: SceneEntry) -> dict[str, object]:
    return {
        "map": entry.map_path.name,
        "tracks": entry.tracks_path.name,
        "fps": entry.fps,
        "meters_per_source_px": entry.meters_per_source_px,
        "label_filter": ",".join(entry.label_filter),
    }
