"""
Аннотации в формате SDD и перевод треков в метрические траектории.

Строка аннотации: id xmin ymin xmax ymax frame lost occluded generated "label".
"""

from __future__ import annotations

import logging
from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np

from motionprior_hub.core.exceptions import (
    AnnotationParseError,
    ConfigurationError,
    UnknownLabelError,
)
from motionprior_hub.ingest.config import KNOWN_LABELS

logger = logging.getLogger("motionprior")

_INT_FIELDS = ("track_id", "xmin", "ymin", "xmax", "ymax", "frame")
_FLAG_FIELDS = ("lost", "occluded", "generated")


@dataclass(frozen=True)
class TrackRecord:
    track_id: int
    xmin: int
    ymin: int
    xmax: int
    ymax: int
    frame: int
    lost: int
    occluded: int
    generated: int
    label: str

    @property
    def centroid(self) -> tuple[float, float]:
        return (self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0


def _parse_line(line_no: int, line: str) -> TrackRecord:
    tokens = line.split()
    if len(tokens) < 10:
        token = tokens[-1] if tokens else ""
        raise AnnotationParseError(line_no, token, f"{len(tokens)} полей вместо 10")
    if len(tokens) > 10:
        raise AnnotationParseError(line_no, tokens[10], "лишние поля")
    values: dict[str, int] = {}
    for name, token in zip(_INT_FIELDS + _FLAG_FIELDS, tokens[:9]):
        try:
            values[name] = int(token)
        except ValueError as e:
            raise AnnotationParseError(line_no, token, f"{name} не целое") from e
    for name, token in zip(_FLAG_FIELDS, tokens[6:9]):
        if values[name] not in (0, 1):
            raise AnnotationParseError(line_no, token, f"флаг {name} не 0/1")
    if values["xmin"] > values["xmax"]:
        raise AnnotationParseError(line_no, tokens[1], "xmin > xmax")
    if values["ymin"] > values["ymax"]:
        raise AnnotationParseError(line_no, tokens[2], "ymin > ymax")
    if values["frame"] < 0:
        raise AnnotationParseError(line_no, tokens[5], "отрицательный кадр")
    label = tokens[9].strip('"')
    if not label:
        raise AnnotationParseError(line_no, tokens[9], "пустая метка")
    return TrackRecord(label=label, **values)


def parse_sdd_annotations(lines: Iterable[str]) -> list[TrackRecord]:
    """Одна запись на непустую строку; lost=1 сохраняются с флагом."""
    records: list[TrackRecord] = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        records.append(_parse_line(line_no, line))
    return records


@dataclass(frozen=True)
class Trajectory:
    agent_id: int
    label: str
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return int(self.t.shape[0])


@dataclass
class TrajectorySet:
    """Траектории в метрах; время в секундах строго возрастает у каждого агента."""

    trajectories: list[Trajectory] = field(default_factory=list)
    fps: float = 30.0
    label_filter: tuple[str, ...] = ("Pedestrian",)
    lost_dropped: int = 0

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def num_samples(self) -> int:
        return sum(len(tr) for tr in self.trajectories)

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.trajectories:
            return np.zeros(0), np.zeros(0)
        return (
            np.concatenate([tr.x for tr in self.trajectories]),
            np.concatenate([tr.y for tr in self.trajectories]),
        )


def tracks_to_trajectories(
    records: list[TrackRecord],
    meters_per_source_px: float,
    fps: float,
    label_filter: tuple[str, ...] = ("Pedestrian",),
) -> TrajectorySet:
    """
    Центры рамок по кадрам в метрах, t = frame / fps.

    Записи с lost=1 отбрасываются и считаются; повтор кадра в треке
    оставляет первую запись.
    """
    if fps <= 0:
        raise ConfigurationError(f"fps должен быть > 0: {fps}")
    for label in label_filter:
        if label not in KNOWN_LABELS:
            raise UnknownLabelError(label, KNOWN_LABELS)
    wanted = set(label_filter)
    by_track: dict[int, list[TrackRecord]] = {}
    lost = 0
    for rec in records:
        if rec.label not in wanted:
            continue
        if rec.lost:
            lost += 1
            continue
        by_track.setdefault(rec.track_id, []).append(rec)

    trajectories: list[Trajectory] = []
    for track_id in sorted(by_track):
        recs = sorted(by_track[track_id], key=lambda r: r.frame)
        frames: list[int] = []
        xs: list[float] = []
        ys: list[float] = []
        for rec in recs:
            if frames and rec.frame == frames[-1]:
                continue
            cx, cy = rec.centroid
            frames.append(rec.frame)
            xs.append(cx * meters_per_source_px)
            ys.append(cy * meters_per_source_px)
        trajectories.append(
            Trajectory(
                agent_id=track_id,
                label=recs[0].label,
                t=np.asarray(frames, dtype=np.float64) / fps,
                x=np.asarray(xs, dtype=np.float64),
                y=np.asarray(ys, dtype=np.float64),
            )
        )
    if lost:
        logger.info("Dropped %d lost annotation samples", lost)
    return TrajectorySet(trajectories, fps, tuple(label_filter), lost)


def trajectories_to_sdd_lines(
    trajset: TrajectorySet,
    meters_per_source_px: float,
    box_px: int = 20,
) -> list[str]:
    """Обратный экспорт в строки SDD (кадр = round(t·fps), рамка вокруг центра)."""
    lines: list[str] = []
    half = box_px // 2
    for tr in trajset.trajectories:
        frames = np.rint(tr.t * trajset.fps).astype(np.int64)
        cx = np.rint(tr.x / meters_per_source_px).astype(np.int64)
        cy = np.rint(tr.y / meters_per_source_px).astype(np.int64)
        for frame, x, y in zip(frames, cx, cy):
            lines.append(
                f"{tr.agent_id} {x - half} {y - half} {x + half} {y + half} "
                f'{frame} 0 0 0 "{tr.label}"'
            )
    return lines
