"""
Растеризация траекторий в целевые сетки: занятость, остановки, скорость.

Сэмпл с координатами (x, y) в метрах попадает в ячейку
(floor(y / res), floor(x / res)); сэмплы вне сетки считаются отдельно.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from motionprior_hub.core.exceptions import ContractError
from motionprior_hub.core.mapgrid import RESOLUTION_M_PER_PX, ProbGrid
from motionprior_hub.ingest.annotations import Trajectory, TrajectorySet


@dataclass(frozen=True)
class GridGeometry:
    height: int
    width: int
    resolution: float = RESOLUTION_M_PER_PX

    def cells(
        self, x: np.ndarray, y: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(строки, столбцы, маска попадания в сетку)."""
        rows = np.floor(np.asarray(y) / self.resolution).astype(np.int64)
        cols = np.floor(np.asarray(x) / self.resolution).astype(np.int64)
        inside = (rows >= 0) & (rows < self.height) & (cols >= 0) & (cols < self.width)
        return rows, cols, inside


@dataclass(frozen=True)
class RasterResult:
    grid: ProbGrid
    counts: np.ndarray
    out_of_bounds: int


def estimate_speeds(traj: Trajectory) -> np.ndarray:
    """
    Скорость в каждом сэмпле (м/с).

    Центральные разности внутри, односторонние на концах; у трека из одного
    сэмпла скорость 0.
    """
    n = len(traj)
    if n < 2:
        return np.zeros(n)
    pos = np.stack([traj.x, traj.y], axis=1)
    speeds = np.empty(n)
    dist = np.linalg.norm(pos[2:] - pos[:-2], axis=1)
    speeds[1:-1] = dist / (traj.t[2:] - traj.t[:-2])
    speeds[0] = np.linalg.norm(pos[1] - pos[0]) / (traj.t[1] - traj.t[0])
    speeds[-1] = np.linalg.norm(pos[-1] - pos[-2]) / (traj.t[-1] - traj.t[-2])
    return speeds


def _accumulate(
    geom: GridGeometry,
    x: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    rows, cols, inside = geom.cells(x, y)
    counts = np.zeros((geom.height, geom.width), dtype=np.float64)
    w = None if weights is None else np.asarray(weights)[inside]
    np.add.at(counts, (rows[inside], cols[inside]), 1.0 if w is None else w)
    return counts, int(np.count_nonzero(~inside))


def rasterize_occupancy(trajset: TrajectorySet, geom: GridGeometry) -> RasterResult:
    """Каждый сэмпл (кадр) добавляет 1 в свою ячейку, затем нормировка."""
    x, y = trajset.points()
    counts, oob = _accumulate(geom, x, y)
    return RasterResult(ProbGrid.from_counts(counts), counts, oob)


def stop_mask(traj: Trajectory, v_stop: float, t_stop: float) -> np.ndarray:
    """Сэмплы непрерывных участков со скоростью < v_stop длительностью ≥ t_stop."""
    speeds = estimate_speeds(traj)
    slow = speeds < v_stop if len(traj) >= 2 else np.zeros(len(traj), dtype=bool)
    mask = np.zeros(len(traj), dtype=bool)
    start = None
    for i in range(len(traj) + 1):
        inside = i < len(traj) and slow[i]
        if inside and start is None:
            start = i
        elif not inside and start is not None:
            if traj.t[i - 1] - traj.t[start] >= t_stop:
                mask[start:i] = True
            start = None
    return mask


def rasterize_stops(
    trajset: TrajectorySet,
    geom: GridGeometry,
    v_stop: float = 0.25,
    t_stop: float = 1.0,
) -> RasterResult:
    if v_stop <= 0 or t_stop <= 0:
        raise ContractError("v_stop и t_stop должны быть > 0")
    xs, ys = [], []
    for tr in trajset.trajectories:
        mask = stop_mask(tr, v_stop, t_stop)
        xs.append(tr.x[mask])
        ys.append(tr.y[mask])
    x = np.concatenate(xs) if xs else np.zeros(0)
    y = np.concatenate(ys) if ys else np.zeros(0)
    counts, oob = _accumulate(geom, x, y)
    return RasterResult(ProbGrid.from_counts(counts), counts, oob)


@dataclass(frozen=True)
class VelocityRaster:
    """mean_speed в м/с; normalized делится на максимум по карте."""

    mean_speed: np.ndarray
    normalized: np.ndarray
    coverage: np.ndarray
    out_of_bounds: int


def rasterize_velocity(trajset: TrajectorySet, geom: GridGeometry) -> VelocityRaster:
    """Среднее скоростей сэмплов в ячейке; непосещённые ячейки равны 0."""
    xs, ys, vs = [], [], []
    for tr in trajset.trajectories:
        if len(tr) < 2:
            continue
        xs.append(tr.x)
        ys.append(tr.y)
        vs.append(estimate_speeds(tr))
    x = np.concatenate(xs) if xs else np.zeros(0)
    y = np.concatenate(ys) if ys else np.zeros(0)
    v = np.concatenate(vs) if vs else np.zeros(0)
    totals, oob = _accumulate(geom, x, y, v)
    counts, _ = _accumulate(geom, x, y)
    coverage = counts > 0
    mean = np.zeros_like(totals)
    mean[coverage] = totals[coverage] / counts[coverage]
    peak = float(mean.max()) if mean.size else 0.0
    normalized = mean / peak if peak > 0 else np.zeros_like(mean)
    return VelocityRaster(mean, normalized, coverage, oob)
