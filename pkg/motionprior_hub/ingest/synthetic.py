"""
Синтетические сцены: кампус из семантических классов и пешеходы,
идущие между входами по дешёвым маршрутам.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from motionprior_hub.core.exceptions import ConfigurationError, UnreachableGoalError
from motionprior_hub.core.mapgrid import CLASS_INDEX, RESOLUTION_M_PER_PX, SemanticMap
from motionprior_hub.core.utils import substream
from motionprior_hub.ingest.annotations import Trajectory, TrajectorySet

logger = logging.getLogger("motionprior")

IMPASSABLE = ("building", "obstacle", "tree_foliage")

# Стоимость шага по классу; непроходимые классы в таблицу не входят.
STEP_COST: dict[str, float] = {
    "pedestrian_area": 1.0,
    "entrance": 1.0,
    "sitting_area": 1.0,
    "shaded_area": 1.0,
    "stairs": 1.2,
    "intersection_zone": 1.5,
    "grass": 3.0,
    "bicycle_road": 4.0,
    "parking": 4.0,
    "vehicle_road": 8.0,
}


@dataclass(frozen=True)
class SceneConfig:
    height: int = 128
    width: int = 128
    walkers: int = 40
    seed: int = 0
    resolution: float = RESOLUTION_M_PER_PX
    fps: float = 5.0
    speed_mean: float = 1.3
    speed_std: float = 0.2
    pause_probability: float = 0.5
    pause_seconds: tuple[float, float] = (4.0, 12.0)
    max_retries: int = 5
    jitter: float = 0.35
    strict_goals: bool = False
    base_cells: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.base_cells is not None:
            h, w = np.shape(self.base_cells)
            object.__setattr__(self, "height", int(h))
            object.__setattr__(self, "width", int(w))
        if self.height < 4 or self.width < 4:
            raise ConfigurationError(f"Сцена {self.height}x{self.width} слишком мала")
        if self.walkers < 0:
            raise ConfigurationError(
                f"Число пешеходов не может быть < 0: {self.walkers}"
            )
        if self.fps <= 0 or self.speed_mean <= 0:
            raise ConfigurationError("fps и speed_mean должны быть > 0")
        if self.base_cells is None and min(self.height, self.width) < 32:
            raise ConfigurationError(
                f"Сгенерированная сцена должна быть не меньше 32x32: "
                f"{self.height}x{self.width}"
            )
        if not 0.0 <= self.jitter < 0.5:
            raise ConfigurationError(f"jitter {self.jitter} вне [0, 0.5)")


@dataclass(frozen=True)
class SyntheticScene:
    semantic_map: SemanticMap
    trajectories: TrajectorySet
    unreachable: int = 0


# --- карта ---------------------------------------------------------------------


def _place_rect(
    cells: np.ndarray,
    rng: np.random.Generator,
    size_range: tuple[int, int],
    on: int,
    value: int,
    tries: int = 40,
) -> tuple[int, int, int, int] | None:
    """Прямоугольник класса value там, где с отступом 1 всё имеет класс on."""
    h, w = cells.shape
    lo, hi = size_range
    for _ in range(tries):
        rh = int(rng.integers(lo, hi + 1))
        rw = int(rng.integers(lo, hi + 1))
        if rh + 2 > h or rw + 2 > w:
            continue
        r = int(rng.integers(1, h - rh))
        c = int(rng.integers(1, w - rw))
        if (cells[r - 1 : r + rh + 1, c - 1 : c + rw + 1] == on).all():
            cells[r : r + rh, c : c + rw] = value
            return r, c, rh, rw
    return None


def campus_layout(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """
    Газон, дорога с велодорожкой и парковкой, сетка тротуаров с
    перекрёстками, здания с дверями, деревья, препятствия, скамейки,
    лестница и тень. Концы тротуаров у края карты служат входами.
    """
    k = CLASS_INDEX
    cells = np.full((height, width), k["grass"], dtype=np.uint8)
    ww = max(2, min(height, width) // 32)

    road_w = max(3, height // 16)
    road_hi = max(height // 4 + 1, 3 * height // 4 - road_w)
    road_r = int(rng.integers(height // 4, road_hi))

    picked = rng.choice(np.arange(2, height - ww - 2), 2, replace=False)
    rows = sorted(int(v) for v in picked)
    rows = [r for r in rows if r + ww < road_r - 2 or r > road_r + road_w + 1]
    for r in rows:
        cells[r : r + ww, :] = k["pedestrian_area"]

    cells[road_r : road_r + road_w, :] = k["vehicle_road"]
    if road_r >= 2:
        cells[road_r - 2 : road_r, :] = k["bicycle_road"]

    picked = rng.choice(np.arange(2, width - ww - 2), 2, replace=False)
    cols = sorted(int(v) for v in picked)
    for c in cols:
        band = cells[:, c : c + ww]
        crossing = np.isin(band, (k["vehicle_road"], k["bicycle_road"]))
        band[crossing] = k["intersection_zone"]
        band[~crossing] = k["pedestrian_area"]

    walk = cells == k["pedestrian_area"]
    for r, c in np.argwhere(walk):
        if r in (0, height - 1) or c in (0, width - 1):
            cells[r, c] = k["entrance"]

    if cols:
        c = cols[0]
        free = [
            r
            for r in range(1, height - 4)
            if (cells[r : r + 3, c] == k["pedestrian_area"]).all()
        ]
        if free:
            r = free[int(rng.integers(0, len(free)))]
            cells[r : r + 3, c : c + ww] = k["stairs"]
    if rows:
        r = rows[0]
        c = int(rng.integers(1, max(2, width - 8)))
        segment = cells[r : r + ww, c : c + 6]
        segment[segment == k["pedestrian_area"]] = k["shaded_area"]

    for _ in range(max(2, height * width // 2048)):
        size_range = (6, max(7, min(height, width) // 6))
        rect = _place_rect(cells, rng, size_range, k["grass"], k["building"])
        if rect is None:
            continue
        r, c, rh, rw = rect
        side = int(rng.integers(0, 4))
        door = [
            (r, c + rw // 2),
            (r + rh - 1, c + rw // 2),
            (r + rh // 2, c),
            (r + rh // 2, c + rw - 1),
        ][side]
        cells[door] = k["entrance"]

    _place_rect(cells, rng, (4, 8), k["grass"], k["parking"])
    for _ in range(max(4, height * width // 1024)):
        _place_rect(cells, rng, (1, 2), k["grass"], k["tree_foliage"], tries=10)
    for _ in range(max(2, height * width // 4096)):
        _place_rect(cells, rng, (1, 1), k["grass"], k["obstacle"], tries=10)

    seats = np.argwhere(cells == k["pedestrian_area"])
    if len(seats):
        count = min(len(seats), max(6, len(seats) // 40))
        for idx in rng.choice(len(seats), size=count, replace=False):
            cells[tuple(seats[idx])] = k["sitting_area"]
    return cells


# --- маршруты ------------------------------------------------------------------


def _cost_table() -> np.ndarray:
    costs = np.full(256, np.inf)
    for name, cost in STEP_COST.items():
        costs[CLASS_INDEX[name]] = cost
    return costs


def routing_graph(cells: np.ndarray) -> coo_matrix:
    """4-связный граф: ребро между проходимыми соседями, вес равен средней стоимости."""
    h, w = cells.shape
    cost = _cost_table()[cells]
    ids = np.arange(h * w).reshape(h, w)
    src, dst, weight = [], [], []
    for a, b, ca, cb in (
        (ids[:, :-1], ids[:, 1:], cost[:, :-1], cost[:, 1:]),
        (ids[:-1, :], ids[1:, :], cost[:-1, :], cost[1:, :]),
    ):
        ok = np.isfinite(ca) & np.isfinite(cb)
        src.append(a[ok])
        dst.append(b[ok])
        weight.append((ca[ok] + cb[ok]) / 2.0)
    return coo_matrix(
        (np.concatenate(weight), (np.concatenate(src), np.concatenate(dst))),
        shape=(h * w, h * w),
    ).tocsr()


def _path(pred: np.ndarray, start: int, goal: int) -> list[int]:
    path = [goal]
    while path[-1] != start:
        path.append(int(pred[path[-1]]))
    return path[::-1]


def _walk(
    path: list[int],
    width: int,
    cfg: SceneConfig,
    rng: np.random.Generator,
    sitting: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Позиции по кадрам вдоль пути: смещение внутри ячейки и паузы на скамейках."""
    res = cfg.resolution
    offset = rng.uniform(-cfg.jitter, cfg.jitter, size=2) * res
    cells = np.array([(p // width, p % width) for p in path], dtype=np.float64)
    centers = np.stack([cells[:, 1] + 0.5, cells[:, 0] + 0.5], axis=1) * res
    pts = centers + offset
    speed = max(0.3, float(rng.normal(cfg.speed_mean, cfg.speed_std)))
    step = speed / cfg.fps
    total = (len(path) - 1) * res
    pauses: dict[int, int] = {}
    for i, p in enumerate(path):
        if sitting.flat[p] and rng.random() < cfg.pause_probability:
            lo, hi = cfg.pause_seconds
            pauses[i] = int(round(rng.uniform(lo, hi) * cfg.fps))
    pending = sorted(pauses)

    def at(u: float) -> np.ndarray:
        if len(pts) == 1:
            return pts[0]
        i = min(int(u // res), len(pts) - 2)
        frac = (u - i * res) / res
        return pts[i] * (1.0 - frac) + pts[i + 1] * frac

    out: list[np.ndarray] = []
    u = 0.0
    while True:
        if pending and u >= pending[0] * res:
            i = pending.pop(0)
            u = i * res
            out.extend(at(u) for _ in range(pauses[i]))
        out.append(at(u))
        if u >= total:
            break
        u = min(u + step, total)
    xy = np.array(out)
    return xy[:, 0], xy[:, 1]


def generate_synthetic_scene(cfg: SceneConfig) -> SyntheticScene:
    """
    Детерминированная сцена по (seed, конфигурация).

    Пешеход выбирает два разных входа; если цель недостижима, пара
    перевыбирается до max_retries раз, затем пешеход пропускается
    (или UnreachableGoalError при strict_goals).
    """
    if cfg.base_cells is not None:
        cells = np.asarray(cfg.base_cells).astype(np.uint8)
    else:
        cells = campus_layout(cfg.height, cfg.width, substream(cfg.seed, "layout"))
    smap = SemanticMap(cells, cfg.resolution)
    walkable = np.isfinite(_cost_table()[smap.cells])
    if not walkable.any():
        raise ConfigurationError("В сцене нет проходимых ячеек")

    trajectories: list[Trajectory] = []
    unreachable = 0
    if cfg.walkers:
        entrances = np.flatnonzero(smap.cells == CLASS_INDEX["entrance"])
        if len(entrances) < 2:
            raise ConfigurationError("Для пешеходов нужно хотя бы два входа")
        graph = routing_graph(smap.cells)
        sitting = smap.cells == CLASS_INDEX["sitting_area"]
        cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for walker in range(cfg.walkers):
            rng = substream(cfg.seed, "walker", walker)
            route = None
            for _ in range(cfg.max_retries + 1):
                start, goal = (int(v) for v in rng.choice(entrances, 2, replace=False))
                if start not in cache:
                    cache[start] = dijkstra(
                        graph, directed=False, indices=start, return_predecessors=True
                    )
                dist, pred = cache[start]
                if np.isfinite(dist[goal]):
                    route = _path(pred, start, goal)
                    break
            if route is None:
                unreachable += 1
                logger.info(
                    "Walker %d: goal unreachable after %d retries",
                    walker,
                    cfg.max_retries,
                )
                if cfg.strict_goals:
                    raise UnreachableGoalError(walker, cfg.max_retries)
                continue
            x, y = _walk(route, smap.width, cfg, rng, sitting)
            start_frame = int(rng.integers(0, 3000))
            t = (start_frame + np.arange(len(x))) / cfg.fps
            trajectories.append(Trajectory(walker, "Pedestrian", t, x, y))

    trajset = TrajectorySet(trajectories, cfg.fps, ("Pedestrian",), 0)
    return SyntheticScene(smap, trajset, unreachable)
