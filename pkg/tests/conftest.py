import numpy as np
import pytest

from motionprior_hub.core import tensor as T
from motionprior_hub.core.mapgrid import CLASS_INDEX, MapSample, SemanticMap
from motionprior_hub.core.model import ArchConfig, ModelWeights
from motionprior_hub.ingest.annotations import Trajectory, TrajectorySet


@pytest.fixture
def f64():
    with T.numeric_mode("f64", check_finite=True):
        yield


@pytest.fixture
def tiny_arch() -> ArchConfig:
    return ArchConfig(
        crop_size=8,
        patch_size=4,
        embed_dim=8,
        depth=1,
        num_heads=2,
        decoder_embed_dim=8,
        decoder_depth=1,
        decoder_num_heads=2,
    )


@pytest.fixture
def tiny_weights(tiny_arch, f64) -> ModelWeights:
    return ModelWeights.initialize(tiny_arch, np.random.default_rng(3), np.float64)


def random_map(height: int, width: int, seed: int = 0) -> SemanticMap:
    rng = np.random.default_rng(seed)
    return SemanticMap(rng.integers(0, 13, size=(height, width)))


def straight_walk(
    agent_id: int, x0: float, y0: float, vx: float, n: int, fps: float = 5.0
) -> Trajectory:
    t = np.arange(n) / fps
    return Trajectory(agent_id, "Pedestrian", t, x0 + vx * t, np.full(n, y0))


def striped_sample(map_id: str, size: int = 16, seed: int = 0) -> MapSample:
    """Тротуар в полосе по центру, цель занятости сосредоточена на нём."""
    cells = np.full((size, size), CLASS_INDEX["grass"])
    lo = size // 2 - 2 + seed % 3
    cells[:, lo : lo + 4] = CLASS_INDEX["pedestrian_area"]
    occupancy = np.where(cells == CLASS_INDEX["pedestrian_area"], 1.0, 0.0)
    occupancy /= occupancy.sum()
    rng = np.random.default_rng(seed)
    origins = np.stack(
        [rng.integers(0, size - 8 + 1, 12), rng.integers(0, size - 8 + 1, 12)], axis=1
    )
    return MapSample(
        map_id,
        SemanticMap(cells),
        {"occupancy": occupancy},
        origins.astype(np.int64),
        np.zeros(12, dtype=np.int64),
    )


@pytest.fixture
def empty_trajset() -> TrajectorySet:
    return TrajectorySet([], 5.0)
