import numpy as np
import pytest

from motionprior_hub.core.exceptions import (
    ClassIndexError,
    ContractError,
    MapFormatError,
    MapTooSmallError,
)
from motionprior_hub.core.mapgrid import (
    CLASS_INDEX,
    LEGACY9_NAMES,
    VOID,
    CropDataset,
    CropPair,
    ProbGrid,
    SemanticMap,
    apply_dihedral,
    augment,
    draw_augmentations,
    inverse_transform,
    normalize_target,
    one_hot_encode,
    remap_class_set,
    sample_crop_origins,
    sample_crops,
)
from motionprior_hub.infra.storage import (
    DatasetStorage,
    dumps_smap,
    read_pgrid,
    read_smap,
    write_pgrid,
    write_smap,
)

from conftest import random_map, striped_sample


def test_one_hot_single_cell():
    channels = one_hot_encode(np.array([[4]]))
    assert channels.shape == (13, 1, 1)
    assert channels[4, 0, 0] == 1 and channels.sum() == 1


def test_one_hot_void_and_partition():
    assert not one_hot_encode(np.full((2, 2), VOID)).any()
    cells = np.array([[0, 12], [VOID, 5]])
    sums = one_hot_encode(cells).sum(axis=0)
    assert np.array_equal(sums, [[1, 1], [0, 1]])


def test_one_hot_argmax_reproduces_classes():
    smap = random_map(9, 7, seed=5)
    assert np.array_equal(one_hot_encode(smap).argmax(axis=0), smap.cells)


def test_out_of_range_class_names_cell():
    with pytest.raises(ClassIndexError) as err:
        one_hot_encode(np.array([[0, 0], [0, 13]]))
    assert "(1, 1)" in str(err.value)
    with pytest.raises(ClassIndexError):
        SemanticMap(np.array([[20]]))


def test_sample_crops_single_origin():
    smap = random_map(64, 64)
    targets = {"occupancy": np.ones((64, 64))}
    crops = sample_crops(smap, targets, rng=np.random.default_rng(1))
    assert len(crops) == 500
    assert {c.origin for c in crops} == {(0, 0)}


def test_sample_crops_support_and_determinism():
    smap = random_map(65, 65)
    targets = {"occupancy": np.random.default_rng(0).random((65, 65))}
    first = sample_crops(smap, targets, rng=np.random.default_rng(9))
    again = sample_crops(smap, targets, rng=np.random.default_rng(9))
    assert {c.origin for c in first} <= {(0, 0), (0, 1), (1, 0), (1, 1)}
    assert [c.origin for c in first] == [c.origin for c in again]
    r, c = first[3].origin
    expected = targets["occupancy"][r : r + 64, c : c + 64]
    assert np.array_equal(first[3].targets["occupancy"], expected)


def test_sample_crops_map_too_small():
    with pytest.raises(MapTooSmallError):
        sample_crops(random_map(10, 70), {}, size=64)


def test_crop_origins_uniform():
    origins = sample_crop_origins(12, 12, 10_000, 8, np.random.default_rng(11))
    counts = np.bincount(origins[:, 0], minlength=5)
    expected = 10_000 / 5
    sigma = np.sqrt(10_000 * 0.2 * 0.8)
    assert (np.abs(counts - expected) < 4 * sigma).all()


def test_rotate_clockwise_definition():
    a = np.array([["a", "b"], ["c", "d"]])
    assert apply_dihedral(a, 1).tolist() == [["c", "a"], ["d", "b"]]
    assert apply_dihedral(a, 0).tolist() == a.tolist()


@pytest.mark.parametrize("tid", range(8))
def test_transform_then_inverse(tid):
    x = np.arange(12).reshape(3, 4)
    restored = apply_dihedral(apply_dihedral(x, tid), inverse_transform(tid))
    assert np.array_equal(restored, x)


def test_augment_moves_input_and_targets_together():
    cells = np.arange(16).reshape(4, 4) % 13
    target = np.random.default_rng(0).random((4, 4))
    crop = CropPair(cells, {"occupancy": target}, (0, 0))
    for tid in range(8):
        out = augment(crop, tid)
        assert out.transform_id == tid
        assert np.isclose(out.targets["occupancy"].sum(), target.sum())
        # ячейка с классом k переезжает вместе со своим значением цели
        for k in range(13):
            src = cells == k
            if src.any():
                moved = out.targets["occupancy"][out.input == k]
                assert np.allclose(np.sort(moved), np.sort(target[src]))


def test_augment_rejects_bad_id():
    with pytest.raises(ContractError):
        apply_dihedral(np.zeros((2, 2)), 8)


def test_draw_augmentations_distinct_non_identity():
    ids = draw_augmentations(np.random.default_rng(0), 5)
    assert len(set(ids.tolist())) == 5
    assert 0 not in ids


def test_normalize_target_examples():
    uniform = np.full((64, 64), 1.0 / 4096)
    assert np.allclose(normalize_target(uniform, 64).grid, 1.0)
    zero = normalize_target(np.zeros((4, 4)), 4)
    assert zero.degenerate and not zero.grid.any()
    counts = np.random.default_rng(0).integers(0, 9, (8, 8)).astype(float)
    a = normalize_target(counts, 8).grid
    b = normalize_target(2 * counts, 8).grid
    assert np.allclose(a, b)


def test_normalize_target_velocity_policy():
    out = normalize_target(np.array([[0.0, 1.5], [3.0, 0.5]]), 2, policy="max")
    assert out.grid.max() == 1.0 and out.scale == pytest.approx(1 / 3)


def test_prob_grid_from_counts():
    grid = ProbGrid.from_counts(np.array([[1.0, 3.0]]))
    assert np.allclose(grid.mass, [[0.25, 0.75]])
    assert ProbGrid.from_counts(np.zeros((2, 2))).degenerate


def test_legacy9_remap():
    k = CLASS_INDEX
    smap = SemanticMap(
        np.array([[k["sitting_area"], k["intersection_zone"], k["grass"], VOID]])
    )
    legacy = remap_class_set(smap, "legacy9")
    assert legacy.num_classes == 9
    assert legacy.cells.tolist() == [
        [
            LEGACY9_NAMES.index("pedestrian_area"),
            LEGACY9_NAMES.index("vehicle_road"),
            LEGACY9_NAMES.index("grass"),
            VOID,
        ]
    ]
    assert one_hot_encode(legacy).shape == (9, 1, 4)


def test_smap_round_trip(tmp_path):
    smap = SemanticMap(np.array([[0, 1, VOID], [12, 3, 4]]), 0.4)
    path = write_smap(tmp_path / "m.smap", smap)
    assert dumps_smap(smap).splitlines()[:4] == ["SMAP1", "2 3", "0.4", "13"]
    again = read_smap(path)
    assert np.array_equal(again.cells, smap.cells) and again.resolution == 0.4


def test_smap_bad_row_reports_line(tmp_path):
    path = tmp_path / "bad.smap"
    path.write_text("SMAP1\n2 2\n0.4\n13\n1 2\n3\n", encoding="utf-8")
    with pytest.raises(MapFormatError) as err:
        read_smap(path)
    assert ":6" in str(err.value)


def test_pgrid_round_trip_bit_identical(tmp_path):
    mass = np.random.default_rng(0).random((5, 7))
    mass /= mass.sum()
    path = write_pgrid(tmp_path / "g.pgrid", mass)
    again = read_pgrid(path)
    assert np.array_equal(again.mass, mass)
    assert again.normalized


def test_dataset_storage_round_trip(tmp_path):
    sample = striped_sample("map_00")
    storage = DatasetStorage(tmp_path / "maps")
    storage.save(sample)
    loaded = storage.load_all()
    assert [s.map_id for s in loaded] == ["map_00"]
    assert np.array_equal(loaded[0].semantic_map.cells, sample.semantic_map.cells)
    assert np.array_equal(loaded[0].crop_origins, sample.crop_origins)
    assert np.array_equal(loaded[0].targets["occupancy"], sample.targets["occupancy"])


def test_crop_dataset_batch_shapes():
    samples = [striped_sample("a"), striped_sample("b", seed=1)]
    data = CropDataset(samples, ("occupancy",), 8)
    assert len(data) == 24
    channels, targets = data.batch(np.array([0, 13]))
    assert channels.shape == (2, 13, 8, 8)
    assert targets["occupancy"].shape == (2, 8, 8)
    assert data.target_scale("occupancy") == 64.0
