import numpy as np
import pytest

from motionprior_hub.core import inference
from motionprior_hub.core.exceptions import ContractError, MapTooSmallError
from motionprior_hub.core.inference import (
    PGM_MAXVAL,
    ClassFrequencyBaseline,
    ReconstructionPlan,
    export_heatmap,
    pgm16_bytes,
    plan_reconstruction,
    predict_crop,
    predict_map,
    random_plan,
    read_pgm16,
    uniform_baseline,
)
from motionprior_hub.core.mapgrid import MapSample, SemanticMap
from motionprior_hub.infra.storage import read_kv_file, read_pgrid

from conftest import random_map


def _constant_head(weights, value):
    out = weights.copy()
    out.params["head.occupancy.weight"][:] = 0.0
    out.params["head.occupancy.bias"][:] = value
    return out


# --- план ----------------------------------------------------------------------


@pytest.mark.parametrize("stride", [1, 32, 64])
def test_coverage_matches_combinatorial_oracle(stride):
    plan = plan_reconstruction(128, 96, 64, stride)
    oracle = np.zeros((128, 96), dtype=np.int64)
    for r, c in plan.origins:
        oracle[r : r + 64, c : c + 64] += 1
    assert np.array_equal(plan.coverage, oracle)
    assert plan.uncovered == 0


def test_stride_one_counts_every_valid_origin():
    plan = plan_reconstruction(128, 96, 64, 1)
    assert plan.num_crops == 65 * 33
    # пиксель (0, 0) покрыт только кропом в начале координат
    assert plan.coverage[0, 0] == 1
    assert plan.coverage[63, 32] == 64 * 33


def test_plan_edges_are_aligned():
    plan = plan_reconstruction(100, 70, 64, 32)
    rows = sorted({int(r) for r, _ in plan.origins})
    cols = sorted({int(c) for _, c in plan.origins})
    assert rows == [0, 32, 36] and cols == [0, 6]


def test_plan_errors():
    with pytest.raises(MapTooSmallError):
        plan_reconstruction(32, 96, 64, 32)
    with pytest.raises(ContractError):
        plan_reconstruction(64, 64, 64, 0)
    with pytest.raises(ContractError):
        random_plan(64, 64, 64, 0, np.random.default_rng(0))


def test_random_plan_reports_uncovered():
    plan = random_plan(40, 40, 8, 3, np.random.default_rng(0))
    assert plan.num_crops == 3
    assert plan.uncovered == int((plan.coverage == 0).sum()) > 0
    same = ReconstructionPlan.from_origins(40, 40, 8, plan.origins)
    assert np.array_equal(same.coverage, plan.coverage)


# --- кропы ---------------------------------------------------------------------


def test_predict_crop_shape_and_determinism(tiny_weights):
    crop = random_map(8, 8, seed=1)
    first = predict_crop(tiny_weights, crop)
    second = predict_crop(tiny_weights, crop)
    assert first["occupancy"].shape == (8, 8)
    assert np.array_equal(first["occupancy"], second["occupancy"])


def test_predict_crop_zero_head(tiny_weights):
    weights = _constant_head(tiny_weights, 0.0)
    assert not predict_crop(weights, random_map(8, 8, seed=2))["occupancy"].any()


def test_predict_crop_applies_inverse_scale(tiny_weights):
    weights = _constant_head(tiny_weights, 6.4)
    weights.target_scales = {"occupancy": 64.0}
    out = predict_crop(weights, random_map(8, 8))["occupancy"]
    assert np.allclose(out, 0.1, atol=1e-12)


def test_predict_crop_rejects_wrong_size(tiny_weights):
    with pytest.raises(ContractError):
        predict_crop(tiny_weights, random_map(16, 16))
    with pytest.raises(ContractError):
        predict_crop(tiny_weights, np.zeros((9, 8, 8)))


# --- карта ---------------------------------------------------------------------


def test_constant_predictor_gives_constant_map(tiny_weights):
    weights = _constant_head(tiny_weights, 0.3)
    smap = random_map(20, 13, seed=4)
    for stride in (1, 3, 8):
        result = predict_map(weights, smap, stride=stride)
        assert np.allclose(result.raw["occupancy"], 0.3, atol=1e-12)
        assert np.allclose(result.grids["occupancy"].mass, 1.0 / (20 * 13), atol=1e-15)
        assert result.raw_sums["occupancy"] == pytest.approx(0.3 * 20 * 13)


def test_overlap_is_averaged(tiny_weights, monkeypatch):
    cells = np.zeros((8, 12), dtype=np.int64)
    cells[:, 4:] = 1

    def fake_batch(weights, channels):
        full = channels[:, 1].sum(axis=(1, 2)) == 64
        values = np.where(full, 0.4, 0.2)[:, None, None]
        return {"occupancy": np.broadcast_to(values, (len(channels), 8, 8)).copy()}

    monkeypatch.setattr(inference, "_predict_batch", fake_batch)
    result = predict_map(tiny_weights, SemanticMap(cells), stride=4)
    raw = result.raw["occupancy"]
    assert np.allclose(raw[:, :4], 0.2)
    assert np.allclose(raw[:, 4:8], 0.3)
    assert np.allclose(raw[:, 8:], 0.4)


def test_stride_equal_to_crop_tiles_output(tiny_weights):
    smap = random_map(16, 16, seed=6)
    result = predict_map(tiny_weights, smap, stride=8)
    assert result.plan.num_crops == 4
    for r in (0, 8):
        for c in (0, 8):
            tile = SemanticMap(smap.cells[r : r + 8, c : c + 8])
            expected = predict_crop(tiny_weights, tile)["occupancy"]
            got = result.raw["occupancy"][r : r + 8, c : c + 8]
            assert np.allclose(got, expected, rtol=0, atol=1e-12)


def test_predict_map_independent_of_jobs(tiny_weights):
    smap = random_map(24, 20, seed=7)
    one = predict_map(tiny_weights, smap, stride=2, batch_size=3, jobs=1)
    many = predict_map(tiny_weights, smap, stride=2, batch_size=3, jobs=4)
    assert np.array_equal(one.raw["occupancy"], many.raw["occupancy"])
    grid = one.grids["occupancy"]
    assert grid.mass.min() >= 0 and abs(grid.mass.sum() - 1.0) < 1e-9


def test_predict_map_random_mode(tiny_weights):
    weights = _constant_head(tiny_weights, 0.5)
    smap = random_map(30, 30)
    a = predict_map(weights, smap, mode="random", count=4, rng=np.random.default_rng(1))
    b = predict_map(weights, smap, mode="random", count=4, rng=np.random.default_rng(1))
    assert np.array_equal(a.raw["occupancy"], b.raw["occupancy"])
    uncovered = a.plan.coverage == 0
    assert uncovered.any()
    assert not a.raw["occupancy"][uncovered].any()
    assert np.allclose(a.raw["occupancy"][~uncovered], 0.5)


def test_predict_map_errors(tiny_weights):
    with pytest.raises(MapTooSmallError):
        predict_map(tiny_weights, random_map(6, 20))
    with pytest.raises(ContractError):
        predict_map(tiny_weights, random_map(8, 8), mode="spiral")


# --- базовые модели ------------------------------------------------------------


def test_uniform_baseline():
    grid = uniform_baseline(random_map(4, 5))
    assert np.allclose(grid.mass, 0.05)


def test_class_frequency_baseline():
    train_map = SemanticMap(np.array([[0, 0], [1, 1]]))
    target = np.array([[0.5, 0.5], [0.0, 0.0]])
    sample = MapSample(
        "a", train_map, {"occupancy": target}, np.zeros((0, 2)), np.zeros(0)
    )
    baseline = ClassFrequencyBaseline("occupancy", 13).fit([sample])
    new_map = SemanticMap(np.array([[0, 1], [1, 5]]))
    assert np.allclose(baseline.predict(new_map), [[2.0, 0.0], [0.0, 1.0]])
    assert np.allclose(baseline.predict_grid(new_map).mass, [[2 / 3, 0], [0, 1 / 3]])


# --- экспорт -------------------------------------------------------------------


def test_pgm16_levels(tmp_path):
    data, lo, hi = pgm16_bytes(np.full((3, 2), 0.25))
    assert lo == hi == 0.25
    path = tmp_path / "c.pgm"
    path.write_bytes(data)
    assert (read_pgm16(path) == PGM_MAXVAL).all()

    values = np.array([[0.0, 0.5], [1.0, 2.0]])
    export_heatmap(values, tmp_path / "v.pgm", "pgm16")
    levels = read_pgm16(tmp_path / "v.pgm")
    assert levels[1, 1] == PGM_MAXVAL and levels[0, 0] == 0
    assert levels[0, 1] == round(0.25 * PGM_MAXVAL)


def test_export_heatmap_writes_sidecar(tmp_path):
    mass = np.random.default_rng(0).random((4, 6))
    mass /= mass.sum()
    extra = {"stride": 32, "head": "occupancy"}
    target = tmp_path / "m.occupancy.pgrid"
    path, meta_path = export_heatmap(mass, target, "pgrid", extra)
    assert meta_path.name == "m.occupancy.pgrid.meta"
    assert np.array_equal(read_pgrid(path).mass, mass)
    meta = read_kv_file(meta_path)
    assert meta["format"] == "pgrid" and meta["stride"] == "32"
    assert (meta["height"], meta["width"]) == ("4", "6")

    _, pgm_meta = export_heatmap(mass, tmp_path / "m.pgm", "pgm16")
    scale = read_kv_file(pgm_meta)
    assert float(scale["max"]) == mass.max()
    step = (mass.max() - mass.min()) / PGM_MAXVAL
    assert float(scale["scale"]) == pytest.approx(step)


def test_export_heatmap_rejects_bad_input(tmp_path):
    with pytest.raises(ContractError):
        export_heatmap(np.array([[np.nan]]), tmp_path / "x.pgrid")
    with pytest.raises(ContractError):
        export_heatmap(np.ones((2, 2)), tmp_path / "x.png", "png")
