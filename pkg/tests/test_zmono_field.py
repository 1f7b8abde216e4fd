import numpy as np
import pytest

from satcity.errors import CheckpointError, FieldDomainError
from satcity.geom_core import HeightMap
from satcity.zmono_field import (ColumnPlan, ZMonoField, eval_sdf, grad_height, height_grid, height_of,
                                 load_field, neighbor_weights, save_field)


def test_constant_field_height():
    field = ZMonoField.constant(16, 0.25)
    assert height_of(field, 0.1, -0.3) == pytest.approx(0.25, abs=1e-10)
    assert eval_sdf(field, [0.1, -0.3, 0.25]) == pytest.approx(0.0, abs=1e-12)
    assert eval_sdf(field, [0.1, -0.3, 0.9]) > 0
    assert eval_sdf(field, [0.1, -0.3, -0.9]) < 0


def test_weights_are_a_partition_of_unity(rng):
    field = ZMonoField.constant(10, 0.0)
    for x, y in rng.uniform(-1, 1, size=(20, 2)):
        nw = neighbor_weights(field, x, y)
        assert nw.weights.sum() == pytest.approx(1.0)
        assert np.all(nw.weights >= 0)
        assert len(nw.indices) == 9


def test_border_window_stays_in_bounds():
    field = ZMonoField.constant(10, 0.0)
    nw = neighbor_weights(field, -1.0, 1.0)
    assert nw.indices[:, 0].min() == 0
    assert nw.indices[:, 1].max() == 9
    assert nw.indices.min() >= 0 and nw.indices.max() <= 9


def test_query_at_cell_center_is_dominated_by_that_cell():
    field = ZMonoField.constant(8, 0.0)
    c = HeightMap.cell_centers(8)[3]
    nw = neighbor_weights(field, c, c)
    top = nw.indices[np.argmax(nw.weights)]
    assert tuple(top) == (3, 3)
    assert nw.weights.max() > 0.99


def test_monotone_along_z(small_field, rng):
    xy = rng.uniform(-1, 1, size=(2000, 2))
    z = np.sort(rng.uniform(-1, 1, size=(2000, 2)), axis=1)
    plan = ColumnPlan.for_field(small_field, xy[:, 0], xy[:, 1])
    s = plan.evaluate(small_field.grid_h, z)
    assert np.all(s[:, 0] <= s[:, 1])


def test_height_is_the_zero_crossing(small_field, rng):
    xy = rng.uniform(-0.9, 0.9, size=(200, 2))
    z = height_of(small_field, xy[:, 0], xy[:, 1])
    inside = np.abs(z) < 1.0
    pts = np.column_stack([xy[inside], z[inside]])
    assert np.max(np.abs(eval_sdf(small_field, pts))) < 1e-9


def test_clamped_plateaus():
    high = ZMonoField.constant(8, 1.0)
    # every term is negative throughout [-1, 1) and zero at +1
    assert height_of(high, 0.0, 0.0) == 1.0
    low = ZMonoField.constant(8, -1.0)
    assert height_of(low, 0.0, 0.0) == -1.0
    g = grad_height(low, 0.0, 0.0)
    assert g.clamped
    assert np.all(g.grads == 0.0)


def test_grad_height_matches_finite_differences(small_field, rng):
    eps = 1e-5
    checked = 0
    for x, y in rng.uniform(-0.95, 0.95, size=(40, 2)):
        g = grad_height(small_field, x, y)
        if g.clamped:
            continue
        for (u, v), analytic in zip(g.indices, g.grads):
            plus = small_field.copy()
            minus = small_field.copy()
            plus.grid_h[u, v] += eps
            minus.grid_h[u, v] -= eps
            numeric = (height_of(plus, x, y) - height_of(minus, x, y)) / (2 * eps)
            assert numeric == pytest.approx(analytic, rel=1e-3, abs=1e-6)
        assert g.grads.sum() == pytest.approx(1.0)
        checked += 1
    assert checked > 20


def test_raising_an_offset_never_lowers_a_height(small_field, rng):
    xy = rng.uniform(-1, 1, size=(100, 2))
    before = height_of(small_field, xy[:, 0], xy[:, 1])
    raised = small_field.copy()
    raised.grid_h[2:5, 2:5] += 0.1
    after = height_of(raised, xy[:, 0], xy[:, 1])
    assert np.all(after >= before - 1e-10)


def test_domain_errors(small_field):
    with pytest.raises(FieldDomainError):
        eval_sdf(small_field, [1.5, 0.0, 0.0])
    with pytest.raises(FieldDomainError):
        height_of(small_field, 0.0, -1.01)


def test_from_heightmap_takes_cell_maximum():
    heights = np.zeros((8, 8))
    heights[0, 0] = 0.5
    heights[1, 1] = 0.7
    valid = np.zeros((8, 8), dtype=bool)
    valid[0, 0] = valid[1, 1] = valid[7, 7] = True
    heights[7, 7] = -0.2
    field = ZMonoField.from_heightmap(HeightMap(8, heights, valid), 4)
    assert field.grid_h[0, 0] == 0.7
    assert field.grid_h[3, 3] == -0.2
    # empty cells start at the lowest valid height
    assert field.grid_h[2, 1] == -0.2


def test_height_grid_threads_agree(small_field):
    single = height_grid(small_field, 32)
    multi = height_grid(small_field, 32, threads=4)
    np.testing.assert_array_equal(single.heights, multi.heights)
    assert single.valid.all()


def test_checkpoint_round_trip(tmp_path, small_field):
    path = str(tmp_path / "f.zmsdf")
    save_field(small_field, path)
    back = load_field(path)
    np.testing.assert_array_equal(back.grid_h, small_field.grid_h)
    assert back.k == small_field.k
    assert back.window == small_field.window


def test_checkpoint_rejects_corruption(tmp_path, small_field):
    path = tmp_path / "f.zmsdf"
    save_field(small_field, str(path))
    data = path.read_bytes()
    path.write_bytes(b"NOTSDF" + data[6:])
    with pytest.raises(CheckpointError):
        load_field(str(path))
    path.write_bytes(data[:-8])
    with pytest.raises(CheckpointError):
        load_field(str(path))


def test_invalid_field_shapes():
    with pytest.raises(ValueError):
        ZMonoField(np.zeros((4, 5)))
    with pytest.raises(ValueError):
        ZMonoField(np.zeros((4, 4)), window=2)
