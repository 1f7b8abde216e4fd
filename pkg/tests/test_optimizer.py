import numpy as np
import pytest

from satcity import optimizer
from satcity.errors import EmptyInputError, FitDivergedError
from satcity.geom_core import Frame, HeightMap, PointCloud, normalize_cloud
from satcity.optimizer import (Adam, FitConfig, build_target_heightmap, fit, fit_tiled, loss_height,
                               loss_laplacian, loss_normal_tv, loss_summary, tile_regions, total_loss)


def numeric_grad(loss_fn, h, eps=1e-6):
    grad = np.zeros_like(h)
    for idx in np.ndindex(h.shape):
        plus = h.copy()
        minus = h.copy()
        plus[idx] += eps
        minus[idx] -= eps
        grad[idx] = (loss_fn(HeightMap(h.shape[0], plus))[0] - loss_fn(HeightMap(h.shape[0], minus))[0]) / (2 * eps)
    return grad


def grid_cloud(res, height_fn):
    c = HeightMap.cell_centers(res)
    xx, yy = np.meshgrid(c, c, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel(), height_fn(xx.ravel(), yy.ravel())])
    return PointCloud(pts, Frame.NORMALIZED)


def test_laplacian_of_a_spike():
    h = np.zeros((5, 5))
    h[2, 2] = 1.0
    loss, _ = loss_laplacian(HeightMap(5, h))
    # centre residual 1, four neighbours -1/4, over 3x3 interior cells
    assert loss == pytest.approx((1.0 + 4 * 0.0625) / 9)


def test_laplacian_is_zero_on_a_plane():
    c = HeightMap.cell_centers(6)
    xx, yy = np.meshgrid(c, c, indexing="ij")
    loss, grad = loss_laplacian(HeightMap(6, 0.3 * xx - 0.2 * yy))
    assert loss == pytest.approx(0.0, abs=1e-20)
    np.testing.assert_allclose(grad, 0.0, atol=1e-15)


def test_loss_gradients_match_finite_differences(rng):
    h = rng.uniform(-0.5, 0.5, size=(6, 6))
    target = HeightMap(6, rng.uniform(-0.5, 0.5, size=(6, 6)), rng.uniform(size=(6, 6)) > 0.3)

    for loss_fn in (loss_laplacian, loss_normal_tv, lambda pred: loss_height(pred, target)):
        _, analytic = loss_fn(HeightMap(6, h))
        np.testing.assert_allclose(numeric_grad(loss_fn, h), analytic, rtol=1e-4, atol=1e-6)


def test_height_loss_ignores_invalid_cells():
    target = HeightMap(3, np.zeros((3, 3)), np.zeros((3, 3), dtype=bool))
    target.valid[1, 1] = True
    pred = np.full((3, 3), 5.0)
    pred[1, 1] = 0.5
    loss, grad = loss_height(HeightMap(3, pred), target)
    assert loss == pytest.approx(0.5)
    assert grad[1, 1] == 1.0
    assert np.count_nonzero(grad) == 1


def test_normal_tv_flat_is_zero():
    loss, grad = loss_normal_tv(HeightMap(4, np.full((4, 4), 0.2)))
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_total_loss_weights_terms(rng):
    h = HeightMap(5, rng.uniform(-0.2, 0.2, size=(5, 5)))
    target = HeightMap(5, np.zeros((5, 5)))
    cfg = FitConfig(lambda_lap=2.0, lambda_nrm=0.5)
    terms, _ = total_loss(h, target, cfg)
    assert terms["total"] == pytest.approx(terms["height"] + 2.0 * terms["laplacian"] + 0.5 * terms["normal"])


def test_adam_first_step_moves_by_lr():
    param = np.array([0.0, 0.0])
    Adam(lr=0.1).step(param, np.array([4.0, -0.001]))
    np.testing.assert_allclose(param, [-0.1, 0.1], rtol=1e-4)


def test_adam_minimizes_a_quadratic():
    param = np.array([0.0])
    adam = Adam(lr=0.05)
    for _ in range(1000):
        adam.step(param, 2.0 * (param - 3.0))
    assert param[0] == pytest.approx(3.0, abs=1e-2)


def test_target_heightmap_keeps_the_highest_point():
    cloud = PointCloud(np.array([[-0.9, -0.9, 0.1], [-0.8, -0.8, 0.4], [0.9, 0.9, -0.5]]), Frame.NORMALIZED)
    target = build_target_heightmap(cloud, 4)
    assert target.heights[0, 0] == 0.4
    assert target.heights[3, 3] == -0.5
    assert target.valid.sum() == 2


def test_fit_keeps_an_exact_flat_ground():
    cloud = grid_cloud(16, lambda x, y: np.full_like(x, 0.3))
    field, report = fit(cloud, FitConfig(res=16, grid_res=8, steps=20, log_every=0))
    assert report.height_rmse < 1e-6
    assert report.steps == 20
    assert field.grid_h.shape == (8, 8)


def test_fit_reduces_plane_error():
    cloud = grid_cloud(16, lambda x, y: 0.2 * x + 0.1 * y)
    cfg = FitConfig(res=16, grid_res=8, steps=300, lr=0.003, lambda_lap=0.0, lambda_nrm=0.0, log_every=0)
    calls = []
    _, report = fit(cloud, cfg, progress=lambda step, terms: calls.append(step))
    assert calls == list(range(300))
    assert min(report.total) < 0.6 * report.total[0]
    summary = loss_summary(report)
    assert summary["first"] == report.total[0]
    assert summary["best"] <= summary["last"]


def test_fit_rejects_empty_clouds():
    with pytest.raises(EmptyInputError):
        fit(PointCloud(np.zeros((0, 3)), Frame.NORMALIZED), FitConfig(res=8, grid_res=4, steps=1))


def test_fit_reports_divergence(monkeypatch):
    def broken(pred, target, cfg):
        return {"height": np.nan, "laplacian": 0.0, "normal": 0.0, "total": np.nan}, np.zeros_like(pred.heights)

    monkeypatch.setattr(optimizer, "total_loss", broken)
    cloud = grid_cloud(8, lambda x, y: 0.1 * x)
    with pytest.raises(FitDivergedError) as err:
        fit(cloud, FitConfig(res=8, grid_res=4, steps=5))
    assert err.value.step == 0


def test_tile_regions_overlap_and_cover():
    regions = tile_regions([0.0, 0.0], [10.0, 10.0], 2, overlap=0.1)
    assert [r.index for r in regions] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    np.testing.assert_allclose(regions[0].region_lo, [0.0, 0.0])
    np.testing.assert_allclose(regions[0].region_hi, [5.5, 5.5])
    np.testing.assert_allclose(regions[3].region_lo, [4.5, 4.5])
    np.testing.assert_allclose(regions[3].core_hi, [10.0, 10.0])
    assert regions[1].name == "tile_0_1"
    with pytest.raises(ValueError):
        tile_regions([0, 0], [1, 1], 0)


def test_fit_tiled_flags_sparse_tiles(rng):
    dense = np.column_stack([rng.uniform(0, 4, 2000), rng.uniform(0, 10, 2000), rng.uniform(0, 5, 2000)])
    cloud = PointCloud(np.vstack([dense, [[10.0, 10.0, 0.0]]]))
    cfg = FitConfig(res=8, grid_res=4, steps=3, log_every=0)
    fits = fit_tiled(cloud, 2, cfg)
    by_index = {f.region.index: f for f in fits}
    assert not by_index[(0, 0)].degenerate
    assert by_index[(1, 0)].degenerate
    assert by_index[(1, 1)].degenerate
    assert by_index[(1, 1)].report.tile == "tile_1_1"
    assert by_index[(0, 1)].report.steps == 3


def test_single_tile_matches_a_global_fit(rng):
    cloud = PointCloud(rng.uniform([0.0, 0.0, 0.0], [100.0, 50.0, 10.0], size=(2000, 3)))
    cfg = FitConfig(steps=10, grid_res=8, res=16, log_every=0)
    (tile,) = fit_tiled(cloud, 1, cfg)
    field, _ = fit(normalize_cloud(cloud, cfg.padding)[0], cfg)
    assert not tile.degenerate
    np.testing.assert_array_equal(tile.field.grid_h, field.grid_h)
