import math

import numpy as np
import pytest

from satcity.errors import EmptyInputError
from satcity.geom_core import PointCloud, TriMesh
from satcity.metrics import (D_TAU, border_mask, chamfer, evaluate_geometry, image_metrics, prf, psnr,
                             sample_mesh, ssim)
from satcity.models import GeoMetricReport, ImgMetricReport
from tests.conftest import make_cube


def brute_nearest(a, b):
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)).min(axis=1)


def test_chamfer_and_prf_match_brute_force(rng):
    a = rng.uniform(-1, 1, size=(300, 3))
    b = a[:200] + rng.normal(scale=0.03, size=(200, 3))
    d_ab = brute_nearest(a, b)
    d_ba = brute_nearest(b, a)
    assert chamfer(PointCloud(a), PointCloud(b)) == pytest.approx(d_ab.mean() + d_ba.mean())
    report = prf(PointCloud(a), PointCloud(b), d_tau=0.05)
    assert report.precision == pytest.approx(np.mean(d_ab < 0.05))
    assert report.recall == pytest.approx(np.mean(d_ba < 0.05))
    p, r = report.precision, report.recall
    assert report.f1 == pytest.approx(2 * p * r / (p + r))
    assert (report.n_pred, report.n_gt) == (300, 200)


def test_prf_of_identical_clouds(rng):
    pts = PointCloud(rng.normal(size=(100, 3)))
    report = prf(pts, pts)
    assert (report.precision, report.recall, report.f1) == (1.0, 1.0, 1.0)
    assert report.chamfer == 0.0
    assert report.d_tau == D_TAU


def test_threshold_is_strict():
    report = prf(PointCloud(np.zeros((1, 3))), PointCloud(np.array([[0.5, 0.0, 0.0]])), d_tau=0.5)
    assert report.precision == 0.0
    assert report.f1 == 0.0
    assert GeoMetricReport.f_score(0.0, 0.0) == 0.0


def test_metric_input_errors():
    empty = PointCloud(np.zeros((0, 3)))
    one = PointCloud(np.zeros((1, 3)))
    with pytest.raises(EmptyInputError):
        chamfer(empty, one)
    with pytest.raises(EmptyInputError):
        prf(one, empty)
    with pytest.raises(ValueError):
        prf(one, one, d_tau=0.0)


def test_sample_mesh_lies_on_the_surface(cube):
    pts = sample_mesh(cube, 5000, seed=3).points
    # distance to the nearest face plane of the unit cube
    dist = np.minimum(np.abs(pts), np.abs(pts - 1.0)).min(axis=1)
    assert dist.max() < 1e-12
    np.testing.assert_array_equal(pts, sample_mesh(cube, 5000, seed=3).points)
    # area weighting: one sixth of the samples per face
    assert np.mean(np.isclose(pts[:, 2], 1.0)) == pytest.approx(1 / 6, abs=0.02)


def test_sample_mesh_errors(cube):
    with pytest.raises(ValueError):
        sample_mesh(cube, 0)
    with pytest.raises(EmptyInputError):
        sample_mesh(TriMesh.empty(), 10)


def test_evaluate_geometry_scores_the_truth_perfectly():
    world = make_cube((100.0, 200.0, 0.0), (110.0, 210.0, 10.0))
    gt = sample_mesh(world, 50000, seed=1)
    report = evaluate_geometry(world, gt, n_samples=50000, seed=2)
    assert report.f1 > 0.97
    assert report.chamfer < 0.04


def test_evaluate_geometry_penalizes_offsets_and_ignores_far_geometry():
    world = make_cube((0.0, 0.0, 0.0), (10.0, 10.0, 10.0))
    gt = sample_mesh(world, 40000, seed=1)
    lifted = make_cube((0.0, 0.0, 0.5), (10.0, 10.0, 10.5))
    assert evaluate_geometry(lifted, gt, n_samples=20000).f1 < 0.85

    far = make_cube((500.0, 500.0, 0.0), (510.0, 510.0, 10.0))
    both = TriMesh(np.vstack([world.vertices, far.vertices]), np.vstack([world.triangles, far.triangles + 8]))
    report = evaluate_geometry(both, gt, n_samples=20000)
    assert report.n_pred < 15000
    assert report.precision > 0.95


def test_border_mask():
    mask = border_mask(6, 8, 2)
    assert mask.sum() == 2 * 4
    assert not mask[:2].any() and not mask[:, -2:].any()
    assert not border_mask(4, 4, 2).any()


def test_psnr():
    a = np.full((4, 4, 3), 0.5)
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a) == math.inf
    b = a.copy()
    b[0, 0] = 0.0
    mask = np.ones((4, 4), dtype=bool)
    mask[0, 0] = False
    assert psnr(a, b, mask) == math.inf
    with pytest.raises(ValueError):
        psnr(a, a[:2])


def test_ssim(rng):
    a = rng.uniform(size=(32, 32, 3))
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, 1.0 - a) < 0.0
    assert ssim(a[..., 0], a[..., 0]) == pytest.approx(1.0)
    noisy = np.clip(a + rng.normal(scale=0.05, size=a.shape), 0, 1)
    assert 0.0 < ssim(a, noisy) < 1.0
    with pytest.raises(ValueError):
        ssim(a[:10, :10], a[:10, :10])


def test_image_metrics_average_views():
    preds = [np.full((24, 24, 3), 0.3), np.full((24, 24, 3), 0.6)]
    targets = [p + 0.1 for p in preds]
    report = image_metrics(preds, targets, border=2)
    assert report.psnr == pytest.approx(20.0)
    assert report.masked
    assert report.views == 2
    assert 0.0 < report.ssim <= 1.0
    with pytest.raises(ValueError):
        image_metrics(preds, targets[:1])


def test_infinite_psnr_serializes():
    data = ImgMetricReport(psnr=math.inf, ssim=1.0).to_dict()
    assert math.isfinite(data["psnr"])
