"""
Fitting the Z-monotonic field to a point cloud.

The point cloud is rasterized into a target height map; the field is then
driven by Adam to minimize

    L = L_height + lambda_lap * L_lap + lambda_nrm * L_nrm

where every term is evaluated on the dense R x R predicted height grid and its
gradient flows back to the G x G offsets through the implicit-function
gradients of each column's zero crossing.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyInputError, FitDivergedError
from .geom_core import Frame, HeightMap, PointCloud, check_finite, transform_for_bounds
from .models import FitReport
from .zmono_field import DEFAULT_K, DEFAULT_WINDOW, ColumnPlan, ZMonoField

logger = logging.getLogger(__name__)

MIN_TILE_POINTS = 100


@dataclass
class FitConfig:
    lr: float = 0.01
    steps: int = 2000
    lambda_lap: float = 0.5
    lambda_nrm: float = 0.01
    res: int = 1024
    grid_res: int = 256
    k: float = DEFAULT_K
    window: int = DEFAULT_WINDOW
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    padding: float = 0.0
    keep_best: bool = True
    warm_start: bool = True
    threads: int = 1
    log_every: int = 100
    # the fit draws no random numbers; kept so reports and manifests record the run seed
    seed: int = 0

    def validate(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if min(self.lr, self.lambda_lap, self.lambda_nrm) < 0:
            raise ValueError("learning rate and loss weights must be >= 0")
        if self.res < 3:
            raise ValueError("height grid resolution must be >= 3")
        return self


def build_target_heightmap(cloud, res):
    """
    Rasterize a normalized cloud into the target height map.

    Each point lands in cell u = floor((x + 1) / 2 * R), v likewise (clamped);
    a cell keeps the maximum z of its points. Cells without points are invalid.

    Args:
        cloud: PointCloud in the normalized frame
        res: Grid resolution R

    Returns:
        HeightMap
    """
    pts = cloud.points
    heights = np.full((res, res), -np.inf)
    if len(pts):
        u = np.clip(np.floor((pts[:, 0] + 1.0) * 0.5 * res).astype(np.int64), 0, res - 1)
        v = np.clip(np.floor((pts[:, 1] + 1.0) * 0.5 * res).astype(np.int64), 0, res - 1)
        np.maximum.at(heights, (u, v), pts[:, 2])
    valid = np.isfinite(heights)
    heights[~valid] = 0.0
    target = HeightMap(res, heights, valid)
    logger.debug(f"Target height map {res}x{res}: {target.valid_fraction:.1%} valid")
    return target


def loss_height(pred, target):
    """
    Mean L1 height difference over the valid cells.

    Returns:
        (loss, gradient w.r.t. pred heights)
    """
    mask = target.valid
    count = int(mask.sum())
    grad = np.zeros_like(pred.heights)
    if count == 0:
        return 0.0, grad
    diff = pred.heights - target.heights
    grad[mask] = np.sign(diff[mask]) / count
    return float(np.abs(diff[mask]).sum() / count), grad


def laplacian_residual(h):
    """h minus the mean of its 4 neighbours, on interior cells."""
    return h[1:-1, 1:-1] - 0.25 * (h[:-2, 1:-1] + h[2:, 1:-1] + h[1:-1, :-2] + h[1:-1, 2:])


def loss_laplacian(pred):
    """
    Mean squared 4-neighbour Laplacian residual over interior cells.

    Returns:
        (loss, gradient)
    """
    h = pred.heights
    if h.shape[0] < 3:
        raise ValueError("laplacian loss needs R >= 3")
    lap = laplacian_residual(h)
    grad = np.zeros_like(h)
    g = 2.0 * lap / lap.size
    grad[1:-1, 1:-1] += g
    quarter = 0.25 * g
    grad[:-2, 1:-1] -= quarter
    grad[2:, 1:-1] -= quarter
    grad[1:-1, :-2] -= quarter
    grad[1:-1, 2:] -= quarter
    return float(np.mean(lap * lap)), grad


def _diff(h, axis, spacing):
    # np.gradient layout: central inside, one-sided at the two ends
    h = np.moveaxis(h, axis, 0)
    d = np.empty_like(h)
    d[1:-1] = (h[2:] - h[:-2]) / (2.0 * spacing)
    d[0] = (h[1] - h[0]) / spacing
    d[-1] = (h[-1] - h[-2]) / spacing
    return np.moveaxis(d, 0, axis)


def _diff_adjoint(g, axis, spacing):
    g = np.moveaxis(g, axis, 0)
    out = np.zeros_like(g)
    half = g[1:-1] / (2.0 * spacing)
    out[2:] += half
    out[:-2] -= half
    out[1] += g[0] / spacing
    out[0] -= g[0] / spacing
    out[-1] += g[-1] / spacing
    out[-2] -= g[-1] / spacing
    return np.moveaxis(out, 0, axis)


def grid_normals(h):
    """
    Unit normals of a height grid over [-1, 1]^2.

    Returns:
        (normals (R, R, 3), unnormalized normals, lengths)
    """
    spacing = 2.0 / h.shape[0]
    gx = _diff(h, 0, spacing)
    gy = _diff(h, 1, spacing)
    m = np.stack([-gx, -gy, np.ones_like(h)], axis=-1)
    length = np.linalg.norm(m, axis=-1)
    return m / length[..., None], m, length


def normal_tv_terms(h):
    """Per-pair normal differences ||n(u,v) - n(u+1,v)|| and ||n(u,v) - n(u,v+1)||."""
    n, _, _ = grid_normals(h)
    return (np.linalg.norm(n[1:] - n[:-1], axis=-1),
            np.linalg.norm(n[:, 1:] - n[:, :-1], axis=-1))


def loss_normal_tv(pred):
    """
    Total variation of the unit normal field along u and along v.

    Returns:
        (loss, gradient) with the gradient taken through the normalization
    """
    h = pred.heights
    if h.shape[0] < 3:
        raise ValueError("normal loss needs R >= 3")
    spacing = 2.0 / h.shape[0]
    n, _, length = grid_normals(h)

    du = n[1:] - n[:-1]
    dv = n[:, 1:] - n[:, :-1]
    au = np.linalg.norm(du, axis=-1)
    av = np.linalg.norm(dv, axis=-1)
    loss = float(au.mean() + av.mean())

    gn = np.zeros_like(n)
    # subgradient 0 where neighbouring normals coincide
    qu = np.divide(du, au[..., None], out=np.zeros_like(du), where=au[..., None] > 0) / au.size
    qv = np.divide(dv, av[..., None], out=np.zeros_like(dv), where=av[..., None] > 0) / av.size
    gn[1:] += qu
    gn[:-1] -= qu
    gn[:, 1:] += qv
    gn[:, :-1] -= qv

    gm = (gn - n * np.sum(n * gn, axis=-1, keepdims=True)) / length[..., None]
    grad = _diff_adjoint(-gm[..., 0], 0, spacing) + _diff_adjoint(-gm[..., 1], 1, spacing)
    return loss, grad


class Adam:
    """Adam over a single parameter array, updated in place."""

    def __init__(self, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, param, grad):
        if self.m is None:
            self.m = np.zeros_like(param)
            self.v = np.zeros_like(param)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t

        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grad * grad)

        denom = np.sqrt(self.v / bc2) + self.eps
        param -= (self.lr / bc1) * self.m / denom
        return param


def total_loss(pred, target, cfg):
    """
    Weighted geometry loss and its gradient w.r.t. the predicted heights.

    Returns:
        (dict of loss terms, gradient (R, R))
    """
    l_h, g_h = loss_height(pred, target)
    l_l, g_l = loss_laplacian(pred)
    l_n, g_n = loss_normal_tv(pred)
    total = l_h + cfg.lambda_lap * l_l + cfg.lambda_nrm * l_n
    grad = g_h + cfg.lambda_lap * g_l + cfg.lambda_nrm * g_n
    return {"height": l_h, "laplacian": l_l, "normal": l_n, "total": total}, grad


def fit(cloud, cfg=None, progress=None, init_field=None):
    """
    Fit a ZMonoField to a normalized cloud with Adam.

    Args:
        cloud: PointCloud in the normalized frame
        cfg: FitConfig
        progress: Optional callable(step, terms) invoked after every step
        init_field: Optional starting field (defaults to the target-height
            initialization)

    Returns:
        (ZMonoField, FitReport)
    """
    cfg = (cfg or FitConfig()).validate()
    if len(cloud) == 0:
        raise EmptyInputError("cannot fit an empty cloud")
    check_finite(cloud.points)
    start = time.time()

    target = build_target_heightmap(cloud, cfg.res)
    field_ = init_field.copy() if init_field is not None else \
        ZMonoField.from_heightmap(target, cfg.grid_res, cfg.k, cfg.window)
    plan = ColumnPlan.for_grid(field_, cfg.res)
    adam = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    report = FitReport(valid_fraction=target.valid_fraction)
    executor = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None

    logger.info(f"Fitting {cfg.grid_res}x{cfg.grid_res} field to {len(cloud)} points "
                f"(R={cfg.res}, {cfg.steps} steps, {target.valid_fraction:.1%} valid)")

    def evaluate(grid_h, init):
        z, clamped = plan.solve(grid_h, init, executor=executor)
        pred = HeightMap(cfg.res, z.reshape(cfg.res, cfg.res))
        terms, grad = total_loss(pred, target, cfg)
        return z, clamped, pred, terms, grad

    best_h = field_.grid_h.copy()
    best_total = np.inf
    best_pred = None
    z_prev = None
    try:
        for step in range(cfg.steps):
            z, clamped, pred, terms, grad = evaluate(field_.grid_h, z_prev if cfg.warm_start else None)
            if not np.isfinite(terms["total"]):
                raise FitDivergedError(step, terms)
            report.record(terms["height"], terms["laplacian"], terms["normal"], terms["total"])
            if terms["total"] < best_total:
                best_total = terms["total"]
                best_h = field_.grid_h.copy()
                best_pred = pred
                report.best_step = step

            param_grad = plan.scatter(grad.ravel(), plan.gradients(field_.grid_h, z, clamped))
            adam.step(field_.grid_h, param_grad)
            field_.clamp()
            z_prev = z

            if progress is not None:
                progress(step, terms)
            if cfg.log_every and step % cfg.log_every == 0:
                logger.info(f"step {step}: total={terms['total']:.6f} height={terms['height']:.6f} "
                            f"lap={terms['laplacian']:.3e} nrm={terms['normal']:.4f}")
            else:
                logger.debug(f"step {step}: total={terms['total']:.6e}")

        # the last update has not been scored yet
        z, _, pred, terms, _ = evaluate(field_.grid_h, z_prev if cfg.warm_start else None)
        if np.isfinite(terms["total"]) and (terms["total"] <= best_total or not cfg.keep_best):
            best_total = terms["total"]
            best_h = field_.grid_h.copy()
            best_pred = pred
            report.best_step = cfg.steps
    finally:
        if executor is not None:
            executor.shutdown()

    result = ZMonoField(best_h, field_.k, field_.window)
    mask = target.valid
    if mask.any():
        report.height_rmse = float(np.sqrt(np.mean((best_pred.heights[mask] - target.heights[mask]) ** 2)))
    report.wall_time = time.time() - start
    logger.info(f"Fit done in {report.wall_time:.1f}s: best total {best_total:.6f} at step "
                f"{report.best_step}, height RMSE {report.height_rmse:.2e}")
    return result, report


@dataclass
class TileRegion:
    index: tuple
    core_lo: np.ndarray
    core_hi: np.ndarray
    region_lo: np.ndarray
    region_hi: np.ndarray

    @property
    def name(self):
        return f"tile_{self.index[0]}_{self.index[1]}"

    def contains(self, points):
        xy = points[:, :2]
        return np.all((xy >= self.region_lo) & (xy <= self.region_hi), axis=1)


@dataclass
class TileFit:
    field: ZMonoField
    transform: object
    region: TileRegion
    report: FitReport = field(default_factory=FitReport)
    degenerate: bool = False


def tile_regions(lo, hi, tiles, overlap=0.1):
    """
    Split an xy box into tiles x tiles core cells, each grown by a margin.

    Args:
        lo, hi: (2,) xy corners of the scene box
        tiles: Tiles per side
        overlap: Margin as a fraction of the core tile side

    Returns:
        list of TileRegion in row-major (i along x, j along y) order
    """
    if tiles < 1:
        raise ValueError("tiles must be >= 1")
    lo = np.asarray(lo, dtype=np.float64)[:2]
    hi = np.asarray(hi, dtype=np.float64)[:2]
    edges = [np.linspace(lo[a], hi[a], tiles + 1) for a in range(2)]
    margin = overlap * (hi - lo) / tiles
    regions = []
    for i in range(tiles):
        for j in range(tiles):
            core_lo = np.array([edges[0][i], edges[1][j]])
            core_hi = np.array([edges[0][i + 1], edges[1][j + 1]])
            regions.append(TileRegion(
                (i, j), core_lo, core_hi,
                np.maximum(core_lo - margin, lo), np.minimum(core_hi + margin, hi)))
    return regions


def fit_tiled(cloud, tiles, cfg=None, overlap=0.1, progress=None):
    """
    Fit independent fields over a tiles x tiles partition of a world cloud.

    Each tile is normalized against its own region box (xy) and the global z
    range, so every tile shares one vertical scale.

    Args:
        cloud: PointCloud in the world frame
        tiles: Tiles per side
        cfg: FitConfig
        overlap: Tile margin as a fraction of the core side
        progress: Optional callable(tile_name, step, terms)

    Returns:
        list of TileFit
    """
    cfg = (cfg or FitConfig()).validate()
    if len(cloud) == 0:
        raise EmptyInputError("empty input")
    check_finite(cloud.points)
    lo, hi = cloud.bounds()
    results = []
    for region in tile_regions(lo, hi, tiles, overlap):
        box_lo = np.array([region.region_lo[0], region.region_lo[1], lo[2]])
        box_hi = np.array([region.region_hi[0], region.region_hi[1], hi[2]])
        transform = transform_for_bounds(box_lo, box_hi, cfg.padding)
        members = cloud.points[region.contains(cloud.points)]
        local = PointCloud(np.clip(transform.to_normalized(members), -1.0, 1.0), Frame.NORMALIZED)

        if len(local) < MIN_TILE_POINTS:
            logger.warning(f"{region.name}: only {len(local)} points, emitting flat ground")
            ground = float(local.points[:, 2].min()) if len(local) else float(transform.to_normalized(lo)[2])
            flat = ZMonoField.constant(cfg.grid_res, ground, cfg.k, cfg.window)
            results.append(TileFit(flat, transform, region,
                                   FitReport(tile=region.name, degenerate=True), degenerate=True))
            continue

        logger.info(f"{region.name}: {len(local)} points")
        tile_progress = None if progress is None else (lambda s, t, n=region.name: progress(n, s, t))
        fitted, report = fit(local, cfg, progress=tile_progress)
        report.tile = region.name
        results.append(TileFit(fitted, transform, region, report))
    return results


def loss_summary(report):
    """First / last / best totals of a FitReport."""
    if not report.total:
        return {}
    return {"first": report.total[0], "last": report.total[-1], "best": min(report.total),
            "steps": report.steps}
