"""
Texture atlas layout, baking from source views and enhancer-driven refinement.
"""
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from PIL import Image
from scipy import sparse

from .enhancer import EnhancerConfig
from .errors import AtlasOverflowError, EmptyInputError, EnhancerError, RefineAbortedError
from .geom_core import TriMesh
from .metrics import ssim
from .models import BakeReport
from .raster import load_rgb, rasterize, render_with_atlas, to_uint8, visibility_map
from .sat_camera import CARDINAL_HEADINGS, aimed_camera, site_positions

logger = logging.getLogger(__name__)

SENTINEL = (1.0, 0.0, 1.0)
CHART_PAD = 2
TOP_NZ = 0.5
SHRINK = 0.8


@dataclass
class TextureAtlas:
    width: int
    height: int
    rgb: np.ndarray = None
    coverage: np.ndarray = None
    sentinel: Tuple[float, float, float] = SENTINEL

    def __post_init__(self):
        if self.rgb is None:
            self.rgb = np.empty((self.height, self.width, 3))
            self.rgb[:] = self.sentinel
        if self.coverage is None:
            self.coverage = np.zeros((self.height, self.width))
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.shape != (self.height, self.width, 3):
            raise ValueError(f"atlas rgb must be {self.height}x{self.width}x3")

    @classmethod
    def constant(cls, width, height, color):
        rgb = np.empty((height, width, 3))
        rgb[:] = color
        return cls(width, height, rgb, np.ones((height, width)))

    @property
    def covered(self):
        return self.coverage > 0

    def copy(self):
        return TextureAtlas(self.width, self.height, self.rgb.copy(), self.coverage.copy(), self.sentinel)


@dataclass
class RefineConfig:
    iterations: int = 2
    stride: float = 150.0
    margin: float = 100.0
    altitude: float = 450.0
    depression_deg: float = 45.0
    headings: Tuple[float, ...] = CARDINAL_HEADINGS
    fov_deg: float = 45.0
    width: int = 2048
    height: int = 2048
    epochs: int = 20
    lambda_mse: float = 0.8
    # carried for the loss definition; SSIM is reported, not optimized
    lambda_ssim: float = 0.2

    def validate(self):
        if self.iterations < 1:
            raise ValueError("refine iterations must be >= 1")
        return self


@dataclass
class TextureConfig:
    atlas_size: int = 2048
    basic_epochs: int = 100
    basic_only: bool = False
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    refine: RefineConfig = field(default_factory=RefineConfig)
    enhancer: EnhancerConfig = field(default_factory=EnhancerConfig)


def _chart_frames(corners):
    """Per-triangle 2D coordinates in the triangle's own plane (world units)."""
    e = np.stack([corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 1], corners[:, 0] - corners[:, 2]], 1)
    lengths = np.linalg.norm(e, axis=2)
    longest = np.argmax(lengths, axis=1)
    base = e[np.arange(len(e)), longest]
    base_len = lengths[np.arange(len(e)), longest]
    ax1 = np.divide(base, base_len[:, None], out=np.tile([1.0, 0.0, 0.0], (len(e), 1)), where=base_len[:, None] > 0)
    normal = np.cross(e[:, 0], -e[:, 2])
    ax2 = np.cross(normal, ax1)
    n2 = np.linalg.norm(ax2, axis=1, keepdims=True)
    fallback = np.cross(ax1, np.tile([0.0, 0.0, 1.0], (len(e), 1)))
    ax2 = np.where(n2 > 0, ax2 / np.where(n2 > 0, n2, 1.0), fallback)
    rel = corners - corners[:, :1]
    return np.stack([np.einsum("fkc,fc->fk", rel, ax1), np.einsum("fkc,fc->fk", rel, ax2)], axis=2)


def _shelf_pack(sizes, width, row0, row1):
    """
    Shelf-pack (w, h) rectangles (tallest first) into columns [0, width) and
    rows [row0, row1). Returns (N, 2) (col, row) origins or None on overflow.
    """
    order = np.argsort(-sizes[:, 1], kind="stable")
    origins = np.zeros((len(sizes), 2), dtype=np.int64)
    x, y, shelf = 0, row0, 0
    for i in order:
        w, h = int(sizes[i, 0]), int(sizes[i, 1])
        if w > width:
            return None
        if x + w > width:
            y += shelf
            x, shelf = 0, 0
        if y + h > row1:
            return None
        origins[i] = (x, y)
        x += w
        shelf = max(shelf, h)
    return origins


def assign_uvs(mesh, width=2048, height=None, pad=CHART_PAD):
    """
    Two-chart atlas layout.

    Up-facing triangles (n_z >= 0.5) share one chart: an aspect-preserving
    affine map of (x, y) into the upper half of the atlas. Every other
    triangle gets its own chart, shelf-packed into the lower half at one
    common texel density (largest that fits, shrinking by 0.8).

    Vertices are duplicated per chart; triangle order is preserved.

    Args:
        mesh: TriMesh
        width, height: Atlas size in texels (height defaults to width)
        pad: Texels of padding around every chart

    Returns:
        TriMesh with per-vertex uvs
    """
    height = height or width
    if mesh.is_empty:
        return TriMesh(mesh.vertices, mesh.triangles, uvs=np.zeros((len(mesh.vertices), 2)))
    nz = mesh.face_normals()[:, 2]
    top = nz >= TOP_NZ
    half = height // 2
    corners = mesh.corners()

    verts, uvs = [], []
    tris = np.empty_like(mesh.triangles)
    count = 0
    density = None

    top_ids = np.flatnonzero(top)
    if len(top_ids):
        used, inverse = np.unique(mesh.triangles[top_ids], return_inverse=True)
        pts = mesh.vertices[used]
        lo = pts[:, :2].min(axis=0)
        ext = pts[:, :2].max(axis=0) - lo
        ext[ext <= 0] = 1.0
        density = min((width - 2 * pad) / ext[0], (half - 2 * pad) / ext[1])
        if density <= 0:
            raise AtlasOverflowError(f"a {width}x{height} atlas leaves no room for the top chart")
        col = pad + (pts[:, 0] - lo[0]) * density
        row = half - pad - (pts[:, 1] - lo[1]) * density
        verts.append(pts)
        uvs.append(np.stack([col / width, 1.0 - row / height], axis=1))
        tris[top_ids] = inverse.reshape(-1, 3)
        count = len(pts)

    side_ids = np.flatnonzero(~top)
    if len(side_ids):
        local = _chart_frames(corners[side_ids])
        bmin = local.min(axis=1)
        bext = local.max(axis=1) - bmin
        if density is None:
            area = float(np.prod(np.maximum(bext, 1e-12), axis=1).sum())
            density = math.sqrt(width * (height - half) / max(area, 1e-12))
        while True:
            sizes = np.ceil(bext * density).astype(np.int64) + 2 * pad
            origins = _shelf_pack(sizes, width, half, height)
            if origins is not None:
                break
            density *= SHRINK
            if density * bext.max() < 1.0:
                raise AtlasOverflowError(
                    f"{len(side_ids)} side charts do not fit a {width}x{height} atlas; use a larger atlas")
        col = origins[:, None, 0] + pad + (local[:, :, 0] - bmin[:, None, 0]) * density
        row = origins[:, None, 1] + pad + (local[:, :, 1] - bmin[:, None, 1]) * density
        verts.append(corners[side_ids].reshape(-1, 3))
        uvs.append(np.stack([col.ravel() / width, 1.0 - row.ravel() / height], axis=1))
        tris[side_ids] = count + np.arange(3 * len(side_ids)).reshape(-1, 3)
        logger.info(f"Packed {len(side_ids)} side charts at {density:.3f} texels/unit")

    return TriMesh(np.concatenate(verts), tris, uvs=np.concatenate(uvs),
                   face_groups=mesh.face_groups, face_colors=mesh.face_colors)


def _view_system(mesh, image, cam, width, height, threads):
    fb = rasterize(mesh, cam, threads=threads)
    vis = visibility_map(fb, width, height)
    n = len(vis.pixels)
    rows = np.repeat(np.arange(n), 4)
    a = sparse.csr_matrix((vis.weights.ravel(), (rows, vis.texels.ravel())), shape=(n, width * height))
    b = np.asarray(image, dtype=np.float64).reshape(-1, 3)[vis.pixels]
    return a, b


def bake(mesh, views, width, height=None, epochs=100, init=None, threads=1, progress=None):
    """
    Fit atlas texels to views by least squares on the bilinear pixel->texel
    system.

    Each epoch takes a Jacobi-majorized gradient step, T -= (A^T r) / c with
    c the texel coverage, then clamps to [0, 1]; for nonnegative bilinear
    weights this never increases the loss. Without init the covered texels
    start from the coverage-weighted splat average.

    Args:
        mesh: TriMesh with uvs
        views: list of (image (H, W, 3), PinholeCamera)
        width, height: Atlas size
        epochs: Gradient epochs
        init: Optional TextureAtlas to warm start from (its texels outside
            this bake's coverage are kept as-is)
        threads: Worker threads for per-view visibility builds
        progress: Optional callable(epoch, loss)

    Returns:
        (TextureAtlas, BakeReport)
    """
    height = height or width
    if mesh.uvs is None:
        raise ValueError("mesh has no uvs")
    if not views:
        raise EmptyInputError("bake needs at least one view")
    start = time.time()

    def build(view):
        return _view_system(mesh, view[0], view[1], width, height, 1)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            systems = list(pool.map(build, views))
    else:
        systems = [build(v) for v in views]
    a = sparse.vstack([s[0] for s in systems]).tocsr()
    b = np.concatenate([s[1] for s in systems])
    if a.shape[0] == 0:
        raise EmptyInputError("no view covers any texel")

    coverage = np.asarray(a.sum(axis=0)).ravel()
    covered = coverage > 0
    at = a.T.tocsr()

    atlas = init.copy() if init is not None else TextureAtlas(width, height)
    tex = atlas.rgb.reshape(-1, 3).copy()
    if init is None:
        tex[covered] = np.clip((at @ b)[covered] / coverage[covered, None], 0.0, 1.0)

    report = BakeReport(covered_texels=int(covered.sum()), views=len(views), pixels=int(a.shape[0]))
    resid = a @ tex - b
    report.losses.append(float(np.mean(resid ** 2)))
    scale = 1.0 / coverage[covered, None]
    for epoch in range(epochs):
        grad = at @ resid
        tex[covered] = np.clip(tex[covered] - grad[covered] * scale, 0.0, 1.0)
        resid = a @ tex - b
        loss = float(np.mean(resid ** 2))
        report.losses.append(loss)
        if progress is not None:
            progress(epoch, loss)
        logger.debug(f"bake epoch {epoch}: mse={loss:.6e}")

    atlas.rgb = tex.reshape(height, width, 3)
    atlas.coverage = atlas.coverage + coverage.reshape(height, width)
    logger.info(f"Baked {len(views)} views into {width}x{height} atlas in {time.time() - start:.1f}s: "
                f"{report.covered_texels} texels covered, mse {report.losses[0]:.3e} -> {report.losses[-1]:.3e}")
    return atlas, report


def bake_basic(mesh, views, width=2048, height=None, epochs=100, threads=1, progress=None):
    """Basic texture from the source views (fresh atlas, splat-average start)."""
    return bake(mesh, views, width, height, epochs, None, threads, progress)


def novel_view_grid(lo, hi, cfg=None):
    """
    Oblique novel views over the mesh bounding box grown by a margin.

    Sites lie on a regular grid at cfg.stride; at each site one camera per
    heading is aimed at the ground point of the site from cfg.altitude.

    Args:
        lo, hi: (3,) world bounding box corners
        cfg: RefineConfig

    Returns:
        list of PinholeCamera
    """
    cfg = cfg or RefineConfig()
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    sites = site_positions(lo[:2] - cfg.margin, hi[:2] + cfg.margin, cfg.stride)
    ground = float(lo[2])
    return [aimed_camera([x, y, ground], cfg.altitude, h, cfg.depression_deg, cfg.width, cfg.height, cfg.fov_deg)
            for x, y in sites for h in cfg.headings]


def refine(mesh, atlas, hook, cfg=None, threads=1, progress=None):
    """
    Iterative refinement: render novel views, enhance them, re-bake.

    Args:
        mesh: TriMesh with uvs (world frame)
        atlas: Starting TextureAtlas (basic texture)
        hook: EnhancerHook
        cfg: RefineConfig

    Returns:
        (refined TextureAtlas, list of BakeReport, one per iteration)

    Raises:
        RefineAbortedError carrying the last good atlas when the hook fails
    """
    cfg = (cfg or RefineConfig()).validate()
    lo, hi = mesh.bounds()
    cams = novel_view_grid(lo, hi, cfg)
    logger.info(f"Refining with {len(cams)} novel views for {cfg.iterations} iterations")
    current = atlas
    reports = []
    for it in range(cfg.iterations):
        renders = [render_with_atlas(mesh, current, cam, threads=threads) for cam in cams]
        try:
            targets = hook.enhance_all(renders)
        except EnhancerError as e:
            logger.error(f"Refine iteration {it} aborted: {e}")
            raise RefineAbortedError(it, e, current)
        scores = [ssim(r, t) for r, t in zip(renders, targets)]
        logger.info(f"iteration {it}: mean SSIM(render, target) = {np.mean(scores):.4f}")
        current, report = bake(mesh, list(zip(targets, cams)), current.width, current.height,
                               cfg.epochs, init=current, threads=threads)
        reports.append(report)
        if progress is not None:
            progress(it, report)
    return current, reports


def save_atlas(atlas, path):
    """PNG (8-bit) plus a .npz sidecar with float texels and coverage."""
    Image.fromarray(to_uint8(atlas.rgb)).save(path)
    np.savez_compressed(os.path.splitext(path)[0] + ".npz", rgb=atlas.rgb, coverage=atlas.coverage,
                        sentinel=np.asarray(atlas.sentinel))
    logger.info(f"Saved {atlas.width}x{atlas.height} atlas to {path}")


def load_atlas(path):
    sidecar = os.path.splitext(path)[0] + ".npz"
    if os.path.exists(sidecar):
        with np.load(sidecar) as data:
            rgb = data["rgb"]
            return TextureAtlas(rgb.shape[1], rgb.shape[0], rgb, data["coverage"], tuple(data["sentinel"].tolist()))
    rgb = load_rgb(path)
    return TextureAtlas(rgb.shape[1], rgb.shape[0], rgb, np.ones(rgb.shape[:2]))
