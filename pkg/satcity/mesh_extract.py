"""
Surface extraction from a ZMonoField, the naive voxel baselines, watertight
checks and merging of tiled reconstructions.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from skimage import measure

from .geom_core import GROUP_BOTTOM, GROUP_TOP, GROUP_WALL, HeightMap, TriMesh, concatenate_meshes
from .models import SeamReport, WatertightReport
from .zmono_field import ColumnPlan

logger = logging.getLogger(__name__)

WELD_TOL = 1e-6
SLAB = 16


@dataclass
class VoxelGrid:
    """res^3 samples at cell centers of the normalized cube, indexed [i, j, k] = [x, y, z]."""
    res: int
    values: np.ndarray
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.res < 8:
            raise ValueError("voxel grid resolution must be >= 8")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.res,) * 3:
            raise ValueError(f"voxel values must have shape {(self.res,) * 3}")

    @property
    def spacing(self):
        return (self.hi - self.lo) / self.res

    def centers(self):
        return self.lo + (np.arange(self.res) + 0.5) * self.spacing


def sample_sdf(field, res=128):
    """
    Evaluate the field at every voxel center, one z slab at a time.

    Returns:
        VoxelGrid
    """
    centers = HeightMap.cell_centers(res)
    plan = ColumnPlan.for_grid(field, res)
    values = np.empty((res * res, res))
    for k0 in range(0, res, SLAB):
        zs = centers[k0:k0 + SLAB]
        values[:, k0:k0 + len(zs)] = plan.evaluate(field.grid_h, np.broadcast_to(zs, (res * res, len(zs))))
    return VoxelGrid(res, values.reshape(res, res, res))


def marching_cubes(grid, iso=0.0, close_walls=True):
    """
    Iso-surface of a voxel grid.

    With close_walls the grid is padded by one layer of "outside" samples so
    surfaces leaving the cube are capped at the domain walls. Faces are
    oriented with normals toward larger values.

    Args:
        grid: VoxelGrid
        iso: Iso level

    Returns:
        TriMesh (empty when the grid has no sign change)
    """
    values = grid.values
    if not np.all(np.isfinite(values)):
        raise ValueError("voxel grid contains non-finite samples")
    if values.min() > iso or values.max() < iso:
        logger.warning("No iso crossing in voxel grid; returning empty mesh")
        return TriMesh.empty()

    pad = 1 if close_walls else 0
    volume = np.pad(values, pad, mode="constant", constant_values=iso + 1.0) if pad else values
    verts, faces, _, _ = measure.marching_cubes(volume, level=iso, method="lewiner", allow_degenerate=False)
    verts = grid.lo + (verts - pad + 0.5) * grid.spacing
    mesh = TriMesh(verts, faces.astype(np.int64))
    if mesh.is_empty:
        return mesh
    # closed surfaces enclose the low side; make that a positive volume
    if mesh.signed_volume() < 0:
        mesh = mesh.flipped()
    logger.info(f"Marching cubes at {grid.res}^3: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles")
    return mesh


def column_max_heights(cloud, res):
    """Per-column max point height on a res x res grid; empty columns are ground."""
    pts = cloud.points
    u = np.clip(np.floor((pts[:, 0] + 1.0) * 0.5 * res).astype(np.int64), 0, res - 1)
    v = np.clip(np.floor((pts[:, 1] + 1.0) * 0.5 * res).astype(np.int64), 0, res - 1)
    top = np.full((res, res), -np.inf)
    np.maximum.at(top, (u, v), pts[:, 2])
    filled = np.isfinite(top)
    top[~filled] = top[filled].min() if filled.any() else -1.0
    return top


def naive_mc_baseline(cloud, res=128):
    """
    Voxelize the cloud as solid-below-column-max and run marching cubes.

    Returns:
        TriMesh with the stair-stepped surface of the baseline
    """
    top = column_max_heights(cloud, res)
    centers = HeightMap.cell_centers(res)
    values = np.where(centers[None, None, :] <= top[:, :, None], -1.0, 1.0)
    return marching_cubes(VoxelGrid(res, values))


def build_height_sheet(xs, ys, heights):
    """
    Triangulate a height lattice as an open, up-facing terrain sheet.

    Args:
        xs: (nx,) increasing x coordinates
        ys: (ny,) increasing y coordinates
        heights: (nx, ny) z values

    Returns:
        TriMesh with vertex index u * ny + v and every face in GROUP_TOP
    """
    nx, ny = len(xs), len(ys)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([xx.ravel(), yy.ravel(), np.asarray(heights).ravel()], axis=1)
    idx = np.arange(nx * ny).reshape(nx, ny)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    tris = np.empty((2 * len(a), 3), dtype=np.int64)
    tris[0::2] = np.stack([a, b, c], axis=1)
    tris[1::2] = np.stack([a, c, d], axis=1)
    return TriMesh(verts, tris, face_groups=np.full(len(tris), GROUP_TOP, dtype=np.int64))


def boundary_half_edges(triangles):
    """Directed edges a -> b whose reverse b -> a is not used by any face."""
    edges = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    if len(edges) == 0:
        return edges.reshape(0, 2)
    n = int(edges.max()) + 1
    reverse = np.isin(edges[:, 1] * n + edges[:, 0], edges[:, 0] * n + edges[:, 1])
    return edges[~reverse]


def close_height_sheet(sheet, floor_z, edges=None):
    """
    Close an up-facing sheet with vertical skirts down to floor_z and a
    bottom fan around the centroid of the boundary.

    Args:
        sheet: Open TriMesh whose faces are consistently wound upward
        floor_z: Bottom plate height, strictly below every boundary vertex
        edges: Optional subset of boundary half-edges to close

    Returns:
        TriMesh with top / wall / bottom face groups
    """
    if edges is None:
        edges = boundary_half_edges(sheet.triangles)
    if len(edges) == 0:
        return sheet
    ring = np.unique(edges)
    base = len(sheet.vertices)
    drop = sheet.vertices[ring].copy()
    drop[:, 2] = floor_z
    center = np.array([[*drop[:, :2].mean(axis=0), floor_z]])
    center_idx = base + len(ring)

    a = edges[:, 0]
    b = edges[:, 1]
    a_low = base + np.searchsorted(ring, a)
    b_low = base + np.searchsorted(ring, b)
    walls = np.concatenate([np.stack([a, a_low, b_low], axis=1), np.stack([a, b_low, b], axis=1)])
    bottom = np.stack([np.full(len(a), center_idx), b_low, a_low], axis=1)

    verts = np.concatenate([sheet.vertices, drop, center])
    tris = np.concatenate([sheet.triangles, walls, bottom])
    groups = np.concatenate([
        sheet.face_groups if sheet.face_groups is not None else np.full(len(sheet.triangles), GROUP_TOP),
        np.full(len(walls), GROUP_WALL), np.full(len(bottom), GROUP_BOTTOM)]).astype(np.int64)
    uvs = None
    if sheet.uvs is not None:
        uvs = np.concatenate([sheet.uvs, sheet.uvs[ring], sheet.uvs[ring].mean(axis=0, keepdims=True)])
    return TriMesh(verts, tris, uvs=uvs, face_groups=groups)


def extract_height_mesh(field, res=512, lattice=None, threads=1):
    """
    Watertight 2.5D mesh from direct column-height samples.

    Args:
        field: ZMonoField
        res: Samples per side over [-1, 1] (>= 2), ignored with lattice
        lattice: Optional (xs, ys) normalized sample coordinates
        threads: Worker threads for the root solve

    Returns:
        TriMesh with uvs = ((x + 1) / 2, (y + 1) / 2) and face groups

    The floor sits one lattice step below min(-1, lowest height), so the
    closed mesh reaches below z = -1 even for fields clamped to the bottom.
    """
    if lattice is None:
        if res < 2:
            raise ValueError("height mesh resolution must be >= 2")
        xs = ys = np.linspace(-1.0, 1.0, res)
    else:
        xs, ys = (np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0) for a in lattice)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    plan = ColumnPlan.for_field(field, xx.ravel(), yy.ravel())
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            z, _ = plan.solve(field.grid_h, executor=pool)
    else:
        z, _ = plan.solve(field.grid_h)

    sheet = build_height_sheet(xs, ys, z.reshape(len(xs), len(ys)))
    sheet.uvs = 0.5 * (sheet.vertices[:, :2] + 1.0)
    step = min(np.min(np.diff(xs)), np.min(np.diff(ys))) if len(xs) > 1 and len(ys) > 1 else 2.0 / max(res, 2)
    floor_z = min(-1.0, float(z.min())) - step
    mesh = close_height_sheet(sheet, floor_z)
    logger.info(f"Height mesh {len(xs)}x{len(ys)}: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles")
    return mesh


def watertight_check(mesh):
    """
    Edge-degree census of a triangle mesh.

    Returns:
        WatertightReport (counts over referenced vertices)
    """
    tris = mesh.triangles
    if len(tris) == 0:
        return WatertightReport()
    edges = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    used = np.unique(tris)
    n = len(mesh.vertices)
    graph = coo_matrix((np.ones(len(uniq)), (uniq[:, 0], uniq[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    report = WatertightReport(
        boundary_edge_count=int((counts == 1).sum()),
        non_manifold_edge_count=int((counts >= 3).sum()),
        connected_components=int(len(np.unique(labels[used]))),
        euler_characteristic=int(len(used) - len(uniq) + len(tris)),
        vertex_count=int(len(used)),
        edge_count=int(len(uniq)),
        face_count=int(len(tris)),
    )
    logger.debug(f"Watertight check: {report.to_dict()}")
    return report


def weld_vertices(mesh, tol=WELD_TOL):
    """
    Merge vertices closer than tol; faces that collapse are dropped.

    Returns:
        (welded TriMesh, number of vertices removed)
    """
    n = len(mesh.vertices)
    if n == 0:
        return mesh, 0
    pairs = cKDTree(mesh.vertices).query_pairs(tol, output_type="ndarray")
    if len(pairs) == 0:
        return mesh, 0
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    # representative: lowest original index of each cluster
    rep = np.full(labels.max() + 1, n, dtype=np.int64)
    np.minimum.at(rep, labels, np.arange(n))
    remap = rep[labels]
    tris = remap[mesh.triangles]
    keep = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    welded = replace(mesh, triangles=tris).select_faces(keep).compact()
    return welded, n - len(np.unique(rep))


@dataclass
class TileMesh:
    mesh: TriMesh
    transform: object
    core_lo: np.ndarray
    core_hi: np.ndarray
    name: str = ""


def tile_height_meshes(tile_fits, res=256, threads=1):
    """
    Height meshes for every tile on one shared world lattice.

    Tile cores are equal subdivisions of the scene box, so a single
    linspace per axis puts every seam on common lattice lines.

    Args:
        tile_fits: list of optimizer.TileFit
        res: Samples per tile side

    Returns:
        list of TileMesh (normalized frame meshes)
    """
    cores_lo = np.array([t.region.core_lo for t in tile_fits])
    cores_hi = np.array([t.region.core_hi for t in tile_fits])
    tiles = int(round(np.sqrt(len(tile_fits))))
    lo, hi = cores_lo.min(axis=0), cores_hi.max(axis=0)
    grid = [np.linspace(lo[a], hi[a], tiles * (res - 1) + 1) for a in range(2)]
    out = []
    for tf in tile_fits:
        i, j = tf.region.index
        xs = grid[0][i * (res - 1):(i + 1) * (res - 1) + 1]
        ys = grid[1][j * (res - 1):(j + 1) * (res - 1) + 1]
        xn = tf.transform.to_normalized(np.stack([xs, np.zeros_like(xs), np.zeros_like(xs)], axis=1))[:, 0]
        yn = tf.transform.to_normalized(np.stack([np.zeros_like(ys), ys, np.zeros_like(ys)], axis=1))[:, 1]
        mesh = extract_height_mesh(tf.field, lattice=(xn, yn), threads=threads)
        out.append(TileMesh(mesh, tf.transform, tf.region.core_lo, tf.region.core_hi, tf.region.name))
    return out


def _clip_to_core(mesh, core_lo, core_hi, scene_hi, tol):
    cent = mesh.corners().mean(axis=1)[:, :2]
    upper_ok = (cent < core_hi - tol) | (core_hi >= scene_hi - tol)
    keep = np.all((cent >= core_lo - tol) & upper_ok & (cent <= core_hi + tol), axis=1)
    return mesh.select_faces(keep).compact()


def _outer_edges(vertices, edges, lo, hi, tol):
    xy = vertices[:, :2]
    on = []
    for axis in range(2):
        for bound in (lo[axis], hi[axis]):
            hit = np.abs(xy[:, axis] - bound) <= tol
            on.append(hit[edges[:, 0]] & hit[edges[:, 1]])
    return np.any(on, axis=0)


def merge_tiles(tiles, policy="weld", tol=WELD_TOL, floor_z=None, snap_tol=None):
    """
    Merge per-tile meshes into one world-space mesh.

    Each mesh is un-normalized, clipped to its core region and concatenated;
    coincident seam vertices are welded within tol. Height meshes (with face
    groups) keep only their top sheets and are re-closed around the outer
    scene boundary.

    Policies:
        weld: weld within tol only; seams whose heights disagree stay open
            and are reported.
        snap: seam vertices sharing an xy position take the height of the
            lowest-indexed tile before welding; snap magnitudes are reported.
            Clusters whose heights spread more than snap_tol are left open
            and reported like weld gaps. Any snap larger than tol is logged
            as a warning.

    Args:
        tiles: list of TileMesh
        policy: "weld" or "snap"
        tol: Weld tolerance in world units
        floor_z: Bottom plate height for the re-closure (default just below
            the lowest vertex)
        snap_tol: Largest height difference snap may close (None: no limit)

    Returns:
        (world TriMesh, SeamReport)
    """
    if policy not in ("weld", "snap"):
        raise ValueError(f"unknown seam policy {policy!r}")
    report = SeamReport(policy=policy, tiles=len(tiles))
    scene_lo = np.min([t.core_lo for t in tiles], axis=0)
    scene_hi = np.max([t.core_hi for t in tiles], axis=0)
    height_like = all(t.mesh.face_groups is not None for t in tiles)

    parts, owners = [], []
    for order, t in enumerate(tiles):
        world = t.transform.mesh_to_world(t.mesh)
        if height_like:
            world = world.select_faces(world.face_groups == GROUP_TOP).compact()
        world = _clip_to_core(world, t.core_lo, t.core_hi, scene_hi, tol)
        parts.append(world)
        owners.append(np.full(len(world.vertices), order))
    merged = concatenate_meshes(parts)
    if merged.is_empty:
        return merged, report
    owner = np.concatenate(owners)
    merged = replace(merged, uvs=None)

    xy_tree = cKDTree(merged.vertices[:, :2])
    pairs = xy_tree.query_pairs(tol, output_type="ndarray")
    cross = pairs[owner[pairs[:, 0]] != owner[pairs[:, 1]]] if len(pairs) else pairs
    if len(cross):
        dz = np.abs(merged.vertices[cross[:, 0], 2] - merged.vertices[cross[:, 1], 2])
        report.max_gap = float(dz.max())
        if policy == "snap":
            n = len(merged.vertices)
            graph = coo_matrix((np.ones(len(cross)), (cross[:, 0], cross[:, 1])), shape=(n, n))
            _, labels = connected_components(graph, directed=False)
            # owner tile of each cluster wins; ties go to the lowest vertex index
            key = owner * n + np.arange(n)
            best = np.full(labels.max() + 1, np.iinfo(np.int64).max, dtype=np.int64)
            np.minimum.at(best, labels, key)
            source = best[labels] % n
            if snap_tol is not None:
                zmin = np.full(len(best), np.inf)
                zmax = np.full(len(best), -np.inf)
                np.minimum.at(zmin, labels, merged.vertices[:, 2])
                np.maximum.at(zmax, labels, merged.vertices[:, 2])
                too_far = (zmax - zmin)[labels] > snap_tol
                source = np.where(too_far, np.arange(n), source)
            verts = merged.vertices.copy()
            moved = np.abs(verts[:, 2] - verts[source, 2])
            verts[:, 2] = verts[source, 2]
            report.snapped_vertices = int((moved > 0).sum())
            report.max_snap = float(moved.max())
            merged = replace(merged, vertices=verts)
            if report.max_snap > tol:
                logger.warning(f"Snapped {report.snapped_vertices} seam vertices by up to {report.max_snap:.3g} "
                               f"(weld tolerance {tol:g})")

    merged, report.welded_vertices = weld_vertices(merged, tol)

    if height_like:
        edges = boundary_half_edges(merged.triangles)
        outer = _outer_edges(merged.vertices, edges, scene_lo, scene_hi, tol) if len(edges) else np.zeros(0, bool)
        report.seam_gap_edges = int((~outer).sum())
        if floor_z is None:
            zmin, zmax = merged.vertices[:, 2].min(), merged.vertices[:, 2].max()
            floor_z = zmin - max(0.01 * (zmax - zmin), 1e-3)
        merged = close_height_sheet(merged, floor_z, edges=edges[outer])
    else:
        report.seam_gap_edges = 0

    if report.seam_gap_edges:
        logger.warning(f"Seam gaps left open: {report.seam_gap_edges} edges, max height gap {report.max_gap:.3g}")
    logger.info(f"Merged {len(tiles)} tiles ({policy}): {len(merged.vertices)} vertices, "
                f"{len(merged.triangles)} triangles, {report.welded_vertices} welded")
    return merged, report


def normalized_tile(mesh, transform, core_lo=None, core_hi=None, name=""):
    """Wrap a single normalized mesh as a TileMesh covering its full xy extent."""
    if core_lo is None or core_hi is None:
        world = transform.to_world(mesh.vertices)
        core_lo, core_hi = world[:, :2].min(axis=0), world[:, :2].max(axis=0)
    return TileMesh(mesh, transform, np.asarray(core_lo), np.asarray(core_hi), name)
