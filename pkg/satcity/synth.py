"""
Procedural box cities with exact ground truth.

A BoxCity is a ground plate plus non-overlapping axis-aligned boxes. It
provides the exact height function, an exact watertight mesh, satellite-MVS
like point samples (dense on roofs and ground, no facades by default) and
ground-truth renderings.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import SceneFileError
from .geom_core import GROUP_BOTTOM, GROUP_TOP, GROUP_WALL, PointCloud, TriMesh
from .metrics import sample_mesh
from .raster import rasterize

logger = logging.getLogger(__name__)

SCENE_HEADER = "# satcity scene v1"
GROUND_COLOR = (0.45, 0.45, 0.42)
FACADE_SHADE = 0.8
CHECKER_SHADE = 0.75
MAX_CELL = 10.0
BASE_DEPTH = 1.0


@dataclass
class Box:
    x0: float
    y0: float
    x1: float
    y1: float
    height: float
    color: Tuple[float, float, float] = (0.7, 0.7, 0.7)

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def contains(self, x, y):
        return (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)

    def overlaps(self, other, gap=0.0):
        """Open-interior overlap after growing self by gap (touching is allowed at gap 0)."""
        return (self.x0 - gap < other.x1 and other.x0 < self.x1 + gap and
                self.y0 - gap < other.y1 and other.y0 < self.y1 + gap)

    def corner_touches(self, other):
        """True when the closed footprints meet in a single point."""
        x_touch = self.x1 == other.x0 or other.x1 == self.x0
        y_touch = self.y1 == other.y0 or other.y1 == self.y0
        return x_touch and y_touch


@dataclass
class BoxCity:
    bounds: Tuple[float, float, float, float] = (0.0, 0.0, 1000.0, 1000.0)
    ground_z: float = 0.0
    ground_color: Tuple[float, float, float] = GROUND_COLOR
    boxes: List[Box] = field(default_factory=list)
    checker_period: float = 0.0
    seed: int = 0

    def validate(self):
        x0, y0, x1, y1 = self.bounds
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate scene bounds {self.bounds}")
        for i, b in enumerate(self.boxes):
            if not (b.x1 > b.x0 and b.y1 > b.y0):
                raise ValueError(f"box {i} has an empty footprint")
            if b.x0 < x0 or b.y0 < y0 or b.x1 > x1 or b.y1 > y1:
                raise ValueError(f"box {i} leaves the scene bounds")
            if b.height <= self.ground_z:
                raise ValueError(f"box {i} roof {b.height} is not above ground {self.ground_z}")
            for j in range(i):
                if b.overlaps(self.boxes[j]):
                    raise ValueError(f"boxes {j} and {i} overlap")

    @property
    def lo(self):
        return np.array([self.bounds[0], self.bounds[1], self.ground_z])

    @property
    def hi(self):
        top = max([b.height for b in self.boxes], default=self.ground_z)
        return np.array([self.bounds[2], self.bounds[3], top])


@dataclass
class CityParams:
    count: int = 20
    bounds: Tuple[float, float, float, float] = (0.0, 0.0, 1000.0, 1000.0)
    size_range: Tuple[float, float] = (40.0, 120.0)
    height_range: Tuple[float, float] = (10.0, 80.0)
    ground_z: float = 0.0
    min_gap: float = 2.0
    max_attempts: int = 200
    checker_period: float = 0.0

    def validate(self):
        if self.count < 0:
            raise ValueError("box count must be >= 0")
        for name in ("size_range", "height_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < min <= max, got {(lo, hi)}")
        if self.min_gap < 0:
            raise ValueError("min_gap must be >= 0")


@dataclass
class MvsSamplingProfile:
    """Point densities in points per square metre, height noise sigma in metres."""
    roof_density: float = 0.5
    ground_density: float = 0.5
    facade_density: float = 0.0
    sigma: float = 0.2
    dropout: float = 0.0

    def validate(self):
        if min(self.roof_density, self.ground_density, self.facade_density) < 0:
            raise ValueError("sampling densities must be >= 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def gen_city(params=None, seed=0):
    """
    Rejection-sample a box city.

    Footprints never overlap and keep at least min_gap metres apart; with
    min_gap 0 boxes may share an edge but never meet at a single corner.

    Returns:
        BoxCity
    """
    params = params or CityParams()
    params.validate()
    rng = np.random.default_rng(seed)
    x0, y0, x1, y1 = params.bounds
    boxes = []
    for _ in range(params.count):
        for _ in range(params.max_attempts):
            w, d = rng.uniform(*params.size_range, size=2)
            if w > x1 - x0 or d > y1 - y0:
                continue
            bx = rng.uniform(x0, x1 - w)
            by = rng.uniform(y0, y1 - d)
            cand = Box(float(bx), float(by), float(bx + w), float(by + d),
                       float(params.ground_z + rng.uniform(*params.height_range)),
                       tuple(float(c) for c in rng.uniform(0.2, 0.9, size=3)))
            if any(cand.overlaps(b, params.min_gap) or cand.corner_touches(b) for b in boxes):
                continue
            boxes.append(cand)
            break
    if len(boxes) < params.count:
        logger.warning(f"Placed {len(boxes)} of {params.count} boxes after rejection sampling")
    city = BoxCity(tuple(float(v) for v in params.bounds), float(params.ground_z), GROUND_COLOR, boxes,
                   params.checker_period, seed)
    logger.info(f"Generated city with {len(boxes)} boxes over {x1 - x0:g} x {y1 - y0:g} m")
    return city


def gt_height(city, x, y):
    """Exact height: the highest roof covering (x, y), else ground."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h = np.full(np.broadcast(x, y).shape, city.ground_z)
    for b in city.boxes:
        h = np.where(b.contains(x, y), np.maximum(h, b.height), h)
    return h if h.ndim else float(h)


def _breakpoints(lo, hi, edges, max_cell, period):
    pts = [lo, hi] + list(edges)
    if period > 0:
        pts += list(np.arange(math.ceil(lo / period) * period, hi, period))
    pts = np.unique(np.clip(pts, lo, hi))
    out = [pts[:1]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(math.ceil((b - a) / max_cell)))
        out.append(np.linspace(a, b, n + 1)[1:])
    return np.concatenate(out)


def _cell_colors(city, cx, cy):
    colors = np.empty(cx.shape + (3,))
    colors[:] = city.ground_color
    for b in city.boxes:
        colors[b.contains(cx, cy)] = b.color
    if city.checker_period > 0:
        parity = (np.floor(cx / city.checker_period) + np.floor(cy / city.checker_period)) % 2 == 1
        colors[parity] *= CHECKER_SHADE
    return colors


def _expand_spans(lo, hi):
    """For every (lo, hi) pair list the unit level steps k in [lo, hi)."""
    n = hi - lo
    owner = np.repeat(np.arange(len(n)), n)
    k = lo[owner] + np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
    return owner, k


def _quads(p0, p1, p2, p3, flip):
    a = np.stack([p0, p1, p2], axis=1)
    b = np.stack([p0, p2, p3], axis=1)
    a[flip] = a[flip][:, [0, 2, 1]]
    b[flip] = b[flip][:, [0, 2, 1]]
    return np.concatenate([a, b])


def gt_mesh(city, max_cell=MAX_CELL, base_depth=BASE_DEPTH):
    """
    Exact watertight mesh of the city on a ground plate.

    The plate is split on every footprint edge and refined so no cell is
    larger than max_cell metres; each cell carries one top quad, walls join
    cells of different height and a flat bottom closes the solid base_depth
    below ground. Walls are split at every distinct height so vertical edges
    are always shared by exactly two faces.

    Returns:
        TriMesh with face_groups and face_colors
    """
    x0, y0, x1, y1 = city.bounds
    xs = _breakpoints(x0, x1, [v for b in city.boxes for v in (b.x0, b.x1)], max_cell, city.checker_period)
    ys = _breakpoints(y0, y1, [v for b in city.boxes for v in (b.y0, b.y1)], max_cell, city.checker_period)
    nx, ny = len(xs) - 1, len(ys) - 1
    cx, cy = np.meshgrid(0.5 * (xs[:-1] + xs[1:]), 0.5 * (ys[:-1] + ys[1:]), indexing="ij")
    heights = gt_height(city, cx, cy)
    floor = city.ground_z - base_depth
    levels = np.unique(np.concatenate([[floor], heights.ravel()]))
    L = len(levels)
    lev = np.searchsorted(levels, heights)
    levp = np.zeros((nx + 2, ny + 2), dtype=np.int64)
    levp[1:-1, 1:-1] = lev
    colp = np.zeros((nx + 2, ny + 2, 3))
    colp[1:-1, 1:-1] = _cell_colors(city, cx, cy)

    def key(i, j, k):
        return (i * (ny + 1) + j) * L + k

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    no_flip = np.zeros(len(ii), dtype=bool)

    k = lev.ravel()
    top = _quads(key(ii, jj, k), key(ii + 1, jj, k), key(ii + 1, jj + 1, k), key(ii, jj + 1, k), no_flip)
    top_col = np.tile(colp[1:-1, 1:-1].reshape(-1, 3), (2, 1))

    z0 = np.zeros(len(ii), dtype=np.int64)
    bottom = _quads(key(ii, jj, z0), key(ii + 1, jj, z0), key(ii + 1, jj + 1, z0), key(ii, jj + 1, z0), ~no_flip)
    bottom_col = np.tile(np.asarray(city.ground_color, dtype=np.float64), (len(bottom), 1))

    walls, wall_col = [], []
    # walls on x = xs[i] between cells (i - 1, j) and (i, j)
    wi, wj = np.meshgrid(np.arange(nx + 1), np.arange(ny), indexing="ij")
    wi, wj = wi.ravel(), wj.ravel()
    left, right = levp[wi, wj + 1], levp[wi + 1, wj + 1]
    owner, k = _expand_spans(np.minimum(left, right), np.maximum(left, right))
    i, j = wi[owner], wj[owner]
    faces_pos = left[owner] > right[owner]
    walls.append(_quads(key(i, j, k), key(i, j + 1, k), key(i, j + 1, k + 1), key(i, j, k + 1), ~faces_pos))
    high = np.where(faces_pos, wi[owner], wi[owner] + 1)
    wall_col.append(np.tile(colp[high, wj[owner] + 1] * FACADE_SHADE, (2, 1)))
    # walls on y = ys[j] between cells (i, j - 1) and (i, j)
    wi, wj = np.meshgrid(np.arange(nx), np.arange(ny + 1), indexing="ij")
    wi, wj = wi.ravel(), wj.ravel()
    below, above = levp[wi + 1, wj], levp[wi + 1, wj + 1]
    owner, k = _expand_spans(np.minimum(below, above), np.maximum(below, above))
    i, j = wi[owner], wj[owner]
    faces_pos = below[owner] > above[owner]
    walls.append(_quads(key(i, j, k), key(i + 1, j, k), key(i + 1, j, k + 1), key(i, j, k + 1), faces_pos))
    high = np.where(faces_pos, wj[owner], wj[owner] + 1)
    wall_col.append(np.tile(colp[wi[owner] + 1, high] * FACADE_SHADE, (2, 1)))

    walls = np.concatenate(walls)
    keys = np.concatenate([top, walls, bottom])
    uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
    node, lvl = np.divmod(uniq, L)
    vi, vj = np.divmod(node, ny + 1)
    vertices = np.stack([xs[vi], ys[vj], levels[lvl]], axis=1)
    groups = np.concatenate([np.full(len(top), GROUP_TOP), np.full(len(walls), GROUP_WALL),
                             np.full(len(bottom), GROUP_BOTTOM)])
    colors = np.concatenate([top_col] + wall_col + [bottom_col])
    mesh = TriMesh(vertices, inverse.reshape(-1, 3), face_groups=groups, face_colors=colors)
    logger.info(f"Ground-truth mesh: {nx}x{ny} cells, {len(vertices)} vertices, {len(mesh.triangles)} triangles")
    return mesh


def _facade_segments(city):
    """Each box side as (start xy, end xy, outward normal xy, roof height)."""
    segs = []
    for b in city.boxes:
        segs += [((b.x0, b.y0), (b.x1, b.y0), (0.0, -1.0), b.height),
                 ((b.x1, b.y0), (b.x1, b.y1), (1.0, 0.0), b.height),
                 ((b.x1, b.y1), (b.x0, b.y1), (0.0, 1.0), b.height),
                 ((b.x0, b.y1), (b.x0, b.y0), (-1.0, 0.0), b.height)]
    return segs


def _sample_surface(city, surface, density, rng):
    """Poisson-count uniform samples on one surface; surface is ('ground',), ('roof', box) or ('facade', seg)."""
    kind = surface[0]
    if kind == "ground":
        x0, y0, x1, y1 = city.bounds
        n = rng.poisson(density * (x1 - x0) * (y1 - y0))
        pts = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n), np.full(n, city.ground_z)])
        covered = np.zeros(n, dtype=bool)
        for b in city.boxes:
            covered |= b.contains(pts[:, 0], pts[:, 1])
        return pts[~covered]
    if kind == "roof":
        b = surface[1]
        n = rng.poisson(density * b.area)
        return np.column_stack([rng.uniform(b.x0, b.x1, n), rng.uniform(b.y0, b.y1, n), np.full(n, b.height)])
    start, end, normal, roof = surface[1]
    start, end = np.asarray(start), np.asarray(end)
    length = float(np.linalg.norm(end - start))
    n = rng.poisson(density * length * (roof - city.ground_z))
    t = rng.random(n)
    xy = start + t[:, None] * (end - start)
    z = rng.uniform(city.ground_z, roof, n)
    # drop facade parts hidden against a touching neighbour
    nudged = xy + 1e-6 * np.asarray(normal)
    visible = gt_height(city, nudged[:, 0], nudged[:, 1]) < z
    return np.column_stack([xy, z])[visible]


def sample_mvs(city, profile=None, seed=0, threads=1):
    """
    Satellite-MVS-like point sampling.

    Roofs and ground get Poisson area samples at their densities, facades at
    the facade density (0 by default, which leaves them empty). Every
    surface draws from its own seeded stream, then gets Gaussian height
    noise and uniform dropout.

    Returns:
        PointCloud (world frame)
    """
    profile = profile or MvsSamplingProfile()
    profile.validate()
    surfaces = [(("ground",), profile.ground_density)]
    surfaces += [(("roof", b), profile.roof_density) for b in city.boxes]
    if profile.facade_density > 0:
        surfaces += [(("facade", s), profile.facade_density) for s in _facade_segments(city)]
    streams = np.random.SeedSequence(seed).spawn(len(surfaces))

    def draw(item):
        (surface, density), stream = item
        rng = np.random.default_rng(stream)
        pts = _sample_surface(city, surface, density, rng)
        if profile.sigma > 0:
            pts[:, 2] += rng.normal(0.0, profile.sigma, len(pts))
        if profile.dropout > 0:
            pts = pts[rng.random(len(pts)) >= profile.dropout]
        return pts

    items = list(zip(surfaces, streams))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(draw, items))
    else:
        parts = [draw(item) for item in items]
    points = np.concatenate(parts) if parts else np.zeros((0, 3))
    logger.info(f"Sampled {len(points)} MVS-like points from {len(surfaces)} surfaces")
    return PointCloud(points)


def gt_cloud(city, n=200000, seed=0, mesh=None):
    """Dense ground-truth samples on the visible surfaces (roofs, ground, facades)."""
    mesh = mesh if mesh is not None else gt_mesh(city)
    # the plate's bottom and its skirt below ground are not observable
    above = mesh.corners()[:, :, 2].mean(axis=1) >= city.ground_z - 1e-9
    return sample_mesh(mesh.select_faces((mesh.face_groups != GROUP_BOTTOM) & above), n, seed)


def render_gt_views(city, cameras, background=(0.0, 0.0, 0.0), mesh=None, threads=1):
    """
    Rasterize the ground-truth mesh with its face colours.

    Returns:
        List of (H, W, 3) float images, one per camera
    """
    mesh = mesh if mesh is not None else gt_mesh(city)
    images = [rasterize(mesh, cam, threads=threads).colors(background) for cam in cameras]
    logger.info(f"Rendered {len(images)} ground-truth views")
    return images


def save_city(city, path):
    """
    Write the plain-text scene description.

    Schema (one record per line, floats written with repr so they round-trip):
        # satcity scene v1
        bounds <x0> <y0> <x1> <y1>
        ground <z> <r> <g> <b>
        checker <period>
        seed <int>
        box <x0> <y0> <x1> <y1> <roof z> <r> <g> <b>
    """
    lines = [SCENE_HEADER,
             "bounds " + " ".join(repr(float(v)) for v in city.bounds),
             "ground " + " ".join(repr(float(v)) for v in (city.ground_z,) + tuple(city.ground_color)),
             f"checker {float(city.checker_period)!r}",
             f"seed {int(city.seed)}"]
    for b in city.boxes:
        lines.append("box " + " ".join(repr(float(v)) for v in (b.x0, b.y0, b.x1, b.y1, b.height) + tuple(b.color)))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    logger.debug(f"Wrote scene with {len(city.boxes)} boxes to {path}")


def load_city(path):
    with open(path, "r") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != SCENE_HEADER:
        raise SceneFileError(f"{path}: missing '{SCENE_HEADER}' header")
    city = BoxCity()
    try:
        for n, line in enumerate(lines[1:], start=2):
            tag, *vals = line.split()
            if tag == "bounds" and len(vals) == 4:
                city.bounds = tuple(float(v) for v in vals)
            elif tag == "ground" and len(vals) == 4:
                city.ground_z = float(vals[0])
                city.ground_color = tuple(float(v) for v in vals[1:])
            elif tag == "checker" and len(vals) == 1:
                city.checker_period = float(vals[0])
            elif tag == "seed" and len(vals) == 1:
                city.seed = int(vals[0])
            elif tag == "box" and len(vals) == 8:
                v = [float(s) for s in vals]
                city.boxes.append(Box(v[0], v[1], v[2], v[3], v[4], tuple(v[5:])))
            else:
                raise SceneFileError(f"{path}:{n}: unrecognized record {line!r}")
    except ValueError as e:
        raise SceneFileError(f"{path}: bad number ({e})")
    try:
        city.validate()
    except ValueError as e:
        raise SceneFileError(f"{path}: {e}")
    return city
