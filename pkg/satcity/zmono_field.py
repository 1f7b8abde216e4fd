"""
Z-monotonic signed distance field.

    s(x, y, z) = sum_j w_j(x, y) * tanh(k * (z - h_j))

h_j are learnable offsets on a G x G grid; w_j are softmax weights over the
inverse xy distance to the cell centers of an n x n window. Every term is
increasing in z and w_j >= 0, so s is nondecreasing along z and its zero
crossing defines a single height per column.
"""
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, FieldDomainError
from .geom_core import HeightMap

logger = logging.getLogger(__name__)

DEFAULT_K = 80.0
DEFAULT_WINDOW = 3
WEIGHT_EPS = 1e-6
ROOT_TOL = 1e-12
MAX_ROOT_ITERS = 60
CHUNK = 1 << 16

CHECKPOINT_MAGIC = b"ZMSDF\x00"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<6sIIdI")


@dataclass
class ZMonoField:
    grid_h: np.ndarray
    k: float = DEFAULT_K
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        self.grid_h = np.asarray(self.grid_h, dtype=np.float64)
        if self.grid_h.ndim != 2 or self.grid_h.shape[0] != self.grid_h.shape[1]:
            raise ValueError("grid_h must be a square matrix")
        if self.k <= 0:
            raise ValueError("sharpness k must be positive")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window side must be a positive odd integer")
        if self.grid_res < self.window:
            raise ValueError(f"grid resolution {self.grid_res} smaller than window {self.window}")

    @property
    def grid_res(self):
        return self.grid_h.shape[0]

    @property
    def cell_size(self):
        return 2.0 / self.grid_res

    def clamp(self):
        np.clip(self.grid_h, -1.0, 1.0, out=self.grid_h)
        return self

    def copy(self):
        return ZMonoField(self.grid_h.copy(), self.k, self.window)

    @classmethod
    def constant(cls, grid_res, value, k=DEFAULT_K, window=DEFAULT_WINDOW):
        return cls(np.full((grid_res, grid_res), float(value)), k, window)

    @classmethod
    def from_heightmap(cls, target, grid_res, k=DEFAULT_K, window=DEFAULT_WINDOW):
        """
        Initialize offsets from a target height map.

        Each field cell takes the maximum valid target height falling inside
        it; cells without valid target data start at ground level (the lowest
        valid target height).

        Args:
            target: HeightMap (normalized z)
            grid_res: Field resolution G

        Returns:
            ZMonoField
        """
        if target.valid.any():
            ground = float(target.heights[target.valid].min())
        else:
            ground = -1.0
        grid = np.full((grid_res, grid_res), -np.inf)
        centers = HeightMap.cell_centers(target.res)
        cell = np.clip(np.floor((centers + 1.0) * 0.5 * grid_res).astype(np.int64), 0, grid_res - 1)
        uu, vv = np.meshgrid(cell, cell, indexing="ij")
        mask = target.valid
        np.maximum.at(grid, (uu[mask], vv[mask]), target.heights[mask])
        grid[~np.isfinite(grid)] = ground
        return cls(np.clip(grid, -1.0, 1.0), k, window)


@dataclass
class NeighborWeights:
    indices: np.ndarray
    weights: np.ndarray


def _check_domain(*coords):
    for c in coords:
        c = np.asarray(c)
        if np.any(~np.isfinite(c)) or np.any(np.abs(c) > 1.0 + 1e-12):
            raise FieldDomainError(f"query outside [-1, 1]: {c[np.abs(c) > 1.0].ravel()[:4]}")


def _window_start(coord, grid_res, window):
    cell = np.clip(np.floor((coord + 1.0) * 0.5 * grid_res).astype(np.int64), 0, grid_res - 1)
    # shift inward at the borders so the window stays fully in-bounds
    return np.clip(cell - window // 2, 0, grid_res - window)


def window_weights(grid_res, window, xs, ys):
    """
    Vectorized window cells and softmax weights.

    Args:
        grid_res: Field resolution G
        window: Window side n
        xs, ys: (N,) query coordinates in [-1, 1]

    Returns:
        (flat cell indices (N, n*n), weights (N, n*n))
    """
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    offsets = np.arange(window)
    su = _window_start(xs, grid_res, window)[:, None] + offsets[None, :]
    sv = _window_start(ys, grid_res, window)[:, None] + offsets[None, :]
    iu = np.repeat(su, window, axis=1)
    iv = np.tile(sv, (1, window))
    size = 2.0 / grid_res
    cx = -1.0 + (iu + 0.5) * size
    cy = -1.0 + (iv + 0.5) * size
    dist = np.hypot(xs[:, None] - cx, ys[:, None] - cy)
    logits = 1.0 / (dist + WEIGHT_EPS)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return iu * grid_res + iv, w


def neighbor_weights(field, x, y):
    """
    Window cells and weights for a single query point.

    Returns:
        NeighborWeights with (n*n, 2) [u, v] indices and (n*n,) weights
    """
    _check_domain(x, y)
    flat, w = window_weights(field.grid_res, field.window, [x], [y])
    flat = flat[0]
    return NeighborWeights(np.stack([flat // field.grid_res, flat % field.grid_res], axis=1), w[0])


def _log_sech2(a):
    a = np.abs(a)
    return 2.0 * (np.log(2.0) - a - np.log1p(np.exp(-2.0 * a)))


class ColumnPlan:
    """
    Window indices and weights precomputed for a fixed set of (x, y) columns.

    Weights depend only on the query positions, so a plan built once is
    reused for every parameter update of a fit.
    """

    def __init__(self, grid_res, window, xs, ys, k=DEFAULT_K):
        _check_domain(xs, ys)
        self.grid_res = grid_res
        self.window = window
        self.k = k
        self.count = np.asarray(xs).size
        self.flat, self.weights = window_weights(grid_res, window, xs, ys)
        with np.errstate(divide="ignore"):
            self.log_weights = np.log(self.weights)

    @classmethod
    def for_field(cls, field, xs, ys):
        return cls(field.grid_res, field.window, xs, ys, field.k)

    @classmethod
    def for_grid(cls, field, res):
        """Plan over the cell centers of an res x res grid, flattened in [u, v] order."""
        centers = HeightMap.cell_centers(res)
        xx, yy = np.meshgrid(centers, centers, indexing="ij")
        return cls.for_field(field, xx.ravel(), yy.ravel())

    def _slices(self):
        return [slice(s, min(s + CHUNK, self.count)) for s in range(0, self.count, CHUNK)]

    def evaluate(self, grid_h, z, rows=slice(None)):
        """s at heights z for the planned columns; z broadcasts as (N,) or (N, M)."""
        h = grid_h.ravel()[self.flat[rows]]
        w = self.weights[rows]
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            return np.einsum("ij,ij->i", w, np.tanh(self.k * (z[:, None] - h)))
        return np.einsum("ij,imj->im", w, np.tanh(self.k * (z[:, :, None] - h[:, None, :])))

    def _solve_rows(self, grid_h, rows, init):
        h = grid_h.ravel()[self.flat[rows]]
        w = self.weights[rows]
        k = self.k
        n = h.shape[0]

        def f_and_df(idx, z):
            t = np.tanh(k * (z[:, None] - h[idx]))
            return (np.einsum("ij,ij->i", w[idx], t),
                    k * np.einsum("ij,ij->i", w[idx], 1.0 - t * t))

        all_idx = np.arange(n)
        f_lo, _ = f_and_df(all_idx, np.full(n, -1.0))
        f_hi, _ = f_and_df(all_idx, np.full(n, 1.0))
        low = f_lo >= 0.0
        high = f_hi <= 0.0

        z = np.einsum("ij,ij->i", w, h) if init is None else np.asarray(init, dtype=np.float64)[rows].copy()
        z = np.clip(z, -1.0, 1.0)
        z[low] = -1.0
        z[high] = 1.0
        lo = np.full(n, -1.0)
        hi = np.full(n, 1.0)

        active = np.flatnonzero(~(low | high))
        for _ in range(MAX_ROOT_ITERS):
            if active.size == 0:
                break
            za = z[active]
            fz, dfz = f_and_df(active, za)
            done = np.abs(fz) < ROOT_TOL
            neg = fz < 0.0
            lo[active] = np.where(neg, za, lo[active])
            hi[active] = np.where(neg, hi[active], za)
            la, ha = lo[active], hi[active]
            with np.errstate(divide="ignore", invalid="ignore"):
                step = za - fz / dfz
            inside = (dfz > 0.0) & (step > la) & (step < ha)
            z[active] = np.where(done, za, np.where(inside, step, 0.5 * (la + ha)))
            active = active[~done & (ha - la > 4e-16)]

        if active.size:
            # plain bisection for the few columns Newton did not settle
            for _ in range(MAX_ROOT_ITERS):
                mid = 0.5 * (lo[active] + hi[active])
                fz, _ = f_and_df(active, mid)
                neg = fz < 0.0
                lo[active] = np.where(neg, mid, lo[active])
                hi[active] = np.where(neg, hi[active], mid)
                z[active] = mid
            logger.debug(f"Bisection fallback used for {active.size} columns")

        return z, low | high

    def solve(self, grid_h, init=None, executor=None):
        """
        Zero-crossing height of every planned column.

        Args:
            grid_h: Field offsets (G, G)
            init: Optional (N,) warm-start heights
            executor: Optional ThreadPoolExecutor for chunk parallelism

        Returns:
            (heights (N,), clamped mask (N,))
        """
        slices = self._slices()
        if executor is None or len(slices) == 1:
            parts = [self._solve_rows(grid_h, s, init) for s in slices]
        else:
            parts = list(executor.map(lambda s: self._solve_rows(grid_h, s, init), slices))
        if not parts:
            return np.zeros(0), np.zeros(0, dtype=bool)
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    def gradients(self, grid_h, z, clamped):
        """
        Implicit-function gradients dz*/dh_j for every planned column.

            dz*/dh_j = w_j sech^2(k(z* - h_j)) / sum_m w_m sech^2(k(z* - h_m))

        Evaluated as a softmax in log space so saturated terms keep their
        relative size. Clamped columns get zero rows.

        Returns:
            (N, n*n) gradient array
        """
        h = grid_h.ravel()[self.flat]
        logits = self.log_weights + _log_sech2(self.k * (z[:, None] - h))
        logits -= logits.max(axis=1, keepdims=True)
        g = np.exp(logits)
        g /= g.sum(axis=1, keepdims=True)
        g[clamped] = 0.0
        return g

    def scatter(self, coeff, grads, partials=None):
        """
        Accumulate sum_cells coeff * dz/dh_j into a (G, G) parameter gradient.

        np.bincount reduces in index order, so the result does not depend on
        how the solve was chunked.
        """
        size = self.grid_res * self.grid_res
        contrib = (np.asarray(coeff)[:, None] * grads).ravel()
        total = np.bincount(self.flat.ravel(), weights=contrib, minlength=size)
        return total.reshape(self.grid_res, self.grid_res)


def eval_sdf(field, p):
    """
    Evaluate s at normalized points.

    Args:
        field: ZMonoField
        p: (3,) or (N, 3) points in [-1, 1]^3

    Returns:
        float for a single point, (N,) array otherwise; negative below the
        surface (inside solid), positive above
    """
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    _check_domain(pts)
    plan = ColumnPlan.for_field(field, pts[:, 0], pts[:, 1])
    values = plan.evaluate(field.grid_h, pts[:, 2])
    return float(values[0]) if single else values


def height_of(field, x, y):
    """
    Height z* of the zero crossing in column (x, y).

    Returns -1 when the column is positive everywhere and +1 when it is
    negative everywhere (clamped plateaus).

    Args:
        field: ZMonoField
        x, y: Scalars or equally shaped arrays in [-1, 1]

    Returns:
        float or array matching the input shape
    """
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    plan = ColumnPlan.for_field(field, xs.ravel(), ys.ravel())
    z, _ = plan.solve(field.grid_h)
    return float(z[0]) if xs.ndim == 0 else z.reshape(xs.shape)


@dataclass
class HeightGradient:
    indices: np.ndarray
    grads: np.ndarray
    height: float
    clamped: bool


def grad_height(field, x, y):
    """
    Gradient of the column height with respect to its window offsets.

    Returns:
        HeightGradient; on a clamped plateau all gradients are zero and the
        clamped flag is set
    """
    plan = ColumnPlan.for_field(field, [x], [y])
    z, clamped = plan.solve(field.grid_h)
    g = plan.gradients(field.grid_h, z, clamped)[0]
    flat = plan.flat[0]
    return HeightGradient(np.stack([flat // field.grid_res, flat % field.grid_res], axis=1),
                          g, float(z[0]), bool(clamped[0]))


def height_grid(field, res, plan=None, init=None, threads=1):
    """
    Dense height map H_pred by direct field evaluation at cell centers.

    Args:
        field: ZMonoField
        res: Grid resolution R (>= 2)
        plan: Optional ColumnPlan.for_grid(field, res) to reuse
        init: Optional (R, R) warm-start heights
        threads: Worker threads for the root solve

    Returns:
        HeightMap with every cell valid
    """
    if res < 2:
        raise ValueError("height grid resolution must be >= 2")
    plan = plan or ColumnPlan.for_grid(field, res)
    init_flat = None if init is None else np.asarray(init).ravel()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            z, _ = plan.solve(field.grid_h, init_flat, executor=pool)
    else:
        z, _ = plan.solve(field.grid_h, init_flat)
    return HeightMap(res, z.reshape(res, res))


def save_field(field, path):
    """Write a versioned binary checkpoint: header (G, k, n) + row-major float64 grid."""
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, field.grid_res, float(field.k), field.window)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(field.grid_h, dtype="<f8").tobytes())
    logger.info(f"Saved field checkpoint ({field.grid_res}x{field.grid_res}) to {path}")


def load_field(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short for a field checkpoint")
    magic, version, grid_res, k, window = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    expected = grid_res * grid_res * 8
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise CheckpointError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    grid = np.frombuffer(payload, dtype="<f8").reshape(grid_res, grid_res).astype(np.float64)
    return ZMonoField(grid, k, window)
