"""
Deterministic software rasterizer.

Triangles are expanded into candidate fragments (pixel centers inside their
screen bounding boxes), tested with inclusive edge functions and resolved
with a z-buffer. At exactly equal depth the lower triangle id wins, so the
output does not depend on triangle order or on how work is chunked.

Pixel (i, j) is row i, column j; its center sits at (j + 0.5, i + 0.5).
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geom_core import HeightMap

logger = logging.getLogger(__name__)

NEAR = 0.1
FAR = 1e8
FRAGMENT_CHUNK = 1 << 22
AREA_EPS = 1e-12


@dataclass
class FrameBuffer:
    """
    Per-pixel visibility: nearest triangle id, perspective-correct barycentrics,
    depth and world position. Attribute channels are derived from these.
    """
    width: int
    height: int
    depth: np.ndarray
    tri_id: np.ndarray
    bary: np.ndarray
    mesh: object = None

    @property
    def covered(self):
        return self.tri_id >= 0

    def interpolate(self, vertex_attr, background=0.0):
        """Barycentric interpolation of a per-vertex attribute, shape (H, W, C)."""
        attr = np.asarray(vertex_attr, dtype=np.float64)
        attr2 = attr.reshape(len(attr), -1)
        out = np.full((self.height, self.width, attr2.shape[1]), background, dtype=np.float64)
        mask = self.covered
        corners = self.mesh.triangles[self.tri_id[mask]]
        out[mask] = np.einsum("pk,pkc->pc", self.bary[mask], attr2[corners])
        return out

    def face_attr(self, face_attr, background=0.0):
        attr = np.asarray(face_attr, dtype=np.float64)
        attr2 = attr.reshape(len(attr), -1)
        out = np.full((self.height, self.width, attr2.shape[1]), background, dtype=np.float64)
        mask = self.covered
        out[mask] = attr2[self.tri_id[mask]]
        return out

    def positions(self):
        return self.interpolate(self.mesh.vertices, background=np.nan)

    def heights(self):
        return self.positions()[..., 2]

    def normals(self):
        return self.face_attr(self.mesh.face_normals())

    def uvs(self):
        return self.interpolate(self.mesh.uvs)

    def colors(self, background=(0.0, 0.0, 0.0)):
        out = self.face_attr(self.mesh.face_colors)
        out[~self.covered] = background
        return out


def _pixel_bounds(pa, pb, na, nb):
    a_lo = np.clip(np.ceil(pa.min(axis=1) - 0.5), 0, na).astype(np.int64)
    a_hi = np.clip(np.floor(pa.max(axis=1) - 0.5), -1, na - 1).astype(np.int64)
    b_lo = np.clip(np.ceil(pb.min(axis=1) - 0.5), 0, nb).astype(np.int64)
    b_hi = np.clip(np.floor(pb.max(axis=1) - 0.5), -1, nb - 1).astype(np.int64)
    return a_lo, np.maximum(a_hi - a_lo + 1, 0), b_lo, np.maximum(b_hi - b_lo + 1, 0)


def _chunks(counts, limit):
    """Split triangle index range into consecutive runs of about limit fragments."""
    bounds = [0]
    acc = 0
    for i, c in enumerate(counts):
        if acc and acc + c > limit:
            bounds.append(i)
            acc = 0
        acc += c
    bounds.append(len(counts))
    return [(bounds[k], bounds[k + 1]) for k in range(len(bounds) - 1) if bounds[k + 1] > bounds[k]]


def _fragments(pa, pb, ids, na, nb):
    """
    Inside-test candidate pixels of a run of triangles.

    Args:
        pa, pb: (F, 3) vertex coordinates in pixel units along the two axes
        ids: (F,) triangle ids
        na, nb: Buffer extent along each axis

    Returns:
        (triangle ids, flat pixel index, screen barycentrics (M, 3)) of the
        inside fragments
    """
    a_lo, wa, b_lo, wb = _pixel_bounds(pa, pb, na, nb)
    counts = wa * wb
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3))
    owner = np.repeat(np.arange(len(ids)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    k = np.arange(total) - start
    ia = a_lo[owner] + k // wb[owner]
    ib = b_lo[owner] + k % wb[owner]
    ca = ia + 0.5
    cb = ib + 0.5

    a0, a1, a2 = pa[owner, 0], pa[owner, 1], pa[owner, 2]
    b0, b1, b2 = pb[owner, 0], pb[owner, 1], pb[owner, 2]
    area = (a1 - a0) * (b2 - b0) - (b1 - b0) * (a2 - a0)
    w0 = (a2 - a1) * (cb - b1) - (b2 - b1) * (ca - a1)
    w1 = (a0 - a2) * (cb - b2) - (b0 - b2) * (ca - a2)
    w2 = (a1 - a0) * (cb - b0) - (b1 - b0) * (ca - a0)
    lam = np.stack([w0, w1, w2], axis=1) / area[:, None]
    inside = np.all(lam >= 0.0, axis=1)
    return ids[owner[inside]], (ia * nb + ib)[inside], lam[inside]


def _resolve(tri, pix, depth, bary, size):
    """Nearest fragment per pixel; equal depth keeps the lower triangle id."""
    best_depth = np.full(size, np.inf)
    best_tri = np.full(size, -1, dtype=np.int64)
    best_bary = np.zeros((size, 3))
    if len(tri):
        order = np.lexsort((tri, depth, pix))
        pix_sorted = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix_sorted[1:] != pix_sorted[:-1]
        sel = order[first]
        best_depth[pix[sel]] = depth[sel]
        best_tri[pix[sel]] = tri[sel]
        best_bary[pix[sel]] = bary[sel]
    return best_depth, best_tri, best_bary


def _merge(acc, part):
    depth, tri, bary = acc
    p_depth, p_tri, p_bary = part
    # chunks arrive in increasing triangle id, so a tie keeps the earlier one
    win = p_depth < depth
    depth[win] = p_depth[win]
    tri[win] = p_tri[win]
    bary[win] = p_bary[win]


def rasterize(mesh, cam, cull_backfaces=False, threads=1, near=NEAR, far=FAR):
    """
    Perspective rasterization of a triangle mesh.

    Triangles with any vertex closer than near (or beyond far) are culled
    whole; there is no clipping.

    Args:
        mesh: TriMesh (world frame)
        cam: PinholeCamera
        cull_backfaces: Drop triangles facing away from the camera
        threads: Worker threads over fragment chunks

    Returns:
        FrameBuffer
    """
    W, H = cam.width, cam.height
    size = W * H
    depth_buf = np.full(size, np.inf)
    tri_buf = np.full(size, -1, dtype=np.int64)
    bary_buf = np.zeros((size, 3))
    if mesh.is_empty:
        return FrameBuffer(W, H, depth_buf.reshape(H, W), tri_buf.reshape(H, W), bary_buf.reshape(H, W, 3), mesh)

    u, v, z, _ = cam.project(mesh.vertices)
    tz = z[mesh.triangles]
    keep = np.all((tz >= near) & (tz <= far), axis=1)
    if cull_backfaces:
        centroids = mesh.corners().mean(axis=1)
        keep &= np.einsum("ij,ij->i", mesh.face_normals(), centroids - cam.position) < 0
    ids = np.flatnonzero(keep)
    tris = mesh.triangles[ids]
    pa = v[tris]
    pb = u[tris]
    tw = tz[ids]
    area = (pa[:, 1] - pa[:, 0]) * (pb[:, 2] - pb[:, 0]) - (pb[:, 1] - pb[:, 0]) * (pa[:, 2] - pa[:, 0])
    good = np.abs(area) > AREA_EPS
    ids, pa, pb, tw = ids[good], pa[good], pb[good], tw[good]
    inv_w_all = 1.0 / tw

    _, wa, _, wb = _pixel_bounds(pa, pb, H, W)
    runs = _chunks((wa * wb).tolist(), FRAGMENT_CHUNK)

    def work(run):
        s, e = run
        tri, pix, lam = _fragments(pa[s:e], pb[s:e], np.arange(s, e), H, W)
        inv_w = inv_w_all[tri]
        q = lam * inv_w
        qs = q.sum(axis=1)
        return _resolve(ids[tri], pix, 1.0 / qs, q / qs[:, None], size)

    acc = (depth_buf, tri_buf, bary_buf)
    if threads > 1 and len(runs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for part in pool.map(work, runs):
                _merge(acc, part)
    else:
        for run in runs:
            _merge(acc, work(run))

    fb = FrameBuffer(W, H, depth_buf.reshape(H, W), tri_buf.reshape(H, W), bary_buf.reshape(H, W, 3), mesh)
    logger.debug(f"Rasterized {len(ids)} triangles into {W}x{H}: {int(fb.covered.sum())} covered pixels")
    return fb


def ortho_height_raster(mesh, res):
    """
    Top-down orthographic rasterization over [-1, 1]^2 keeping the maximum z.

    Pixel [u, v] is centered at the height-grid cell centers; pixels not
    covered by any triangle are invalid.

    Returns:
        HeightMap
    """
    heights = np.full(res * res, -np.inf)
    if not mesh.is_empty:
        c = mesh.corners()
        pa = (c[:, :, 0] + 1.0) * 0.5 * res
        pb = (c[:, :, 1] + 1.0) * 0.5 * res
        area = (pa[:, 1] - pa[:, 0]) * (pb[:, 2] - pb[:, 0]) - (pb[:, 1] - pb[:, 0]) * (pa[:, 2] - pa[:, 0])
        good = np.flatnonzero(np.abs(area) > AREA_EPS)
        _, wa, _, wb = _pixel_bounds(pa[good], pb[good], res, res)
        for s, e in _chunks((wa * wb).tolist(), FRAGMENT_CHUNK):
            sel = good[s:e]
            tri, pix, lam = _fragments(pa[sel], pb[sel], sel, res, res)
            z = np.einsum("pk,pk->p", lam, c[tri, :, 2])
            np.maximum.at(heights, pix, z)
    heights = heights.reshape(res, res)
    valid = np.isfinite(heights)
    heights[~valid] = 0.0
    return HeightMap(res, heights, valid)


def atlas_footprint(uv, width, height):
    """
    Bilinear texel footprint of UV samples.

    Texel centers sit at s = (col + 0.5) / width, t = 1 - (row + 0.5) / height
    (t grows upward, rows downward); lookups clamp to the edge.

    Args:
        uv: (P, 2) texture coordinates
        width, height: Atlas size

    Returns:
        (flat texel indices (P, 4), weights (P, 4))
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    col = uv[:, 0] * width - 0.5
    row = (1.0 - uv[:, 1]) * height - 0.5
    c0 = np.floor(col)
    r0 = np.floor(row)
    fc = col - c0
    fr = row - r0
    c0 = c0.astype(np.int64)
    r0 = r0.astype(np.int64)
    cs = [np.clip(c0, 0, width - 1), np.clip(c0 + 1, 0, width - 1)]
    rs = [np.clip(r0, 0, height - 1), np.clip(r0 + 1, 0, height - 1)]
    idx = np.stack([rs[0] * width + cs[0], rs[0] * width + cs[1], rs[1] * width + cs[0], rs[1] * width + cs[1]],
                   axis=1)
    weights = np.stack([(1 - fc) * (1 - fr), fc * (1 - fr), (1 - fc) * fr, fc * fr], axis=1)
    return idx, weights


def sample_atlas(rgb, uv):
    """Bilinear lookup of an (H, W, 3) atlas at (P, 2) uvs."""
    h, w = rgb.shape[:2]
    idx, wts = atlas_footprint(uv, w, h)
    flat = rgb.reshape(-1, rgb.shape[-1])
    return np.einsum("pk,pkc->pc", wts, flat[idx])


@dataclass
class VisibilityMap:
    """Covered pixels of one view with their triangle, barycentrics and atlas footprint."""
    pixels: np.ndarray
    tri_id: np.ndarray
    bary: np.ndarray
    texels: np.ndarray
    weights: np.ndarray


def visibility_map(fb, atlas_width, atlas_height):
    mask = fb.covered.ravel()
    pixels = np.flatnonzero(mask)
    uv = fb.uvs().reshape(-1, 2)[pixels]
    texels, weights = atlas_footprint(uv, atlas_width, atlas_height)
    return VisibilityMap(pixels, fb.tri_id.ravel()[pixels], fb.bary.reshape(-1, 3)[pixels], texels, weights)


def render_with_atlas(mesh, atlas, cam, background=(0.0, 0.0, 0.0), fb=None, threads=1):
    """
    Render the textured mesh.

    Returns:
        (H, W, 3) float image in [0, 1]
    """
    if mesh.uvs is None:
        raise ValueError("mesh has no uvs")
    fb = fb or rasterize(mesh, cam, threads=threads)
    img = np.empty((fb.height, fb.width, 3))
    img[:] = background
    mask = fb.covered
    img[mask] = sample_atlas(atlas.rgb, fb.uvs()[mask])
    return img


def to_uint8(img):
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_rgb(img, path):
    Image.fromarray(to_uint8(img)).save(path)


def load_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_channel_png(fb, channel, path):
    """
    Export one framebuffer channel as PNG.

    Encodings:
        depth, height: 16-bit gray, linearly mapped from the covered-pixel
            [min, max] range; exact float values go to a .npy sidecar
        normal: 8-bit RGB, (n + 1) / 2 * 255
        uv: 8-bit RGB, (s, t, 0) * 255
        rgb: 8-bit RGB of face colours
        mask: 8-bit gray, 255 where covered

    Background pixels are 0 in every encoding.
    """
    mask = fb.covered
    if channel in ("depth", "height"):
        values = fb.depth if channel == "depth" else fb.heights()
        np.save(path.rsplit(".", 1)[0] + ".npy", np.where(mask, values, np.nan))
        out = np.zeros(values.shape, dtype=np.uint16)
        if mask.any():
            lo, hi = values[mask].min(), values[mask].max()
            scale = 65535.0 / (hi - lo) if hi > lo else 0.0
            out[mask] = np.round((values[mask] - lo) * scale).astype(np.uint16)
        Image.fromarray(out).save(path)
    elif channel == "normal":
        save_rgb(np.where(mask[..., None], (fb.normals() + 1.0) * 0.5, 0.0), path)
    elif channel == "uv":
        uv = fb.uvs()
        save_rgb(np.concatenate([uv, np.zeros(uv.shape[:2] + (1,))], axis=-1), path)
    elif channel == "rgb":
        save_rgb(fb.colors(), path)
    elif channel == "mask":
        Image.fromarray(mask.astype(np.uint8) * 255).save(path)
    else:
        raise ValueError(f"unknown channel {channel!r}")
    logger.debug(f"Saved {channel} channel to {path}")
