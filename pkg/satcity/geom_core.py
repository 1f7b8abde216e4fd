"""
Shared geometric primitives, coordinate normalization and mesh / point-cloud I/O.

Conventions: right-handed world frame, +z up, metres. Normalized frame maps the
scene into [-1, 1]^3. Height grids are indexed [u, v] with u along x and v
along y.
"""
import logging
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from .errors import (EmptyInputError, NonFiniteError, ObjFormatError, PlyFormatError,
                     PlyHeaderError, PlyTruncatedError)

logger = logging.getLogger(__name__)

# face_groups labels
GROUP_TOP = 0
GROUP_WALL = 1
GROUP_BOTTOM = 2


class Frame(Enum):
    WORLD = "world"
    NORMALIZED = "normalized"


@dataclass
class PointCloud:
    points: np.ndarray
    frame: Frame = Frame.WORLD

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.points)

    def bounds(self):
        return self.points.min(axis=0), self.points.max(axis=0)


@dataclass
class TriMesh:
    """
    Indexed triangle mesh.

    Optional per-vertex uvs, per-face group labels (top / wall / bottom) and
    per-face RGB colours travel with the mesh through extraction and merging.
    """
    vertices: np.ndarray
    triangles: np.ndarray
    uvs: Optional[np.ndarray] = None
    face_groups: Optional[np.ndarray] = None
    face_colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.uvs is not None:
            self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def corners(self):
        """Return the (F, 3, 3) array of triangle corner positions."""
        return self.vertices[self.triangles]

    def face_cross(self):
        c = self.corners()
        return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self):
        cross = self.face_cross()
        norm = np.linalg.norm(cross, axis=1, keepdims=True)
        return np.divide(cross, norm, out=np.zeros_like(cross), where=norm > 0)

    def area(self):
        return float(self.face_areas().sum())

    def signed_volume(self):
        c = self.corners()
        return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)

    def bounds(self):
        used = self.vertices[np.unique(self.triangles)] if len(self.triangles) else self.vertices
        return used.min(axis=0), used.max(axis=0)

    def validate(self):
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if self.uvs is not None and len(self.uvs) != len(self.vertices):
            raise ValueError("uvs must be per-vertex")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("non-finite vertex")

    def select_faces(self, keep):
        """Return a mesh restricted to the faces where keep is true (vertices untouched)."""
        keep = np.asarray(keep, dtype=bool)
        return replace(
            self,
            triangles=self.triangles[keep],
            face_groups=None if self.face_groups is None else self.face_groups[keep],
            face_colors=None if self.face_colors is None else self.face_colors[keep],
        )

    def drop_degenerate(self, eps=1e-14):
        areas = self.face_areas()
        keep = areas > eps
        dropped = int((~keep).sum())
        if dropped:
            logger.debug(f"Dropping {dropped} degenerate triangles")
        return self.select_faces(keep)

    def compact(self):
        """Remove unreferenced vertices and renumber triangles."""
        used, inverse = np.unique(self.triangles, return_inverse=True)
        return replace(
            self,
            vertices=self.vertices[used],
            triangles=inverse.reshape(-1, 3),
            uvs=None if self.uvs is None else self.uvs[used],
        )

    def flipped(self):
        return replace(self, triangles=self.triangles[:, ::-1].copy())


def concatenate_meshes(meshes):
    """Concatenate meshes; optional per-face arrays survive only if every mesh has them."""
    meshes = [m for m in meshes if len(m.vertices)]
    if not meshes:
        return TriMesh.empty()
    offsets = np.cumsum([0] + [len(m.vertices) for m in meshes[:-1]])
    tris = np.concatenate([m.triangles + o for m, o in zip(meshes, offsets)])
    verts = np.concatenate([m.vertices for m in meshes])

    def _join(attr):
        parts = [getattr(m, attr) for m in meshes]
        return None if any(p is None for p in parts) else np.concatenate(parts)

    return TriMesh(verts, tris, uvs=_join("uvs"), face_groups=_join("face_groups"),
                   face_colors=_join("face_colors"))


@dataclass
class HeightMap:
    """R x R height grid with validity mask (the pixel set Omega)."""
    res: int
    heights: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=np.float64)
        if self.valid is None:
            self.valid = np.ones_like(self.heights, dtype=bool)
        if self.heights.shape != (self.res, self.res) or self.valid.shape != (self.res, self.res):
            raise ValueError(f"height map arrays must be {self.res}x{self.res}")

    @property
    def valid_fraction(self):
        return float(self.valid.mean())

    @staticmethod
    def cell_centers(res):
        """Normalized coordinate of each cell center along one axis."""
        return -1.0 + (np.arange(res) + 0.5) * (2.0 / res)


@dataclass
class NormalizeTransform:
    """
    world -> normalized: (p - offset) * scale.

    scale is a per-axis vector; x and y always share one factor.
    """
    scale: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        self.scale = np.broadcast_to(np.asarray(self.scale, dtype=np.float64), (3,)).copy()
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(3)
        if np.any(self.scale <= 0):
            raise ValueError("scale must be positive")

    def to_normalized(self, points):
        return (np.asarray(points, dtype=np.float64) - self.offset) * self.scale

    def to_world(self, points):
        return np.asarray(points, dtype=np.float64) / self.scale + self.offset

    def mesh_to_world(self, mesh):
        return replace(mesh, vertices=self.to_world(mesh.vertices))

    def mesh_to_normalized(self, mesh):
        return replace(mesh, vertices=self.to_normalized(mesh.vertices))

    def to_dict(self):
        return {"scale": self.scale.tolist(), "offset": self.offset.tolist()}

    @classmethod
    def from_json(cls, data):
        return cls(np.array(data["scale"]), np.array(data["offset"]))


def check_finite(points):
    bad = ~np.all(np.isfinite(points), axis=1)
    if bad.any():
        raise NonFiniteError(int(np.argmax(bad)))


def transform_for_bounds(lo, hi, padding=0.0, isotropic=False):
    """
    Build the transform mapping the box [lo, hi] into [-1 + 2p, 1 - 2p]^3.

    Args:
        lo, hi: Box corners (world)
        padding: Fraction in [0, 0.5)
        isotropic: Use one scale for all axes instead of xy-shared + z

    Returns:
        NormalizeTransform
    """
    if not 0.0 <= padding < 0.5:
        raise ValueError(f"padding must lie in [0, 0.5), got {padding}")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    reach = 1.0 - 2.0 * padding

    def _scale(h):
        return reach / h if h > 0 else 1.0

    if isotropic:
        s = _scale(float(half.max()))
        scale = np.array([s, s, s])
    else:
        sxy = _scale(float(max(half[0], half[1])))
        scale = np.array([sxy, sxy, _scale(float(half[2]))])
    return NormalizeTransform(scale=scale, offset=center)


def normalize_cloud(cloud, padding=0.0, isotropic=False):
    """
    Normalize a world-frame cloud into [-1, 1]^3.

    Args:
        cloud: PointCloud in the world frame
        padding: Fraction in [0, 0.5); output lies in [-1 + 2p, 1 - 2p]
        isotropic: Share one scale across all three axes

    Returns:
        (normalized PointCloud, NormalizeTransform)
    """
    if len(cloud) == 0:
        raise EmptyInputError("empty input")
    check_finite(cloud.points)
    lo, hi = cloud.bounds()
    transform = transform_for_bounds(lo, hi, padding, isotropic=isotropic)
    normalized = np.clip(transform.to_normalized(cloud.points), -1.0, 1.0)
    return PointCloud(normalized, Frame.NORMALIZED), transform


def denormalize_cloud(cloud, transform):
    return PointCloud(transform.to_world(cloud.points), Frame.WORLD)


# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(f):
    magic = f.readline().strip()
    if magic != b"ply":
        raise PlyFormatError(f"unsupported format magic {magic[:16]!r}")

    fmt = None
    elements = []
    while True:
        raw = f.readline()
        if not raw:
            raise PlyHeaderError("missing end_header")
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        keyword = parts[0]
        if keyword == "end_header":
            break
        if keyword == "format":
            if len(parts) != 3:
                raise PlyHeaderError(f"malformed format line: {raw!r}")
            fmt = parts[1]
        elif keyword == "element":
            if len(parts) != 3:
                raise PlyHeaderError(f"malformed element line: {raw!r}")
            try:
                count = int(parts[2])
            except ValueError:
                raise PlyHeaderError(f"bad element count: {raw!r}")
            elements.append({"name": parts[1], "count": count, "props": []})
        elif keyword == "property":
            if not elements:
                raise PlyHeaderError("property before any element")
            if parts[1] == "list":
                if len(parts) != 5:
                    raise PlyHeaderError(f"malformed list property: {raw!r}")
                elements[-1]["props"].append((parts[4], "list", parts[2], parts[3]))
            else:
                if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                    raise PlyHeaderError(f"malformed property line: {raw!r}")
                elements[-1]["props"].append((parts[2], parts[1]))
        else:
            raise PlyHeaderError(f"unknown header keyword {keyword!r}")

    if fmt is None:
        raise PlyHeaderError("missing format line")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyFormatError(f"unsupported storage format {fmt!r}")
    return fmt, elements


def read_ply(path):
    """
    Read the vertex positions of a PLY file.

    Supports ascii and binary_little_endian with float/double x, y, z.
    Extra vertex properties are ignored.

    Args:
        path: File path

    Returns:
        PointCloud in the world frame
    """
    with open(path, "rb") as f:
        fmt, elements = _parse_ply_header(f)
        body = f.read()

    names = [e["name"] for e in elements]
    if "vertex" not in names:
        raise PlyHeaderError("no vertex element")
    vertex = elements[names.index("vertex")]
    prop_names = [p[0] for p in vertex["props"]]
    for axis in ("x", "y", "z"):
        if axis not in prop_names:
            raise PlyHeaderError(f"vertex element lacks property {axis!r}")
    if any(len(p) != 2 for p in vertex["props"]):
        raise PlyHeaderError("list properties on vertices are not supported")
    expected = vertex["count"]

    if fmt == "ascii":
        lines = [ln for ln in body.decode("ascii", errors="replace").splitlines() if ln.strip()]
        skip = sum(e["count"] for e in elements[:names.index("vertex")])
        rows = lines[skip:skip + expected]
        if len(rows) < expected:
            raise PlyTruncatedError(expected, len(rows))
        cols = [prop_names.index(a) for a in ("x", "y", "z")]
        try:
            table = np.array([[float(r.split()[c]) for c in cols] for r in rows], dtype=np.float64)
        except (ValueError, IndexError) as e:
            raise PlyFormatError(f"malformed ascii vertex row: {e}")
        points = table.reshape(-1, 3)
    else:
        offset = 0
        for e in elements[:names.index("vertex")]:
            if any(len(p) != 2 for p in e["props"]):
                raise PlyFormatError(f"cannot skip variable-size element {e['name']!r} before vertices")
            offset += e["count"] * np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in e["props"]]).itemsize
        dtype = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in vertex["props"]])
        available = max(0, (len(body) - offset) // dtype.itemsize)
        if available < expected:
            raise PlyTruncatedError(expected, available)
        table = np.frombuffer(body, dtype=dtype, count=expected, offset=offset)
        points = np.stack([table["x"], table["y"], table["z"]], axis=1).astype(np.float64)

    logger.info(f"Read {len(points)} points from {path}")
    return PointCloud(points, Frame.WORLD)


def write_ply(cloud, path, binary=True, precision="double"):
    """
    Write point positions to PLY.

    Args:
        cloud: PointCloud
        path: Output path
        binary: binary_little_endian when true, ascii otherwise
        precision: "double" or "float" property type
    """
    points = np.asarray(cloud.points, dtype=np.float64)
    ptype = {"double": "f8", "float": "f4"}[precision]
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {len(points)}\n"
        f"property {precision} x\nproperty {precision} y\nproperty {precision} z\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            f.write(points.astype("<" + ptype).tobytes())
        else:
            for p in points.astype(ptype):
                f.write(" ".join(repr(float(v)) for v in p).encode("ascii") + b"\n")
    logger.info(f"Wrote {len(points)} points to {path}")


# OBJ

def write_obj(mesh, path, material=None):
    """
    Export a mesh as Wavefront OBJ.

    Args:
        mesh: TriMesh; uvs, when present, become vt records
        path: Output .obj path
        material: Optional atlas image path; emits a sibling .mtl referencing it
    """
    mesh.validate()
    base = os.path.splitext(path)[0]
    lines = ["# satcity mesh"]
    if material is not None:
        mtl_path = base + ".mtl"
        atlas_name = os.path.relpath(material, os.path.dirname(os.path.abspath(path)))
        with open(mtl_path, "w") as f:
            f.write("newmtl atlas\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nillum 1\n")
            f.write(f"map_Kd {atlas_name}\n")
        lines.append(f"mtllib {os.path.basename(mtl_path)}")
    lines.extend(f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices)
    has_uv = mesh.uvs is not None
    if has_uv:
        lines.extend(f"vt {s:.17g} {t:.17g}" for s, t in mesh.uvs)
    if material is not None:
        lines.append("usemtl atlas")
    for a, b, c in mesh.triangles + 1:
        if has_uv:
            lines.append(f"f {a}/{a} {b}/{b} {c}/{c}")
        else:
            lines.append(f"f {a} {b} {c}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    logger.info(f"Wrote mesh with {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles to {path}")


def read_obj(path):
    """
    Read an OBJ mesh. Polygons are fan-triangulated; vt indices are honoured
    only when every face vertex uses the same index for v and vt.

    Returns:
        TriMesh
    """
    verts, uvs, faces = [], [], []
    shared_uv = True
    with open(path, "r") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(v) for v in parts[1:4]])
                elif parts[0] == "vt":
                    uvs.append([float(v) for v in parts[1:3]])
                elif parts[0] == "f":
                    idx = []
                    for token in parts[1:]:
                        fields_ = token.split("/")
                        vi = int(fields_[0])
                        vi = vi - 1 if vi > 0 else len(verts) + vi
                        if len(fields_) > 1 and fields_[1]:
                            ti = int(fields_[1])
                            ti = ti - 1 if ti > 0 else len(uvs) + ti
                            shared_uv &= ti == vi
                        idx.append(vi)
                    faces.extend([idx[0], idx[i], idx[i + 1]] for i in range(1, len(idx) - 1))
            except (ValueError, IndexError):
                raise ObjFormatError(f"{path}:{lineno}: malformed record {line.strip()!r}")
    use_uv = bool(uvs) and shared_uv and len(uvs) == len(verts)
    mesh = TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3),
                   uvs=np.array(uvs) if use_uv else None)
    mesh.validate()
    logger.info(f"Read mesh with {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles from {path}")
    return mesh
