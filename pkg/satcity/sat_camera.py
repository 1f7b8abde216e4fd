"""
Pinhole cameras and satellite / test / novel-view capture grids.

Camera frame follows the OpenCV convention: x right, y down, z forward.
rotation maps world vectors into that frame, so its rows are the right, down
and forward axes expressed in world coordinates.

Angles: heading is measured clockwise from north (+y), so 90 degrees looks
east (+x); depression is the angle below the horizon (90 = nadir).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import CameraFileError

logger = logging.getLogger(__name__)

CAMERA_FILE_MAGIC = "SATCAM"
CAMERA_FILE_VERSION = 1
FOV_QUANTUM_DEG = 0.01

# satellite capture defaults
SAT_ALTITUDE = 2000.0
SAT_WIDTH = 2560
SAT_HEIGHT = 1440
SAT_GSD = 0.31
SAT_FOV_DEG = 22.42
SAT_OVERLAP = 0.6
SAT_STRIDE = 317.44
SAT_DEPRESSION = 89.0
SAT_HEADINGS = (180.0, 270.0)

# oblique test-view defaults
TEST_ALTITUDES = (200.0, 500.0)
TEST_FOV_DEG = 45.0
TEST_DEPRESSION = 45.0
TEST_INTERVAL = 45.01
TEST_WIDTH = 1920
TEST_HEIGHT = 1080
CARDINAL_HEADINGS = (0.0, 90.0, 180.0, 270.0)


@dataclass
class PinholeCamera:
    position: np.ndarray
    rotation: np.ndarray
    width: int
    height: int
    fov_deg: float
    cx: float = None
    cy: float = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0
        self.validate()

    def validate(self):
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError(f"fov must lie in (0, 180) degrees, got {self.fov_deg}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation is not orthonormal (error {err:.2e})")

    @property
    def focal(self):
        """Focal length in pixels (square pixels, fx = fy)."""
        return (self.width / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)

    @property
    def forward(self):
        return self.rotation[2]

    def to_camera(self, points):
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation.T

    def project(self, points):
        """
        Project world points into pixel coordinates.

        Args:
            points: (3,) or (N, 3) world points

        Returns:
            (u, v, depth, in_front); depth is the forward camera-space distance
        """
        pc = np.atleast_2d(self.to_camera(points))
        depth = pc[:, 2]
        in_front = depth > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal * pc[:, 0] / depth + self.cx
            v = self.focal * pc[:, 1] / depth + self.cy
        if np.ndim(points) == 1:
            return float(u[0]), float(v[0]), float(depth[0]), bool(in_front[0])
        return u, v, depth, in_front

    def unproject(self, u, v, depth):
        """Inverse of project at a given forward depth; returns world points."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        pc = np.stack([(u - self.cx) / self.focal * depth, (v - self.cy) / self.focal * depth, depth], axis=-1)
        return pc @ self.rotation + self.position

    def pixel_rays(self):
        """World-space unit ray directions through every pixel center, shape (H, W, 3)."""
        jj, ii = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d = np.stack([(jj - self.cx) / self.focal, (ii - self.cy) / self.focal, np.ones_like(jj)], axis=-1)
        d = d @ self.rotation
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def footprint_polygon(self, ground_z=0.0):
        """Ground-plane intersections of the four image-corner rays (None if any misses)."""
        corners = np.array([[0, 0], [self.width, 0], [self.width, self.height], [0, self.height]], dtype=float)
        pts = self.unproject(corners[:, 0], corners[:, 1], np.ones(4))
        rays = pts - self.position
        if np.any(rays[:, 2] >= 0):
            return None
        t = (ground_z - self.position[2]) / rays[:, 2]
        return self.position + t[:, None] * rays

    def to_dict(self):
        return {
            "position": self.position.tolist(),
            "rotation": self.rotation.tolist(),
            "width": self.width,
            "height": self.height,
            "fov_deg": self.fov_deg,
            "cx": self.cx,
            "cy": self.cy,
        }


@dataclass
class CaptureGrid:
    cameras: List[PinholeCamera] = field(default_factory=list)
    stride: float = 0.0
    overlap: float = 0.0
    sites: np.ndarray = None

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)


def rotation_from_angles(heading_deg, depression_deg, roll_deg=0.0):
    """World->camera rotation for a heading / depression / roll triple."""
    h = math.radians(heading_deg)
    d = math.radians(depression_deg)
    forward = np.array([math.sin(h) * math.cos(d), math.cos(h) * math.cos(d), -math.sin(d)])
    right = np.array([math.cos(h), -math.sin(h), 0.0])
    down = np.cross(forward, right)
    if roll_deg:
        spin = Rotation.from_rotvec(forward * math.radians(roll_deg))
        right, down = spin.apply(right), spin.apply(down)
    return np.stack([right, down, forward])


def camera_from_angles(position, heading_deg, depression_deg, width, height, fov_deg, roll_deg=0.0):
    return PinholeCamera(position, rotation_from_angles(heading_deg, depression_deg, roll_deg),
                         width, height, fov_deg)


def look_rotation(forward, up=(0.0, 0.0, 1.0)):
    """Rotation whose optical axis is forward, with image-up as close to up as possible."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    right = np.cross(f, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(f, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    return np.stack([right, np.cross(f, right), f])


def look_at(position, target, width, height, fov_deg, up=(0.0, 0.0, 1.0)):
    position = np.asarray(position, dtype=np.float64)
    return PinholeCamera(position, look_rotation(np.asarray(target) - position, up), width, height, fov_deg)


def aimed_camera(target, altitude, heading_deg, depression_deg, width, height, fov_deg):
    """Camera at the given altitude above target whose optical axis passes through target."""
    rot = rotation_from_angles(heading_deg, depression_deg)
    distance = altitude / math.sin(math.radians(depression_deg))
    position = np.asarray(target, dtype=np.float64) - rot[2] * distance
    return PinholeCamera(position, rot, width, height, fov_deg)


def fov_from_gsd(altitude, width, gsd):
    """Horizontal FOV (degrees) giving the requested ground sampling distance at nadir."""
    if min(altitude, width, gsd) <= 0:
        raise ValueError("altitude, width and gsd must be positive")
    return math.degrees(2.0 * math.atan(width * gsd / (2.0 * altitude)))


def gsd_from_fov(altitude, width, fov_deg):
    return footprint_width(altitude, fov_deg) / width


def footprint_width(altitude, fov_deg):
    return 2.0 * altitude * math.tan(math.radians(fov_deg) / 2.0)


def capture_stride(altitude, width, gsd, overlap, fov_deg=None):
    """
    Distance between neighbouring capture sites for a horizontal overlap.

    The footprint is W * gsd, or the footprint of fov_deg when the capture
    camera's configured FOV is given (configured FOVs are quantized to
    FOV_QUANTUM_DEG).

    Returns:
        Stride in metres
    """
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    if fov_deg is None:
        length = width * gsd
    else:
        fov_deg = round(fov_deg / FOV_QUANTUM_DEG) * FOV_QUANTUM_DEG
        length = footprint_width(altitude, fov_deg)
    return (1.0 - overlap) * length


def site_positions(lo, hi, stride):
    """
    Regular site grid covering an xy box, centered on it.

    n = ceil(extent / stride) sites per axis (at least 1).

    Returns:
        (N, 2) site coordinates, x-major
    """
    lo = np.asarray(lo, dtype=np.float64)[:2]
    hi = np.asarray(hi, dtype=np.float64)[:2]
    if np.any(hi < lo):
        raise ValueError("empty region")
    axes = []
    for a in range(2):
        extent = hi[a] - lo[a]
        n = max(1, math.ceil(extent / stride - 1e-9)) if math.isfinite(stride) else 1
        center = 0.5 * (lo[a] + hi[a])
        axes.append(center + (np.arange(n) - (n - 1) / 2.0) * stride)
    xx, yy = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def training_grid(lo, hi, altitude=SAT_ALTITUDE, fov_deg=SAT_FOV_DEG, stride=SAT_STRIDE,
                  width=SAT_WIDTH, height=SAT_HEIGHT, depression_deg=SAT_DEPRESSION,
                  headings=SAT_HEADINGS, ground_z=0.0, overlap=SAT_OVERLAP):
    """
    Near-nadir satellite captures: one site per stride cell, one camera per
    heading at each site (1 degree off-nadir by default).

    Returns:
        CaptureGrid
    """
    sites = site_positions(lo, hi, stride)
    cams = [camera_from_angles([x, y, ground_z + altitude], h, depression_deg, width, height, fov_deg)
            for x, y in sites for h in headings]
    logger.info(f"Training grid: {len(sites)} sites, {len(cams)} cameras, stride {stride:.2f} m")
    return CaptureGrid(cams, stride, overlap, sites)


def diagonal_sites(lo, hi, interval):
    """Sites along the region diagonal at a fixed interval, centered."""
    lo = np.asarray(lo, dtype=np.float64)[:2]
    hi = np.asarray(hi, dtype=np.float64)[:2]
    extent = float(min(hi - lo))
    n = int(math.floor(extent / interval + 1e-9)) + 1
    offsets = (np.arange(n) - (n - 1) / 2.0) * interval
    center = 0.5 * (lo + hi)
    return center + offsets[:, None] * np.ones(2)


def test_grid(lo, hi, altitudes=TEST_ALTITUDES, fov_deg=TEST_FOV_DEG, depression_deg=TEST_DEPRESSION,
              interval=TEST_INTERVAL, width=TEST_WIDTH, height=TEST_HEIGHT, headings=CARDINAL_HEADINGS,
              layout="diagonal", ground_z=0.0):
    """
    Oblique evaluation views aimed at sites inside the region.

    layout "diagonal" places sites along the region diagonal; "grid" uses a
    full square grid at the same interval.

    Returns:
        CaptureGrid
    """
    if layout == "diagonal":
        sites = diagonal_sites(lo, hi, interval)
    elif layout == "grid":
        sites = site_positions(lo, hi, interval)
    else:
        raise ValueError(f"unknown test layout {layout!r}")
    cams = [aimed_camera([x, y, ground_z], alt, h, depression_deg, width, height, fov_deg)
            for alt in altitudes for x, y in sites for h in headings]
    logger.info(f"Test grid ({layout}): {len(sites)} sites, {len(cams)} cameras")
    return CaptureGrid(cams, interval, 0.0, sites)


def save_cameras(cameras, path):
    """
    Write cameras as text.

    Format: header "SATCAM 1", then one line per camera:
        px py pz qx qy qz qw width height fov_deg cx cy
    with q the world->camera rotation quaternion (scalar last).
    """
    lines = [f"{CAMERA_FILE_MAGIC} {CAMERA_FILE_VERSION}"]
    for cam in cameras:
        q = Rotation.from_matrix(cam.rotation).as_quat()
        vals = [*cam.position, *q]
        lines.append(" ".join(repr(float(v)) for v in vals)
                     + f" {cam.width} {cam.height} {float(cam.fov_deg)!r} {float(cam.cx)!r} {float(cam.cy)!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    logger.info(f"Wrote {len(cameras)} cameras to {path}")


def load_cameras(path):
    with open(path, "r") as f:
        lines = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise CameraFileError(f"{path}: empty camera file")
    header = lines[0].split()
    if len(header) != 2 or header[0] != CAMERA_FILE_MAGIC:
        raise CameraFileError(f"{path}: missing {CAMERA_FILE_MAGIC} header")
    if header[1] != str(CAMERA_FILE_VERSION):
        raise CameraFileError(f"{path}: unsupported camera file version {header[1]}")
    cams = []
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if len(parts) != 12:
            raise CameraFileError(f"{path}:{lineno}: expected 12 fields, found {len(parts)}")
        try:
            vals = [float(p) for p in parts]
            rot = Rotation.from_quat(vals[3:7]).as_matrix()
            cams.append(PinholeCamera(vals[0:3], rot, int(parts[7]), int(parts[8]), vals[9], vals[10], vals[11]))
        except ValueError as e:
            raise CameraFileError(f"{path}:{lineno}: {e}")
    return cams


# not a pytest test
test_grid.__test__ = False
