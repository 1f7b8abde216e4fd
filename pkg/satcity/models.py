import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)

PSNR_SENTINEL_DB = 99.0
CHAMFER_CONVENTION = "sum of mean nearest-neighbour distances (a->b + b->a)"


def save_json(path, payload):
    """
    Write a report (or any JSON-serializable dict) to disk.

    Args:
        path: Output file path
        payload: Object with a to_dict() method, or a plain dict
    """
    data = payload.to_dict() if hasattr(payload, "to_dict") else payload
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
    logger.debug(f"Wrote {path}")


def load_json(path):
    with open(path, "r") as f:
        return json.load(f)


class _Record:
    """Shared dict conversion for report dataclasses."""

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_json(cls, json_data):
        """Create an instance from JSON data, ignoring unknown keys."""
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in json_data.items() if k in names})


@dataclass
class FitReport(_Record):
    """Per-step loss series of one Z-monotonic field fit."""
    height: List[float] = field(default_factory=list)
    laplacian: List[float] = field(default_factory=list)
    normal: List[float] = field(default_factory=list)
    total: List[float] = field(default_factory=list)
    wall_time: float = 0.0
    height_rmse: float = 0.0
    best_step: int = 0
    valid_fraction: float = 0.0
    tile: Optional[str] = None
    degenerate: bool = False

    def record(self, height, laplacian, normal, total):
        self.height.append(float(height))
        self.laplacian.append(float(laplacian))
        self.normal.append(float(normal))
        self.total.append(float(total))

    @property
    def steps(self):
        return len(self.total)


@dataclass
class WatertightReport(_Record):
    boundary_edge_count: int = 0
    non_manifold_edge_count: int = 0
    connected_components: int = 0
    euler_characteristic: int = 0
    vertex_count: int = 0
    edge_count: int = 0
    face_count: int = 0

    @property
    def watertight(self):
        return self.boundary_edge_count == 0 and self.non_manifold_edge_count == 0

    def to_dict(self):
        data = asdict(self)
        data["watertight"] = self.watertight
        return data


@dataclass
class SeamReport(_Record):
    policy: str = "weld"
    tiles: int = 0
    welded_vertices: int = 0
    snapped_vertices: int = 0
    max_snap: float = 0.0
    seam_gap_edges: int = 0
    max_gap: float = 0.0


@dataclass
class BakeReport(_Record):
    losses: List[float] = field(default_factory=list)
    covered_texels: int = 0
    views: int = 0
    pixels: int = 0


@dataclass
class GeoMetricReport(_Record):
    """Precision / recall / F1 under d_tau plus symmetric chamfer distance."""
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    chamfer: float = 0.0
    d_tau: float = 0.036
    n_pred: int = 0
    n_gt: int = 0
    frame: str = "normalized (isotropic, ground-truth cloud bounds)"
    chamfer_convention: str = CHAMFER_CONVENTION

    @staticmethod
    def f_score(precision, recall):
        if precision + recall <= 0:
            return 0.0
        return 2.0 * precision * recall / (precision + recall)

    def to_row(self):
        return {
            "precision": f"{self.precision:.4f}",
            "recall": f"{self.recall:.4f}",
            "f1": f"{self.f1:.4f}",
            "chamfer": f"{self.chamfer:.5f}",
            "d_tau": f"{self.d_tau:g}",
        }


@dataclass
class ImgMetricReport(_Record):
    psnr: float = 0.0
    ssim: float = 0.0
    masked: bool = False
    views: int = 1

    def to_dict(self):
        data = asdict(self)
        # JSON has no infinity
        data["psnr"] = self.psnr if math.isfinite(self.psnr) else PSNR_SENTINEL_DB
        return data

    def to_row(self):
        psnr = self.psnr if math.isfinite(self.psnr) else PSNR_SENTINEL_DB
        return {"psnr": f"{psnr:.2f}", "ssim": f"{self.ssim:.4f}", "views": str(self.views)}


@dataclass
class RunManifest(_Record):
    """Everything needed to re-run one command identically."""
    command: str = ""
    args: Dict = field(default_factory=dict)
    config: Dict = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, Optional[str]] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    version: str = ""
    created: str = field(default_factory=lambda: datetime.now().isoformat())


def format_table(rows, names=None):
    """
    Render dict rows as an aligned-column text table.

    Args:
        rows: List of dicts sharing the same keys
        names: Optional row labels placed in a leading column

    Returns:
        Table text
    """
    if not rows:
        return ""
    keys = list(rows[0].keys())
    header = (["name"] if names else []) + keys
    body = []
    for i, row in enumerate(rows):
        cells = [str(row.get(k, "")) for k in keys]
        body.append(([str(names[i])] if names else []) + cells)
    widths = [max(len(r[c]) for r in [header] + body) for c in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header] + body]
    return "\n".join(lines) + "\n"
