"""
Geometry metrics (chamfer, precision / recall / F1 under a distance
threshold) and image metrics (PSNR, SSIM).
"""
import logging

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .errors import EmptyInputError
from .geom_core import Frame, PointCloud, normalize_cloud
from .models import GeoMetricReport, ImgMetricReport

logger = logging.getLogger(__name__)

D_TAU = 0.036
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_RADIUS = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def sample_mesh(mesh, n, seed=0):
    """
    Area-weighted uniform surface samples.

    Args:
        mesh: TriMesh
        n: Number of samples (>= 1)
        seed: RNG seed

    Returns:
        PointCloud (same frame as the mesh vertices)
    """
    if n < 1:
        raise ValueError("sample count must be >= 1")
    areas = mesh.face_areas() if not mesh.is_empty else np.zeros(0)
    total = areas.sum()
    if total <= 0:
        raise EmptyInputError("cannot sample a mesh without area")
    rng = np.random.default_rng(seed)
    faces = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    c = mesh.corners()[faces]
    pts = (1.0 - r1)[:, None] * c[:, 0] + (r1 * (1.0 - r2))[:, None] * c[:, 1] + (r1 * r2)[:, None] * c[:, 2]
    return PointCloud(pts)


def nearest_distances(query, reference, workers=1):
    """Exact Euclidean distance from every query point to its nearest reference point."""
    dist, _ = cKDTree(reference).query(query, k=1, workers=workers)
    return dist


def _require(*clouds):
    for c in clouds:
        if len(c) == 0:
            raise EmptyInputError("metric needs nonempty point clouds")


def chamfer(a, b, workers=1):
    """Symmetric chamfer distance: mean a->b nearest distance plus mean b->a."""
    _require(a, b)
    return float(nearest_distances(a.points, b.points, workers).mean()) + \
        float(nearest_distances(b.points, a.points, workers).mean())


def prf(pred, gt, d_tau=D_TAU, workers=1):
    """
    Precision, recall and F1 at threshold d_tau (strictly closer than d_tau).

    Returns:
        GeoMetricReport (chamfer filled in from the same distances)
    """
    if d_tau <= 0:
        raise ValueError("d_tau must be positive")
    _require(pred, gt)
    d_pred = nearest_distances(pred.points, gt.points, workers)
    d_gt = nearest_distances(gt.points, pred.points, workers)
    precision = float(np.mean(d_pred < d_tau))
    recall = float(np.mean(d_gt < d_tau))
    return GeoMetricReport(
        precision=precision,
        recall=recall,
        f1=GeoMetricReport.f_score(precision, recall),
        chamfer=float(d_pred.mean()) + float(d_gt.mean()),
        d_tau=d_tau,
        n_pred=len(pred),
        n_gt=len(gt),
    )


def evaluate_geometry(pred_mesh, gt_cloud, n_samples=200000, d_tau=D_TAU, seed=0, workers=1):
    """
    Geometry evaluation protocol.

    Both clouds are mapped into the isotropic normalized frame of the
    ground-truth cloud; predicted samples outside the ground-truth box grown
    by d_tau are discarded before scoring.

    Args:
        pred_mesh: Predicted TriMesh (world frame)
        gt_cloud: Ground-truth PointCloud (world frame)

    Returns:
        GeoMetricReport
    """
    gt_norm, transform = normalize_cloud(gt_cloud, isotropic=True)
    samples = sample_mesh(pred_mesh, n_samples, seed)
    pred = transform.to_normalized(samples.points)
    lo, hi = gt_norm.bounds()
    keep = np.all((pred >= lo - d_tau) & (pred <= hi + d_tau), axis=1)
    if not keep.any():
        raise EmptyInputError("no predicted samples fall inside the evaluation region")
    report = prf(PointCloud(pred[keep], Frame.NORMALIZED), gt_norm, d_tau, workers)
    logger.info(f"Geometry: P={report.precision:.4f} R={report.recall:.4f} F1={report.f1:.4f} "
                f"CD={report.chamfer:.5f} ({int(keep.sum())}/{n_samples} samples in region)")
    return report


def border_mask(height, width, border):
    """True everywhere except a border-pixel frame."""
    mask = np.zeros((height, width), dtype=bool)
    if 2 * border < min(height, width):
        mask[border:height - border, border:width - border] = True
    return mask


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, mask=None):
    """PSNR in dB with MAX = 1; +inf for identical (masked) images."""
    a, b = _check_pair(a, b)
    diff = (a - b) ** 2
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    mse = float(np.mean(diff))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _ssim_map(a, b):
    blur = lambda x: gaussian_filter(x, SSIM_SIGMA, truncate=SSIM_TRUNCATE)
    mu_a = blur(a)
    mu_b = blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b, mask=None):
    """
    Mean SSIM over valid window centers (11 x 11 Gaussian window, sigma 1.5).

    Window centers closer than 5 pixels to the image edge are excluded;
    colour images average the per-channel maps.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w = a.shape[:2]
    r = SSIM_RADIUS
    valid = border_mask(h, w, r)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise ValueError(f"image {w}x{h} too small for an {2 * r + 1}x{2 * r + 1} SSIM window")
    scores = [_ssim_map(a[..., c], b[..., c])[valid] for c in range(a.shape[2])]
    return float(np.mean(scores))


def image_metrics(preds, targets, border=0, masks=None):
    """
    Mean PSNR / SSIM over view pairs, with an optional boundary mask.

    Returns:
        ImgMetricReport
    """
    if len(preds) != len(targets) or not preds:
        raise ValueError("need equally many (>= 1) predicted and target views")
    psnrs, ssims = [], []
    for i, (p, t) in enumerate(zip(preds, targets)):
        mask = border_mask(p.shape[0], p.shape[1], border) if border else None
        if masks is not None:
            mask = masks[i] if mask is None else mask & masks[i]
        psnrs.append(psnr(p, t, mask))
        ssims.append(ssim(p, t, mask))
    return ImgMetricReport(psnr=float(np.mean(psnrs)), ssim=float(np.mean(ssims)),
                           masked=bool(border or masks is not None), views=len(preds))
