"""Masked evaluation: body contour, regional metrics, paired statistics.

Metrics are computed inside a body-contour mask derived from the
ground-truth CT (threshold HU > -500, then slice-wise hole filling), split
into whole / soft / bone regions at a configurable HU boundary. The paired
Wilcoxon signed-rank test is exact (full distribution over sign
assignments) up to n = 25 and uses the tie-corrected normal approximation
with continuity correction beyond. Difference maps are emitted as binary
PPM images under a blue-white-red colormap.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_fill_holes, correlate1d
from scipy.stats import rankdata

from .errors import DomainError, ShapeError
from .volume import Volume

__all__ = [
    "BodyMask",
    "REGIONS",
    "BODY_THRESHOLD_HU",
    "BONE_THRESHOLD_HU",
    "PSNR_PEAK",
    "body_contour",
    "region_masks",
    "mae",
    "psnr",
    "ssim",
    "dsc",
    "wilcoxon_signed_rank",
    "colormap_bwr",
    "write_ppm",
    "difference_map",
    "save_difference_maps",
    "evaluate_case",
    "write_report_csv",
    "read_report_csv",
    "compare_reports",
]

REGIONS = ("whole", "soft", "bone")
METRICS = ("mae", "psnr", "ssim", "dsc")

BODY_THRESHOLD_HU = -500.0
BONE_THRESHOLD_HU = 300.0
PSNR_PEAK = 4000.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = (0.01 * 4000.0) ** 2
_SSIM_C2 = (0.03 * 4000.0) ** 2


@dataclass
class BodyMask:
    """Boolean body-contour grid plus how it was derived."""

    mask: np.ndarray
    threshold_hu: float = BODY_THRESHOLD_HU
    fill_method: str = "axial-slice-4-connectivity"


def _voxels(v) -> np.ndarray:
    return v.voxels if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)


def _mask_array(mask) -> np.ndarray:
    m = mask.mask if isinstance(mask, BodyMask) else np.asarray(mask)
    return m.astype(bool)


def body_contour(ct: Volume) -> BodyMask:
    """Threshold HU > -500, then fill enclosed holes per axial slice.

    A background voxel becomes foreground when it is not 4-connected to the
    border of its slice, so air cavities inside the body (lungs, bowel gas)
    are included while exterior air stays out.
    """
    if isinstance(ct, Volume) and ct.intensity_space != "HU":
        raise DomainError(f"body contour needs an HU volume, got {ct.intensity_space}")
    vox = _voxels(ct)
    raw = vox > BODY_THRESHOLD_HU
    filled = np.empty_like(raw)
    for z in range(raw.shape[2]):
        filled[:, :, z] = binary_fill_holes(raw[:, :, z])
    return BodyMask(filled)


def region_masks(ct: Volume, body: BodyMask, bone_threshold_hu: float = BONE_THRESHOLD_HU) -> dict:
    """Partition the body mask into soft and bone at an HU boundary."""
    vox = _voxels(ct)
    whole = _mask_array(body)
    if whole.shape != vox.shape:
        raise ShapeError(f"mask shape {whole.shape} != volume shape {vox.shape}")
    bone = whole & (vox >= bone_threshold_hu)
    soft = whole & (vox < bone_threshold_hu)
    return {"whole": whole, "soft": soft, "bone": bone}


def _check_aligned(pred, gt, mask=None):
    p = _voxels(pred)
    g = _voxels(gt)
    if p.shape != g.shape:
        raise ShapeError(f"volume shapes differ: {p.shape} vs {g.shape}")
    if mask is None:
        return p, g, None
    m = _mask_array(mask)
    if m.shape != p.shape:
        raise ShapeError(f"mask shape {m.shape} != volume shape {p.shape}")
    if not m.any():
        raise DomainError("empty evaluation mask")
    return p, g, m


def mae(pred, gt, mask) -> float:
    """Mean absolute error over masked voxels, in HU."""
    p, g, m = _check_aligned(pred, gt, mask)
    return float(np.abs(p[m] - g[m]).mean())


def psnr(pred, gt, mask, peak: float = PSNR_PEAK) -> float:
    """10*log10(peak^2 / masked MSE); identical volumes give +inf."""
    p, g, m = _check_aligned(pred, gt, mask)
    mse = float(((p[m] - g[m]) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_kernel_1d():
    half = _SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * _SSIM_SIGMA ** 2))
    return k / k.sum()


def _window_mean(a: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Gaussian-window means at every full-window center of a 2D array."""
    half = len(kernel) // 2
    out = correlate1d(a, kernel, axis=0, mode="constant")
    out = correlate1d(out, kernel, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim(pred, gt, mask) -> float:
    """Masked mean structural similarity over axial slices.

    Local SSIM uses an 11x11 Gaussian window (sigma 1.5) with the stabilizers
    C1 = (0.01 * 4000)^2 and C2 = (0.03 * 4000)^2, evaluated at window
    centers whose full window fits in the slice. Slice means over masked
    centers are combined weighted by their masked-center counts.
    """
    p, g, m = _check_aligned(pred, gt, mask)
    half = _SSIM_WINDOW // 2
    if p.shape[0] < _SSIM_WINDOW or p.shape[1] < _SSIM_WINDOW:
        raise DomainError(
            f"in-plane extents {p.shape[:2]} are smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    kernel = _gaussian_kernel_1d()
    weighted = 0.0
    weight = 0
    for z in range(p.shape[2]):
        centers = m[half:-half, half:-half, z]
        count = int(centers.sum())
        if count == 0:
            continue
        x = p[:, :, z]
        y = g[:, :, z]
        mu_x = _window_mean(x, kernel)
        mu_y = _window_mean(y, kernel)
        var_x = _window_mean(x * x, kernel) - mu_x * mu_x
        var_y = _window_mean(y * y, kernel) - mu_y * mu_y
        cov = _window_mean(x * y, kernel) - mu_x * mu_y
        s = ((2.0 * mu_x * mu_y + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
             / ((mu_x * mu_x + mu_y * mu_y + _SSIM_C1) * (var_x + var_y + _SSIM_C2)))
        weighted += float(s[centers].sum())
        weight += count
    if weight == 0:
        raise DomainError("mask contains no full-window centers")
    return weighted / weight


def dsc(pred_ct, gt_ct, region: str, bone_threshold_hu: float = BONE_THRESHOLD_HU) -> float:
    """Dice overlap of the region mask derived independently from each volume.

    Both volumes go through the same body-contour + HU-partition rules; if
    both derived masks are empty the score is 1.0.
    """
    if region not in REGIONS:
        raise DomainError(f"region must be one of {REGIONS}, got {region!r}")
    p, g, _ = _check_aligned(pred_ct, gt_ct)
    masks = []
    for vox in (pred_ct, gt_ct):
        body = body_contour(vox if isinstance(vox, Volume) else Volume(_voxels(vox)))
        masks.append(region_masks(vox, body, bone_threshold_hu)[region])
    a, b = masks
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test
# ---------------------------------------------------------------------------

def wilcoxon_signed_rank(x, y) -> tuple[float, float]:
    """Two-sided paired Wilcoxon signed-rank test.

    Zero differences are dropped; ties share mid-ranks; W is the smaller of
    the positive and negative rank sums. For n <= 25 the p-value is exact,
    computed from the full null distribution over the 2^n sign assignments
    (via subset-sum counting over doubled mid-ranks, which are integers);
    beyond that a normal approximation with tie correction and continuity
    correction is used.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"paired samples must be equal-length 1D, got {x.shape} and {y.shape}")
    diffs = x - y
    if not np.all(np.isfinite(diffs)):
        raise DomainError("paired differences contain non-finite values")
    diffs = diffs[diffs != 0.0]
    n = diffs.size
    if n < 5:
        raise DomainError(f"need at least 5 nonzero differences, got {n}")
    ranks = rankdata(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())
    w_minus = float(ranks[diffs < 0].sum())
    w = min(w_plus, w_minus)

    if n <= 25:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        total = int(doubled.sum())
        dist = np.zeros(total + 1)
        dist[0] = 1.0
        for r in doubled:
            shifted = np.zeros_like(dist)
            shifted[r:] = dist[:-r]
            dist += shifted
        sums = np.arange(total + 1)
        w2 = int(np.rint(2.0 * w))
        count = dist[np.minimum(sums, total - sums) <= w2].sum()
        p = count / 2.0 ** n
    else:
        mu = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(diffs), return_counts=True)
        tie_term = float((tie_counts.astype(np.float64) ** 3 - tie_counts).sum())
        var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0
        z = (w - mu + 0.5) / math.sqrt(var)
        p = math.erfc(-z / math.sqrt(2.0))
    return w, float(min(p, 1.0))


# ---------------------------------------------------------------------------
# Difference maps
# ---------------------------------------------------------------------------

def colormap_bwr(values: np.ndarray, cap: float) -> np.ndarray:
    """Map signed values onto blue(-cap) / white(0) / red(+cap) RGB."""
    if cap <= 0:
        raise DomainError(f"colormap cap must be positive, got {cap}")
    t = np.clip(np.asarray(values, dtype=np.float64) / cap, -1.0, 1.0)
    r = np.where(t >= 0, 255.0, 255.0 * (1.0 + t))
    g = 255.0 * (1.0 - np.abs(t))
    b = np.where(t >= 0, 255.0 * (1.0 - t), 255.0)
    return np.floor(np.stack([r, g, b], axis=-1) + 0.5).astype(np.uint8)


def write_ppm(rgb: np.ndarray, path) -> None:
    """Write an [H, W, 3] uint8 image as a binary (P6) portable pixmap."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ShapeError(f"PPM image must be uint8 [H, W, 3], got {rgb.dtype} {rgb.shape}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def difference_map(pred, gt, mask, cap: float = 200.0):
    """Signed HU difference (zero outside the mask) plus per-slice images.

    Returns ``(diff_volume, images)`` where images[z] is the axial slice at
    z rendered blue-white-red, rows running along y and columns along x.
    """
    p, g, m = _check_aligned(pred, gt, mask)
    diff = np.where(m, p - g, 0.0)
    images = [colormap_bwr(diff[:, :, z].T, cap) for z in range(diff.shape[2])]
    return diff, images


def save_difference_maps(pred, gt, mask, out_dir, cap: float = 200.0) -> list[str]:
    """Render difference_map images to out_dir/slice_###.ppm; returns paths."""
    diff, images = difference_map(pred, gt, mask, cap)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for z, rgb in enumerate(images):
        path = os.path.join(out_dir, f"slice_{z:03d}.ppm")
        write_ppm(rgb, path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Case evaluation and reports
# ---------------------------------------------------------------------------

def evaluate_case(pred: Volume, gt: Volume, case_id: str = "case",
                  bone_threshold_hu: float = BONE_THRESHOLD_HU) -> list[dict]:
    """All four metrics over the three regions for one predicted/true pair.

    MAE, PSNR and SSIM use region masks derived from the ground truth; DSC
    compares the masks derived independently from each volume. Returns CSV
    row dicts (case_id, region, metric, value).
    """
    for vol in (pred, gt):
        if vol.intensity_space != "HU":
            raise DomainError(f"evaluation needs HU volumes, got {vol.intensity_space}")
    if pred.dims != gt.dims:
        raise ShapeError(f"volume dims differ: {pred.dims} vs {gt.dims}")
    body = body_contour(gt)
    regions = region_masks(gt, body, bone_threshold_hu)
    rows = []
    for region in REGIONS:
        m = regions[region]
        values = {
            "mae": mae(pred, gt, m),
            "psnr": psnr(pred, gt, m),
            "ssim": ssim(pred, gt, m),
            "dsc": dsc(pred, gt, region, bone_threshold_hu),
        }
        for metric in METRICS:
            rows.append({"case_id": str(case_id), "region": region,
                         "metric": metric, "value": float(values[metric])})
    return rows


def write_report_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "region", "metric", "value"])
        for row in rows:
            writer.writerow([row["case_id"], row["region"], row["metric"],
                             repr(float(row["value"]))])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["case_id", "region", "metric", "value"]:
            raise DomainError(f"{path}: unexpected report header {reader.fieldnames}")
        return [{"case_id": r["case_id"], "region": r["region"],
                 "metric": r["metric"], "value": float(r["value"])} for r in reader]


def compare_reports(rows_a, rows_b, metric: str, region: str,
                    label_a: str = "A", label_b: str = "B",
                    alpha: float = 0.05) -> dict:
    """Paired Wilcoxon test between two reports on one metric and region.

    Cases are paired by case_id (the intersection, sorted); the JSON-ready
    result records the comparison, the number of nonzero differences, W,
    the two-sided p, and significance at ``alpha``.
    """
    def pick(rows):
        return {r["case_id"]: r["value"] for r in rows
                if r["metric"] == metric and r["region"] == region}

    a = pick(rows_a)
    b = pick(rows_b)
    common = sorted(set(a) & set(b))
    if not common:
        raise DomainError(f"no shared cases for metric {metric!r}, region {region!r}")
    x = np.array([a[c] for c in common])
    y = np.array([b[c] for c in common])
    w, p = wilcoxon_signed_rank(x, y)
    n_nonzero = int(np.count_nonzero(x - y))
    return {
        "comparison": f"{label_a} vs {label_b}",
        "metric": metric,
        "region": region,
        "n": n_nonzero,
        "W": w,
        "p_two_sided": p,
        "significant": bool(p < alpha),
    }
