"""BraTS region extraction and overlap / surface metrics.

Regions follow the BraTS convention: WT = {1, 2, 4}, TC = {1, 4}, ET = {4}.
All functions are pure and operate on numpy arrays.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

VALID_LABELS = (0, 1, 2, 4)
REGIONS: Dict[str, Tuple[int, ...]] = {
    "WT": (1, 2, 4),
    "TC": (1, 4),
    "ET": (4,),
}

# Returned by hausdorff95 when exactly one mask is empty.
HD_UNDEFINED = math.inf

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def validate_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 3 or min(labels.shape) < 1:
        raise ValueError(f"label volume must be a non-empty 3D array, got shape {labels.shape}")
    bad = np.setdiff1d(np.unique(labels), VALID_LABELS)
    if bad.size:
        raise ValueError(f"invalid label value(s) {bad.tolist()}; allowed {list(VALID_LABELS)}")
    return labels


def region_extract(labels: np.ndarray, region: str) -> np.ndarray:
    """Boolean mask of one BraTS evaluation region."""
    try:
        members = REGIONS[region.upper()]
    except (KeyError, AttributeError):
        raise ValueError(f"unknown region {region!r}; expected one of {sorted(REGIONS)}") from None
    labels = validate_labels(labels)
    return np.isin(labels, members)


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def dice(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fn + c.fp
    if denom == 0:
        return 1.0
    return 2 * c.tp / denom


def _ratio(num: int, denom: int) -> float:
    if denom == 0:
        return 1.0
    return num / denom


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    """TP / (TP + FP), as printed in the CFCI-Net evaluation section.

    This is what most toolkits call precision; see ``true_negative_rate``
    for the TN-based definition.
    """
    return _ratio(c.tp, c.tp + c.fp)


def true_negative_rate(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour that is background or outside."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)
    return mask & ~eroded


def _directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    tree = cKDTree(dst)
    d, _ = tree.query(src, k=1)
    return np.asarray(d, dtype=np.float64)


def hausdorff95(
    a: np.ndarray,
    b: np.ndarray,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    percentile: float = 95.0,
) -> float:
    """Symmetric percentile Hausdorff distance between mask boundaries, in mm.

    Each direction takes the ``percentile`` (linear interpolation) of the
    nearest-neighbour distances from one boundary to the other; the result
    is the max of the two directions. Both empty -> 0, one empty ->
    ``HD_UNDEFINED``.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    has_a, has_b = a.any(), b.any()
    if not has_a and not has_b:
        return 0.0
    if not has_a or not has_b:
        return HD_UNDEFINED
    scale = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(boundary(a)) * scale
    pb = np.argwhere(boundary(b)) * scale
    d_ab = _directed_distances(pa, pb)
    d_ba = _directed_distances(pb, pa)
    return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))


def region_metrics(
    pred_labels: np.ndarray,
    gt_labels: np.ndarray,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
) -> Dict[str, Dict[str, float]]:
    """Per-region Dice / sensitivity / specificity / HD95 for a label pair."""
    pred_labels = validate_labels(pred_labels)
    gt_labels = validate_labels(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"shape mismatch: pred {pred_labels.shape} vs gt {gt_labels.shape}")
    report = {}
    for region in REGIONS:
        p = region_extract(pred_labels, region)
        g = region_extract(gt_labels, region)
        c = confusion(p, g)
        report[region] = {
            "dice": dice(c),
            "sensitivity": sensitivity(c),
            "specificity": specificity(c),
            "tnr": true_negative_rate(c),
            "hd95": hausdorff95(p, g, spacing),
        }
    return report


_COLUMNS = ("dice", "sensitivity", "specificity", "tnr", "hd95")


def _fmt(value: float) -> str:
    if math.isinf(value):
        return "undefined"
    return f"{value:.4f}"


def format_csv(report: Mapping[str, Mapping[str, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("region",) + _COLUMNS)
    for region, row in report.items():
        writer.writerow([region] + [_fmt(row[k]) for k in _COLUMNS])
    return buf.getvalue()


def format_table(report: Mapping[str, Mapping[str, float]]) -> str:
    header = f"{'region':<8}" + "".join(f"{k:>13}" for k in _COLUMNS)
    lines = [header, "-" * len(header)]
    for region, row in report.items():
        lines.append(f"{region:<8}" + "".join(f"{_fmt(row[k]):>13}" for k in _COLUMNS))
    return "\n".join(lines)
