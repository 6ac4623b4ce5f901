"""Overlap metrics and 95th-percentile Hausdorff distance for binary masks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

OVERLAP_NAMES = ("dsc", "miou", "recall", "precision", "f2")
METRIC_NAMES = OVERLAP_NAMES + ("hd95",)


class Counts(NamedTuple):
    tp: int
    fp: int
    fn: int
    tn: int


def _as_binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} must be binary (values 0/1)")
        arr = arr.astype(bool)
    return arr


def confusion_counts(pred, gt) -> Counts:
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"pred {p.shape} and gt {g.shape} differ in shape")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return Counts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: float, den: float, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def overlap_metrics(counts: Counts) -> dict[str, float]:
    """DSC, IoU, recall, precision and F2 from confusion counts.

    Every metric is 1.0 when prediction and ground truth are both empty and 0.0
    when its denominator vanishes because only one of them is empty.
    """
    tp, fp, fn, _ = counts
    both_empty = tp + fp + fn == 0
    precision = _ratio(tp, tp + fp, both_empty)
    recall = _ratio(tp, tp + fn, both_empty)
    return {
        "dsc": _ratio(2 * tp, 2 * tp + fp + fn, both_empty),
        "miou": _ratio(tp, tp + fp + fn, both_empty),
        "recall": recall,
        "precision": precision,
        "f2": _ratio(5 * precision * recall, 4 * precision + recall, both_empty),
    }


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background face-neighbour; outside counts as background."""
    mask = _as_binary(mask, "mask")
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def _directed_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distance from every boundary pixel of ``src`` to the nearest boundary pixel of ``dst``."""
    field = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return field[src]


def hd95(pred, gt, spacing=None, percentile: float = 95.0) -> float | None:
    """Symmetric percentile Hausdorff distance between mask boundaries.

    Returns ``None`` when either mask is empty. Percentiles use linear
    interpolation between sorted distances. ``spacing`` gives the physical size
    of a pixel along each axis; distances are in pixels when omitted.
    """
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"pred {p.shape} and gt {g.shape} differ in shape")
    if not p.any() or not g.any():
        return None
    bp, bg = boundary(p), boundary(g)
    forward = _directed_distances(bp, bg, spacing)
    backward = _directed_distances(bg, bp, spacing)
    return float(max(np.percentile(forward, percentile), np.percentile(backward, percentile)))


def hausdorff(pred, gt, spacing=None) -> float | None:
    return hd95(pred, gt, spacing, percentile=100.0)


@dataclass
class CaseMetrics:
    dsc: float
    miou: float
    recall: float
    precision: float
    f2: float
    hd95: float | None
    case: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def case_metrics(pred, gt, spacing=None, case: str = "") -> CaseMetrics:
    return CaseMetrics(**overlap_metrics(confusion_counts(pred, gt)), hd95=hd95(pred, gt, spacing), case=case)


def aggregate(cases: list[CaseMetrics]) -> dict[str, float | int | None]:
    """Mean of every metric over cases; hd95 averages only defined cases.

    Sums are compensated (``math.fsum``) so the result does not depend on case
    order.
    """
    if not cases:
        raise ValueError("cannot aggregate an empty list of cases")
    report: dict[str, float | int | None] = {}
    for name in OVERLAP_NAMES:
        report[name] = math.fsum(getattr(c, name) for c in cases) / len(cases)
    defined = [c.hd95 for c in cases if c.hd95 is not None]
    report["hd95"] = math.fsum(defined) / len(defined) if defined else None
    report["hd95_count"] = len(defined)
    report["n_cases"] = len(cases)
    return report
