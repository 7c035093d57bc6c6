"""Overlap, volume and boundary-distance metrics for label volumes."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

FACE_NEIGHBORS = ndimage.generate_binary_structure(3, 1)
METRIC_FIELDS = ("dsc", "mhd", "mhd95", "asd", "avd")


def dsc(ref, auto) -> float:
    """Dice overlap; 1.0 when both masks are empty."""
    ref, auto = np.asarray(ref, bool), np.asarray(auto, bool)
    if ref.shape != auto.shape:
        raise ValueError(f"mask shapes differ: {ref.shape} vs {auto.shape}")
    total = int(ref.sum()) + int(auto.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ref, auto).sum()) / total


def avd(ref, auto) -> float:
    """Absolute volume difference as a percentage of the reference volume."""
    v_ref = int(np.count_nonzero(ref))
    if v_ref == 0:
        raise ValueError("AVD undefined for an empty reference")
    return abs(v_ref - int(np.count_nonzero(auto))) / v_ref * 100.0


def extract_boundary(mask, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Voxel-center coordinates (mm, shape (n, 3)) of foreground voxels with a
    background face-neighbor.  Voxels on the volume border count as boundary."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("cannot extract the boundary of an empty mask")
    interior = ndimage.binary_erosion(mask, structure=FACE_NEIGHBORS, border_value=0)
    idx = np.argwhere(mask & ~interior)
    return idx * np.asarray(spacing, dtype=np.float64)


def directed_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point of ``a`` the Euclidean distance to the nearest point of ``b``."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("distance to an empty point set is undefined")
    d, _ = cKDTree(b).query(a)
    return d


def nearest_rank(values: np.ndarray, p: float) -> float:
    v = np.sort(values)
    rank = max(1, math.ceil(p / 100.0 * len(v)))
    return float(v[rank - 1])


def hausdorff(a: np.ndarray, b: np.ndarray, percentile: float | None = None) -> float:
    """Symmetric Hausdorff distance; with ``percentile`` each directed maximum is
    replaced by that nearest-rank percentile of the directed distances."""
    ab, ba = directed_distances(a, b), directed_distances(b, a)
    if percentile is None:
        return float(max(ab.max(), ba.max()))
    return max(nearest_rank(ab, percentile), nearest_rank(ba, percentile))


def asd(ref_points: np.ndarray, auto_points: np.ndarray, symmetric=False) -> float:
    """Mean distance from reference boundary points to the automatic boundary.

    ``symmetric=True`` averages both directed means instead.
    """
    forward = float(directed_distances(ref_points, auto_points).mean())
    if not symmetric:
        return forward
    return 0.5 * (forward + float(directed_distances(auto_points, ref_points).mean()))


@dataclass
class MetricReport:
    """Per-class metrics for one (reference, prediction) pair.

    ``None`` marks a value that is undefined for that class (e.g. the class is
    absent from one or both volumes).
    """

    subject: str
    per_class: dict[int, dict[str, float | None]] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [{"subject": self.subject, "class": c, **vals} for c, vals in self.per_class.items()]

    def to_dict(self) -> dict:
        return {"subject": self.subject,
                "per_class": {str(c): v for c, v in self.per_class.items()}}

    def mean(self, metric: str) -> float | None:
        vals = [v[metric] for v in self.per_class.values() if v[metric] is not None]
        return float(np.mean(vals)) if vals else None


def evaluate(reference, prediction, classes: Sequence[int], spacing=(1.0, 1.0, 1.0),
             subject="", symmetric_asd=False) -> MetricReport:
    reference, prediction = np.asarray(reference), np.asarray(prediction)
    if reference.shape != prediction.shape:
        raise ValueError(f"shape mismatch: {reference.shape} vs {prediction.shape}")
    report = MetricReport(subject)
    for c in classes:
        ref, auto = reference == c, prediction == c
        has_ref, has_auto = bool(ref.any()), bool(auto.any())
        vals: dict[str, float | None] = dict.fromkeys(METRIC_FIELDS)
        if has_ref or has_auto:
            vals["dsc"] = dsc(ref, auto)
        if has_ref:
            vals["avd"] = avd(ref, auto)
        if has_ref and has_auto:
            p_ref, p_auto = extract_boundary(ref, spacing), extract_boundary(auto, spacing)
            vals["mhd"] = hausdorff(p_ref, p_auto)
            vals["mhd95"] = hausdorff(p_ref, p_auto, percentile=95)
            vals["asd"] = asd(p_ref, p_auto, symmetric=symmetric_asd)
        report.per_class[int(c)] = vals
    return report


def write_reports_csv(reports: Sequence[MetricReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("subject", "class") + METRIC_FIELDS)
        writer.writeheader()
        for rep in reports:
            for row in rep.rows():
                writer.writerow({k: ("" if v is None else v) for k, v in row.items()})


def write_reports_json(reports: Sequence[MetricReport], path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2)


def metric_sums(reports: Sequence[MetricReport]) -> dict[str, float]:
    """Sum of each metric over all defined (subject, class) entries."""
    totals = dict.fromkeys(METRIC_FIELDS, 0.0)
    for rep in reports:
        for vals in rep.per_class.values():
            for k in METRIC_FIELDS:
                if vals[k] is not None:
                    totals[k] += vals[k]
    return totals
