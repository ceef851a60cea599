"""Segmentation accuracy (Dice, exact Hausdorff) and clinical measures."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .volgrid import LabelGrid, SEG_CLASS_NAMES, voxel_to_world

FOREGROUND_CLASSES = {"LVC": 1, "LVW": 2, "RVC": 3, "RVW": 4}
MYOCARDIUM_DENSITY_G_PER_ML = 1.05


class EmptyMaskError(ValueError):
    """Hausdorff distance is undefined when a mask is empty."""


def dice_index(a: LabelGrid, b: LabelGrid, k: int) -> float:
    """2|A n B| / (|A| + |B|) over the class-k masks.

    Both masks empty is defined as 1; empty vs non-empty gives 0.
    """
    if a.dims != b.dims:
        raise ValueError(f"geometry mismatch: {a.dims} vs {b.dims}")
    ma = a.labels == k
    mb = b.labels == k
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / denom


def hausdorff(a: LabelGrid, b: LabelGrid, k: int) -> float:
    """Exact symmetric Hausdorff distance (mm) between the class-k masks,
    over voxel-centre physical coordinates."""
    if a.dims != b.dims:
        raise ValueError(f"geometry mismatch: {a.dims} vs {b.dims}")
    pa = np.argwhere(a.labels == k)
    pb = np.argwhere(b.labels == k)
    if pa.size == 0 or pb.size == 0:
        raise EmptyMaskError(f"class {k} mask is empty")
    wa = voxel_to_world(a, pa)
    wb = voxel_to_world(b, pb)
    d_ab = cKDTree(wb).query(wa)[0].max()
    d_ba = cKDTree(wa).query(wb)[0].max()
    return float(max(d_ab, d_ba))


@dataclass
class SegScore:
    subject_id: str
    dice: dict[str, float]
    hausdorff_mm: dict[str, float | None]


def score_segmentation(pred: LabelGrid, ref: LabelGrid, subject_id: str = "") -> SegScore:
    """Per-class Dice and Hausdorff for the four foreground classes.

    Hausdorff is None when either mask is empty (undefined distance).
    """
    dice = {}
    haus: dict[str, float | None] = {}
    for name, k in FOREGROUND_CLASSES.items():
        dice[name] = dice_index(pred, ref, k)
        try:
            haus[name] = hausdorff(pred, ref, k)
        except EmptyMaskError:
            haus[name] = None
    return SegScore(subject_id, dice, haus)


@dataclass
class ClinicalMeasures:
    LVV_ml: float
    LVM_g: float
    RVV_ml: float
    RVM_g: float


def clinical_measures(l: LabelGrid) -> ClinicalMeasures:
    """Cavity volumes (ml) and wall masses (g, density 1.05 g/ml)."""
    voxel_ml = l.spacing[0] * l.spacing[1] * l.spacing[2] / 1000.0
    counts = np.bincount(l.labels.reshape(-1), minlength=len(SEG_CLASS_NAMES))
    vol = {name: counts[k] * voxel_ml for name, k in FOREGROUND_CLASSES.items()}
    return ClinicalMeasures(
        LVV_ml=vol["LVC"],
        LVM_g=vol["LVW"] * MYOCARDIUM_DENSITY_G_PER_ML,
        RVV_ml=vol["RVC"],
        RVM_g=vol["RVW"] * MYOCARDIUM_DENSITY_G_PER_ML,
    )


# ---------------------------------------------------------------------------
# cohort aggregation

def _flatten(entry) -> dict[str, float | None]:
    if isinstance(entry, SegScore):
        out = {}
        for name in FOREGROUND_CLASSES:
            out[f"dice_{name}"] = entry.dice[name]
            out[f"hausdorff_{name}_mm"] = entry.hausdorff_mm[name]
        return out
    if isinstance(entry, ClinicalMeasures):
        return {f.name: getattr(entry, f.name) for f in fields(entry)}
    if isinstance(entry, dict):
        return dict(entry)
    raise TypeError(f"cannot aggregate {type(entry).__name__}")


def cohort_report(scores: list) -> dict:
    """Mean and population standard deviation per field.

    Undefined entries (None) are skipped per field; the count of defined
    values is reported alongside.
    """
    if not scores:
        raise ValueError("empty cohort")
    rows = [_flatten(s) for s in scores]
    keys = list(rows[0].keys())
    summary = {"sd_convention": "population", "n": len(rows), "fields": {}}
    for key in keys:
        vals = [r[key] for r in rows if r.get(key) is not None]
        if vals:
            summary["fields"][key] = {
                "mean": float(np.mean(vals)),
                "sd": float(np.std(vals)),
                "n": len(vals),
            }
        else:
            summary["fields"][key] = {"mean": None, "sd": None, "n": 0}
    return summary


def write_cohort_json(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")


def write_cohort_csv(summary: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["field", "mean", "sd", "n"])
        for key, stats in summary["fields"].items():
            writer.writerow([key, stats["mean"], stats["sd"], stats["n"]])


def write_seg_scores_csv(scores: list[SegScore], path) -> None:
    """Per-subject per-class rows: subject_id, class, dice, hausdorff_mm."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "class", "dice", "hausdorff_mm"])
        for s in scores:
            for name in FOREGROUND_CLASSES:
                hd = s.hausdorff_mm[name]
                writer.writerow([s.subject_id, name, s.dice[name], "" if hd is None else hd])


def write_clinical_csv(rows: list[tuple[str, ClinicalMeasures]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "LVV_ml", "LVM_g", "RVV_ml", "RVM_g"])
        for subject_id, m in rows:
            writer.writerow([subject_id, m.LVV_ml, m.LVM_g, m.RVV_ml, m.RVM_g])
