"""Clinical endpoints: cavity/wall volumes, LVEF, myocardial mass,
papillary inclusion-vs-exclusion comparison and Bland-Altman agreement.

Volumes come from direct voxel summation; myocardial mass uses the
1.05 g/mL tissue density convention.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .data_io import LabelMask
from .preprocess import CAVITY, MYOCARDIUM

MYOCARDIAL_DENSITY_G_PER_ML = 1.05


def _labels_of(mask) -> np.ndarray:
    if isinstance(mask, LabelMask):
        return mask.labels
    return np.asarray(mask)


def label_volume_ml(mask, spacing_mm: Tuple[float, float, float], label: int) -> float:
    """count(voxels == label) * voxel volume, in millilitres."""
    if any(s <= 0 for s in spacing_mm):
        raise ValueError(f"spacing must be positive, got {spacing_mm}")
    count = int(np.count_nonzero(_labels_of(mask) == label))
    return count * spacing_mm[0] * spacing_mm[1] * spacing_mm[2] / 1000.0


def lvef(edv_ml: float, esv_ml: float) -> float:
    """(EDV - ESV) / EDV * 100."""
    if edv_ml <= 0:
        raise ValueError(f"EDV must be positive, got {edv_ml}")
    if esv_ml < 0:
        raise ValueError(f"ESV must be non-negative, got {esv_ml}")
    return (edv_ml - esv_ml) / edv_ml * 100.0


def myocardial_mass_g(myo_ml: float) -> float:
    if myo_ml < 0:
        raise ValueError(f"myocardial volume must be non-negative, got {myo_ml}")
    return myo_ml * MYOCARDIAL_DENSITY_G_PER_ML


@dataclass
class ClinicalReport:
    subject: str
    variant: str  # "papillary_included" | "papillary_excluded"
    edv_ml: float
    esv_ml: float
    sv_ml: float
    lvef_percent: float
    myo_mass_g: float
    physiologically_invalid: bool = False  # set when ESV > EDV


def subject_report(ed_mask, es_mask, spacing_mm: Tuple[float, float, float],
                   subject: str, variant: str) -> ClinicalReport:
    edv = label_volume_ml(ed_mask, spacing_mm, CAVITY)
    esv = label_volume_ml(es_mask, spacing_mm, CAVITY)
    myo_ed = label_volume_ml(ed_mask, spacing_mm, MYOCARDIUM)
    return ClinicalReport(
        subject=subject,
        variant=variant,
        edv_ml=edv,
        esv_ml=esv,
        sv_ml=edv - esv,
        lvef_percent=lvef(edv, esv),
        myo_mass_g=myocardial_mass_g(myo_ed),
        physiologically_invalid=esv > edv,
    )


def compare_variants(
    raw_pair: Tuple[LabelMask, LabelMask],
    cleaned_pair: Tuple[LabelMask, LabelMask],
    spacing_mm: Tuple[float, float, float],
    subject: str = "subject",
) -> Tuple[ClinicalReport, ClinicalReport]:
    """Included variant measured on raw masks, excluded on cleaned masks.

    Returns (included, excluded).  Under exclusion the cavity can only
    gain voxels and the wall can only lose them, so EDV/ESV rise and mass
    falls (or stay equal when there is nothing to clean).
    """
    for raw, cleaned in zip(raw_pair, cleaned_pair):
        if _labels_of(raw).shape != _labels_of(cleaned).shape:
            raise ValueError("raw and cleaned masks must share dims")
    included = subject_report(raw_pair[0], raw_pair[1], spacing_mm,
                              subject, "papillary_included")
    excluded = subject_report(cleaned_pair[0], cleaned_pair[1], spacing_mm,
                              subject, "papillary_excluded")
    return included, excluded


def exclusion_direction_flags(included: ClinicalReport,
                              excluded: ClinicalReport) -> Dict[str, bool]:
    """Direction checks for the papillary-exclusion comparison."""
    return {
        "edv_increases": excluded.edv_ml >= included.edv_ml,
        "esv_increases": excluded.esv_ml >= included.esv_ml,
        "mass_decreases": excluded.myo_mass_g <= included.myo_mass_g,
        "lvef_decreases": excluded.lvef_percent <= included.lvef_percent,
    }


# --------------------------------------------------------------------------
# Bland-Altman agreement
# --------------------------------------------------------------------------

@dataclass
class BlandAltmanStats:
    bias: float
    sd_diff: float
    loa_low: float
    loa_high: float
    n: int
    points: List[Tuple[float, float]] = field(default_factory=list)  # (mean, diff)


def bland_altman(pairs: Sequence[Tuple[float, float]]) -> BlandAltmanStats:
    """Differences a - b: bias = mean, limits = bias +/- 1.96 * sample SD."""
    if len(pairs) < 2:
        raise ValueError(f"Bland-Altman needs at least 2 pairs, got {len(pairs)}")
    a = np.asarray([p[0] for p in pairs], dtype=np.float64)
    b = np.asarray([p[1] for p in pairs], dtype=np.float64)
    d = a - b
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    points = [(float(m), float(x)) for m, x in zip((a + b) / 2.0, d)]
    return BlandAltmanStats(
        bias=bias,
        sd_diff=sd,
        loa_low=bias - 1.96 * sd,
        loa_high=bias + 1.96 * sd,
        n=len(pairs),
        points=points,
    )


# --------------------------------------------------------------------------
# CSV emission
# --------------------------------------------------------------------------

def write_clinical_csv(reports: Sequence[ClinicalReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["subject", "variant", "edv_ml", "esv_ml", "sv_ml",
                    "lvef_percent", "myo_mass_g"])
        for r in reports:
            w.writerow([
                r.subject, r.variant,
                format(r.edv_ml, ".6g"), format(r.esv_ml, ".6g"),
                format(r.sv_ml, ".6g"), format(r.lvef_percent, ".6g"),
                format(r.myo_mass_g, ".6g"),
            ])


def write_bland_altman_csv(named_stats: Dict[str, BlandAltmanStats], path,
                           points_dir=None) -> None:
    """Stats CSV plus one mean,diff points file per parameter."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["parameter", "bias", "sd", "loa_low", "loa_high", "n"])
        for name, s in named_stats.items():
            w.writerow([name, format(s.bias, ".6g"), format(s.sd_diff, ".6g"),
                        format(s.loa_low, ".6g"), format(s.loa_high, ".6g"), s.n])
    base = Path(points_dir) if points_dir is not None else path.parent
    for name, s in named_stats.items():
        pts = base / f"{path.stem}_{name}_points.csv"
        with open(pts, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["mean", "diff"])
            for m, d in s.points:
                w.writerow([format(m, ".6g"), format(d, ".6g")])
