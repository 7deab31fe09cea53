"""Synthetic cardiac phantoms with analytically known volumes.

A phantom is a pair of concentric ellipsoids (endocardial and epicardial
surfaces) on a voxel grid, optionally with spherical papillary blobs
floating inside the cavity.  The end-systolic phase scales the
endocardial semi-axes (and blob centres) by a factor s, so the analytic
ejection fraction is exactly (1 - s^3) * 100.

Every generated case comes with a raw mask (blobs labelled as
myocardium, the way an annotator sees them) and a cleaned-truth mask
(blobs labelled as cavity), which makes the mask-cleaning rule testable
voxel for voxel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data_io import (
    DatasetIndex,
    IndexEntry,
    LabelMask,
    Volume,
    VolumeHeader,
    write_nifti,
)
from .preprocess import BACKGROUND, CAVITY, MYOCARDIUM

INTENSITY = {BACKGROUND: 0.1, MYOCARDIUM: 0.5, CAVITY: 0.9}


@dataclass
class PapillaryBlob:
    center_mm: Tuple[float, float, float]
    radius_mm: float


@dataclass
class PhantomSpec:
    dims: Tuple[int, int, int] = (156, 156, 6)
    spacing_mm: Tuple[float, float, float] = (1.25, 1.25, 10.0)
    center_mm: Optional[Tuple[float, float, float]] = None  # grid centre when None
    endo_semi_axes_mm: Tuple[float, float, float] = (28.0, 24.0, 26.0)
    wall_thickness_mm: float = 9.0
    es_scale: float = 0.75
    blobs: List[PapillaryBlob] = field(default_factory=list)
    noise_sigma: float = 0.0
    seed: int = 0

    def resolved_center(self) -> Tuple[float, float, float]:
        if self.center_mm is not None:
            return self.center_mm
        return tuple((d - 1) / 2.0 * s for d, s in zip(self.dims, self.spacing_mm))

    def validate(self) -> None:
        if self.wall_thickness_mm <= 0:
            raise ValueError("wall thickness must be positive")
        if not (0.0 < self.es_scale < 1.0):
            raise ValueError(f"ES scale must lie in (0, 1), got {self.es_scale}")
        for scale in (1.0, self.es_scale):
            axes = tuple(a * scale for a in self.endo_semi_axes_mm)
            cx, cy, cz = self.resolved_center()
            for blob in self.blobs:
                bx, by, bz = _scaled_blob_center(blob, (cx, cy, cz), scale)
                r = math.sqrt(((bx - cx) / axes[0]) ** 2
                              + ((by - cy) / axes[1]) ** 2
                              + ((bz - cz) / axes[2]) ** 2)
                if r + blob.radius_mm / min(axes) > 1.0:
                    raise ValueError(
                        f"papillary blob at {blob.center_mm} escapes the cavity "
                        f"at scale {scale}"
                    )


@dataclass
class PhantomTruth:
    edv_ml: float
    esv_ml: float
    lvef_percent: float
    myo_ml: float         # end-diastolic wall volume
    papillary_ml: float

    def to_json(self) -> str:
        return json.dumps({
            "edv_ml": self.edv_ml,
            "esv_ml": self.esv_ml,
            "lvef_percent": self.lvef_percent,
            "myo_ml": self.myo_ml,
            "papillary_ml": self.papillary_ml,
        }, indent=2, sort_keys=True) + "\n"


def _ellipsoid_ml(axes: Sequence[float]) -> float:
    return 4.0 / 3.0 * math.pi * axes[0] * axes[1] * axes[2] / 1000.0


def _scaled_blob_center(blob: PapillaryBlob, center, scale: float):
    return tuple(c + scale * (b - c) for b, c in zip(blob.center_mm, center))


def analytic_truth(spec: PhantomSpec) -> PhantomTruth:
    a, b, c = spec.endo_semi_axes_mm
    t = spec.wall_thickness_mm
    edv = _ellipsoid_ml((a, b, c))
    esv = edv * spec.es_scale ** 3
    myo = _ellipsoid_ml((a + t, b + t, c + t)) - edv
    pap = sum(4.0 / 3.0 * math.pi * blob.radius_mm ** 3 / 1000.0 for blob in spec.blobs)
    return PhantomTruth(
        edv_ml=edv,
        esv_ml=esv,
        lvef_percent=(edv - esv) / edv * 100.0,
        myo_ml=myo,
        papillary_ml=pap,
    )


def generate(spec: PhantomSpec, phase: str = "ED"):
    """One phase of a phantom subject.

    Returns (image Volume, raw LabelMask, cleaned-truth LabelMask,
    PhantomTruth).  The raw mask labels papillary blobs as myocardium;
    the cleaned-truth mask labels them as cavity.
    """
    if phase not in ("ED", "ES"):
        raise ValueError(f"phase must be 'ED' or 'ES', got {phase!r}")
    spec.validate()
    scale = 1.0 if phase == "ED" else spec.es_scale
    center = spec.resolved_center()
    endo = tuple(a * scale for a in spec.endo_semi_axes_mm)
    epi = tuple(a + spec.wall_thickness_mm for a in endo)

    nx, ny, nz = spec.dims
    dx, dy, dz = spec.spacing_mm
    xs = (np.arange(nx) * dx)[:, None, None]
    ys = (np.arange(ny) * dy)[None, :, None]
    zs = (np.arange(nz) * dz)[None, None, :]

    def inside(axes):
        return (((xs - center[0]) / axes[0]) ** 2
                + ((ys - center[1]) / axes[1]) ** 2
                + ((zs - center[2]) / axes[2]) ** 2) <= 1.0

    in_endo = inside(endo)
    in_epi = inside(epi)
    in_blob = np.zeros(spec.dims, dtype=bool)
    for blob in spec.blobs:
        bx, by, bz = _scaled_blob_center(blob, center, scale)
        in_blob |= ((xs - bx) ** 2 + (ys - by) ** 2 + (zs - bz) ** 2) <= blob.radius_mm ** 2
    in_blob &= in_endo  # guaranteed by validate(); belt and braces on the grid

    clean = np.zeros(spec.dims, dtype=np.uint8)
    clean[in_epi & ~in_endo] = MYOCARDIUM
    clean[in_endo] = CAVITY
    raw = clean.copy()
    raw[in_blob] = MYOCARDIUM

    values = np.full(spec.dims, INTENSITY[BACKGROUND], dtype=np.float32)
    values[raw == MYOCARDIUM] = INTENSITY[MYOCARDIUM]
    values[raw == CAVITY] = INTENSITY[CAVITY]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, 0 if phase == "ED" else 1])
        values = values + rng.normal(0.0, spec.noise_sigma, spec.dims).astype(np.float32)
        values = np.clip(values, 0.0, 1.0)

    header = VolumeHeader(spec.dims, spec.spacing_mm, "float32")
    mask_header = VolumeHeader(spec.dims, spec.spacing_mm, "uint8")
    return (
        Volume(header, values),
        LabelMask(mask_header, raw),
        LabelMask(mask_header, clean),
        analytic_truth(spec),
    )


def _jittered_spec(base: PhantomSpec, rng: np.random.Generator,
                   jitter_frac: float, papillary: bool) -> PhantomSpec:
    axes = tuple(a * float(rng.uniform(1 - jitter_frac, 1 + jitter_frac))
                 for a in base.endo_semi_axes_mm)
    thickness = base.wall_thickness_mm * float(rng.uniform(1 - jitter_frac, 1 + jitter_frac))
    es_scale = float(rng.uniform(0.70, 0.80))
    blobs: List[PapillaryBlob] = []
    if papillary:
        center = base.resolved_center()
        # one blob per subject, at a slice plane so coarse z grids still see it
        dz = base.spacing_mm[2]
        zslice = round(center[2] / dz) * dz
        r = float(rng.uniform(4.0, 7.0))
        # keep it inside the ES-scaled cavity with margin
        max_off = 0.45 * min(a * base.es_scale for a in axes[:2])
        off = float(rng.uniform(0.0, max(0.0, max_off - r)))
        ang = float(rng.uniform(0.0, 2 * math.pi))
        blob_center = (center[0] + off * math.cos(ang),
                       center[1] + off * math.sin(ang),
                       zslice)
        blobs.append(PapillaryBlob(blob_center, r))
    return replace(base, endo_semi_axes_mm=axes, wall_thickness_mm=thickness,
                   es_scale=es_scale, blobs=blobs,
                   seed=int(rng.integers(0, 2 ** 31)))


def generate_cohort(
    n: int,
    base_spec: PhantomSpec,
    out_dir,
    seed: int = 0,
    papillary: bool = False,
    jitter_frac: float = 0.10,
) -> DatasetIndex:
    """n subjects on disk: per phase an image, a cleaned mask (indexed for
    training) and a raw mask, plus an analytic ground-truth sidecar.

    Deterministic from the seed; returns the written index.
    """
    if n < 1:
        raise ValueError("cohort size must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries: List[IndexEntry] = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        spec = _jittered_spec(base_spec, rng, jitter_frac, papillary)
        sid = f"s{i:03d}"
        truth = analytic_truth(spec)
        (out / f"{sid}_truth.json").write_text(truth.to_json(), encoding="utf-8")
        for phase in ("ED", "ES"):
            image, raw, clean, _ = generate(spec, phase)
            img_name = f"{sid}_{phase}_image.nii.gz"
            msk_name = f"{sid}_{phase}_mask.nii.gz"
            raw_name = f"{sid}_{phase}_mask_raw.nii.gz"
            write_nifti(image, out / img_name)
            write_nifti(clean, out / msk_name)
            write_nifti(raw, out / raw_name)
            entries.append(IndexEntry(sid, phase, img_name, msk_name, "train"))
    index = DatasetIndex(entries)
    index.save(out / "index.json")
    return index
