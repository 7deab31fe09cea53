"""Heart localization, canonical reshaping, mask cleaning and patching.

Label convention throughout: 0 background, 1 myocardium, 2 LV cavity.
Raw public-dataset masks carry {0 bg, 1 RV, 2 myo, 3 LV} and must pass
through remap_labels first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .data_io import LabelMask, Volume, VolumeHeader

BACKGROUND, MYOCARDIUM, CAVITY = 0, 1, 2
CANONICAL_SHAPE = (156, 156, 6)
PATCH_SHAPE = (64, 64, 4)

Coord = Tuple[int, int, int]


def _grid_of(obj) -> np.ndarray:
    if isinstance(obj, LabelMask):
        return obj.labels
    if isinstance(obj, Volume):
        return obj.values
    return np.asarray(obj)


def locate_heart_bbox(mask: Union[LabelMask, np.ndarray]) -> Coord:
    """Center of the axis-aligned bounding box of nonzero labels,
    midpoints rounded down."""
    labels = _grid_of(mask)
    nz = np.nonzero(labels)
    if nz[0].size == 0:
        raise ValueError("mask has no nonzero voxels; cannot localize the heart")
    return tuple(int((int(idx.min()) + int(idx.max())) // 2) for idx in nz)


def locate_heart_bbox_from_image(volume: Union[Volume, np.ndarray],
                                 percentile: float = 75.0) -> Coord:
    """Annotation-free localization: threshold the normalized image at the
    given percentile and take the bounding-box center of the largest
    26-connected bright component."""
    values = _grid_of(volume)
    thr = np.percentile(values, percentile)
    bright = values > thr
    if not bright.any():
        raise ValueError("no voxels above the localization threshold")
    comp, ncomp = ndimage.label(bright, structure=np.ones((3, 3, 3), dtype=bool))
    counts = np.bincount(comp.ravel())[1:]
    largest = 1 + int(np.argmax(counts))
    return locate_heart_bbox(comp == largest)


def crop_or_pad_array(grid: np.ndarray, center: Coord,
                      target: Coord = CANONICAL_SHAPE) -> np.ndarray:
    """Copy the target-shaped window centered on `center` out of `grid`,
    zero-filling wherever the window leaves the source."""
    out = np.zeros(target, dtype=grid.dtype)
    src_lo, src_hi, dst_lo, dst_hi = [], [], [], []
    for axis in range(3):
        start = center[axis] - (target[axis] - 1) // 2
        s0 = max(start, 0)
        s1 = min(start + target[axis], grid.shape[axis])
        if s1 <= s0:
            return out
        src_lo.append(s0)
        src_hi.append(s1)
        dst_lo.append(s0 - start)
        dst_hi.append(s1 - start)
    out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
        grid[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
    return out


def uncrop_array(canonical: np.ndarray, center: Coord, original_dims: Coord) -> np.ndarray:
    """Inverse placement of crop_or_pad_array: paint the canonical window
    back into a zero grid of the original dims."""
    out = np.zeros(original_dims, dtype=canonical.dtype)
    target = canonical.shape
    for_axis = []
    for axis in range(3):
        start = center[axis] - (target[axis] - 1) // 2
        s0 = max(start, 0)
        s1 = min(start + target[axis], original_dims[axis])
        if s1 <= s0:
            return out
        for_axis.append((s0, s1, s0 - start, s1 - start))
    (a0, a1, ca0, ca1), (b0, b1, cb0, cb1), (c0, c1, cc0, cc1) = for_axis
    out[a0:a1, b0:b1, c0:c1] = canonical[ca0:ca1, cb0:cb1, cc0:cc1]
    return out


def crop_or_pad(obj: Union[Volume, LabelMask], center: Coord,
                target: Coord = CANONICAL_SHAPE) -> Union[Volume, LabelMask]:
    grid = crop_or_pad_array(_grid_of(obj), center, target)
    header = VolumeHeader(target, obj.header.spacing_mm, obj.header.datatype)
    if isinstance(obj, LabelMask):
        return LabelMask(header, grid)
    return Volume(header, grid)


# --------------------------------------------------------------------------
# papillary-muscle cleaning
# --------------------------------------------------------------------------

def _clean_binary(labels: np.ndarray, structure: np.ndarray) -> np.ndarray:
    """Shared cleaning kernel for one slice (2D) or the whole stack (3D).

    Keeps the biggest myocardium component as the wall; components whose
    one-voxel dilation touches only LV cavity become cavity (papillary
    muscle in the blood pool); other stray components become background.
    """
    out = labels.copy()
    myo = labels == MYOCARDIUM
    if not myo.any():
        return out
    comp, ncomp = ndimage.label(myo, structure=structure)
    if ncomp <= 1:
        return out
    counts = np.bincount(comp.ravel())[1:]
    ring = 1 + int(np.argmax(counts))  # ties: lowest component id
    for lbl in range(1, ncomp + 1):
        if lbl == ring:
            continue
        blob = comp == lbl
        halo = ndimage.binary_dilation(blob, structure=structure) & ~blob
        if halo.any() and np.all(labels[halo] == CAVITY):
            out[blob] = CAVITY
        else:
            out[blob] = BACKGROUND
    return out


def clean_mask(mask: Union[LabelMask, np.ndarray],
               three_d: bool = False) -> Union[LabelMask, np.ndarray]:
    """Remove papillary muscles and stray myocardium from a 3-class mask.

    Works per axial slice with 8-connectivity by default; three_d=True
    switches to a single 26-connected pass over the stack.  Cavity and
    background voxels are never touched.  Idempotent.
    """
    labels = _grid_of(mask)
    bad = labels[(labels != BACKGROUND) & (labels != MYOCARDIUM) & (labels != CAVITY)]
    if bad.size:
        raise ValueError(f"mask contains labels outside {{0,1,2}}: {np.unique(bad)}")
    if three_d:
        # pad so border components see background beyond the volume
        padded = np.pad(labels, 1)
        cleaned = _clean_binary(padded, np.ones((3, 3, 3), dtype=bool))[1:-1, 1:-1, 1:-1]
    else:
        cleaned = np.empty_like(labels)
        for z in range(labels.shape[2]):
            padded = np.pad(labels[:, :, z], 1)
            cleaned[:, :, z] = _clean_binary(padded, np.ones((3, 3), dtype=bool))[1:-1, 1:-1]
    if isinstance(mask, LabelMask):
        return LabelMask(mask.header, cleaned)
    return cleaned


def remap_labels(raw: Union[LabelMask, np.ndarray]) -> Union[LabelMask, np.ndarray]:
    """Public 4-class convention {0 bg, 1 RV, 2 myo, 3 LV} to the internal
    3-class one: RV folds into background."""
    labels = _grid_of(raw)
    if labels.max(initial=0) > 3:
        raise ValueError(f"raw labels must lie in {{0..3}}, got max {labels.max()}")
    lut = np.array([0, 0, 1, 2], dtype=np.uint8)
    remapped = lut[labels]
    if isinstance(raw, LabelMask):
        return LabelMask(raw.header, remapped)
    return remapped


# --------------------------------------------------------------------------
# patch extraction
# --------------------------------------------------------------------------

@dataclass
class PatchSample:
    image_patch: np.ndarray   # [1, 1, D, H, W] float32
    label_patch: np.ndarray   # [1, classes, D, H, W] float32 one-hot
    origin: Coord             # (x0, y0, z0) in the canonical volume


def one_hot(labels: np.ndarray, classes: int = 3) -> np.ndarray:
    """[classes, D, H, W] one-hot planes from an [x, y, z] label patch."""
    dhw = labels.transpose(2, 1, 0)
    out = np.zeros((classes,) + dhw.shape, dtype=np.float32)
    for c in range(classes):
        out[c] = dhw == c
    return out


def extract_patches(
    values: np.ndarray,
    labels: np.ndarray,
    patch: Coord = PATCH_SHAPE,
    count: int = 8,
    seed: Union[int, np.random.Generator] = 0,
    classes: int = 3,
    max_attempts: int = 100,
) -> List[PatchSample]:
    """Draw `count` seeded random patches from a canonical volume.

    When the volume has any foreground, at least every other draw is
    resampled (up to max_attempts) until it contains a foreground voxel,
    so at least half the returned patches see the heart.
    """
    if values.shape != labels.shape:
        raise ValueError(f"image shape {values.shape} != mask shape {labels.shape}")
    for axis in range(3):
        if patch[axis] > values.shape[axis]:
            raise ValueError(
                f"patch {patch} does not fit inside volume {values.shape}"
            )
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    has_fg = bool((labels != 0).any())
    ranges = [values.shape[axis] - patch[axis] for axis in range(3)]

    out: List[PatchSample] = []
    want_fg = (count + 1) // 2
    for i in range(count):
        need_fg = has_fg and i < want_fg
        for _attempt in range(max_attempts):
            origin = tuple(int(rng.integers(0, r + 1)) for r in ranges)
            lab = labels[origin[0]:origin[0] + patch[0],
                         origin[1]:origin[1] + patch[1],
                         origin[2]:origin[2] + patch[2]]
            if not need_fg or (lab != 0).any():
                break
        img = values[origin[0]:origin[0] + patch[0],
                     origin[1]:origin[1] + patch[1],
                     origin[2]:origin[2] + patch[2]]
        out.append(PatchSample(
            image_patch=img.transpose(2, 1, 0)[None, None].astype(np.float32),
            label_patch=one_hot(lab, classes)[None],
            origin=origin,
        ))
    return out
