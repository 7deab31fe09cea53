"""Medical volume I/O, dataset indexing and intensity normalization.

NIfTI-1 support is deliberately narrow: little- or big-endian single-file
(.nii, n+1) or header/image pairs (.hdr/.img, ni1), optionally gzipped,
datatypes uint8 / int16 / float32, with scl_slope / scl_inter honored.
Volumes are indexed [x, y, z]; on disk x varies fastest.
"""

from __future__ import annotations

import gzip
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    NiftiDatatypeError,
    NiftiDimError,
    NiftiHeaderError,
    NiftiMagicError,
    NiftiTruncatedError,
)

HEADER_SIZE = 348
VOX_OFFSET = 352

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"), ("data_type", "S10"), ("db_name", "S18"),
    ("extents", "i4"), ("session_error", "i2"), ("regular", "S1"),
    ("dim_info", "u1"), ("dim", "i2", (8,)),
    ("intent_p1", "f4"), ("intent_p2", "f4"), ("intent_p3", "f4"),
    ("intent_code", "i2"), ("datatype", "i2"), ("bitpix", "i2"),
    ("slice_start", "i2"), ("pixdim", "f4", (8,)), ("vox_offset", "f4"),
    ("scl_slope", "f4"), ("scl_inter", "f4"), ("slice_end", "i2"),
    ("slice_code", "u1"), ("xyzt_units", "u1"), ("cal_max", "f4"),
    ("cal_min", "f4"), ("slice_duration", "f4"), ("toffset", "f4"),
    ("glmax", "i4"), ("glmin", "i4"), ("descrip", "S80"), ("aux_file", "S24"),
    ("qform_code", "i2"), ("sform_code", "i2"),
    ("quatern_b", "f4"), ("quatern_c", "f4"), ("quatern_d", "f4"),
    ("qoffset_x", "f4"), ("qoffset_y", "f4"), ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)), ("srow_y", "f4", (4,)), ("srow_z", "f4", (4,)),
    ("intent_name", "S16"), ("magic", "S4"),
]


def _header_dtype(byteorder: str) -> np.dtype:
    return np.dtype([(name, byteorder + kind, *rest) for name, kind, *rest in _HEADER_FIELDS])


_DTYPE_BY_CODE = {2: ("uint8", "u1", 8), 4: ("int16", "i2", 16), 16: ("float32", "f4", 32)}
_CODE_BY_NAME = {name: (code, kind, bits) for code, (name, kind, bits) in _DTYPE_BY_CODE.items()}


@dataclass
class VolumeHeader:
    dims: Tuple[int, int, int]
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    datatype: str = "float32"
    slope: float = 1.0
    inter: float = 0.0

    def __post_init__(self):
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be >= 1, got {self.dims}")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be positive, got {self.spacing_mm}")

    def voxel_volume_mm3(self) -> float:
        return self.spacing_mm[0] * self.spacing_mm[1] * self.spacing_mm[2]


@dataclass
class Volume:
    header: VolumeHeader
    values: np.ndarray  # float32, shape (X, Y, Z)


@dataclass
class LabelMask:
    header: VolumeHeader
    labels: np.ndarray  # uint8, shape (X, Y, Z)


def _maybe_decompress(raw: bytes) -> bytes:
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def read_nifti(path) -> Union[Volume, LabelMask]:
    """Parse a NIfTI-1 file; uint8 payloads load as LabelMask, the rest
    as Volume with slope/intercept scaling applied."""
    path = Path(path)
    raw = _maybe_decompress(path.read_bytes())
    if len(raw) < HEADER_SIZE:
        raise NiftiHeaderError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_header_dtype("<"))[0]
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        hdr_be = np.frombuffer(raw[:HEADER_SIZE], dtype=_header_dtype(">"))[0]
        if int(hdr_be["sizeof_hdr"]) != HEADER_SIZE:
            raise NiftiHeaderError(
                f"{path}: sizeof_hdr is {int(hdr['sizeof_hdr'])}, expected {HEADER_SIZE}"
            )
        hdr, order = hdr_be, ">"
    else:
        order = "<"

    magic = bytes(hdr["magic"])
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiMagicError(f"{path}: bad magic {magic!r}")

    code = int(hdr["datatype"])
    if code not in _DTYPE_BY_CODE:
        raise NiftiDatatypeError(f"{path}: unsupported datatype code {code}")
    dtname, kind, _bits = _DTYPE_BY_CODE[code]

    ndim = int(hdr["dim"][0])
    if ndim not in (2, 3, 4):
        raise NiftiDimError(f"{path}: dim[0] must be in {{2,3,4}}, got {ndim}")
    extents = [int(d) for d in hdr["dim"][1 : 1 + ndim]]
    if ndim == 4:
        if extents[3] != 1:
            raise NiftiDimError(
                f"{path}: 4D files are only supported with a single frame, got {extents[3]}"
            )
        extents = extents[:3]
    while len(extents) < 3:
        extents.append(1)
    nx, ny, nz = extents
    if min(nx, ny, nz) < 1:
        raise NiftiDimError(f"{path}: non-positive extent in {extents}")

    pix = [float(p) for p in hdr["pixdim"][1:4]]
    spacing = tuple(p if p > 0 else 1.0 for p in pix)

    if magic == b"ni1\x00":
        payload = _read_img_pair(path)
        offset = 0
    else:
        payload = raw
        offset = int(hdr["vox_offset"])

    count = nx * ny * nz
    need = offset + count * np.dtype(kind).itemsize
    if len(payload) < need:
        raise NiftiTruncatedError(
            f"{path}: payload has {len(payload) - offset} bytes, "
            f"needs {count * np.dtype(kind).itemsize}"
        )
    data = np.frombuffer(payload, dtype=order + kind, count=count, offset=offset)
    grid = data.reshape(nz, ny, nx).transpose(2, 1, 0)  # x fastest on disk

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if math.isnan(slope):
        slope = 0.0
    if math.isnan(inter):
        inter = 0.0

    if dtname == "uint8":
        header = VolumeHeader((nx, ny, nz), spacing, dtname, 1.0, 0.0)
        return LabelMask(header, np.ascontiguousarray(grid, dtype=np.uint8))

    values = grid.astype(np.float32)
    if slope != 0.0 and (slope != 1.0 or inter != 0.0):
        values = values * np.float32(slope) + np.float32(inter)
    header = VolumeHeader((nx, ny, nz), spacing, dtname,
                          slope if slope != 0.0 else 1.0, inter)
    return Volume(header, np.ascontiguousarray(values))


def _read_img_pair(hdr_path: Path) -> bytes:
    stem = hdr_path.name
    for suffix in (".hdr.gz", ".hdr", ".nii.gz", ".nii"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
            break
    for candidate in (hdr_path.with_name(stem + ".img"), hdr_path.with_name(stem + ".img.gz")):
        if candidate.exists():
            return _maybe_decompress(candidate.read_bytes())
    raise NiftiTruncatedError(f"{hdr_path}: ni1 file without a matching .img payload")


def write_nifti(obj: Union[Volume, LabelMask], path, gzip_compress: Optional[bool] = None) -> None:
    """Write little-endian NIfTI-1, magic n+1, vox_offset 352, slope 1.

    gzip_compress defaults to the path suffix (.gz).  Gzip output carries
    no timestamp so identical inputs give identical bytes.
    """
    path = Path(path)
    if gzip_compress is None:
        gzip_compress = path.name.endswith(".gz")

    if isinstance(obj, LabelMask):
        grid = np.ascontiguousarray(obj.labels, dtype="u1")
        code, _kind, bits = _CODE_BY_NAME["uint8"]
    else:
        grid = np.ascontiguousarray(obj.values, dtype="<f4")
        code, _kind, bits = _CODE_BY_NAME["float32"]

    nx, ny, nz = obj.header.dims
    if grid.shape != (nx, ny, nz):
        raise ValueError(f"data shape {grid.shape} does not match header dims {obj.header.dims}")

    hdr = np.zeros((), dtype=_header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["dim"] = [3, nx, ny, nz, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = bits
    hdr["pixdim"] = [1.0, *obj.header.spacing_mm, 0.0, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # millimetres
    hdr["magic"] = b"n+1\x00"

    blob = hdr.tobytes() + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + grid.transpose(2, 1, 0).tobytes()
    if gzip_compress:
        with open(path, "wb") as f:
            with gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as gz:
                gz.write(blob)
    else:
        path.write_bytes(blob)


# --------------------------------------------------------------------------
# dataset index and splitting
# --------------------------------------------------------------------------

@dataclass
class IndexEntry:
    subject: str
    phase: str  # "ED" or "ES"
    image: str
    mask: str
    split: str = "train"


@dataclass
class DatasetIndex:
    entries: List[IndexEntry] = field(default_factory=list)

    def subjects(self) -> List[str]:
        seen = []
        for e in self.entries:
            if e.subject not in seen:
                seen.append(e.subject)
        return seen

    def for_split(self, split: str) -> List[IndexEntry]:
        return [e for e in self.entries if e.split == split]

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps([asdict(e) for e in self.entries], indent=2) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path) -> "DatasetIndex":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls([IndexEntry(**row) for row in data])


def split_dataset(
    index: DatasetIndex,
    fractions: Tuple[float, float, float] = (0.70, 0.10, 0.20),
    seed: int = 0,
) -> DatasetIndex:
    """Assign train/val/test by subject so both phases stay together.

    Counts are floor-rounded from the val and test fractions with the
    remainder going to train; the shuffle is a deterministic function of
    the seed.
    """
    if not index.entries:
        raise ValueError("cannot split an empty dataset index")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    subjects = sorted(set(e.subject for e in index.entries))
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n = len(order)
    n_val = int(n * fractions[1])
    n_test = int(n * fractions[2])
    n_train = n - n_val - n_test
    assignment = {}
    for i, s in enumerate(order):
        if i < n_train:
            assignment[s] = "train"
        elif i < n_train + n_val:
            assignment[s] = "val"
        else:
            assignment[s] = "test"
    return DatasetIndex([
        IndexEntry(e.subject, e.phase, e.image, e.mask, assignment[e.subject])
        for e in index.entries
    ])


def normalize_intensity(volume: Volume) -> Volume:
    """Min-max rescale to [0, 1] per volume; a constant volume maps to zeros."""
    v = volume.values
    lo = float(v.min())
    hi = float(v.max())
    if hi == lo:
        out = np.zeros_like(v, dtype=np.float32)
    else:
        out = ((v - lo) / (hi - lo)).astype(np.float32)
    return Volume(volume.header, out)
