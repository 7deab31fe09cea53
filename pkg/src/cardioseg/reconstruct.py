"""Isosurface extraction and mesh export for segmented structures.

Marching cubes runs on the binary indicator of one label, padded by a
zero voxel on every face so surfaces close, with vertices interpolated
at the 0.5 isolevel.  Cubes are scanned x-fastest and vertices are
welded by their lattice edge, so the output is deterministic and
watertight on padded masks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Tuple, Union

import numpy as np

from .data_io import LabelMask
from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE


@dataclass
class Mesh:
    vertices: np.ndarray   # (V, 3) float64, millimetres
    triangles: np.ndarray  # (T, 3) int64, outward winding

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0


def _labels_of(mask) -> np.ndarray:
    if isinstance(mask, LabelMask):
        return mask.labels
    return np.asarray(mask)


def marching_cubes(
    mask: Union[LabelMask, np.ndarray],
    label: int,
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0),
    isolevel: float = 0.5,
) -> Mesh:
    """Triangulated isosurface of (mask == label).

    Vertex coordinates are voxel index times spacing; an empty label
    yields an empty mesh.
    """
    labels = _labels_of(mask)
    if labels.ndim != 3:
        raise ValueError(f"expected a 3D mask, got shape {labels.shape}")
    field01 = np.pad((labels == label).astype(np.float64), 1)
    if not field01.any():
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    # cube index per lattice cell, vectorized over the whole grid
    inside = field01 > isolevel
    nx, ny, nz = field01.shape
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint16)
    for bit, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        case |= inside[ox : ox + nx - 1, oy : oy + ny - 1, oz : oz + nz - 1].astype(np.uint16) << bit

    active = np.argwhere((case != 0) & (case != 255))
    # x-fastest scan order
    active = active[np.lexsort((active[:, 0], active[:, 1], active[:, 2]))]

    verts: List[Tuple[float, float, float]] = []
    vert_ids: Dict[Tuple[int, int, int, int], int] = {}
    tris: List[Tuple[int, int, int]] = []

    def edge_vertex(cx: int, cy: int, cz: int, edge: int) -> int:
        c0, c1 = EDGE_CORNERS[edge]
        o0, o1 = CORNER_OFFSETS[c0], CORNER_OFFSETS[c1]
        p0 = (cx + o0[0], cy + o0[1], cz + o0[2])
        p1 = (cx + o1[0], cy + o1[1], cz + o1[2])
        if p1 < p0:
            p0, p1 = p1, p0
        axis = 0 if p0[0] != p1[0] else (1 if p0[1] != p1[1] else 2)
        key = (p0[0], p0[1], p0[2], axis)
        idx = vert_ids.get(key)
        if idx is None:
            v0 = field01[p0]
            v1 = field01[p1]
            t = (isolevel - v0) / (v1 - v0)
            pos = [float(p) for p in p0]
            pos[axis] += t
            verts.append(tuple(pos))
            idx = len(verts) - 1
            vert_ids[key] = idx
        return idx

    for cx, cy, cz in active:
        cx, cy, cz = int(cx), int(cy), int(cz)
        row = TRI_TABLE[int(case[cx, cy, cz])]
        k = 0
        while row[k] != -1:
            a = edge_vertex(cx, cy, cz, row[k])
            b = edge_vertex(cx, cy, cz, row[k + 1])
            c = edge_vertex(cx, cy, cz, row[k + 2])
            tris.append((a, c, b))  # swap for outward winding
            k += 3

    vertices = np.asarray(verts, dtype=np.float64)
    # undo the one-voxel pad, then scale to millimetres
    vertices -= 1.0
    vertices *= np.asarray(spacing_mm, dtype=np.float64)
    return Mesh(vertices, np.asarray(tris, dtype=np.int64))


def mesh_volume_ml(mesh: Mesh) -> float:
    """Enclosed volume by signed tetrahedra (divergence theorem), in mL.

    Positive for outward-wound watertight meshes.
    """
    if mesh.is_empty:
        return 0.0
    v = mesh.vertices
    t = mesh.triangles
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    vol_mm3 = float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)
    return vol_mm3 / 1000.0


def edge_incidence(mesh: Mesh) -> Dict[Tuple[int, int], int]:
    """Triangle count per undirected edge (2 everywhere iff watertight)."""
    counts: Dict[Tuple[int, int], int] = {}
    for a, b, c in mesh.triangles:
        for e in ((a, b), (b, c), (c, a)):
            key = (int(min(e)), int(max(e)))
            counts[key] = counts.get(key, 0) + 1
    return counts


def is_watertight(mesh: Mesh) -> bool:
    if mesh.is_empty:
        return True
    return all(n == 2 for n in edge_incidence(mesh).values())


def euler_characteristic(mesh: Mesh) -> int:
    v = len(mesh.vertices)
    e = len(edge_incidence(mesh))
    f = len(mesh.triangles)
    return v - e + f


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

def _triangle_normal(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n)
    if norm == 0.0:
        return np.zeros(3)
    return n / norm


def export_stl(mesh: Mesh, path, label: str = "cardioseg mesh") -> None:
    """Binary STL: 80-byte zero-padded header, uint32 triangle count,
    then 50 bytes per triangle (normal, 3 vertices, zero attribute)."""
    header = label.encode("ascii", "replace")[:80].ljust(80, b"\x00")
    with open(path, "wb") as f:
        f.write(header)
        f.write(struct.pack("<I", len(mesh.triangles)))
        for tri in mesh.triangles:
            a, b, c = (mesh.vertices[i] for i in tri)
            n = _triangle_normal(a, b, c)
            f.write(struct.pack("<12f", *n, *a, *b, *c))
            f.write(struct.pack("<H", 0))


def export_obj(mesh: Mesh, path) -> None:
    """ASCII OBJ with 1-based face indices and 6-significant-digit floats."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.6g} {v[1]:.6g} {v[2]:.6g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
