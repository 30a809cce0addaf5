"""Per-face linear maps carrying the focused face onto each Level-1 face."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fimesh.mesh import FOCUSED, FULL, TriMesh, designated_face, make_full, spherical_triangle_contains

N_FACES = 80
_MAGIC = b"FIROT001"


@dataclass(frozen=True)
class RotationTable:
    """``maps[i] = F_i @ inv(F_0)`` where F_* hold face corners as columns.

    ``rotated_vertices[i, j]`` is focused vertex j carried onto face i and
    pushed back to the unit sphere.
    """

    maps: np.ndarray  # (80, 3, 3)
    rotated_vertices: np.ndarray  # (80, V, 3)
    focused_level: int

    @property
    def face_count(self) -> int:
        return self.maps.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.rotated_vertices.shape[1]

    def inverse_maps(self) -> np.ndarray:
        return np.linalg.inv(self.maps)

    def orthogonality_deviation(self) -> np.ndarray:
        """||M^T M - I||_F per face (diagnostic only)."""
        mtm = np.einsum("fji,fjk->fik", self.maps, self.maps)
        return np.linalg.norm(mtm - np.eye(3)[None], axis=(1, 2))


def corner_matrix(mesh: TriMesh, face: int) -> np.ndarray:
    return mesh.vertices[mesh.faces[face]].T.copy()


def face_maps(level1_mesh: TriMesh) -> np.ndarray:
    f0 = corner_matrix(level1_mesh, designated_face())
    if abs(np.linalg.det(f0)) < 1e-12:
        raise ValueError("designated face corner matrix is singular")
    f0_inv = np.linalg.inv(f0)
    corners = level1_mesh.vertices[level1_mesh.faces]  # (80, 3 corners, 3 xyz)
    maps = np.einsum("fcx,cy->fxy", corners, f0_inv)
    return maps


def build_rotation_table(level1_mesh: TriMesh, focused_mesh: TriMesh) -> RotationTable:
    if level1_mesh.kind != FULL or level1_mesh.level != 1:
        raise ValueError("first argument must be the Full Level-1 mesh")
    if focused_mesh.kind != FOCUSED:
        raise ValueError("second argument must be a Focused mesh")
    if not np.array_equal(focused_mesh.vertices[:42], level1_mesh.vertices):
        raise ValueError("focused mesh is not built on this Level-1 base")
    maps = face_maps(level1_mesh)
    rotated = np.einsum("fxy,vy->fvx", maps, focused_mesh.vertices)
    rotated /= np.sqrt((rotated * rotated).sum(axis=2))[..., None]
    return RotationTable(maps=maps, rotated_vertices=rotated, focused_level=focused_mesh.level)


def face_of_point(level1_mesh: TriMesh, p: np.ndarray, tol: float = 1e-12) -> np.ndarray | int:
    """Level-1 face index containing each unit vector in ``p``; ties go to the lowest index."""
    pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
    v = level1_mesh.vertices
    a, b, c = (v[level1_mesh.faces[:, k]] for k in range(3))
    # (n, 80) signed distances to each edge plane
    s0 = pts @ np.cross(a, b).T
    s1 = pts @ np.cross(b, c).T
    s2 = pts @ np.cross(c, a).T
    margin = np.minimum(np.minimum(s0, s1), s2)
    inside = margin >= -tol
    idx = np.where(inside.any(axis=1), inside.argmax(axis=1), margin.argmax(axis=1))
    return int(idx[0]) if np.ndim(p) == 1 else idx


def contains(level1_mesh: TriMesh, face: int, p: np.ndarray) -> np.ndarray:
    a, b, c = level1_mesh.vertices[level1_mesh.faces[face]]
    return spherical_triangle_contains(p, a, b, c)


def save_table(table: RotationTable, path) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", table.focused_level, table.n_vertices))
        f.write(np.ascontiguousarray(table.maps, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(table.rotated_vertices, dtype="<f8").tobytes())


def load_table(path) -> RotationTable:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a rotation table")
    level, nv = struct.unpack_from("<IQ", data, 8)
    off = 8 + struct.calcsize("<IQ")
    maps = np.frombuffer(data, "<f8", N_FACES * 9, off).reshape(N_FACES, 3, 3).copy()
    off += N_FACES * 72
    rotated = np.frombuffer(data, "<f8", N_FACES * nv * 3, off).reshape(N_FACES, nv, 3).copy()
    return RotationTable(maps=maps, rotated_vertices=rotated, focused_level=int(level))


def level1_mesh() -> TriMesh:
    return make_full(1)
