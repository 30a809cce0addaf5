"""Sparse differential operators on spherical triangle meshes.

Four V x V operators feed MeshConv: identity, north-south gradient,
east-west gradient and the mass-normalized cotangent Laplacian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from fimesh.mesh import TriMesh

# Weighting of incident face gradients when averaging to a vertex.
GRADIENT_WEIGHTING = "area"
DEGENERATE_AREA = 1e-15
POLE_TOL = 1e-12

_MAGIC = b"FIOPS001"
OPERATOR_NAMES = ("identity", "grad_lat", "grad_lng", "laplacian")


class DegenerateFaceError(ValueError):
    pass


class SparseOp:
    """Square CSR operator with duplicates summed and explicit zeros dropped."""

    def __init__(self, matrix, symmetric: bool = False):
        m = sp.csr_matrix(matrix, dtype=np.float64)
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"operator must be square, got {m.shape}")
        self.matrix = m
        self.symmetric = symmetric

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def __matmul__(self, x):
        return apply(self, x)


@dataclass(frozen=True)
class OperatorSet:
    identity: SparseOp
    grad_lat: SparseOp
    grad_lng: SparseOp
    laplacian: SparseOp
    mesh_id: bytes

    def as_tuple(self):
        return (self.identity, self.grad_lat, self.grad_lng, self.laplacian)

    def stacked(self) -> sp.csr_matrix:
        """(4V x V) vertical stack in order identity, grad_lat, grad_lng, laplacian."""
        return sp.vstack([op.matrix for op in self.as_tuple()], format="csr")


def apply(op: SparseOp, signal: np.ndarray) -> np.ndarray:
    """Apply ``op`` along the last (vertex) axis of ``signal``."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape[-1] != op.n:
        raise ValueError(f"signal has {signal.shape[-1]} vertices, operator expects {op.n}")
    lead = signal.shape[:-1]
    flat = signal.reshape(-1, op.n)
    out = (op.matrix @ flat.T).T
    return np.ascontiguousarray(out).reshape(*lead, op.n)


def tangent_frames(vertices: np.ndarray):
    """Unit north and east vectors per vertex; zero rows at the poles."""
    z = np.array([0.0, 0.0, 1.0])
    north = z[None, :] - vertices[:, 2:3] * vertices
    east = np.cross(z[None, :], vertices)
    pole = np.abs(np.abs(vertices[:, 2]) - 1.0) < POLE_TOL
    nn = np.linalg.norm(north, axis=1)
    ne = np.linalg.norm(east, axis=1)
    north[~pole] /= nn[~pole, None]
    east[~pole] /= ne[~pole, None]
    north[pole] = 0.0
    east[pole] = 0.0
    return north, east


def _face_geometry(mesh: TriMesh):
    v = mesh.vertices[mesh.faces]  # (F, 3 corners, 3)
    normal = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    double_area = np.linalg.norm(normal, axis=1)
    area = 0.5 * double_area
    bad = np.flatnonzero(area < DEGENERATE_AREA)
    if bad.size:
        f = int(bad[0])
        raise DegenerateFaceError(
            f"{bad.size} degenerate face(s); first is face {f} "
            f"{mesh.faces[f].tolist()} with area {area[f]:.3e}"
        )
    unit_n = normal / double_area[:, None]
    return v, unit_n, area


def gradient_components(mesh: TriMesh):
    """Vertex gradient operators (Gx, Gy, Gz), each V x V.

    Per face the hat function of corner i has constant gradient
    n x e_i / (2A) with e_i the CCW edge opposite i.
    """
    v, unit_n, area = _face_geometry(mesh)
    nv = mesh.n_vertices
    faces = mesh.faces
    weights = area if GRADIENT_WEIGHTING == "area" else np.ones_like(area)
    vertex_weight = np.zeros(nv)
    for k in range(3):
        np.add.at(vertex_weight, faces[:, k], weights)

    rows, cols, vals = [], [], []
    for i in range(3):
        opp = v[:, (i + 2) % 3] - v[:, (i + 1) % 3]
        g = np.cross(unit_n, opp) / (2.0 * area[:, None])  # (F, 3) grad of hat_i
        for r in range(3):
            rows.append(faces[:, r])
            cols.append(faces[:, i])
            vals.append(weights[:, None] * g)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    vals = vals / vertex_weight[rows][:, None]
    return tuple(
        sp.csr_matrix((vals[:, c], (rows, cols)), shape=(nv, nv)) for c in range(3)
    )


def cotangent_weights(mesh: TriMesh) -> sp.csr_matrix:
    """Symmetric matrix of (cot alpha + cot beta)/2 on edges, zero diagonal."""
    v, _, area = _face_geometry(mesh)
    nv = mesh.n_vertices
    faces = mesh.faces
    rows, cols, vals = [], [], []
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        e1 = v[:, j] - v[:, i]
        e2 = v[:, k] - v[:, i]
        cot = np.einsum("ij,ij->i", e1, e2) / (2.0 * area)
        rows += [faces[:, j], faces[:, k]]
        cols += [faces[:, k], faces[:, j]]
        vals += [0.5 * cot, 0.5 * cot]
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nv, nv)
    )


def barycentric_mass(mesh: TriMesh) -> np.ndarray:
    """One-ring area / 3 per vertex."""
    _, _, area = _face_geometry(mesh)
    mass = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(mass, mesh.faces[:, k], area / 3.0)
    return mass


def stiffness_matrix(mesh: TriMesh) -> sp.csr_matrix:
    """Symmetric cotangent matrix W - diag(W 1): negative semi-definite, rows sum to 0."""
    w = cotangent_weights(mesh)
    return (w - sp.diags(np.asarray(w.sum(axis=1)).ravel())).tocsr()


def build_operators(mesh: TriMesh) -> OperatorSet:
    nv = mesh.n_vertices
    gx, gy, gz = gradient_components(mesh)
    north, east = tangent_frames(mesh.vertices)
    grad_lat = (
        sp.diags(north[:, 0]) @ gx + sp.diags(north[:, 1]) @ gy + sp.diags(north[:, 2]) @ gz
    )
    grad_lng = (
        sp.diags(east[:, 0]) @ gx + sp.diags(east[:, 1]) @ gy + sp.diags(east[:, 2]) @ gz
    )
    lap = sp.diags(1.0 / barycentric_mass(mesh)) @ stiffness_matrix(mesh)
    return OperatorSet(
        identity=SparseOp(sp.identity(nv, format="csr"), symmetric=True),
        grad_lat=SparseOp(grad_lat),
        grad_lng=SparseOp(grad_lng),
        laplacian=SparseOp(lap),
        mesh_id=mesh.digest(),
    )


def save_operators(ops: OperatorSet, path) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(ops.mesh_id)
        for op in ops.as_tuple():
            m = op.matrix
            f.write(struct.pack("<QQB", m.shape[0], m.nnz, int(op.symmetric)))
            f.write(m.indptr.astype("<u8").tobytes())
            f.write(m.indices.astype("<u4").tobytes())
            f.write(m.data.astype("<f8").tobytes())


def load_operators(path, mesh: TriMesh | None = None) -> OperatorSet:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not an operator file")
    mesh_id = data[8:40]
    if mesh is not None and mesh.digest() != mesh_id:
        raise ValueError(f"{path}: operators were built for a different mesh")
    off = 40
    ops = []
    for _ in OPERATOR_NAMES:
        n, nnz, sym = struct.unpack_from("<QQB", data, off)
        off += 17
        indptr = np.frombuffer(data, "<u8", n + 1, off).astype(np.int64)
        off += 8 * (n + 1)
        indices = np.frombuffer(data, "<u4", nnz, off).astype(np.int32)
        off += 4 * nnz
        values = np.frombuffer(data, "<f8", nnz, off).copy()
        off += 8 * nnz
        ops.append(SparseOp(sp.csr_matrix((values, indices, indptr), shape=(n, n)), bool(sym)))
    return OperatorSet(*ops, mesh_id=mesh_id)
