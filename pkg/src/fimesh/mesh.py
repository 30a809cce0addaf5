"""Full and focused icosahedral meshes.

A Full Level-k mesh is the unit icosahedron with every face split 4-to-1
k times, midpoints pushed back onto the sphere. A Focused Level-k mesh is
the Full Level-1 mesh where only the designated face (the one holding
lat=0, lon=0) is refined further; the three coarse faces bordering it are
re-triangulated as fans over the hanging edge vertices so the result stays
a closed manifold.

Vertex ordering is deterministic: coarse vertices keep their indices and
midpoints are appended in ascending order of the sorted parent edge key.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

FULL = "full"
FOCUSED = "focused"

NO_PARENT = -1
_U32_SENTINEL = 0xFFFFFFFF
_MAGIC = b"FIMESH01"
_KIND_CODES = {FULL: 0, FOCUSED: 1}

_PHI = (1.0 + 5.0**0.5) / 2.0

# Cyclic permutations of (0, +-1, +-phi); order fixed here, not by any library.
_ICO_VERTICES = np.array(
    [
        [0.0, 1.0, _PHI],
        [0.0, 1.0, -_PHI],
        [0.0, -1.0, _PHI],
        [0.0, -1.0, -_PHI],
        [1.0, _PHI, 0.0],
        [1.0, -_PHI, 0.0],
        [-1.0, _PHI, 0.0],
        [-1.0, -_PHI, 0.0],
        [_PHI, 0.0, 1.0],
        [_PHI, 0.0, -1.0],
        [-_PHI, 0.0, 1.0],
        [-_PHI, 0.0, -1.0],
    ]
)

# Counterclockwise seen from outside.
_ICO_FACES = np.array(
    [
        [0, 2, 8], [0, 10, 2], [0, 4, 6], [0, 8, 4], [0, 6, 10],
        [1, 9, 3], [1, 3, 11], [1, 6, 4], [1, 4, 9], [1, 11, 6],
        [2, 7, 5], [2, 5, 8], [2, 10, 7], [3, 5, 7], [3, 9, 5],
        [3, 7, 11], [4, 8, 9], [5, 9, 8], [6, 11, 10], [7, 10, 11],
    ],
    dtype=np.int64,
)

FOCUS_POINT = np.array([1.0, 0.0, 0.0])


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangle mesh on the unit sphere.

    ``parent_edge[v]`` is the sorted pair of parent vertex indices whose
    midpoint produced ``v`` (``NO_PARENT`` twice for root vertices).
    Vertices ``[0, coarse_vertex_count)`` belong to the previous level.
    """

    level: int
    kind: str
    vertices: np.ndarray
    faces: np.ndarray
    parent_edge: np.ndarray
    coarse_vertex_count: int
    _hash: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        for arr in (self.vertices, self.faces, self.parent_edge):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_faces(self) -> int:
        return int(self.faces.shape[0])

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (a, b) rows, ascending."""
        return _unique_edges(self.faces, self.n_vertices)

    def digest(self) -> bytes:
        """SHA-256 over level, kind, vertices and faces; identifies the mesh in cache files."""
        if not self._hash:
            h = hashlib.sha256()
            h.update(struct.pack("<IB", self.level, _KIND_CODES[self.kind]))
            h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(self.faces, dtype="<u4").tobytes())
            self._hash.append(h.digest())
        return self._hash[0]

    def __repr__(self):
        return (
            f"TriMesh(level={self.level}, kind={self.kind!r}, "
            f"V={self.n_vertices}, F={self.n_faces})"
        )


def full_vertex_count(level: int) -> int:
    return 10 * 4**level + 2


def focused_vertex_count(level: int) -> int:
    if level < 1:
        raise MeshError("focused meshes start at level 1")
    n = 2 ** (level - 1)
    return 42 + (n + 1) * (n + 2) // 2 - 3


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.sqrt((v * v).sum(axis=1))[:, None]


def _edge_keys(faces: np.ndarray, n_vertices: int) -> np.ndarray:
    a = faces[:, [0, 1, 2]].reshape(-1)
    b = faces[:, [1, 2, 0]].reshape(-1)
    lo = np.minimum(a, b).astype(np.int64)
    hi = np.maximum(a, b).astype(np.int64)
    return lo * n_vertices + hi


def _unique_edges(faces: np.ndarray, n_vertices: int) -> np.ndarray:
    keys = np.unique(_edge_keys(faces, n_vertices))
    return np.stack([keys // n_vertices, keys % n_vertices], axis=1)


def _split_faces(vertices, faces):
    """4-to-1 split of ``faces``; returns (new vertex coords, parent edges, child faces).

    New vertex ids start at ``len(vertices)`` and follow ascending edge key.
    Children of face f are rows 4f..4f+3:
    (v0, m01, m20), (v1, m12, m01), (v2, m20, m12), (m01, m12, m20).
    """
    n = vertices.shape[0]
    keys = _edge_keys(faces, n)
    uniq, inverse = np.unique(keys, return_inverse=True)
    parents = np.stack([uniq // n, uniq % n], axis=1)
    new_xyz = _normalize((vertices[parents[:, 0]] + vertices[parents[:, 1]]) / 2.0)
    mids = (n + inverse).reshape(-1, 3)
    m01, m12, m20 = mids[:, 0], mids[:, 1], mids[:, 2]
    v0, v1, v2 = faces[:, 0], faces[:, 1], faces[:, 2]
    children = np.stack(
        [
            np.stack([v0, m01, m20], axis=1),
            np.stack([v1, m12, m01], axis=1),
            np.stack([v2, m20, m12], axis=1),
            np.stack([m01, m12, m20], axis=1),
        ],
        axis=1,
    ).reshape(-1, 3)
    return new_xyz, parents, children


def make_icosahedron() -> TriMesh:
    """Level-0 Full mesh: 12 vertices, 20 faces, fixed ordering."""
    verts = _normalize(_ICO_VERTICES.copy())
    return TriMesh(
        level=0,
        kind=FULL,
        vertices=verts,
        faces=_ICO_FACES.copy(),
        parent_edge=np.full((12, 2), NO_PARENT, dtype=np.int64),
        coarse_vertex_count=0,
    )


def subdivide(mesh: TriMesh) -> TriMesh:
    """One round of 4-to-1 refinement of every face of a Full mesh."""
    if mesh.kind != FULL:
        raise MeshError("subdivide expects a Full mesh; use make_focused for focused meshes")
    new_xyz, parents, children = _split_faces(mesh.vertices, mesh.faces)
    return TriMesh(
        level=mesh.level + 1,
        kind=FULL,
        vertices=np.concatenate([mesh.vertices, new_xyz]),
        faces=children.astype(np.int64),
        parent_edge=np.concatenate([mesh.parent_edge, parents]),
        coarse_vertex_count=mesh.n_vertices,
    )


@lru_cache(maxsize=None)
def make_full(level: int) -> TriMesh:
    if level < 0:
        raise MeshError(f"level must be >= 0, got {level}")
    if level == 0:
        return make_icosahedron()
    return subdivide(make_full(level - 1))


def spherical_triangle_contains(p: np.ndarray, a, b, c, tol: float = 1e-12) -> np.ndarray:
    """True where points ``p`` (n,3) lie inside or on the CCW spherical triangle abc."""
    p = np.atleast_2d(p)
    s0 = p @ np.cross(a, b)
    s1 = p @ np.cross(b, c)
    s2 = p @ np.cross(c, a)
    return (s0 >= -tol) & (s1 >= -tol) & (s2 >= -tol)


@lru_cache(maxsize=None)
def designated_face() -> int:
    """Index of the Level-1 face containing (1,0,0); ties go to the lowest index."""
    level1 = make_full(1)
    for i, (a, b, c) in enumerate(level1.faces):
        v = level1.vertices
        if spherical_triangle_contains(FOCUS_POINT, v[a], v[b], v[c])[0]:
            return i
    raise MeshError("no Level-1 face contains the focus point")  # pragma: no cover


@dataclass
class _FocusedState:
    vertices: np.ndarray
    parent_edge: np.ndarray
    patch_faces: np.ndarray
    chains: list  # ordered vertex chains along the 3 designated-face edges


def _assemble_focused(level: int, state: _FocusedState, coarse_count: int) -> TriMesh:
    level1 = make_full(1)
    d = designated_face()
    corners = level1.faces[d]
    # directed designated edge (u, w) -> chain u..w
    chain_of = {}
    for k in range(3):
        u, w = int(corners[k]), int(corners[(k + 1) % 3])
        chain_of[(u, w)] = state.chains[k]

    out = []
    for i, face in enumerate(level1.faces):
        if i == d:
            out.append(state.patch_faces)
            continue
        fan = None
        for r in range(3):
            a, b, c = (int(face[(r + j) % 3]) for j in range(3))
            if (b, a) in chain_of and len(chain_of[(b, a)]) > 2:
                chain = chain_of[(b, a)][::-1]
                fan = np.array(
                    [[chain[j], chain[j + 1], c] for j in range(len(chain) - 1)],
                    dtype=np.int64,
                )
                break
        out.append(fan if fan is not None else face[None, :].astype(np.int64))
    return TriMesh(
        level=level,
        kind=FOCUSED,
        vertices=state.vertices,
        faces=np.concatenate(out),
        parent_edge=state.parent_edge,
        coarse_vertex_count=coarse_count,
    )


@lru_cache(maxsize=None)
def _focused_state(level: int) -> tuple[_FocusedState, int]:
    if level == 1:
        level1 = make_full(1)
        corners = level1.faces[designated_face()]
        chains = [[int(corners[k]), int(corners[(k + 1) % 3])] for k in range(3)]
        st = _FocusedState(
            vertices=level1.vertices,
            parent_edge=level1.parent_edge,
            patch_faces=corners[None, :].astype(np.int64),
            chains=chains,
        )
        return st, level1.coarse_vertex_count
    prev, _ = _focused_state(level - 1)
    n = prev.vertices.shape[0]
    new_xyz, parents, children = _split_faces(prev.vertices, prev.patch_faces)
    mid_of = {(int(a), int(b)): n + j for j, (a, b) in enumerate(parents)}
    chains = []
    for chain in prev.chains:
        refined = [chain[0]]
        for u, w in zip(chain[:-1], chain[1:]):
            refined.append(mid_of[(min(u, w), max(u, w))])
            refined.append(w)
        chains.append(refined)
    st = _FocusedState(
        vertices=np.concatenate([prev.vertices, new_xyz]),
        parent_edge=np.concatenate([prev.parent_edge, parents]),
        patch_faces=children.astype(np.int64),
        chains=chains,
    )
    return st, n


@lru_cache(maxsize=None)
def make_focused(level: int) -> TriMesh:
    """Full Level-1 mesh with the designated face refined ``level - 1`` times."""
    if level < 1:
        raise MeshError(f"focused level must be >= 1, got {level}")
    state, coarse = _focused_state(level)
    return _assemble_focused(level, state, coarse)


def make_mesh(level: int, kind: str) -> TriMesh:
    if kind == FULL:
        return make_full(level)
    if kind == FOCUSED:
        return make_focused(level)
    raise MeshError(f"unknown mesh kind {kind!r}")


def refined_face_vertex_ids(mesh: TriMesh) -> np.ndarray:
    """Ascending vertex ids on or inside the designated Level-1 face."""
    if mesh.kind != FOCUSED:
        raise MeshError("refined_face_vertex_ids needs a Focused mesh")
    corners = np.sort(make_full(1).faces[designated_face()])
    return np.concatenate([corners, np.arange(42, mesh.n_vertices)]).astype(np.int64)


def refinable_faces(mesh: TriMesh) -> np.ndarray:
    """Faces the next refinement round splits, in canonical order."""
    if mesh.kind == FULL:
        return mesh.faces
    inside = np.zeros(mesh.n_vertices, dtype=bool)
    inside[refined_face_vertex_ids(mesh)] = True
    return mesh.faces[inside[mesh.faces].all(axis=1)]


def equivalent_resolution(vertex_count: float) -> tuple[int, int, float]:
    """Equirectangular size carrying about as many pixels as the mesh has vertices.

    Returns ``(width, height, raw_width)`` with raw_width = sqrt(N*pi). The
    integer width snaps to the nearest 90*2^k width when within 2%, else to
    the nearest even integer.
    """
    raw = float(np.sqrt(vertex_count * np.pi))
    width = max(2, int(round(raw / 2.0)) * 2)
    k = np.round(np.log2(raw / 90.0)) if raw > 0 else 0
    standard = 90.0 * 2.0**k
    if abs(standard - raw) <= 0.02 * raw:
        width = int(standard)
    return width, width // 2, raw


def signed_volumes(mesh: TriMesh) -> np.ndarray:
    v = mesh.vertices[mesh.faces]
    return np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2]))


def face_areas(mesh: TriMesh) -> np.ndarray:
    """Planar triangle areas."""
    v = mesh.vertices[mesh.faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def save_mesh(mesh: TriMesh, path) -> None:
    pe = mesh.parent_edge.astype(np.int64)
    pe = np.where(pe < 0, _U32_SENTINEL, pe).astype("<u4")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IBQQ", mesh.level, _KIND_CODES[mesh.kind], mesh.n_vertices, mesh.n_faces))
        f.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(mesh.faces, dtype="<u4").tobytes())
        f.write(pe.tobytes())
        f.write(struct.pack("<Q", mesh.coarse_vertex_count))


def load_mesh(path) -> TriMesh:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise MeshError(f"{path}: not a mesh file")
    off = 8
    level, kind_code, nv, nf = struct.unpack_from("<IBQQ", data, off)
    off += struct.calcsize("<IBQQ")
    verts = np.frombuffer(data, "<f8", nv * 3, off).reshape(nv, 3).astype(np.float64)
    off += nv * 24
    faces = np.frombuffer(data, "<u4", nf * 3, off).reshape(nf, 3).astype(np.int64)
    off += nf * 12
    pe = np.frombuffer(data, "<u4", nv * 2, off).reshape(nv, 2).astype(np.int64)
    off += nv * 8
    pe[pe == _U32_SENTINEL] = NO_PARENT
    (coarse,) = struct.unpack_from("<Q", data, off)
    kind = {v: k for k, v in _KIND_CODES.items()}[kind_code]
    return TriMesh(level, kind, verts, faces, pe, int(coarse))
