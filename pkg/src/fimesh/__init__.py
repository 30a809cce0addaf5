"""Focused icosahedral meshes, spherical MeshConv operators and VertexShuffle super-resolution."""

from fimesh.mesh import (
    TriMesh,
    equivalent_resolution,
    focused_vertex_count,
    full_vertex_count,
    make_focused,
    make_icosahedron,
    refined_face_vertex_ids,
    subdivide,
)

__all__ = [
    "TriMesh",
    "equivalent_resolution",
    "focused_vertex_count",
    "full_vertex_count",
    "make_focused",
    "make_icosahedron",
    "refined_face_vertex_ids",
    "subdivide",
]

__version__ = "0.1.0"
