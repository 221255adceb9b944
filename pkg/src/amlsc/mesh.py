"""Conforming triangular meshes with newest-vertex-bisection refinement.

A mesh is stored as flat numpy arrays.  The convention throughout is that
the refinement (reference) edge of triangle ``(a, b, c)`` is the edge
``a-b``; bisection inserts the midpoint of that edge and the new vertex
becomes the "newest" vertex of both children.  Refinement of a conforming
mesh returns a new conforming mesh together with a record of the
parent/child relations, so nodal data can be prolonged exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TriMesh",
    "RefinementRecord",
    "initial_mesh",
    "uniform_refine",
    "refine_nvb",
    "midpoint_prolongate",
    "write_mesh_ascii",
    "read_mesh_ascii",
]


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Conforming triangulation of a polygonal domain.

    vertices: (n, 2) float array of coordinates.
    triangles: (m, 3) int array; edge between local vertices 0 and 1 is the
        refinement edge.
    boundary_edges: (b, 2) int array of Dirichlet edges.
    generation: refinement depth counter.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    generation: int = 0
    _geom: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for a in (self.vertices, self.triangles, self.boundary_edges):
            a.setflags(write=False)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    def signed_areas(self) -> np.ndarray:
        p = self.vertices
        t = self.triangles
        d1 = p[t[:, 1]] - p[t[:, 0]]
        d2 = p[t[:, 2]] - p[t[:, 0]]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def min_angle(self) -> float:
        """Smallest interior angle over all triangles (radians)."""
        p = self.vertices
        t = self.triangles
        ang = np.empty((t.shape[0], 3))
        for i in range(3):
            u = p[t[:, (i + 1) % 3]] - p[t[:, i]]
            v = p[t[:, (i + 2) % 3]] - p[t[:, i]]
            cosv = (u * v).sum(1) / np.sqrt((u * u).sum(1) * (v * v).sum(1))
            ang[:, i] = np.arccos(np.clip(cosv, -1.0, 1.0))
        return float(ang.min())

    def dirichlet_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_vertices, dtype=bool)
        if self.boundary_edges.size:
            mask[self.boundary_edges.ravel()] = True
        return mask

    def edge_data(self):
        """Unique-edge bookkeeping: (edge2nodes, element2edges, boundary2edges).

        Edge i of a triangle connects its local vertices (i, (i+1) % 3), so
        edge 0 is the refinement edge.  Cached; the mesh is immutable.
        """
        if "edges" not in self._geom:
            t = self.triangles
            raw = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
            key = np.sort(raw, axis=1)
            edge2nodes, inverse = np.unique(key, axis=0, return_inverse=True)
            element2edges = inverse.reshape(3, -1).T
            if self.boundary_edges.size:
                bkey = np.sort(self.boundary_edges, axis=1)
                # locate each boundary pair inside the sorted unique edges
                idx = np.searchsorted(
                    edge2nodes[:, 0] * (self.num_vertices + 1) + edge2nodes[:, 1],
                    bkey[:, 0] * (self.num_vertices + 1) + bkey[:, 1],
                )
                boundary2edges = idx
            else:
                boundary2edges = np.empty(0, dtype=int)
            self._geom["edges"] = (edge2nodes, element2edges, boundary2edges)
        return self._geom["edges"]


@dataclass(frozen=True)
class RefinementRecord:
    """Parent/child bookkeeping for one refinement step.

    parent_of: (children,) parent triangle index per child triangle.
    new_vertex_parents: (new vertices, 2) endpoint vertices (in the parent
        mesh) of the bisected edge; new vertex i of the child mesh is vertex
        ``num_parent_vertices + i`` and sits at the midpoint of its parents.
    """

    parent_of: np.ndarray
    new_vertex_parents: np.ndarray
    num_parent_vertices: int


def _check_marked(mesh: TriMesh, marked) -> np.ndarray:
    marked = np.asarray(sorted(set(int(i) for i in marked)), dtype=int)
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.num_triangles):
        raise IndexError(f"marked triangle index out of range: {marked}")
    return marked


def refine_nvb(mesh: TriMesh, marked) -> tuple[TriMesh, RefinementRecord]:
    """Bisect the marked triangles, adding closure bisections for conformity.

    Every marked triangle is refined by three bisections (all its edges are
    split); neighbours receive one or two bisections as needed so no hanging
    nodes remain.  The result is nested with the input mesh and positively
    oriented.
    """
    marked = _check_marked(mesh, marked)
    if marked.size == 0:
        return mesh, RefinementRecord(
            parent_of=np.arange(mesh.num_triangles),
            new_vertex_parents=np.empty((0, 2), dtype=int),
            num_parent_vertices=mesh.num_vertices,
        )

    edge2nodes, element2edges, boundary2edges = mesh.edge_data()
    nedges = edge2nodes.shape[0]
    split = np.zeros(nedges, dtype=bool)
    split[element2edges[marked]] = True

    # closure: an element with any split edge must also split its reference
    # edge; iterate until stable (terminates by the NVB compatibility of the
    # initial reference-edge assignment)
    while True:
        flags = split[element2edges]
        need = ~flags[:, 0] & (flags[:, 1] | flags[:, 2])
        if not need.any():
            break
        split[element2edges[need, 0]] = True

    nv = mesh.num_vertices
    new_id = -np.ones(nedges, dtype=int)
    which = np.flatnonzero(split)
    new_id[which] = nv + np.arange(which.size)
    midpoints = 0.5 * (
        mesh.vertices[edge2nodes[which, 0]] + mesh.vertices[edge2nodes[which, 1]]
    )
    vertices = np.vstack([mesh.vertices, midpoints])

    flags = split[element2edges]
    pattern = flags[:, 0].astype(int) + 2 * flags[:, 1] + 4 * flags[:, 2]
    if np.any((pattern > 0) & (pattern % 2 == 0)):
        raise AssertionError("closure failed: split edge without split reference edge")

    t = mesh.triangles
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    m0 = new_id[element2edges[:, 0]]
    m1 = new_id[element2edges[:, 1]]
    m2 = new_id[element2edges[:, 2]]

    counts = np.select(
        [pattern == 0, pattern == 1, pattern == 3, pattern == 5, pattern == 7],
        [1, 2, 3, 3, 4],
    )
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = offsets[-1]
    children = np.empty((total, 3), dtype=int)
    parent_of = np.repeat(np.arange(t.shape[0]), counts)

    def emit(rows, local, tri_cols):
        children[offsets[rows] + local] = np.column_stack(tri_cols)

    rows = np.flatnonzero(pattern == 0)
    if rows.size:
        emit(rows, 0, (a[rows], b[rows], c[rows]))
    # bisec(1): split reference edge only
    rows = np.flatnonzero(pattern == 1)
    if rows.size:
        emit(rows, 0, (c[rows], a[rows], m0[rows]))
        emit(rows, 1, (b[rows], c[rows], m0[rows]))
    # bisec(1,2): reference edge plus edge b-c
    rows = np.flatnonzero(pattern == 3)
    if rows.size:
        emit(rows, 0, (c[rows], a[rows], m0[rows]))
        emit(rows, 1, (m0[rows], b[rows], m1[rows]))
        emit(rows, 2, (c[rows], m0[rows], m1[rows]))
    # bisec(1,3): reference edge plus edge c-a
    rows = np.flatnonzero(pattern == 5)
    if rows.size:
        emit(rows, 0, (m0[rows], c[rows], m2[rows]))
        emit(rows, 1, (a[rows], m0[rows], m2[rows]))
        emit(rows, 2, (b[rows], c[rows], m0[rows]))
    # bisec(3): all edges
    rows = np.flatnonzero(pattern == 7)
    if rows.size:
        emit(rows, 0, (m0[rows], c[rows], m2[rows]))
        emit(rows, 1, (a[rows], m0[rows], m2[rows]))
        emit(rows, 2, (m0[rows], b[rows], m1[rows]))
        emit(rows, 3, (c[rows], m0[rows], m1[rows]))

    # split boundary edges in place, keeping the Dirichlet marking
    if mesh.boundary_edges.size:
        be = mesh.boundary_edges
        bid = new_id[boundary2edges]
        keep = bid < 0
        halves = np.flatnonzero(~keep)
        parts = [be[keep]]
        if halves.size:
            first = np.column_stack([be[halves, 0], bid[halves]])
            second = np.column_stack([bid[halves], be[halves, 1]])
            parts.extend([first, second])
        boundary = np.vstack(parts) if parts else np.empty((0, 2), dtype=int)
    else:
        boundary = mesh.boundary_edges

    child = TriMesh(vertices, children, boundary, generation=mesh.generation + 1)
    record = RefinementRecord(
        parent_of=parent_of,
        new_vertex_parents=edge2nodes[which],
        num_parent_vertices=nv,
    )
    return child, record


def uniform_refine(mesh: TriMesh) -> tuple[TriMesh, RefinementRecord]:
    """Refine every triangle into four children (three bisections each)."""
    return refine_nvb(mesh, np.arange(mesh.num_triangles))


def initial_mesh(domain_spec: str = "square", pre_refinements: int = 0) -> TriMesh:
    """Unit-square mesh (-1,1)^2: two triangles sharing the diagonal from
    (-1,-1) to (1,1), uniformly refined ``pre_refinements`` times.

    The diagonal is the longest edge of both base triangles and is taken as
    their reference edge, which makes all markings compatibly divisible.
    """
    if domain_spec != "square":
        raise ValueError(f"unknown domain_spec {domain_spec!r}")
    if pre_refinements < 0:
        raise ValueError("pre_refinements must be >= 0")
    vertices = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
    triangles = np.array([[2, 0, 1], [0, 2, 3]])
    boundary = np.array([[0, 1], [1, 2], [2, 3], [3, 0]])
    mesh = TriMesh(vertices, triangles, boundary)
    for _ in range(pre_refinements):
        mesh, _ = uniform_refine(mesh)
    return mesh


def midpoint_prolongate(coeffs: np.ndarray, record: RefinementRecord) -> np.ndarray:
    """Carry nodal values from a parent mesh to its refinement.

    Old vertices keep their values; each new vertex takes the mean of its two
    recorded parent vertices, which reproduces the parent P1 function exactly.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[0] != record.num_parent_vertices:
        raise ValueError(
            f"coefficient vector has length {coeffs.shape[0]}, "
            f"parent mesh has {record.num_parent_vertices} vertices"
        )
    nvp = record.new_vertex_parents
    return np.concatenate([coeffs, 0.5 * (coeffs[nvp[:, 0]] + coeffs[nvp[:, 1]])])


def write_mesh_ascii(mesh: TriMesh, path, values: np.ndarray | None = None) -> None:
    """ASCII export: header, vertex lines, triangle lines, boundary edges.

    With ``values`` given, each vertex line carries a trailing nodal value.
    """
    lines = [f"vertices {mesh.num_vertices} triangles {mesh.num_triangles}"]
    if values is None:
        for x, y in mesh.vertices:
            lines.append(f"{float(x)!r} {float(y)!r}")
    else:
        for (x, y), v in zip(mesh.vertices, values):
            lines.append(f"{float(x)!r} {float(y)!r} {float(v)!r}")
    for i, j, k in mesh.triangles:
        lines.append(f"{i} {j} {k}")
    for i, j in mesh.boundary_edges:
        lines.append(f"{i} {j}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh_ascii(path) -> TriMesh:
    with open(path) as fh:
        tokens = fh.readline().split()
        n, m = int(tokens[1]), int(tokens[3])
        vertices = np.empty((n, 2))
        for i in range(n):
            parts = fh.readline().split()
            vertices[i] = (float(parts[0]), float(parts[1]))
        triangles = np.empty((m, 3), dtype=int)
        for i in range(m):
            triangles[i] = [int(v) for v in fh.readline().split()]
        boundary = []
        for line in fh:
            if line.strip():
                i, j = line.split()
                boundary.append((int(i), int(j)))
    return TriMesh(vertices, triangles, np.asarray(boundary, dtype=int))
