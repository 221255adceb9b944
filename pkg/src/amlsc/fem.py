"""P1 finite elements for the pathwise Poisson problem.

Assembly is fully vectorised.  Stiffness entries are exact (piecewise
constant gradients); load vectors use symmetric triangle quadrature of a
requested polynomial exactness degree.  The quantity of interest is
``psi(u) = integral of u^2`` which the edge-midpoint rule integrates
exactly for P1 functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import TriMesh

__all__ = [
    "P1Solution",
    "SparseSystem",
    "assemble_system",
    "assemble_stiffness",
    "assemble_mass",
    "assemble_load",
    "solve_dirichlet",
    "qoi_psi",
    "p1_evaluate",
]

# symmetric quadrature rules on the reference triangle in barycentric
# coordinates: (points (q,3), weights summing to 1), keyed by exactness degree
_S15 = np.sqrt(15.0)
_A1 = (6.0 + _S15) / 21.0
_A2 = (6.0 - _S15) / 21.0
_QUAD_RULES = {
    1: (np.full((1, 3), 1.0 / 3.0), np.array([1.0])),
    2: (
        np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
        np.full(3, 1.0 / 3.0),
    ),
    5: (
        np.vstack(
            [np.full(3, 1.0 / 3.0)]
            + [np.roll([1.0 - 2.0 * _A1, _A1, _A1], s) for s in range(3)]
            + [np.roll([1.0 - 2.0 * _A2, _A2, _A2], s) for s in range(3)]
        ),
        np.concatenate(
            [
                [9.0 / 40.0],
                np.full(3, (155.0 + _S15) / 1200.0),
                np.full(3, (155.0 - _S15) / 1200.0),
            ]
        ),
    ),
}


def triangle_quadrature(degree: int):
    """Barycentric points and unit-sum weights exact to ``degree``."""
    for d in sorted(_QUAD_RULES):
        if d >= degree:
            return _QUAD_RULES[d]
    raise ValueError(f"no triangle quadrature rule of degree {degree}")


def _geometry(mesh: TriMesh):
    """Per-element areas and P1 shape-function gradients, cached on the mesh."""
    if "fem" not in mesh._geom:
        p = mesh.vertices
        t = mesh.triangles
        v0, v1, v2 = p[t[:, 0]], p[t[:, 1]], p[t[:, 2]]
        d1 = v1 - v0
        d2 = v2 - v0
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        if np.any(det <= 0.0):
            bad = int(np.argmin(det))
            raise ValueError(
                f"degenerate or inverted triangle {bad} "
                f"(vertices {t[bad].tolist()}, signed area {det[bad] / 2.0})"
            )
        area = 0.5 * det
        grads = np.empty((t.shape[0], 3, 2))
        # grad of barycentric coordinate i: rotated opposite edge / (2 area)
        for i in range(3):
            e = p[t[:, (i + 2) % 3]] - p[t[:, (i + 1) % 3]]
            grads[:, i, 0] = -e[:, 1] / det
            grads[:, i, 1] = e[:, 0] / det
        mesh._geom["fem"] = (area, grads)
    return mesh._geom["fem"]


@dataclass(frozen=True, eq=False)
class P1Solution:
    """Nodal P1 function on a mesh; zero on Dirichlet-masked vertices."""

    mesh: TriMesh
    coeffs: np.ndarray
    dirichlet_mask: np.ndarray

    def __post_init__(self):
        if self.coeffs.shape[0] != self.mesh.num_vertices:
            raise ValueError("coefficient length does not match vertex count")


@dataclass(frozen=True, eq=False)
class SparseSystem:
    """Reduced linear system over the free (non-Dirichlet) vertices."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    free: np.ndarray
    num_vertices: int
    mesh: TriMesh


def assemble_stiffness(mesh: TriMesh) -> sp.csr_matrix:
    """Unconstrained stiffness matrix of the Laplacian, exact entries."""
    if "stiffness" not in mesh._geom:
        area, grads = _geometry(mesh)
        t = mesh.triangles
        local = np.einsum("tid,tjd,t->tij", grads, grads, area)
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        n = mesh.num_vertices
        A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
        mesh._geom["stiffness"] = A
    return mesh._geom["stiffness"]


def assemble_mass(mesh: TriMesh) -> sp.csr_matrix:
    """Unconstrained P1 mass matrix (exact)."""
    if "mass" not in mesh._geom:
        area, _ = _geometry(mesh)
        t = mesh.triangles
        base = (np.ones((3, 3)) + np.eye(3)) / 12.0
        local = area[:, None, None] * base[None]
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        n = mesh.num_vertices
        mesh._geom["mass"] = sp.coo_matrix(
            (local.ravel(), (rows, cols)), shape=(n, n)
        ).tocsr()
    return mesh._geom["mass"]


def assemble_load(mesh: TriMesh, source, quad_degree: int = 5) -> np.ndarray:
    """Load vector for a scalar field, quadrature exact to ``quad_degree``.

    ``source`` must accept an (..., 2) array of points and return values of
    shape (...).
    """
    bary, weights = triangle_quadrature(quad_degree)
    area, _ = _geometry(mesh)
    p = mesh.vertices
    t = mesh.triangles
    n = mesh.num_vertices
    corners = p[t]  # (m, 3, 2)
    load = np.zeros(n)
    for q in range(bary.shape[0]):
        x = np.einsum("i,mid->md", bary[q], corners)
        fx = np.asarray(source(x)) * (weights[q] * area)
        for i in range(3):
            load += np.bincount(t[:, i], weights=fx * bary[q, i], minlength=n)
    return load


def assemble_system(mesh: TriMesh, source, quad_degree: int = 5) -> SparseSystem:
    """Stiffness and load with Dirichlet rows/columns eliminated symmetrically."""
    if quad_degree < 2:
        raise ValueError("quad_degree must be >= 2")
    A = assemble_stiffness(mesh)
    b = assemble_load(mesh, source, quad_degree)
    free = np.flatnonzero(~mesh.dirichlet_mask())
    return SparseSystem(
        matrix=A[np.ix_(free, free)].tocsr(),
        rhs=b[free],
        free=free,
        num_vertices=mesh.num_vertices,
        mesh=mesh,
    )


class LinearSolver:
    """Reusable solver for one reduced stiffness matrix.

    method 'direct' uses a sparse LU factorisation, 'amg' a Ruge-Stuben
    multigrid preconditioned CG, 'cg' diagonally preconditioned CG, and
    'auto' picks direct below ``direct_limit`` unknowns and amg above.
    Every solve verifies the relative residual against ``rtol``.
    """

    def __init__(self, matrix, method: str = "auto", rtol: float = 1e-10,
                 direct_limit: int = 150_000):
        self.matrix = matrix
        self.rtol = rtol
        n = matrix.shape[0]
        if method == "auto":
            method = "direct" if n <= direct_limit else "amg"
        self.method = method
        self._lu = None
        self._amg = None
        if method == "direct":
            self._lu = spla.splu(matrix.tocsc())
        elif method == "amg":
            import pyamg

            self._amg = pyamg.ruge_stuben_solver(matrix.tocsr())
        elif method != "cg":
            raise ValueError(f"unknown solver method {method!r}")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        bnorm = np.linalg.norm(rhs)
        if bnorm == 0.0:
            return np.zeros_like(rhs)
        if self.method == "direct":
            x = self._lu.solve(rhs)
        elif self.method == "amg":
            x = self._amg.solve(rhs, tol=0.5 * self.rtol, accel="cg", maxiter=400)
        else:
            n = self.matrix.shape[0]
            M = sp.diags(1.0 / self.matrix.diagonal())
            x, info = spla.cg(
                self.matrix, rhs, rtol=self.rtol / 10.0, atol=0.0,
                M=M, maxiter=10 * n,
            )
        res = np.linalg.norm(rhs - self.matrix @ x) / bnorm
        if res > self.rtol:
            raise RuntimeError(
                f"linear solve did not converge: relative residual {res:.3e} "
                f"(method {self.method}, tolerance {self.rtol:.1e})"
            )
        return x


def solve_dirichlet(system: SparseSystem, method: str = "auto",
                    rtol: float = 1e-10) -> P1Solution:
    """Solve the reduced system; Dirichlet vertices are set to zero."""
    x = LinearSolver(system.matrix, method=method, rtol=rtol).solve(system.rhs)
    coeffs = np.zeros(system.num_vertices)
    coeffs[system.free] = x
    return P1Solution(
        mesh=system.mesh,
        coeffs=coeffs,
        dirichlet_mask=system.mesh.dirichlet_mask(),
    )


def qoi_psi(u: P1Solution) -> float:
    """integral of u^2 over the domain, exact (edge-midpoint rule)."""
    area, _ = _geometry(u.mesh)
    t = u.mesh.triangles
    c = u.coeffs[t]  # (m, 3)
    mids = 0.5 * (c + np.roll(c, -1, axis=1))
    return float(((mids**2).sum(axis=1) * area / 3.0).sum())


def p1_evaluate(u: P1Solution, points: np.ndarray) -> np.ndarray:
    """Point evaluation of a P1 function (linear search per point; testing aid)."""
    p = u.mesh.vertices
    t = u.mesh.triangles
    v0 = p[t[:, 0]]
    d1 = p[t[:, 1]] - v0
    d2 = p[t[:, 2]] - v0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    points = np.atleast_2d(points)
    out = np.empty(points.shape[0])
    for i, x in enumerate(points):
        r = x - v0
        l1 = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
        l2 = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -1e-12) & (l1 >= -1e-12) & (l2 >= -1e-12)
        k = int(np.flatnonzero(inside)[0])
        out[i] = (
            u.coeffs[t[k, 0]] * l0[k]
            + u.coeffs[t[k, 1]] * l1[k]
            + u.coeffs[t[k, 2]] * l2[k]
        )
    return out
