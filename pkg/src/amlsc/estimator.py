"""Goal-oriented error estimation for psi(u) = integral of u^2.

The linearised dual problem is solved in the same P1 space as the primal
solution; the dual discretisation error is approximated in the hierarchical
surplus space of quadratic edge bubbles by a single diagonal solve.  Testing
the primal residual with that surplus function gives signed element
indicators whose sum estimates psi(u) - psi(u_h), while their absolute
values drive Doerfler marking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import (
    LinearSolver,
    P1Solution,
    _geometry,
    assemble_mass,
    assemble_stiffness,
    triangle_quadrature,
)
from .mesh import TriMesh

__all__ = [
    "IndicatorField",
    "DualWeight",
    "solve_dual",
    "hierarchical_dual_weight",
    "element_indicators",
    "dorfler_mark",
]


@dataclass(frozen=True, eq=False)
class IndicatorField:
    """Signed per-element indicators; the stopping quantity is |sum|."""

    per_element: np.ndarray
    global_estimate: float

    @staticmethod
    def from_values(per_element: np.ndarray) -> "IndicatorField":
        per_element = np.asarray(per_element, dtype=float)
        return IndicatorField(per_element, float(abs(per_element.sum())))


@dataclass(frozen=True, eq=False)
class DualWeight:
    """Quadratic edge-bubble surplus coefficients (zero on boundary edges)."""

    mesh: TriMesh
    edge_coeffs: np.ndarray


def _interior_edges(mesh: TriMesh):
    edge2nodes, element2edges, boundary2edges = mesh.edge_data()
    counts = np.bincount(element2edges.ravel(), minlength=edge2nodes.shape[0])
    interior = counts == 2
    if boundary2edges.size:
        interior[boundary2edges] = False
    return edge2nodes, element2edges, interior


def solve_dual(u: P1Solution, method: str = "auto",
               solver: LinearSolver | None = None) -> P1Solution:
    """Same-mesh P1 approximation of the dual problem with rhs 2*u.

    The dual load 2 * integral(u * hat_i) is the exact P1 mass matrix action,
    so the quadratic integrand is integrated exactly.  A prebuilt solver for
    the reduced stiffness can be passed to share a factorisation.
    """
    mesh = u.mesh
    rhs_full = 2.0 * (assemble_mass(mesh) @ u.coeffs)
    free = np.flatnonzero(~u.dirichlet_mask)
    if solver is None:
        solver = LinearSolver(
            assemble_stiffness(mesh)[np.ix_(free, free)].tocsr(), method=method
        )
    w = np.zeros(mesh.num_vertices)
    w[free] = solver.solve(rhs_full[free])
    return P1Solution(mesh=mesh, coeffs=w, dirichlet_mask=u.dirichlet_mask)


def hierarchical_dual_weight(u: P1Solution, w: P1Solution, source=None) -> DualWeight:
    """Surplus coefficients of the dual error in the edge-bubble space.

    For each interior edge E the coefficient is r(b_E) / a(b_E, b_E) with
    the dual residual r(v) = 2*(u, v) - a(w, v) and the bubble
    b_E = 4 lambda_i lambda_j; all integrals are evaluated in closed form.
    """
    mesh = u.mesh
    if w.mesh is not mesh:
        raise ValueError("primal and dual solutions live on different meshes")
    edge2nodes, element2edges, interior = _interior_edges(mesh)
    area, grads = _geometry(mesh)
    t = mesh.triangles
    uc = u.coeffs[t]  # (m, 3)
    gw = np.einsum("mi,mid->md", w.coeffs[t], grads)

    nedges = edge2nodes.shape[0]
    resid = np.zeros(nedges)
    diag = np.zeros(nedges)
    for le in range(3):
        i, j, k = le, (le + 1) % 3, (le + 2) % 3
        eid = element2edges[:, le]
        gi = grads[:, i, :]
        gj = grads[:, j, :]
        # 2 * int_T u b_E  =  2 * (A/15) (2 u_i + 2 u_j + u_k)
        uterm = 2.0 * area / 15.0 * (2.0 * uc[:, i] + 2.0 * uc[:, j] + uc[:, k])
        # int_T grad w . grad b_E  =  (4A/3) grad w . (grad l_i + grad l_j)
        wterm = 4.0 * area / 3.0 * ((gw * (gi + gj)).sum(axis=1))
        resid += np.bincount(eid, weights=uterm - wterm, minlength=nedges)
        # int_T |grad b_E|^2 = (8A/3)(|gi|^2 + |gj|^2 + gi.gj)
        dterm = 8.0 * area / 3.0 * (
            (gi * gi).sum(axis=1) + (gj * gj).sum(axis=1) + (gi * gj).sum(axis=1)
        )
        diag += np.bincount(eid, weights=dterm, minlength=nedges)

    coeffs = np.zeros(nedges)
    coeffs[interior] = resid[interior] / diag[interior]
    return DualWeight(mesh=mesh, edge_coeffs=coeffs)


def element_indicators(u: P1Solution, weight: DualWeight, source,
                       quad_degree: int = 5) -> IndicatorField:
    """eta_T = int_T f * phi - grad u_h . grad phi with the bubble weight phi.

    The source term uses the same quadrature degree as assembly; the gradient
    term is exact (grad u_h constant, grad phi linear per element).
    """
    mesh = u.mesh
    if weight.mesh is not mesh:
        raise ValueError("dual weight computed on a different mesh")
    _, element2edges, _ = _interior_edges(mesh)
    area, grads = _geometry(mesh)
    t = mesh.triangles
    m = t.shape[0]
    gu = np.einsum("mi,mid->md", u.coeffs[t], grads)
    ce = weight.edge_coeffs[element2edges]  # (m, 3)

    grad_term = np.zeros(m)
    for le in range(3):
        i, j = le, (le + 1) % 3
        grad_term += ce[:, le] * (
            4.0 * area / 3.0 * ((gu * (grads[:, i, :] + grads[:, j, :])).sum(axis=1))
        )

    bary, wq = triangle_quadrature(quad_degree)
    corners = mesh.vertices[t]
    source_term = np.zeros(m)
    for q in range(bary.shape[0]):
        x = np.einsum("i,mid->md", bary[q], corners)
        phi = np.zeros(m)
        for le in range(3):
            i, j = le, (le + 1) % 3
            phi += ce[:, le] * 4.0 * bary[q, i] * bary[q, j]
        source_term += wq[q] * np.asarray(source(x)) * phi
    source_term *= area

    return IndicatorField.from_values(source_term - grad_term)


def dorfler_mark(indicators: IndicatorField, theta: float) -> np.ndarray:
    """Minimal index set M with theta * sum|eta| <= sum_M |eta|.

    Sorted descending by |eta| with ascending element index as tie-break;
    all-zero indicators give the empty set.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    absval = np.abs(indicators.per_element)
    total = absval.sum()
    if total == 0.0:
        return np.empty(0, dtype=int)
    order = np.argsort(-absval, kind="stable")
    csum = np.cumsum(absval[order])
    count = int(np.searchsorted(csum, theta * total)) + 1
    count = min(count, len(order))
    return np.sort(order[:count])
