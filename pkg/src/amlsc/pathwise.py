"""Pathwise adaptive solves: one refinement trajectory per parameter point.

For a fixed parameter sample y, the solve / estimate / mark / refine loop is
run until the goal-oriented estimate drops below a tolerance.  A whole
decreasing tolerance sequence is served from a single trajectory: the level
for tolerance t is the first iterate whose estimate is <= t.  Trajectories
are cached per sample so that multilevel runs never repeat a solve, and the
full iteration history is kept so that coarser tolerances requested later
still receive bit-identical snapshots.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .estimator import dorfler_mark, element_indicators, hierarchical_dual_weight, solve_dual
from .fem import LinearSolver, P1Solution, assemble_load, assemble_stiffness, qoi_psi
from .mesh import TriMesh, refine_nvb

__all__ = [
    "LevelEntry",
    "PathwiseResult",
    "SampleCache",
    "adaptive_solve",
    "solve_level_sequence",
    "point_key",
]

DEFAULT_THETA = 0.6
DEFAULT_MAX_ITER = 30


def point_key(y) -> str:
    """Canonical textual key for a parameter point (17 significant digits)."""
    return ",".join("%.17g" % float(v) for v in np.atleast_1d(y))


@dataclass(frozen=True)
class LevelEntry:
    """Snapshot of the trajectory at the first iterate meeting a tolerance.

    ``psi`` is the raw discrete functional value; ``psi_corrected`` adds the
    signed indicator sum, which cancels the leading discretisation error and
    varies far more smoothly with the parameter point.
    """

    tol: float
    vertices: int
    psi: float
    estimate: float
    iterations: int
    cost: float
    psi_corrected: float = 0.0
    flagged: bool = False

    def to_json_dict(self):
        return {
            "tol": self.tol,
            "vertices": self.vertices,
            "psi": self.psi,
            "estimate": self.estimate,
            "iters": self.iterations,
            "cost": self.cost,
            "flagged": self.flagged,
        }


@dataclass(frozen=True, eq=False)
class PathwiseResult:
    y: np.ndarray
    levels: tuple
    final_mesh: TriMesh
    flagged: bool

    def to_json_dict(self):
        return {
            "y": [float(v) for v in self.y],
            "levels": [lv.to_json_dict() for lv in self.levels],
            "flagged": self.flagged,
        }


@dataclass
class _HistoryRow:
    iterations: int
    vertices: int
    psi: float
    estimate: float
    signed_sum: float
    cost: float


class _Trajectory:
    """Mutable continuation state of one sample's refinement trajectory."""

    def __init__(self, y: np.ndarray):
        self.y = y
        self.mesh: TriMesh | None = None
        self.indicators = None
        self.iterations = 0
        self.cost = 0.0
        self.history: list[_HistoryRow] = []

    def first_row_meeting(self, tol: float):
        for row in self.history:
            if row.estimate <= tol:
                return row
        return None


class SampleCache:
    """Trajectory store keyed by the canonical textual form of y.

    Lookups of already-computed levels return bit-identical values.  The
    instrumentation counters record finite element solve calls (``fe_solves``)
    and served-from-history levels (``hits``).  A per-key lock serialises
    concurrent extensions of the same trajectory; distinct samples proceed
    in parallel.
    """

    def __init__(self):
        self._store: dict[str, _Trajectory] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._mutex = threading.Lock()
        self.fe_solves = 0
        self.hits = 0

    def trajectory(self, y) -> tuple[_Trajectory, threading.Lock]:
        key = point_key(y)
        with self._mutex:
            if key not in self._store:
                self._store[key] = _Trajectory(np.atleast_1d(np.asarray(y, float)))
                self._locks[key] = threading.Lock()
            return self._store[key], self._locks[key]

    def prune_states(self):
        """Drop continuation state (meshes, indicators), keep level history."""
        with self._mutex:
            for traj in self._store.values():
                traj.mesh = None
                traj.indicators = None


def _solve_estimate(problem, y, mesh, cache: SampleCache | None,
                    quad_degree: int, solver_method: str):
    """One solve/estimate pass; returns (psi, indicators, n_free)."""
    source = problem.source_at(y)
    A = assemble_stiffness(mesh)
    b = assemble_load(mesh, source, quad_degree)
    free = np.flatnonzero(~mesh.dirichlet_mask())
    solver = LinearSolver(A[np.ix_(free, free)].tocsr(), method=solver_method)
    coeffs = np.zeros(mesh.num_vertices)
    coeffs[free] = solver.solve(b[free])
    u = P1Solution(mesh, coeffs, mesh.dirichlet_mask())
    w = solve_dual(u, solver=solver)
    weight = hierarchical_dual_weight(u, w)
    indicators = element_indicators(u, weight, source, quad_degree)
    if cache is not None:
        cache.fe_solves += 1
    return qoi_psi(u), indicators, free.size


def _advance(problem, traj: _Trajectory, tol: float, theta: float,
             max_iter: int, cache, quad_degree, solver_method) -> LevelEntry:
    """Extend a trajectory until its estimate meets ``tol`` (or give up)."""
    if traj.mesh is None and traj.history:
        row = traj.first_row_meeting(tol)
        if row is None:
            raise RuntimeError(
                "trajectory state was pruned; cannot refine further "
                f"(requested tolerance {tol:g})"
            )
    if traj.mesh is None and not traj.history:
        traj.mesh = problem.initial_mesh()
        psi, indicators, nfree = _solve_estimate(
            problem, traj.y, traj.mesh, cache, quad_degree, solver_method
        )
        traj.indicators = indicators
        traj.cost += nfree
        traj.history.append(_HistoryRow(
            0, traj.mesh.num_vertices, psi, indicators.global_estimate,
            float(indicators.per_element.sum()), traj.cost,
        ))

    while traj.first_row_meeting(tol) is None:
        if traj.iterations >= max_iter:
            break
        marked = dorfler_mark(traj.indicators, theta)
        traj.mesh, _ = refine_nvb(traj.mesh, marked)
        traj.iterations += 1
        psi, indicators, nfree = _solve_estimate(
            problem, traj.y, traj.mesh, cache, quad_degree, solver_method
        )
        traj.indicators = indicators
        traj.cost += nfree
        traj.history.append(_HistoryRow(
            traj.iterations, traj.mesh.num_vertices, psi,
            indicators.global_estimate, float(indicators.per_element.sum()),
            traj.cost,
        ))

    row = traj.first_row_meeting(tol)
    if row is None:
        last = traj.history[-1]
        return LevelEntry(tol, last.vertices, last.psi, last.estimate,
                          last.iterations, last.cost,
                          psi_corrected=last.psi + last.signed_sum, flagged=True)
    return LevelEntry(tol, row.vertices, row.psi, row.estimate,
                      row.iterations, row.cost,
                      psi_corrected=row.psi + row.signed_sum, flagged=False)


def solve_level_sequence(problem, y, tolerances, theta: float = DEFAULT_THETA,
                         cache: SampleCache | None = None,
                         max_iter: int = DEFAULT_MAX_ITER,
                         quad_degree: int | None = None,
                         solver_method: str = "auto") -> PathwiseResult:
    """Snapshot one refinement trajectory at a decreasing list of tolerances.

    Every tolerance receives the first iterate whose estimate meets it; two
    tolerances may share a mesh if one refinement overshoots both.  With a
    warm cache no finite element solve is repeated.
    """
    tolerances = [float(t) for t in np.atleast_1d(tolerances)]
    if any(t <= 0.0 for t in tolerances):
        raise ValueError("tolerances must be positive")
    if any(b >= a for a, b in zip(tolerances, tolerances[1:])):
        raise ValueError("tolerances must be strictly decreasing")
    own_cache = cache is None
    if own_cache:
        cache = SampleCache()
    quad_degree = problem.quad_degree if quad_degree is None else quad_degree

    traj, lock = cache.trajectory(y)
    with lock:
        levels = []
        for tol in tolerances:
            known = traj.first_row_meeting(tol)
            if known is not None:
                cache.hits += 1
                levels.append(LevelEntry(
                    tol, known.vertices, known.psi, known.estimate,
                    known.iterations, known.cost,
                    psi_corrected=known.psi + known.signed_sum, flagged=False,
                ))
            else:
                levels.append(_advance(problem, traj, tol, theta, max_iter,
                                       cache, quad_degree, solver_method))
        final_mesh = traj.mesh
    return PathwiseResult(
        y=np.atleast_1d(np.asarray(y, dtype=float)),
        levels=tuple(levels),
        final_mesh=final_mesh,
        flagged=any(lv.flagged for lv in levels),
    )


def adaptive_solve(problem, y, tol: float, theta: float = DEFAULT_THETA,
                   max_iter: int = DEFAULT_MAX_ITER,
                   quad_degree: int | None = None,
                   solver_method: str = "auto") -> PathwiseResult:
    """Run the adaptive loop for a single tolerance on a fresh trajectory."""
    return solve_level_sequence(
        problem, y, [tol], theta=theta, max_iter=max_iter,
        quad_degree=quad_degree, solver_method=solver_method,
    )
