"""Dimension-adaptive Smolyak quadrature and interpolation.

Nested Clenshaw-Curtis nodes carry a hierarchy of univariate interpolation
rules; tensor products of consecutive-rule differences (hierarchical
surpluses) are summed over a downward-closed multi-index set.  Adaptivity
follows the reduced-margin strategy: all admissible frontier indices are
priced by the magnitude of their surplus contribution to the expectation,
the most profitable one is accepted, and the loop stops once the best
remaining profit falls below tolerance.  On stopping, the margin profits of
the final sweep are *not* added to the returned value; the largest of them
is reported as an error indicator instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product

import numpy as np

__all__ = [
    "cc_rule",
    "cc_diff_weights",
    "IndexSet",
    "SurplusRecord",
    "SparseGridState",
    "AdaptiveQuadratureResult",
    "reduced_margin",
    "delta_expectation",
    "adaptive_expectation",
    "interpolant_eval",
    "tensor_grid_points",
    "dump_grid_json",
]


def cc_count(level: int) -> int:
    """Number of Clenshaw-Curtis nodes at a hierarchy level (1, 3, 5, 9...)."""
    return 1 if level == 1 else 2 ** (level - 1) + 1


@lru_cache(maxsize=None)
def cc_rule(level: int):
    """Nested Clenshaw-Curtis nodes on [-1,1] with uniform-density weights.

    Level 1 is the single node 0; level i > 1 has 2^(i-1)+1 Chebyshev
    extrema, sorted ascending.  Weights integrate exactly against the
    constant density 1/2, so they sum to one.  Nodes are bit-identical
    across levels (dyadic cosine arguments plus explicit symmetrisation),
    which makes nested point lookups exact.
    """
    if level < 1:
        raise ValueError("level must be >= 1")
    if level == 1:
        return np.array([0.0]), np.array([1.0])
    m = cc_count(level)
    j = np.arange(m)
    x = -np.cos(np.pi * (j / (m - 1)))
    x[(m - 1) // 2] = 0.0
    x[(m + 1) // 2:] = -x[: (m - 1) // 2][::-1]
    # weights solve the Chebyshev moment system sum_j w_j T_k(x_j) = m_k
    theta = np.pi * ((m - 1 - j) / (m - 1))
    C = np.cos(np.outer(np.arange(m), theta))
    mom = np.zeros(m)
    mom[0] = 2.0
    even = np.arange(2, m, 2)
    mom[even] = 2.0 / (1.0 - even.astype(float) ** 2)
    w = np.linalg.solve(C, mom) / 2.0
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@lru_cache(maxsize=None)
def cc_diff_weights(level: int):
    """Nodes of ``level`` and the weight difference to the previous level."""
    x, w = cc_rule(level)
    d = w.copy()
    if level == 2:
        d[1] -= cc_rule(1)[1][0]
    elif level > 2:
        d[::2] -= cc_rule(level - 1)[1]
    d.setflags(write=False)
    return x, d


def _nested_positions(level: int) -> np.ndarray:
    """Indices of the previous level's nodes inside this level's node list."""
    if level == 2:
        return np.array([1])
    return np.arange(0, cc_count(level), 2)


@dataclass(frozen=True, eq=False)
class IndexSet:
    """Downward-closed set of positive multi-indices containing all-ones."""

    members: frozenset
    N: int

    @staticmethod
    def root(N: int) -> "IndexSet":
        return IndexSet(frozenset({(1,) * N}), N)

    def with_index(self, idx: tuple) -> "IndexSet":
        return IndexSet(self.members | {tuple(idx)}, self.N)

    def __contains__(self, idx) -> bool:
        return tuple(idx) in self.members

    def __iter__(self):
        return iter(sorted(self.members))

    def __len__(self):
        return len(self.members)

    def is_downward_closed(self) -> bool:
        for idx in self.members:
            for j in range(self.N):
                if idx[j] > 1:
                    back = idx[:j] + (idx[j] - 1,) + idx[j + 1:]
                    if back not in self.members:
                        return False
        return (1,) * self.N in self.members


def reduced_margin(I: IndexSet) -> set:
    """Admissible frontier: indices whose every backward neighbour is in I."""
    out = set()
    for idx in I.members:
        for j in range(I.N):
            cand = idx[:j] + (idx[j] + 1,) + idx[j + 1:]
            if cand in I.members or cand in out:
                continue
            if _admissible(cand, I):
                out.add(cand)
    return out


def _admissible(cand: tuple, I: IndexSet) -> bool:
    for j, cj in enumerate(cand):
        if cj > 1:
            back = cand[:j] + (cj - 1,) + cand[j + 1:]
            if back not in I.members:
                return False
    return True


@dataclass
class SurplusRecord:
    """Surplus contribution of one multi-index to the expectation."""

    index: tuple
    delta_value: float
    new_points: int
    status: str = "margin"


def _map_points(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return lo + (x + 1.0) * (0.5 * (hi - lo))


def tensor_grid_points(idx, bounds):
    """Mapped tensor grid of a multi-index, in row-major node order."""
    axes = [
        _map_points(cc_rule(l)[0], *bounds[n]) for n, l in enumerate(idx)
    ]
    return [tuple(float(axes[n][c[n]]) for n in range(len(idx)))
            for c in product(*[range(len(a)) for a in axes])]


def delta_expectation(g, idx, bounds, cache: dict | None = None,
                      counter: list | None = None) -> SurplusRecord:
    """Tensor-difference quadrature contribution of one multi-index.

    Evaluations are pulled from / pushed to ``cache`` (keyed by the mapped
    point tuple); nested nodes are bit-identical across levels, so no point
    is ever evaluated twice.
    """
    idx = tuple(int(i) for i in idx)
    if cache is None:
        cache = {}
    nodes, dweights = [], []
    for n, l in enumerate(idx):
        x, d = cc_diff_weights(l)
        nodes.append(_map_points(x, *bounds[n]))
        dweights.append(d)
    total = 0.0
    new_points = 0
    for combo in product(*[range(len(x)) for x in nodes]):
        w = 1.0
        for n, c in enumerate(combo):
            w *= dweights[n][c]
        pt = tuple(float(nodes[n][c]) for n, c in enumerate(combo))
        if pt not in cache:
            try:
                cache[pt] = g(np.array(pt))
            except Exception as exc:
                raise RuntimeError(f"integrand failed at point {pt}") from exc
            new_points += 1
            if counter is not None:
                counter[0] += 1
        total += w * cache[pt]
    return SurplusRecord(index=idx, delta_value=float(total), new_points=new_points)


@dataclass
class SparseGridState:
    """Index set, margin records and point cache of one adaptive run."""

    I: IndexSet
    margin_records: dict
    eval_cache: dict
    running_expectation: float
    points_total: int
    bounds: tuple
    accepted: dict = field(default_factory=dict)

    @staticmethod
    def from_index_set(g, I: IndexSet, bounds) -> "SparseGridState":
        """Evaluate g on the grid of a given downward-closed set (no margin)."""
        if not I.is_downward_closed():
            raise ValueError("index set is not downward closed")
        cache: dict = {}
        accepted = {}
        total = 0.0
        for idx in I:
            rec = delta_expectation(g, idx, bounds, cache)
            rec.status = "active"
            accepted[idx] = rec
            total += rec.delta_value
        return SparseGridState(
            I=I, margin_records={}, eval_cache=cache,
            running_expectation=total, points_total=len(cache),
            bounds=tuple(bounds), accepted=accepted,
        )


@dataclass(frozen=True, eq=False)
class AdaptiveQuadratureResult:
    value: float
    index_set: IndexSet
    points_total: int
    last_max_profit: float
    flagged: bool
    evaluations: int
    state: SparseGridState

    def __iter__(self):
        # tuple-style unpacking: (value, I, points_total, last_max_profit)
        return iter((self.value, self.index_set, self.points_total,
                     self.last_max_profit))


def adaptive_expectation(g, N: int, bounds, tol_Y: float,
                         max_points: int = 10**7,
                         max_steps: int | None = None,
                         eval_cache: dict | None = None,
                         jobs: int = 1,
                         validate: bool = False) -> AdaptiveQuadratureResult:
    """Reduced-margin adaptive expectation of ``g`` over a box.

    Per sweep, the surplus of every reduced-margin index is available; if
    the largest magnitude is below ``tol_Y`` the accumulated value over the
    accepted set is returned as-is (margin contributions are dropped and the
    best profit doubles as the error indicator).  Otherwise the best index
    is accepted and its newly admissible neighbours are priced.  Ties are
    broken toward the lexicographically smallest index.  Exceeding
    ``max_points``/``max_steps`` returns the current value flagged.
    """
    if tol_Y <= 0.0:
        raise ValueError("tol_Y must be positive")
    bounds = tuple(tuple(map(float, b)) for b in bounds)
    if len(bounds) != N:
        raise ValueError("bounds must have one interval per dimension")
    cache = {} if eval_cache is None else eval_cache
    counter = [0]

    I = IndexSet.root(N)
    root = delta_expectation(g, (1,) * N, bounds, cache, counter)
    root.status = "active"
    accepted = {root.index: root}
    value = root.delta_value
    # unique explored points of *this run*; the eval cache may be shared
    explored = set()
    explored.update(tensor_grid_points((1,) * N, bounds))

    margin: dict = {}

    def price(indices):
        indices = sorted(indices)
        if jobs > 1 and len(indices) > 1:
            import concurrent.futures

            with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as ex:
                recs = list(ex.map(
                    lambda idx: delta_expectation(g, idx, bounds, cache, counter),
                    indices,
                ))
        else:
            recs = [delta_expectation(g, idx, bounds, cache, counter)
                    for idx in indices]
        for idx, rec in zip(indices, recs):
            margin[idx] = rec
            explored.update(tensor_grid_points(idx, bounds))

    price(reduced_margin(I))
    steps = 0
    flagged = False
    while True:
        best = min(margin, key=lambda k: (-abs(margin[k].delta_value), k))
        profit = abs(margin[best].delta_value)
        if profit < tol_Y:
            break
        if len(explored) > max_points or (max_steps is not None and steps >= max_steps):
            flagged = True
            break
        rec = margin.pop(best)
        rec.status = "active"
        accepted[best] = rec
        I = I.with_index(best)
        value += rec.delta_value
        steps += 1
        if validate:
            assert I.is_downward_closed(), "downward closure violated"
        fresh = [
            best[:j] + (best[j] + 1,) + best[j + 1:]
            for j in range(N)
        ]
        fresh = [c for c in fresh
                 if c not in margin and _admissible(c, I)]
        price(fresh)
        if validate:
            assert set(margin) == reduced_margin(I), "margin out of sync"

    state = SparseGridState(
        I=I, margin_records=margin, eval_cache=cache,
        running_expectation=value, points_total=len(explored),
        bounds=bounds, accepted=accepted,
    )
    return AdaptiveQuadratureResult(
        value=value, index_set=I, points_total=len(explored),
        last_max_profit=profit, flagged=flagged,
        evaluations=counter[0], state=state,
    )


def _lagrange_basis(x: np.ndarray, y: float) -> np.ndarray:
    """Values of the Lagrange basis over nodes x at a point y (barycentric)."""
    diff = y - x
    exact = np.flatnonzero(diff == 0.0)
    out = np.zeros_like(x)
    if exact.size:
        out[exact[0]] = 1.0
        return out
    # barycentric weights for Chebyshev extrema are (-1)^j with halved ends
    m = x.size
    bw = np.ones(m)
    bw[1::2] = -1.0
    bw[0] *= 0.5
    bw[-1] *= 0.5
    t = bw / diff
    return t / t.sum()


def interpolant_eval(state: SparseGridState, y) -> float:
    """Evaluate the sparse interpolant (sum of accepted surpluses) at y."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    for n, (lo, hi) in enumerate(state.bounds):
        if not lo <= y[n] <= hi:
            raise ValueError(f"point component {y[n]} outside bounds [{lo}, {hi}]")
    total = 0.0
    for idx in state.I:
        axes = []
        for n, l in enumerate(idx):
            nodes = _map_points(cc_rule(l)[0], *state.bounds[n])
            basis = _lagrange_basis(nodes, y[n])
            if l == 1:
                diff = basis  # previous operator is zero
            else:
                prev_nodes = _map_points(cc_rule(l - 1)[0], *state.bounds[n])
                prev = _lagrange_basis(prev_nodes, y[n])
                diff = basis.copy()
                diff[_nested_positions(l)] -= prev
            axes.append((nodes, diff))
        for combo in product(*[range(len(a[0])) for a in axes]):
            w = 1.0
            for n, c in enumerate(combo):
                w *= axes[n][1][c]
            if w == 0.0:
                continue
            pt = tuple(float(axes[n][0][c]) for n, c in enumerate(combo))
            total += w * state.eval_cache[pt]
    return float(total)


def dump_grid_json(state: SparseGridState, path) -> None:
    """Grid dump: {N, I, points, surpluses} for inspection tooling."""
    I_sorted = sorted(state.I)
    points = sorted(state.eval_cache.keys())
    payload = {
        "N": state.I.N,
        "I": [list(i) for i in I_sorted],
        "points": [list(p) for p in points],
        "surpluses": [state.accepted[i].delta_value if i in state.accepted else None
                      for i in I_sorted],
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
