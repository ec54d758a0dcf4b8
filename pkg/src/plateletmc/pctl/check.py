"""Model checking the query fragment on a DTMC.

All probability computations treat one DTMC transition as one step. The
vectors returned are per state; query results report the initial state.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..errors import InvalidInput
from ..model import SparseModel
from .syntax import (
    And,
    Atom,
    Eventually,
    Not,
    Or,
    ProbQuery,
    ProbThreshold,
    TimeQuery,
    Until,
    parameters,
    parse,
    pretty,
)

DEFAULT_TOL = 1e-12
DEFAULT_MAX_ITER = 1_000_000
# two weeks of two-phase steps, a multiple of the weekly period of induced chains
CONTRACTION_WINDOW = 28


@dataclass
class Solution:
    values: np.ndarray
    iterations: int = 0
    residual: float = 0.0
    method: str = "graph"
    converged: bool = True


@dataclass
class QueryResult:
    query: str
    value: float
    verdict: Optional[bool] = None
    iterations: int = 0
    residual: float = 0.0
    method: str = ""
    converged: bool = True
    values: Optional[np.ndarray] = field(default=None, repr=False)

    def to_record(self) -> dict:
        rec = {
            "query": self.query,
            "value": "inf" if math.isinf(self.value) else self.value,
            "iterations": self.iterations,
            "residual": self.residual,
            "method": self.method,
            "converged": self.converged,
        }
        if self.verdict is not None:
            rec["verdict"] = self.verdict
        return rec


def _transitions(dtmc: SparseModel) -> sp.csr_matrix:
    if dtmc.kind != "dtmc":
        raise InvalidInput("PCTL evaluation needs a DTMC; resolve the MDP with a policy first")
    return dtmc.row_matrix()


def eval_state_formula(dtmc: SparseModel, sf) -> np.ndarray:
    """Boolean mask of the states satisfying a state formula."""
    if isinstance(sf, Atom):
        return dtmc.label_mask(sf.name).copy()
    if isinstance(sf, Not):
        return ~eval_state_formula(dtmc, sf.arg)
    if isinstance(sf, And):
        return eval_state_formula(dtmc, sf.left) & eval_state_formula(dtmc, sf.right)
    if isinstance(sf, Or):
        return eval_state_formula(dtmc, sf.left) | eval_state_formula(dtmc, sf.right)
    raise InvalidInput(f"not a state formula: {sf!r}")


def bounded_until(dtmc: SparseModel, left: np.ndarray, right: np.ndarray, bound: int) -> np.ndarray:
    """P(left U<=bound right) per state."""
    if bound < 0:
        raise InvalidInput("bound must be >= 0")
    P = _transitions(dtmc)
    right = np.asarray(right, dtype=bool)
    active = np.asarray(left, dtype=bool) & ~right
    v = right.astype(np.float64)
    for _ in range(bound):
        v = np.where(right, 1.0, np.where(active, P @ v, 0.0))
    return v


def bounded_reach(dtmc: SparseModel, target: np.ndarray, bound: int) -> np.ndarray:
    """P(F<=bound target) per state; target states absorb with value 1."""
    return bounded_until(dtmc, np.ones(dtmc.n_states, dtype=bool), target, bound)


def _backward(PT: sp.csr_matrix, seeds: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """States that reach ``seeds`` along paths whose intermediate states are ``allowed``."""
    seen = seeds.copy()
    frontier = np.flatnonzero(seeds)
    while frontier.size:
        preds = np.unique(PT[frontier].indices)
        preds = preds[~seen[preds] & allowed[preds]]
        seen[preds] = True
        frontier = preds
    return seen


def until_graph(P: sp.csr_matrix, left: np.ndarray, right: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(prob0, prob1) masks for ``left U right``, from graph structure alone."""
    PT = P.T.tocsr()
    PT.eliminate_zeros()
    through = left & ~right
    can_reach = _backward(PT, right.copy(), through)
    prob0 = ~can_reach
    # may end in prob0 along a path that stays in left & !right
    can_fail = _backward(PT, prob0.copy(), through)
    prob1 = ~can_fail
    return prob0, prob1


def unbounded_until(
    dtmc: SparseModel,
    left: np.ndarray,
    right: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    damping: float = 1.0,
    window: int = CONTRACTION_WINDOW,
) -> Solution:
    """P(left U right) per state.

    Graph analysis fixes the exact 0/1 states; the rest is solved by
    iterating ``x <- (1-w) x + w (A x + b)`` from 0, with ``w = damping``.

    Induced chains are periodic (two steps per day, seven days a week), so
    step sizes plateau and drop in bursts and a ratio of two successive
    steps says little. Contraction is measured over whole windows instead:
    with ``M`` the largest max-norm step in the latest ``window`` iterations
    and ``q`` its ratio to the largest step of the window before, the
    remaining error is bounded by ``window * M * q / (1 - q)``. That bound is
    the reported residual and iteration stops once it is at most ``tol``.
    """
    if not 0 < damping <= 1:
        raise InvalidInput("damping must lie in (0, 1]")
    if window < 1:
        raise InvalidInput("window must be >= 1")
    P = _transitions(dtmc)
    left = np.asarray(left, dtype=bool)
    right = np.asarray(right, dtype=bool)
    prob0, prob1 = until_graph(P, left, right)
    values = prob1.astype(np.float64)
    maybe = np.flatnonzero(~prob0 & ~prob1)
    if maybe.size == 0:
        return Solution(values)
    A = P[maybe][:, maybe].tocsr()
    b = np.asarray(P[maybe][:, np.flatnonzero(prob1)].sum(axis=1)).ravel()
    x = np.zeros(maybe.size)
    residual = np.inf
    diffs: deque[float] = deque(maxlen=2 * window)
    it = 0
    while it < max_iter:
        it += 1
        new = (1 - damping) * x + damping * (A @ x + b)
        diff = float(np.abs(new - x).max())
        x = new
        if diff == 0.0:
            residual = 0.0
            break
        diffs.append(diff)
        if len(diffs) == diffs.maxlen:
            hist = list(diffs)
            older, recent = max(hist[:window]), max(hist[window:])
            q = recent / older
            residual = window * recent * q / (1 - q) if q < 1 else np.inf
            if residual <= tol:
                break
    values[maybe] = np.clip(x, 0.0, 1.0)
    return Solution(values, it, residual, "iterative", residual <= tol)


def unbounded_reach(dtmc: SparseModel, target: np.ndarray, **kw) -> Solution:
    return unbounded_until(dtmc, np.ones(dtmc.n_states, dtype=bool), target, **kw)


def expected_steps(dtmc: SparseModel, target: np.ndarray) -> Solution:
    """Expected transitions until first reaching ``target`` (0 inside it).

    States that miss the target with positive probability get ``inf``; the
    remaining ones satisfy ``(I - P) t = 1`` outside the target, solved
    directly.
    """
    P = _transitions(dtmc)
    target = np.asarray(target, dtype=bool)
    _, prob1 = until_graph(P, np.ones(dtmc.n_states, dtype=bool), target)
    values = np.full(dtmc.n_states, np.inf)
    values[target] = 0.0
    solve = np.flatnonzero(prob1 & ~target)
    if solve.size == 0:
        return Solution(values, method="graph")
    A = sp.identity(solve.size, format="csc") - P[solve][:, solve].tocsc()
    rhs = np.ones(solve.size)
    t = spla.spsolve(A, rhs)
    t = np.atleast_1d(t)
    residual = float(np.abs(A @ t - rhs).max())
    values[solve] = t
    return Solution(values, 1, residual, "direct", bool(np.all(np.isfinite(t))))


def evaluate(
    dtmc: SparseModel,
    query,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> QueryResult:
    """Evaluate a parsed (or textual) query at the initial state."""
    if isinstance(query, str):
        query = parse(query)
    unbound = parameters(query)
    if unbound:
        raise InvalidInput(f"unbound parameters {sorted(unbound)}; bind them first")
    path = query.path
    text = pretty(query)
    if isinstance(query, TimeQuery):
        sol = expected_steps(dtmc, eval_state_formula(dtmc, path.target))
    elif isinstance(path, Eventually):
        target = eval_state_formula(dtmc, path.target)
        if path.bound is None:
            sol = unbounded_reach(dtmc, target, tol=tol, max_iter=max_iter)
        else:
            sol = Solution(bounded_reach(dtmc, target, path.bound), path.bound, 0.0, "bounded")
    elif isinstance(path, Until):
        left = eval_state_formula(dtmc, path.left)
        right = eval_state_formula(dtmc, path.right)
        if path.bound is None:
            sol = unbounded_until(dtmc, left, right, tol=tol, max_iter=max_iter)
        else:
            sol = Solution(bounded_until(dtmc, left, right, path.bound), path.bound, 0.0, "bounded")
    else:
        raise InvalidInput(f"unsupported path formula {path!r}")
    value = float(sol.values[dtmc.initial])
    verdict = None
    if isinstance(query, ProbThreshold):
        verdict = _compare(value, query.cmp, query.p)
    return QueryResult(text, value, verdict, sol.iterations, sol.residual, sol.method, sol.converged, sol.values)


def _compare(value: float, cmp: str, p: float) -> bool:
    return {"<": value < p, "<=": value <= p, ">": value > p, ">=": value >= p}[cmp]


__all__ = [
    "QueryResult",
    "Solution",
    "bounded_reach",
    "bounded_until",
    "eval_state_formula",
    "evaluate",
    "expected_steps",
    "unbounded_reach",
    "unbounded_until",
    "ProbQuery",
]
