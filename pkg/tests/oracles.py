"""Reference computations over the scalar transition functions.

Nothing here touches the vectorized explorer or the sparse solvers: chains
are enumerated state by state with ``successors`` and probabilities are
obtained by explicit path sums or dense linear algebra.
"""

from collections import deque
from functools import lru_cache

import numpy as np

from plateletmc.mdp import DM, Order, base_labels, enabled_actions, state_index, successors


def scalar_chain(config, choose):
    """FIFO enumeration of the chain induced by ``choose(state) -> k``."""
    order = [config.initial]
    index = {config.initial: 0}
    queue = deque(order)
    edges = {}
    while queue:
        s = queue.popleft()
        a = DM if s.ph == 1 else Order(choose(s))
        assert a in enabled_actions(s, config)
        edges[s] = []
        for p, t in successors(s, a, config):
            if t not in index:
                index[t] = len(order)
                order.append(t)
                queue.append(t)
            edges[s].append((t, p))
    n = len(order)
    P = np.zeros((n, n))
    for s, succ in edges.items():
        for t, p in succ:
            P[index[s], index[t]] += p
    return order, P, edges


def path_until(edges, start, left, right, bound):
    """P(left U<=bound right) from ``start`` by summing over every path."""
    if right(start):
        return 1.0
    if bound == 0 or not left(start):
        return 0.0
    return sum(p * path_until(edges, t, left, right, bound - 1) for t, p in edges[start])


def _prob_positive(P, target):
    n = len(P)
    reach = set(np.flatnonzero(target).tolist())
    changed = True
    while changed:
        changed = False
        for s in range(n):
            if s not in reach and any(t in reach for t in np.flatnonzero(P[s])):
                reach.add(s)
                changed = True
    return reach


def linear_reach(P, target):
    n = len(P)
    pos = _prob_positive(P, target)
    x = np.zeros(n)
    x[target] = 1.0
    unk = [s for s in range(n) if s in pos and not target[s]]
    if unk:
        A = np.eye(len(unk)) - P[np.ix_(unk, unk)]
        x[unk] = np.linalg.solve(A, P[np.ix_(unk, np.flatnonzero(target))].sum(axis=1))
    return x


def linear_steps(P, target):
    reach = linear_reach(P, target)
    t = np.full(len(P), np.inf)
    t[target] = 0.0
    sure = [s for s in range(len(P)) if not target[s] and abs(reach[s] - 1) < 1e-9]
    if sure:
        A = np.eye(len(sure)) - P[np.ix_(sure, sure)]
        t[sure] = np.linalg.solve(A, np.ones(len(sure)))
    return t


def optimal_bounded(config, label, bound, sense):
    """Optimal P(F<=bound label) per state by expanding every decision at every step.

    This ranges over all deterministic history-dependent policies up to the
    bound, which attain the optimum of bounded reachability.
    """
    pick = min if sense == "min" else max

    @lru_cache(maxsize=None)
    def value(s, t):
        if label in base_labels(s, config):
            return 1.0
        if t == 0:
            return 0.0
        return pick(
            sum(p * value(u, t - 1) for p, u in successors(s, a, config))
            for a in enabled_actions(s, config)
        )

    return value


def codes_of(states, config):
    return np.array([state_index(s, config) for s in states])
