"""Full-MDP baseline: exploration, optimal bounded reachability, cost-optimal policies."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidInput, ModelFormatError
from .explore import explore
from .mdp import ModelConfig, N_FEATURES, batch_cost
from .model import SparseModel
from .policy import PolicyTransform, apply_replacement

log = logging.getLogger(__name__)


def explore_full(config: ModelConfig, max_states: Optional[int] = None) -> SparseModel:
    """Reachable full MDP from ``config.initial`` with one row per enabled action."""
    mdp = explore(config, max_states=max_states)
    log.info("full MDP: %d states, %d transitions", mdp.n_states, mdp.n_transitions)
    return mdp


@dataclass
class TabularPolicy:
    """Order level per decision-phase state, keyed by canonical state code."""

    codes: np.ndarray
    orders: np.ndarray
    config: ModelConfig
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        order = np.argsort(self.codes, kind="stable")
        self.codes = np.asarray(self.codes, dtype=np.int64)[order]
        self.orders = np.asarray(self.orders, dtype=np.int64)[order]

    def __len__(self) -> int:
        return self.codes.size

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if self.codes.size == 0:
            raise InvalidInput("empty tabular policy")
        pos = np.minimum(np.searchsorted(self.codes, codes), self.codes.size - 1)
        hit = self.codes[pos] == codes
        if not hit.all():
            missing = codes[~hit]
            raise InvalidInput(f"tabular policy does not cover {missing.size} state(s), e.g. code {int(missing[0])}")
        return self.orders[pos]

    def select_orders(self, feats: np.ndarray, mask: np.ndarray, transform: Optional[PolicyTransform] = None) -> np.ndarray:
        from .mdp import batch_encode

        chosen = self.lookup(batch_encode(feats, self.config))
        if transform is not None and transform.replacement:
            chosen = apply_replacement(chosen, mask, transform.replacement)
        return chosen

    def save(self, path: str | Path) -> None:
        import json

        header = json.dumps({"config": self.config.to_dict(), "meta": self.meta}).encode()
        with open(path, "wb") as fh:
            np.savez_compressed(fh, codes=self.codes, orders=self.orders.astype(np.int16),
                                header=np.frombuffer(header, dtype=np.uint8))

    @classmethod
    def load(cls, path: str | Path) -> "TabularPolicy":
        import json

        try:
            data = np.load(path, allow_pickle=False)
            header = json.loads(bytes(data["header"]).decode())
            return cls(data["codes"], data["orders"], ModelConfig.from_dict(header["config"]), header.get("meta", {}))
        except (OSError, ValueError, KeyError) as exc:
            raise ModelFormatError(f"{path}: not a tabular policy file ({exc})") from None


@dataclass
class ReachResult:
    value: float
    values: np.ndarray
    policy: TabularPolicy
    iterations: int
    sense: str


def _greedy_rows(mdp: SparseModel, row_vals: np.ndarray, state_vals: np.ndarray) -> np.ndarray:
    """First row (smallest order level) per state attaining ``state_vals``."""
    row_state = np.repeat(np.arange(mdp.n_states), np.diff(mdp.state_ptr))
    hit = row_vals == state_vals[row_state]
    cand = np.flatnonzero(hit)
    first = np.full(mdp.n_states, -1, dtype=np.int64)
    # cand is ascending, so the reversed assignment keeps the first hit per state
    first[row_state[cand[::-1]]] = cand[::-1]
    return first


def _policy_from_rows(mdp: SparseModel, rows: np.ndarray, meta: dict) -> TabularPolicy:
    dec = mdp.decision_states()
    return TabularPolicy(mdp.state_codes[dec], mdp.row_action[rows[dec]].astype(np.int64), mdp.config, meta)


def bounded_reach_mdp(mdp: SparseModel, target_label: str, bound: int, sense: str = "min") -> ReachResult:
    """Optimal probability of reaching ``target_label`` within ``bound`` steps.

    ``sense`` is ``"min"`` or ``"max"``. The returned tabular policy is greedy
    with respect to the ``bound - 1`` step values, ties resolved to the
    smallest order level.
    """
    if bound < 0:
        raise InvalidInput("bound must be >= 0")
    if sense not in ("min", "max"):
        raise InvalidInput(f"sense must be 'min' or 'max', not {sense!r}")
    target = mdp.label_mask(target_label)
    reduce = np.minimum if sense == "min" else np.maximum
    A = mdp.row_matrix()
    starts = mdp.state_ptr[:-1]
    v = target.astype(np.float64)
    prev = v
    for _ in range(bound):
        prev = v
        v = np.where(target, 1.0, reduce.reduceat(A @ prev, starts))
    greedy_vals = A @ prev
    rows = _greedy_rows(mdp, greedy_vals, reduce.reduceat(greedy_vals, starts))
    policy = _policy_from_rows(mdp, rows, {"objective": f"{sense}_reach", "target": target_label, "bound": bound})
    return ReachResult(float(v[mdp.initial]), v, policy, bound, sense)


def min_bounded_reach(mdp: SparseModel, target_label: str, bound: int) -> ReachResult:
    return bounded_reach_mdp(mdp, target_label, bound, "min")


def max_bounded_reach(mdp: SparseModel, target_label: str, bound: int) -> ReachResult:
    return bounded_reach_mdp(mdp, target_label, bound, "max")


@dataclass
class CostResult:
    value: float
    values: np.ndarray
    policy: TabularPolicy
    iterations: int
    residual: float
    converged: bool


def optimal_cost_policy(
    mdp: SparseModel,
    discount: float = 0.99,
    tol: float = 1e-9,
    max_iter: int = 100_000,
    order_step: int = 1,
) -> CostResult:
    """Discounted expected-cost minimization by value iteration.

    A state's cost is its expected shortage/outdating penalty (nonzero only
    in the demand phase); the policy greedily minimizes cost-to-go.
    With ``order_step`` m > 1 only order quantities that are multiples of m
    are considered (Order(0) always is), which yields a policy that visits
    far fewer inventory profiles at a small cost premium.
    """
    if not 0 <= discount < 1:
        raise InvalidInput("discount must lie in [0, 1)")
    if order_step < 1:
        raise InvalidInput("order_step must be >= 1")
    cost = batch_cost(mdp.features(), mdp.config)
    A = mdp.row_matrix()
    starts = mdp.state_ptr[:-1]
    ra = mdp.row_action.astype(np.int64)
    penalty = np.where((ra > 0) & (ra % order_step != 0), np.inf, 0.0)
    v = np.zeros(mdp.n_states)
    residual = np.inf
    it = 0
    while it < max_iter:
        it += 1
        new = cost + discount * np.minimum.reduceat(A @ v + penalty, starts)
        residual = float(np.abs(new - v).max())
        v = new
        if residual <= tol:
            break
    converged = residual <= tol
    if not converged:
        log.warning("cost value iteration stopped at residual %.3e", residual)
    row_vals = A @ v + penalty
    rows = _greedy_rows(mdp, row_vals, np.minimum.reduceat(row_vals, starts))
    meta = {"objective": "discounted_cost", "discount": discount, "order_step": order_step}
    policy = _policy_from_rows(mdp, rows, meta)
    return CostResult(float(v[mdp.initial]), v, policy, it, residual, converged)


def distill_dataset(model: SparseModel, policy: TabularPolicy) -> tuple[np.ndarray, np.ndarray]:
    """(observations, order levels) for every decision-phase state of ``model``."""
    dec = model.decision_states()
    obs = model.features_of(dec)
    actions = policy.lookup(model.state_codes[dec])
    return obs.astype(np.float64).reshape(-1, N_FEATURES), actions
