"""Policy-induced DTMC construction and the action / importance labeling passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .explore import explore
from .mdp import FEATURES, ModelConfig, batch_enabled_orders
from .model import SparseModel
from .policy import IMP_NONE, PolicyTransform, importance_label, permutation_change_counts

Predicate = Callable[[np.ndarray], np.ndarray]


@dataclass
class LabelerSet:
    """Which labeling hooks run after construction.

    ``custom`` maps a label name to a predicate over the (n, 8) feature
    matrix. Importance labels need the finished state set and run last.
    """

    base: bool = True
    action: bool = True
    importance: bool = False
    rounds: int = 50
    seed: int = 0
    custom: dict[str, Predicate] = field(default_factory=dict)

    @classmethod
    def parse(cls, spec: str, rounds: int = 50, seed: int = 0) -> "LabelerSet":
        names = {s.strip() for s in spec.split(",") if s.strip()}
        unknown = names - {"base", "action", "importance"}
        if unknown:
            from .errors import InvalidInput

            raise InvalidInput(f"unknown labelers {sorted(unknown)}")
        return cls("base" in names, "action" in names, "importance" in names, rounds, seed)


def build_induced(
    config: ModelConfig,
    policy,
    transform: Optional[PolicyTransform] = None,
    labelers: Optional[LabelerSet] = None,
    relevance_stop: Optional[str] = None,
    max_states: Optional[int] = None,
) -> SparseModel:
    """DTMC reachable from the initial state when ``policy`` resolves every choice.

    States labeled ``relevance_stop`` become absorbing and are not expanded.
    """
    labelers = labelers or LabelerSet()
    if transform is not None:
        transform.check_levels(config.n_orders)

    def choose(feats, mask):
        return policy.select_orders(feats.astype(np.float64), mask, transform)

    dtmc = explore(config, choose=choose, absorb_label=relevance_stop, max_states=max_states)
    if not labelers.base:
        dtmc.labels = {}
    if labelers.action:
        label_actions(dtmc, policy, transform)
    feats = dtmc.features()
    for name, pred in labelers.custom.items():
        dtmc.add_label(name, pred(feats))
    if labelers.importance:
        label_importance(dtmc, policy, labelers.rounds, labelers.seed, transform)
    dtmc.meta["transform"] = _transform_meta(transform)
    return dtmc


def _transform_meta(transform: Optional[PolicyTransform]) -> dict:
    if transform is None:
        return {"pruned": [], "replacement": {}}
    return {
        "pruned": [FEATURES[i] for i in sorted(transform.pruned)],
        "replacement": {str(a): b for a, b in sorted(transform.replacement.items())},
    }


def selected_orders(dtmc: SparseModel, policy, transform=None) -> tuple[np.ndarray, np.ndarray]:
    """(decision state indices, order level the policy picks there)."""
    dec = dtmc.decision_states()
    feats = dtmc.features_of(dec)
    mask = batch_enabled_orders(feats, dtmc.config)
    return dec, policy.select_orders(feats.astype(np.float64), mask, transform)


def label_actions(dtmc: SparseModel, policy, transform: Optional[PolicyTransform] = None) -> SparseModel:
    """Add ``pr_k`` to each decision state and ``dm`` to each demand state.

    All levels ``pr_0..pr_smax`` are declared, so queries about a level the
    policy never picks see an empty label rather than an unknown one.
    """
    dec, orders = selected_orders(dtmc, policy, transform)
    n = dtmc.n_states
    for k in range(dtmc.config.n_orders):
        mask = np.zeros(n, dtype=bool)
        mask[dec[orders == k]] = True
        dtmc.labels[f"pr_{k}"] = mask
    dm = np.ones(n, dtype=bool)
    dm[dec] = False
    dtmc.labels["dm"] = dm
    return dtmc


def label_importance(
    dtmc: SparseModel,
    policy,
    rounds: int = 50,
    seed: int = 0,
    transform: Optional[PolicyTransform] = None,
) -> SparseModel:
    """Add one ``imp_<feature>`` (or ``imp_none``) label per decision state."""
    dec = dtmc.decision_states()
    feats = dtmc.features_of(dec)
    counts = permutation_change_counts(policy, feats, rounds, seed, dtmc.config, transform)
    best = np.where(counts.max(axis=1) > 0, np.argmax(counts, axis=1), -1)
    n = dtmc.n_states
    for f in range(-1, len(FEATURES)):
        mask = np.zeros(n, dtype=bool)
        mask[dec[best == f]] = True
        dtmc.labels[importance_label(f)] = mask
    dtmc.meta["importance"] = {"rounds": rounds, "seed": seed}
    return dtmc


__all__ = ["LabelerSet", "build_induced", "label_actions", "label_importance", "selected_orders", "IMP_NONE"]
