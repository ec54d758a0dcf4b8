"""Breadth-first explicit-state construction over the two-phase inventory MDP.

Phases alternate along every transition, so each BFS layer holds states of a
single phase and can be expanded as one vectorized batch. New states are
numbered in first-occurrence order of the layer's successor sequence, which
reproduces FIFO worklist numbering exactly.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional

import numpy as np

from .errors import MemoryBudgetExceeded
from .mdp import (
    DEMAND_MOVE_CODE,
    ModelConfig,
    batch_base_labels,
    batch_decode,
    batch_demand_successors,
    batch_enabled_orders,
    state_index,
)
from .model import ABSORB_CODE, SparseModel

log = logging.getLogger(__name__)

# chooser(feats, enabled_mask) -> order level per decision state
Chooser = Callable[[np.ndarray, np.ndarray], np.ndarray]


class _Visited:
    """Sorted code -> id index for one phase."""

    def __init__(self):
        self.keys = np.zeros(0, dtype=np.int64)
        self.ids = np.zeros(0, dtype=np.int64)

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        if self.keys.size == 0:
            return np.full(codes.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self.keys, codes)
        pos = np.minimum(pos, self.keys.size - 1)
        return np.where(self.keys[pos] == codes, self.ids[pos], -1)

    def add(self, codes: np.ndarray, ids: np.ndarray) -> None:
        keys = np.concatenate([self.keys, codes])
        order = np.argsort(keys, kind="stable")
        self.keys = keys[order]
        self.ids = np.concatenate([self.ids, ids])[order]


def explore(
    config: ModelConfig,
    choose: Optional[Chooser] = None,
    absorb_label: Optional[str] = None,
    max_states: Optional[int] = None,
    chunk: int = 1 << 15,
) -> SparseModel:
    """Build the reachable model from ``config.initial``.

    With ``choose=None`` every enabled order becomes a row (the full MDP);
    otherwise ``choose`` fixes one order per decision state (an induced DTMC).
    States carrying ``absorb_label`` get a single self-loop and are not
    expanded.
    """
    init_code = state_index(config.initial, config)
    visited = (_Visited(), _Visited())
    visited[config.initial.ph].add(np.array([init_code]), np.array([0]))
    next_id = 1
    all_codes = [np.array([init_code])]

    rows_per_state, row_action, entries_per_row, cols, probs = [], [], [], [], []
    n_absorbed = 0
    n_transitions = 0

    frontier = np.array([init_code], dtype=np.int64)
    frontier_ids = np.array([0], dtype=np.int64)
    ph = config.initial.ph
    layers = 0
    while frontier.size:
        layers += 1
        target_phase = 1 - ph
        new_layer_codes = []
        for lo in range(0, frontier.size, chunk):
            codes = frontier[lo : lo + chunk]
            ids = frontier_ids[lo : lo + chunk]
            feats = batch_decode(codes, config)
            n = codes.size
            if ph == 0:
                mask = batch_enabled_orders(feats, config)
                if choose is None:
                    st, k = np.nonzero(mask)
                    r_counts = mask.sum(axis=1)
                else:
                    k = np.asarray(choose(feats, mask), dtype=np.int64)
                    st = np.arange(n)
                    r_counts = np.ones(n, dtype=np.int64)
                succ = codes[st] + 2 * k + 1
                e_counts = np.ones(k.size, dtype=np.int64)
                e_probs = np.ones(k.size)
                acts = k
            else:
                e_counts, succ, e_probs = batch_demand_successors(feats, config)
                r_counts = np.ones(n, dtype=np.int64)
                acts = np.full(n, DEMAND_MOVE_CODE, dtype=np.int64)

            if absorb_label is not None:
                absorbed = batch_base_labels(feats, config)[absorb_label]
                if absorbed.any():
                    n_absorbed += int(absorbed.sum())
                    row_state = np.repeat(np.arange(n), r_counts)
                    entry_state = np.repeat(row_state, e_counts)
                    keep_rows = ~absorbed[row_state]
                    keep_entries = ~absorbed[entry_state]
                    # splice one self-loop row per absorbed state, keeping state order
                    r_counts = np.where(absorbed, 1, r_counts)
                    row_key = np.concatenate([row_state[keep_rows], np.flatnonzero(absorbed)])
                    row_order = np.argsort(row_key, kind="stable")
                    acts = np.concatenate([acts[keep_rows], np.full(absorbed.sum(), ABSORB_CODE)])[row_order]
                    e_counts = np.concatenate([e_counts[keep_rows], np.ones(absorbed.sum(), dtype=np.int64)])[row_order]
                    ent_key = np.concatenate([entry_state[keep_entries], np.flatnonzero(absorbed)])
                    ent_order = np.argsort(ent_key, kind="stable")
                    self_flag = np.concatenate([np.zeros(keep_entries.sum(), bool), np.ones(absorbed.sum(), bool)])[ent_order]
                    succ = np.concatenate([succ[keep_entries], codes[absorbed]])[ent_order]
                    e_probs = np.concatenate([e_probs[keep_entries], np.ones(absorbed.sum())])[ent_order]
                    succ_ids = np.empty(succ.size, dtype=np.int64)
                    self_ids = np.concatenate([np.zeros(keep_entries.sum(), np.int64), ids[absorbed]])[ent_order]
                    succ_ids[self_flag] = self_ids[self_flag]
                    other = ~self_flag
                    succ_ids[other], new_codes, next_id = _assign(visited[target_phase], succ[other], next_id)
                else:
                    succ_ids, new_codes, next_id = _assign(visited[target_phase], succ, next_id)
            else:
                succ_ids, new_codes, next_id = _assign(visited[target_phase], succ, next_id)

            new_layer_codes.append(new_codes)
            rows_per_state.append(r_counts)
            row_action.append(acts.astype(np.int16))
            entries_per_row.append(e_counts)
            cols.append(succ_ids)
            probs.append(e_probs)
            n_transitions += succ_ids.size
            if max_states is not None and next_id > max_states:
                raise MemoryBudgetExceeded(next_id, n_transitions, max_states)

        frontier = np.concatenate(new_layer_codes) if new_layer_codes else np.zeros(0, np.int64)
        frontier_ids = np.arange(next_id - frontier.size, next_id, dtype=np.int64)
        all_codes.append(frontier)
        ph = target_phase
        log.debug("layer %d: %d new states (total %d)", layers, frontier.size, next_id)

    state_codes = np.concatenate(all_codes)
    state_ptr = np.concatenate([[0], np.cumsum(np.concatenate(rows_per_state))])
    row_ptr = np.concatenate([[0], np.cumsum(np.concatenate(entries_per_row))])
    feats = batch_decode(state_codes, config)
    model = SparseModel(
        kind="mdp" if choose is None else "dtmc",
        state_ptr=state_ptr.astype(np.int64),
        row_action=np.concatenate(row_action),
        row_ptr=row_ptr.astype(np.int64),
        cols=np.concatenate(cols).astype(np.int32),
        probs=np.concatenate(probs),
        initial=0,
        labels=batch_base_labels(feats, config),
        state_codes=state_codes,
        config=config,
        meta={"layers": layers, "absorb_label": absorb_label, "absorbed_states": n_absorbed},
    )
    return model


def _assign(visited: _Visited, succ: np.ndarray, next_id: int):
    """Map successor codes to ids, numbering unseen codes by first occurrence."""
    ids = visited.lookup(succ)
    unseen = ids < 0
    if unseen.any():
        cand = succ[unseen]
        uniq, first = np.unique(cand, return_index=True)
        new_codes = uniq[np.argsort(first, kind="stable")]
        new_ids = np.arange(next_id, next_id + new_codes.size, dtype=np.int64)
        visited.add(new_codes, new_ids)
        next_id += new_codes.size
        ids[unseen] = visited.lookup(cand)
    else:
        new_codes = np.zeros(0, dtype=np.int64)
    return ids, new_codes, next_id
