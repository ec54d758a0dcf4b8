"""Indexed sparse transition structure shared by the full MDP and induced DTMCs.

Layout is two-level CSR: state ``s`` owns rows ``state_ptr[s]:state_ptr[s+1]``;
row ``r`` owns entries ``row_ptr[r]:row_ptr[r+1]`` of ``cols``/``probs`` and is
tagged with ``row_action[r]`` (order level, ``-1`` demand move, ``-2``
absorbing self-loop). A DTMC has exactly one row per state.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInput, ModelFormatError, UnknownLabel
from .mdp import DEMAND_MOVE_CODE, FEATURES, InventoryState, ModelConfig, action_label, batch_decode

ABSORB_CODE = -2
INIT_LABEL = "init"


def _row_action_name(code: int) -> str:
    return "absorb" if code == ABSORB_CODE else action_label(code)


def _row_action_code(name: str) -> int:
    if name == "absorb":
        return ABSORB_CODE
    if name == "dm":
        return -1
    if name.startswith("pr_") and name[3:].isdigit():
        return int(name[3:])
    if name.isdigit():
        return int(name)
    raise ModelFormatError(f"unknown action name {name!r}")


@dataclass
class SparseModel:
    kind: str
    state_ptr: np.ndarray
    row_action: np.ndarray
    row_ptr: np.ndarray
    cols: np.ndarray
    probs: np.ndarray
    initial: int = 0
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    state_codes: Optional[np.ndarray] = None
    config: Optional[ModelConfig] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return len(self.state_ptr) - 1

    @property
    def n_rows(self) -> int:
        return len(self.row_ptr) - 1

    @property
    def n_transitions(self) -> int:
        return len(self.cols)

    def validate(self, tol: float = 1e-12) -> None:
        if self.kind not in ("mdp", "dtmc"):
            raise ModelFormatError(f"unknown model kind {self.kind!r}")
        rows_per_state = np.diff(self.state_ptr)
        if np.any(rows_per_state < 1):
            raise ModelFormatError("every state needs at least one row")
        if self.kind == "dtmc" and np.any(rows_per_state != 1):
            raise ModelFormatError("a DTMC has exactly one row per state")
        if np.any(np.diff(self.row_ptr) < 1):
            raise ModelFormatError("empty transition row")
        if self.n_transitions and (self.cols.min() < 0 or self.cols.max() >= self.n_states):
            raise ModelFormatError("successor index out of range")
        sums = self.row_sums()
        if np.any(np.abs(sums - 1.0) > tol):
            raise ModelFormatError(f"row sums deviate from 1 by {np.abs(sums - 1).max():.3e}")
        if not 0 <= self.initial < self.n_states:
            raise ModelFormatError("initial state index out of range")
        for name, mask in self.labels.items():
            if mask.shape != (self.n_states,):
                raise ModelFormatError(f"label {name!r} has wrong length")

    def row_sums(self) -> np.ndarray:
        return np.add.reduceat(self.probs, self.row_ptr[:-1]) if self.n_rows else np.zeros(0)

    def row_matrix(self) -> sp.csr_matrix:
        """(rows x states) matrix; for a DTMC this is the transition matrix."""
        return sp.csr_matrix((self.probs, self.cols, self.row_ptr), shape=(self.n_rows, self.n_states))

    def features(self) -> np.ndarray:
        if self.state_codes is None or self.config is None:
            raise InvalidInput("model carries no inventory-state table")
        return batch_decode(self.state_codes, self.config)

    def state(self, i: int) -> InventoryState:
        return InventoryState.from_features(self.features_of([i])[0])

    def features_of(self, idx) -> np.ndarray:
        if self.state_codes is None or self.config is None:
            raise InvalidInput("model carries no inventory-state table")
        return batch_decode(self.state_codes[np.asarray(idx)], self.config)

    def index_of_codes(self, codes: np.ndarray) -> np.ndarray:
        """Model indices for state codes; -1 where absent."""
        order = np.argsort(self.state_codes, kind="stable")
        sorted_codes = self.state_codes[order]
        pos = np.searchsorted(sorted_codes, codes)
        pos = np.minimum(pos, len(sorted_codes) - 1)
        found = sorted_codes[pos] == codes
        return np.where(found, order[pos], -1)

    def label_mask(self, name: str) -> np.ndarray:
        try:
            return self.labels[name]
        except KeyError:
            raise UnknownLabel(name) from None

    def state_labels(self, i: int) -> list[str]:
        return [name for name, mask in self.labels.items() if mask[i]]

    def add_label(self, name: str, mask: np.ndarray) -> None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n_states,):
            raise InvalidInput(f"label {name!r} mask has shape {mask.shape}")
        self.labels[name] = mask

    def decision_states(self) -> np.ndarray:
        feats = self.features()
        return np.flatnonzero(feats[:, 7] == 0)

    def counts(self) -> dict:
        return {"states": self.n_states, "rows": self.n_rows, "transitions": self.n_transitions}

    # -- storage ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        arrays = {
            "state_ptr": self.state_ptr,
            "row_action": self.row_action,
            "row_ptr": self.row_ptr,
            "cols": self.cols,
            "probs": self.probs,
        }
        if self.state_codes is not None:
            arrays["state_codes"] = self.state_codes
        label_names = list(self.labels)
        for i, name in enumerate(label_names):
            arrays[f"label_{i}"] = np.packbits(self.labels[name])
        header = {
            "kind": self.kind,
            "initial": int(self.initial),
            "n_states": self.n_states,
            "labels": label_names,
            "config": self.config.to_dict() if self.config else None,
            "meta": self.meta,
        }
        arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez_compressed(fh, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "SparseModel":
        try:
            data = np.load(path, allow_pickle=False)
            header = json.loads(bytes(data["header"]).decode())
        except (OSError, ValueError, KeyError) as exc:
            raise ModelFormatError(f"{path}: not a model artifact ({exc})") from None
        n = header["n_states"]
        labels = {
            name: np.unpackbits(data[f"label_{i}"], count=n).astype(bool)
            for i, name in enumerate(header["labels"])
        }
        config = ModelConfig.from_dict(header["config"]) if header["config"] else None
        model = cls(
            kind=header["kind"],
            state_ptr=data["state_ptr"],
            row_action=data["row_action"],
            row_ptr=data["row_ptr"],
            cols=data["cols"],
            probs=data["probs"],
            initial=header["initial"],
            labels=labels,
            state_codes=data["state_codes"] if "state_codes" in data else None,
            config=config,
            meta=header["meta"],
        )
        model.validate()
        return model

    @classmethod
    def from_matrix(cls, P, labels: Optional[dict] = None, initial: int = 0) -> "SparseModel":
        """DTMC with one ``dm`` row per state from a square (dense or sparse) matrix."""
        P = sp.csr_matrix(P, dtype=np.float64)
        P.eliminate_zeros()
        P.sort_indices()
        n = P.shape[0]
        if P.shape != (n, n):
            raise InvalidInput("transition matrix must be square")
        model = cls(
            kind="dtmc",
            state_ptr=np.arange(n + 1, dtype=np.int64),
            row_action=np.full(n, DEMAND_MOVE_CODE, dtype=np.int16),
            row_ptr=P.indptr.astype(np.int64),
            cols=P.indices.astype(np.int32),
            probs=P.data.copy(),
            initial=int(initial),
            labels={k: np.asarray(v, dtype=bool) for k, v in (labels or {}).items()},
        )
        model.validate()
        return model

    # -- explicit text format --------------------------------------------

    def export_explicit(self, prefix: str | Path) -> dict[str, Path]:
        """Write ``<prefix>.tra``, ``<prefix>.lab`` and, if states are known, ``<prefix>.states.csv``.

        Transition lines are ``src action dst prob``, one per nonzero entry,
        no header; the importer also accepts action-less ``src dst prob``
        lines for DTMCs. Probabilities are printed in shortest round-trip
        decimal form.
        """
        prefix = Path(prefix)
        paths = {"tra": prefix.with_suffix(".tra"), "lab": prefix.with_suffix(".lab")}
        row_state = np.repeat(np.arange(self.n_states), np.diff(self.state_ptr))
        entry_row = np.repeat(np.arange(self.n_rows), np.diff(self.row_ptr))
        src = row_state[entry_row]
        names = [_row_action_name(int(a)) for a in self.row_action]
        chunk = 1 << 18
        with open(paths["tra"], "w") as fh:
            for lo in range(0, self.n_transitions, chunk):
                hi = min(lo + chunk, self.n_transitions)
                s = src[lo:hi].tolist()
                c = self.cols[lo:hi].tolist()
                p = self.probs[lo:hi].tolist()
                r = entry_row[lo:hi].tolist()
                fh.writelines(f"{a} {names[rr]} {b} {q!r}\n" for a, rr, b, q in zip(s, r, c, p))
        label_names = list(self.labels)
        with open(paths["lab"], "w") as fh:
            fh.write("#DECLARATION\n")
            fh.write(" ".join([INIT_LABEL, *label_names]) + "\n")
            fh.write("#END\n")
            fh.write(f"#KIND {self.kind}\n")
            per_state = self._label_lists(label_names)
            for i in range(self.n_states):
                names_i = per_state[i]
                if i == self.initial:
                    names_i = [INIT_LABEL, *names_i]
                fh.write(" ".join([str(i), *names_i]) + "\n")
        if self.state_codes is not None and self.config is not None:
            paths["states"] = prefix.with_suffix(".states.csv")
            self.write_state_table(paths["states"])
            paths["config"] = prefix.with_suffix(".config.json")
            paths["config"].write_text(json.dumps(self.config.to_dict(), indent=2))
        return paths

    def _label_lists(self, label_names: list[str]) -> list[list[str]]:
        per_state: list[list[str]] = [[] for _ in range(self.n_states)]
        for name in label_names:
            for i in np.flatnonzero(self.labels[name]).tolist():
                per_state[i].append(name)
        return per_state

    def write_state_table(self, path: str | Path) -> None:
        feats = self.features()
        label_names = list(self.labels)
        per_state = self._label_lists(label_names)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", *FEATURES, "labels"])
            for i, row in enumerate(feats.tolist()):
                w.writerow([i, *row, " ".join(per_state[i])])

    @classmethod
    def import_explicit(cls, prefix: str | Path) -> "SparseModel":
        prefix = Path(prefix)
        tra, lab = prefix.with_suffix(".tra"), prefix.with_suffix(".lab")
        kind, declared, label_rows, initial = _read_lab(lab)
        n = len(label_rows)
        labels = {name: np.zeros(n, dtype=bool) for name in declared if name != INIT_LABEL}
        for i, names in enumerate(label_rows):
            for name in names:
                if name != INIT_LABEL:
                    labels[name][i] = True

        srcs, acts, dsts, probs = [], [], [], []
        with open(tra) as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                try:
                    if kind == "dtmc" and len(parts) == 3:
                        s, d, p = parts
                        a = "dm"
                    elif len(parts) == 4:
                        s, a, d, p = parts
                    else:
                        raise ValueError("wrong field count")
                    srcs.append(int(s))
                    acts.append(a)
                    dsts.append(int(d))
                    probs.append(float(p))
                except ValueError as exc:
                    raise ModelFormatError(f"{tra}:{lineno}: {exc}") from None
        src = np.asarray(srcs, dtype=np.int64)
        if src.size and np.any(np.diff(src) < 0):
            raise ModelFormatError(f"{tra}: transitions must be sorted by source state")
        row_starts = [0]
        row_action = []
        state_rows = np.zeros(n, dtype=np.int64)
        for i in range(len(srcs)):
            if i == 0 or srcs[i] != srcs[i - 1] or acts[i] != acts[i - 1]:
                if i:
                    row_starts.append(i)
                row_action.append(_row_action_code(acts[i]))
                state_rows[srcs[i]] += 1
        row_starts.append(len(srcs))
        state_ptr = np.concatenate([[0], np.cumsum(state_rows)])

        state_codes = config = None
        cfg_path = prefix.with_suffix(".config.json")
        states_path = prefix.with_suffix(".states.csv")
        if cfg_path.exists() and states_path.exists():
            from .mdp import batch_encode

            config = ModelConfig.from_dict(json.loads(cfg_path.read_text()))
            with open(states_path) as fh:
                rows = list(csv.reader(fh))[1:]
            feats = np.array([[int(v) for v in r[1:9]] for r in rows], dtype=np.int64)
            state_codes = batch_encode(feats, config)

        model = cls(
            kind=kind,
            state_ptr=state_ptr.astype(np.int64),
            row_action=np.asarray(row_action, dtype=np.int16),
            row_ptr=np.asarray(row_starts, dtype=np.int64),
            cols=np.asarray(dsts, dtype=np.int32),
            probs=np.asarray(probs, dtype=np.float64),
            initial=initial,
            labels=labels,
            state_codes=state_codes,
            config=config,
        )
        model.validate()
        return model


def _read_lab(path: Path):
    kind = "dtmc"
    with open(path) as fh:
        lines = fh.read().splitlines()
    if len(lines) < 3 or lines[0] != "#DECLARATION" or lines[2] != "#END":
        raise ModelFormatError(f"{path}: missing #DECLARATION/#END header")
    declared = lines[1].split()
    body = lines[3:]
    if body and body[0].startswith("#KIND"):
        kind = body[0].split()[1]
        body = body[1:]
    label_rows = []
    initial = 0
    for lineno, line in enumerate(body, 5):
        parts = line.split()
        if not parts:
            continue
        idx = int(parts[0])
        if idx != len(label_rows):
            raise ModelFormatError(f"{path}:{lineno}: expected state {len(label_rows)}, got {idx}")
        unknown = set(parts[1:]) - set(declared)
        if unknown:
            raise ModelFormatError(f"{path}:{lineno}: undeclared labels {sorted(unknown)}")
        if INIT_LABEL in parts[1:]:
            initial = idx
        label_rows.append(parts[1:])
    return kind, declared, label_rows, initial
