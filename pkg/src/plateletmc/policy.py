"""Feed-forward ordering policies and the explanation transforms applied to them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import InvalidInput, PolicyFormatError
from .mdp import (
    DM,
    FEATURES,
    N_FEATURES,
    Action,
    InventoryState,
    ModelConfig,
    Order,
    batch_enabled_orders,
)

DEFAULT_DIMS = (8, 256, 256, 256, 31)


@dataclass
class MlpPolicy:
    """ReLU network mapping the 8 raw state features to one score per order level.

    ``weights[l]`` has shape ``(dims[l+1], dims[l])``; entry ``[j, i]`` connects
    input ``i`` to unit ``j``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        _check_shapes(self.dims_from_arrays(), self.weights, self.biases)

    def dims_from_arrays(self) -> tuple[int, ...]:
        if not self.weights:
            raise PolicyFormatError("policy needs at least one layer")
        return (self.weights[0].shape[1], *(w.shape[0] for w in self.weights))

    @property
    def dims(self) -> tuple[int, ...]:
        return self.dims_from_arrays()

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[0]

    def forward(self, obs) -> np.ndarray:
        """Scores for one observation ``(8,)`` or a batch ``(n, 8)``."""
        h = np.asarray(obs, dtype=np.float64)
        single = h.ndim == 1
        if h.shape[-1] != self.dims[0]:
            raise InvalidInput(f"observation width {h.shape[-1]} != input width {self.dims[0]}")
        if single:
            h = h[None, :]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h[0] if single else h

    def copy(self) -> "MlpPolicy":
        return MlpPolicy([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def select_orders(self, feats: np.ndarray, mask: np.ndarray, transform: Optional["PolicyTransform"] = None) -> np.ndarray:
        """Masked greedy order level per decision state (ties -> smallest level)."""
        net = self
        if transform is not None and transform.pruned:
            net = prune_features(self, transform.pruned)
        scores = net.forward(feats)
        if scores.shape[1] != mask.shape[1]:
            raise InvalidInput(f"policy has {scores.shape[1]} outputs but {mask.shape[1]} order levels exist")
        chosen = np.argmax(np.where(mask, scores, -np.inf), axis=1)
        if transform is not None and transform.replacement:
            chosen = apply_replacement(chosen, mask, transform.replacement)
        return chosen


def _check_shapes(dims, weights, biases) -> None:
    if len(weights) != len(biases):
        raise PolicyFormatError("weights and biases differ in layer count")
    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.ndim != 2:
            raise PolicyFormatError(f"layer {i}: weight matrix must be 2-D")
        if w.shape != (dims[i + 1], dims[i]):
            raise PolicyFormatError(f"layer {i}: weight shape {w.shape} != ({dims[i + 1]}, {dims[i]})")
        if b.shape != (dims[i + 1],):
            raise PolicyFormatError(f"layer {i}: bias length {b.shape} != {dims[i + 1]}")


def random_policy(dims: Sequence[int] = DEFAULT_DIMS, seed: int = 0) -> MlpPolicy:
    """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpPolicy(weights, biases)


def constant_policy(k: int, n_outputs: int = 31, hidden: Sequence[int] = (4,)) -> MlpPolicy:
    """Zero-weight network whose output bias prefers order level ``k``."""
    dims = (N_FEATURES, *hidden, n_outputs)
    weights = [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(o) for o in dims[1:]]
    biases[-1][k] = 1.0
    return MlpPolicy(weights, biases)


@dataclass(frozen=True)
class PolicyTransform:
    """First-layer feature pruning plus an order-level replacement map.

    The replacement map is applied once to the selected level (it does not
    chain). If the target is disabled in a state, the largest enabled level
    not exceeding the target is used instead.
    """

    pruned: frozenset = frozenset()
    replacement: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "pruned", frozenset(int(i) for i in self.pruned))
        object.__setattr__(self, "replacement", {int(a): int(b) for a, b in dict(self.replacement).items()})
        for i in self.pruned:
            if not 0 <= i < N_FEATURES:
                raise InvalidInput(f"feature index {i} outside 0..{N_FEATURES - 1}")
        for a, b in self.replacement.items():
            if a < 0 or b < 0:
                raise InvalidInput(f"replacement {a}->{b} uses a negative order level")

    def check_levels(self, n_orders: int) -> None:
        for a, b in self.replacement.items():
            if a >= n_orders or b >= n_orders:
                raise InvalidInput(f"replacement {a}->{b} outside order levels 0..{n_orders - 1}")

    @classmethod
    def parse(cls, prune: Iterable = (), counterfactual: Iterable[str] = ()) -> "PolicyTransform":
        return cls(frozenset(feature_index(f) for f in prune), dict(parse_replacement(c) for c in counterfactual))


def feature_index(name) -> int:
    if isinstance(name, int) or (isinstance(name, str) and name.isdigit()):
        i = int(name)
        if not 0 <= i < N_FEATURES:
            raise InvalidInput(f"feature index {i} outside 0..{N_FEATURES - 1}")
        return i
    try:
        return FEATURES.index(name)
    except ValueError:
        raise InvalidInput(f"unknown feature {name!r}; expected one of {FEATURES}") from None


def parse_replacement(text: str) -> tuple[int, int]:
    """``"14:6"`` or ``"pr_14:pr_6"`` -> ``(14, 6)``."""
    try:
        a, b = text.split(":")
        return _order_level(a), _order_level(b)
    except ValueError:
        raise InvalidInput(f"bad counterfactual {text!r}; expected FROM:TO") from None


def _order_level(text: str) -> int:
    text = text.strip()
    for prefix in ("pr_", "pr"):
        if text.startswith(prefix):
            text = text[len(prefix):]
            break
    return int(text)


def apply_replacement(chosen: np.ndarray, mask: np.ndarray, mapping: Mapping[int, int]) -> np.ndarray:
    chosen = np.asarray(chosen, dtype=np.int64)
    lut = np.arange(mask.shape[1], dtype=np.int64)
    for a, b in mapping.items():
        if a >= lut.size or b >= lut.size:
            raise InvalidInput(f"replacement {a}->{b} outside order levels 0..{lut.size - 1}")
        lut[a] = b
    target = lut[chosen]
    # largest enabled level <= target
    best_below = np.maximum.accumulate(np.where(mask, np.arange(mask.shape[1]), -1), axis=1)
    return best_below[np.arange(chosen.size), target]


def prune_features(policy: MlpPolicy, features: Iterable[int]) -> MlpPolicy:
    out = policy.copy()
    for i in features:
        out.weights[0][:, i] = 0.0
    return out


def prune_feature(policy: MlpPolicy, i: int) -> MlpPolicy:
    """Copy of ``policy`` with every first-layer weight leaving input ``i`` set to zero."""
    return prune_features(policy, [feature_index(i)])


def select_action(
    policy,
    transform: Optional[PolicyTransform],
    state: InventoryState,
    enabled: Sequence[Action],
) -> Action:
    if not enabled:
        raise InvalidInput("no enabled actions")
    if state.ph == 1:
        return DM
    n = policy.n_outputs if isinstance(policy, MlpPolicy) else policy.config.n_orders
    mask = np.zeros((1, n), dtype=bool)
    for a in enabled:
        if isinstance(a, Order):
            mask[0, a.k] = True
    k = policy.select_orders(np.array([state.features()], dtype=np.float64), mask, transform)[0]
    return Order(int(k))


IMP_NONE = "imp_none"


def importance_label(feature: int) -> str:
    return IMP_NONE if feature < 0 else f"imp_{FEATURES[feature]}"


def permutation_importance(
    policy,
    states,
    rounds: int,
    seed: int,
    config: ModelConfig,
    transform: Optional[PolicyTransform] = None,
) -> list[Optional[str]]:
    """Per-state label of the feature whose permutation most often flips the action.

    Each feature column is permuted across all decision-phase observations,
    ``rounds`` times, with a stream seeded by ``(seed, feature)``. Selection
    keeps each state's own action mask. Phase-1 entries get ``None``.
    """
    if rounds < 1:
        raise InvalidInput("rounds must be >= 1")
    feats = _as_features(states)
    if feats.shape[0] == 0:
        raise InvalidInput("states must be nonempty")
    counts = permutation_change_counts(policy, feats, rounds, seed, config, transform)
    out: list[Optional[str]] = [None] * feats.shape[0]
    dec = np.flatnonzero(feats[:, 7] == 0)
    best = np.argmax(counts, axis=1)
    best = np.where(counts.max(axis=1) > 0, best, -1)
    for j, i in enumerate(dec.tolist()):
        out[i] = importance_label(int(best[j]))
    return out


def permutation_change_counts(policy, feats, rounds, seed, config, transform=None) -> np.ndarray:
    """(n_decision, 8) counts of rounds in which permuting a feature changed the action."""
    dec = feats[feats[:, 7] == 0].astype(np.float64)
    mask = batch_enabled_orders(dec.astype(np.int64), config)
    base = policy.select_orders(dec, mask, transform)
    n = dec.shape[0]
    counts = np.zeros((n, N_FEATURES), dtype=np.int64)
    for i in range(N_FEATURES):
        rng = np.random.default_rng([seed, i])
        column = dec[:, i]
        for _ in range(rounds):
            perm = rng.permutation(n)
            shuffled = column[perm]
            if np.array_equal(shuffled, column):
                continue  # identical inputs, identical actions
            x = dec.copy()
            x[:, i] = shuffled
            counts[:, i] += policy.select_orders(x, mask, transform) != base
    return counts


def _as_features(states) -> np.ndarray:
    if isinstance(states, np.ndarray):
        return states.astype(np.int64).reshape(-1, N_FEATURES)
    return np.array([s.features() for s in states], dtype=np.int64).reshape(-1, N_FEATURES)


# -- weight file -------------------------------------------------------------


def policy_to_dict(policy: MlpPolicy) -> dict:
    return {
        "features": list(FEATURES),
        "dims": list(policy.dims),
        "activation": "relu",
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(policy.weights, policy.biases)],
    }


def policy_from_dict(data: dict) -> MlpPolicy:
    try:
        dims = [int(d) for d in data["dims"]]
        layers = data["layers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise PolicyFormatError(f"missing or bad field: {exc}") from None
    if data.get("activation", "relu") != "relu":
        raise PolicyFormatError(f"unsupported activation {data.get('activation')!r}")
    if "features" in data and list(data["features"]) != list(FEATURES):
        raise PolicyFormatError(f"feature order {data['features']} != {list(FEATURES)}")
    if len(layers) != len(dims) - 1:
        raise PolicyFormatError(f"{len(layers)} layers but dims imply {len(dims) - 1}")
    weights, biases = [], []
    for i, layer in enumerate(layers):
        try:
            w, b = layer["w"], layer["b"]
        except (KeyError, TypeError):
            raise PolicyFormatError(f"layer {i}: needs 'w' and 'b'") from None
        if len(w) != dims[i + 1]:
            raise PolicyFormatError(f"layer {i}: 'w' has {len(w)} rows, dims say {dims[i + 1]}")
        for j, row in enumerate(w):
            if len(row) != dims[i]:
                raise PolicyFormatError(f"layer {i}: 'w' row {j} has {len(row)} columns, dims say {dims[i]}")
        if len(b) != dims[i + 1]:
            raise PolicyFormatError(f"layer {i}: 'b' has {len(b)} entries, dims say {dims[i + 1]}")
        try:
            weights.append(np.array(w, dtype=np.float64))
            biases.append(np.array(b, dtype=np.float64))
        except (TypeError, ValueError) as exc:
            raise PolicyFormatError(f"layer {i}: non-numeric entry ({exc})") from None
    return MlpPolicy(weights, biases)


def save_policy(policy: MlpPolicy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(policy_to_dict(policy)))


def load_policy(path: str | Path) -> MlpPolicy:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise PolicyFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return policy_from_dict(data)
    except PolicyFormatError as exc:
        raise PolicyFormatError(f"{path}: {exc}") from None
