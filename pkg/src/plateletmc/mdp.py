"""Platelet inventory MDP: states, actions, demand, dynamics, costs and labels.

Each day is split into two phases. At ``ph=0`` the controller picks an order
``Order(k)``; the amount is parked in ``pend``. At ``ph=1`` nature draws the
day's demand, which is served oldest-first, the oldest leftover outdates,
stock ages by one day, ``pend`` arrives as fresh stock and the day advances.
One step is one of these phase transitions, so a day is two steps.

The scalar functions below are the reference semantics. The ``batch_*``
functions are vectorized equivalents used by the explorers; the test-suite
checks them against each other.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .errors import ConfigError, InvalidInput

FEATURES = ("d", "x1", "x2", "x3", "x4", "x5", "pend", "ph")
N_FEATURES = len(FEATURES)
AGE_CLASSES = 5
DEFAULT_RATES = (6.5, 5.0, 8.0, 5.0, 6.5, 1.75, 3.25)
DAY_NAMES = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")

# action codes used by the vectorized code paths
DEMAND_MOVE_CODE = -1


@dataclass(frozen=True, order=True)
class Order:
    k: int

    def __str__(self) -> str:
        return f"pr_{self.k}"


@dataclass(frozen=True)
class DemandMove:
    def __str__(self) -> str:
        return "dm"


DM = DemandMove()
Action = Union[Order, DemandMove]


def action_code(action: Action) -> int:
    return DEMAND_MOVE_CODE if isinstance(action, DemandMove) else action.k


def action_from_code(code: int) -> Action:
    return DM if code == DEMAND_MOVE_CODE else Order(int(code))


def action_label(code: int) -> str:
    return "dm" if code == DEMAND_MOVE_CODE else f"pr_{int(code)}"


@dataclass(frozen=True)
class InventoryState:
    d: int
    x: tuple[int, int, int, int, int]
    pend: int = 0
    ph: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(int(v) for v in self.x))
        if len(self.x) != AGE_CLASSES:
            raise InvalidInput(f"expected {AGE_CLASSES} age classes, got {len(self.x)}")

    @property
    def tinv(self) -> int:
        return sum(self.x)

    def features(self) -> tuple[int, ...]:
        return (self.d, *self.x, self.pend, self.ph)

    @classmethod
    def from_features(cls, feats: Iterable[int]) -> "InventoryState":
        f = [int(v) for v in feats]
        if len(f) != N_FEATURES:
            raise InvalidInput(f"expected {N_FEATURES} features, got {len(f)}")
        return cls(f[0], tuple(f[1:6]), f[6], f[7])


@dataclass(frozen=True)
class ModelConfig:
    smax: int = 30
    kmax: int = 20
    rates: tuple[float, ...] = DEFAULT_RATES
    cost_shortage: float = 5.0
    cost_outdate: float = 1.0
    initial: InventoryState = field(
        default_factory=lambda: InventoryState(0, (2, 2, 2, 2, 2), 0, 0)
    )
    lowstock_threshold: int = 5

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if self.smax < 1:
            raise ConfigError("smax must be >= 1")
        if self.kmax < 1:
            raise ConfigError("kmax must be >= 1")
        if len(self.rates) != 7:
            raise ConfigError(f"lambda needs 7 daily rates, got {len(self.rates)}")
        if not all(r > 0 and math.isfinite(r) for r in self.rates):
            raise ConfigError("all lambda rates must be positive")
        if self.cost_shortage < 0 or self.cost_outdate < 0:
            raise ConfigError("costs must be nonnegative")
        try:
            validate_state(self.initial, self)
        except InvalidInput as exc:
            raise ConfigError(f"initial state invalid: {exc}") from None

    @property
    def radix(self) -> int:
        return self.smax + 1

    @property
    def n_orders(self) -> int:
        return self.smax + 1

    @property
    def space_size(self) -> int:
        return 7 * self.radix**6 * 2

    @cached_property
    def demand_table(self) -> np.ndarray:
        """Row ``d`` holds the truncated, renormalized Poisson pmf of day ``d``."""
        table = np.empty((7, self.kmax + 1))
        for day, lam in enumerate(self.rates):
            w = np.empty(self.kmax + 1)
            w[0] = 1.0
            for k in range(1, self.kmax + 1):
                w[k] = w[k - 1] * lam / k
            table[day] = w / w.sum()
        table.setflags(write=False)
        return table

    @cached_property
    def cost_table(self) -> tuple[np.ndarray, np.ndarray]:
        """Expected shortage per (day, tinv) and expected outdating per (day, x1)."""
        p = self.demand_table
        k = np.arange(self.kmax + 1)
        levels = np.arange(self.smax + 1)
        short = (p[:, None, :] * np.maximum(0, k[None, None, :] - levels[None, :, None])).sum(-1)
        outd = (p[:, None, :] * np.maximum(0, levels[None, :, None] - k[None, None, :])).sum(-1)
        short.setflags(write=False)
        outd.setflags(write=False)
        return short, outd

    def to_dict(self) -> dict:
        s = self.initial
        return {
            "smax": self.smax,
            "kmax": self.kmax,
            "lambda": list(self.rates),
            "cost_shortage": self.cost_shortage,
            "cost_outdate": self.cost_outdate,
            "initial": {"d": s.d, "x": list(s.x), "pend": s.pend, "ph": s.ph},
            "lowstock_threshold": self.lowstock_threshold,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {"smax", "kmax", "lambda", "cost_shortage", "cost_outdate", "initial", "lowstock_threshold"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key in ("smax", "kmax", "lowstock_threshold"):
            if key in data:
                kwargs[key] = int(data[key])
        for key in ("cost_shortage", "cost_outdate"):
            if key in data:
                kwargs[key] = float(data[key])
        if "lambda" in data:
            kwargs["rates"] = tuple(data["lambda"])
        if "initial" in data:
            init = data["initial"]
            try:
                kwargs["initial"] = InventoryState(
                    int(init["d"]), tuple(init["x"]), int(init.get("pend", 0)), int(init.get("ph", 0))
                )
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"bad initial state: {exc}") from None
        return cls(**kwargs)


def load_config(path: str | Path) -> ModelConfig:
    """Read a model config from a ``.toml`` or JSON file."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ImportError:  # Python 3.10
            import tomli as tomllib

        try:
            data = tomllib.loads(raw.decode())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    else:
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return ModelConfig.from_dict(data)


def miniature_config(**overrides) -> ModelConfig:
    """Small configuration (capacity 2, demand up to 2) for exhaustive checks."""
    base = dict(smax=2, kmax=2, initial=InventoryState(0, (0, 0, 0, 1, 1), 0, 0), lowstock_threshold=1)
    base.update(overrides)
    return ModelConfig(**base)


def validate_state(state: InventoryState, config: ModelConfig) -> None:
    smax = config.smax
    if not 0 <= state.d <= 6:
        raise InvalidInput(f"day {state.d} outside 0..6")
    if state.ph not in (0, 1):
        raise InvalidInput(f"phase {state.ph} not in {{0, 1}}")
    if any(v < 0 or v > smax for v in state.x):
        raise InvalidInput(f"age class out of range 0..{smax}: {state.x}")
    if not 0 <= state.pend <= smax:
        raise InvalidInput(f"pend {state.pend} outside 0..{smax}")
    if state.tinv > smax:
        raise InvalidInput(f"total inventory {state.tinv} exceeds capacity {smax}")
    if state.ph == 0 and state.pend != 0:
        raise InvalidInput("pend must be 0 in the decision phase")
    if state.ph == 1 and state.pend + state.tinv > smax:
        raise InvalidInput("pend + tinv exceeds capacity")


def demand_pmf(day: int, config: ModelConfig) -> np.ndarray:
    if not 0 <= day <= 6:
        raise InvalidInput(f"day {day} outside 0..6")
    return config.demand_table[day]


def enabled_actions(state: InventoryState, config: ModelConfig) -> list[Action]:
    if state.ph == 1:
        return [DM]
    if state.d >= 5:
        return [Order(0)]
    return [Order(k) for k in range(config.smax - state.tinv + 1)]


def apply_order(state: InventoryState, k: int, config: ModelConfig) -> InventoryState:
    if state.ph != 0:
        raise InvalidInput("orders are only placed in the decision phase")
    if Order(k) not in enabled_actions(state, config):
        raise InvalidInput(f"Order({k}) not enabled in {state}")
    return replace(state, pend=k, ph=1)


def _after_demand(state: InventoryState, b: int) -> InventoryState:
    leftover = []
    before = 0
    for xr in state.x:
        leftover.append(max(0, xr - max(0, b - before)))
        before += xr
    return InventoryState((state.d + 1) % 7, (*leftover[1:], state.pend), 0, 0)


def demand_transition(state: InventoryState, config: ModelConfig) -> list[tuple[float, InventoryState]]:
    """Successor distribution of the demand move.

    Demand values that lead to the same successor are merged; entries are
    ordered by the smallest demand value producing them.
    """
    if state.ph != 1:
        raise InvalidInput("demand is only realized in phase 1")
    p = demand_pmf(state.d, config)
    merged: dict[InventoryState, float] = {}
    for b in range(config.kmax + 1):
        nxt = _after_demand(state, b)
        merged[nxt] = merged.get(nxt, 0.0) + float(p[b])
    return [(prob, s) for s, prob in merged.items()]


def successors(state: InventoryState, action: Action, config: ModelConfig) -> list[tuple[float, InventoryState]]:
    if isinstance(action, DemandMove):
        return demand_transition(state, config)
    return [(1.0, apply_order(state, action.k, config))]


def state_cost(state: InventoryState, config: ModelConfig) -> float:
    if state.ph == 0:
        return 0.0
    p = demand_pmf(state.d, config)
    tinv, x1 = state.tinv, state.x[0]
    shortage = sum(p[k] * max(0, k - tinv) for k in range(config.kmax + 1))
    outdating = sum(p[k] * max(0, x1 - k) for k in range(config.kmax + 1))
    return float(config.cost_shortage * shortage + config.cost_outdate * outdating)


def base_labels(state: InventoryState, config: ModelConfig) -> set[str]:
    tinv = state.tinv
    labels = set()
    if tinv == 0:
        labels.add("empty")
    if tinv == config.smax:
        labels.add("full")
    if state.d >= 5:
        labels.add("weekend")
    if state.d == 0:
        labels.add("monday")
    if state.d == 4:
        labels.add("friday")
    if tinv >= config.lowstock_threshold:
        labels.add("tinv_ge_T")
    if state.ph == 0:
        labels.add("decision")
    return labels


BASE_LABELS = ("empty", "full", "weekend", "monday", "friday", "tinv_ge_T", "decision")


# Mixed-radix code, most significant first: d, x1..x5, pend (radix smax+1), ph (radix 2).
def state_index(state: InventoryState, config: ModelConfig) -> int:
    validate_state(state, config)
    r = config.radix
    code = state.d
    for v in (*state.x, state.pend):
        code = code * r + v
    return code * 2 + state.ph


def decode_index(code: int, config: ModelConfig) -> InventoryState:
    if not 0 <= code < config.space_size:
        raise InvalidInput(f"state code {code} outside 0..{config.space_size - 1}")
    r = config.radix
    ph = code % 2
    code //= 2
    digits = []
    for _ in range(6):
        digits.append(code % r)
        code //= r
    pend, x5, x4, x3, x2, x1 = digits
    state = InventoryState(code, (x1, x2, x3, x4, x5), pend, ph)
    validate_state(state, config)
    return state


def steps_for_horizon(horizon: int, unit: str = "steps") -> int:
    """Convert a horizon to transitions; one day is two steps."""
    if unit == "steps":
        return int(horizon)
    if unit == "days":
        return 2 * int(horizon)
    raise InvalidInput(f"unknown horizon unit {unit!r}; use 'steps' or 'days'")


# -- vectorized forms -------------------------------------------------------


def batch_encode(feats: np.ndarray, config: ModelConfig) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.int64)
    r = config.radix
    code = feats[:, 0].copy()
    for col in range(1, 7):
        code = code * r + feats[:, col]
    return code * 2 + feats[:, 7]


def batch_decode(codes: np.ndarray, config: ModelConfig) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    r = config.radix
    feats = np.empty((codes.size, N_FEATURES), dtype=np.int64)
    feats[:, 7] = codes % 2
    rest = codes // 2
    for col in range(6, 0, -1):
        feats[:, col] = rest % r
        rest = rest // r
    feats[:, 0] = rest
    return feats


def batch_enabled_orders(feats: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Boolean mask (n, smax+1) of enabled order levels at decision states."""
    tinv = feats[:, 1:6].sum(axis=1)
    room = np.where(feats[:, 0] >= 5, 0, config.smax - tinv)
    return np.arange(config.n_orders)[None, :] <= room[:, None]


def batch_demand_successors(feats: np.ndarray, config: ModelConfig):
    """Merged demand successors of phase-1 states.

    Returns ``(counts, codes, probs)``: ``counts[i]`` entries belong to state
    ``i``, laid out consecutively in ``codes``/``probs``. The successor is
    componentwise nonincreasing in the demand value, so equal successors form
    contiguous runs of demand values and merging is a run-length reduction.
    """
    n = feats.shape[0]
    kk = config.kmax + 1
    x = feats[:, 1:6]
    before = np.concatenate([np.zeros((n, 1), dtype=np.int64), np.cumsum(x, axis=1)[:, :-1]], axis=1)
    b = np.arange(kk, dtype=np.int64)
    need = np.maximum(0, b[None, :, None] - before[:, None, :])
    left = np.maximum(0, x[:, None, :] - need)  # (n, kk, 5)
    r = config.radix
    d_next = (feats[:, 0] + 1) % 7
    code = np.broadcast_to(d_next[:, None], (n, kk)).astype(np.int64)
    for col in range(1, 5):
        code = code * r + left[:, :, col]
    code = code * r + feats[:, 6][:, None]
    code = code * r  # pend' = 0
    code = code * 2  # ph' = 0
    probs = config.demand_table[feats[:, 0]]
    starts = np.ones((n, kk), dtype=bool)
    starts[:, 1:] = code[:, 1:] != code[:, :-1]
    flat_starts = np.flatnonzero(starts.ravel())
    merged_probs = np.add.reduceat(probs.ravel(), flat_starts)
    merged_codes = code.ravel()[flat_starts]
    counts = starts.sum(axis=1)
    return counts, merged_codes, merged_probs


def batch_cost(feats: np.ndarray, config: ModelConfig) -> np.ndarray:
    short, outd = config.cost_table
    d = feats[:, 0]
    tinv = feats[:, 1:6].sum(axis=1)
    cost = config.cost_shortage * short[d, tinv] + config.cost_outdate * outd[d, feats[:, 1]]
    return np.where(feats[:, 7] == 1, cost, 0.0)


def batch_base_labels(feats: np.ndarray, config: ModelConfig) -> dict[str, np.ndarray]:
    tinv = feats[:, 1:6].sum(axis=1)
    d = feats[:, 0]
    return {
        "empty": tinv == 0,
        "full": tinv == config.smax,
        "weekend": d >= 5,
        "monday": d == 0,
        "friday": d == 4,
        "tinv_ge_T": tinv >= config.lowstock_threshold,
        "decision": feats[:, 7] == 0,
    }
