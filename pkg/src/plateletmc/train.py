"""Producing neural policies: distillation of a tabular policy, episodic policy gradient,
and Monte-Carlo evaluation.

Randomness uses numpy's PCG64 generator. Episode ``i`` of a run seeded with
``seed`` draws from ``default_rng([seed, i])``; demand is sampled by
inverse CDF, ``b = searchsorted(cdf, u, side="right")`` with ``u`` uniform
on [0, 1).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InvalidInput, TrainingDiverged
from .mdp import (
    InventoryState,
    ModelConfig,
    N_FEATURES,
    batch_cost,
    batch_encode,
    enabled_actions,
    state_cost,
)
from .policy import MlpPolicy, PolicyTransform, random_policy, select_action

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple[int, ...] = (256, 256, 256)
    learning_rate: float = 3e-4
    discount: float = 0.99
    batch_size: int = 64
    episodes: int = 25_000
    max_episode_length: int = 200
    seed: int = 0
    mode: str = "distill"
    epochs: int = 400
    target_agreement: float = 0.995
    dagger_rounds: int = 8
    entropy_coef: float = 0.01
    baseline_decay: float = 0.95
    eval_every: int = 500
    eval_episodes: int = 64

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.mode not in ("distill", "policy-gradient"):
            raise ConfigError(f"mode must be 'distill' or 'policy-gradient', not {self.mode!r}")
        for name in ("learning_rate", "discount", "batch_size", "episodes", "max_episode_length", "epochs"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if any(h <= 0 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")
        if not 0 < self.discount <= 1:
            raise ConfigError("discount must lie in (0, 1]")
        if not 0 < self.target_agreement <= 1:
            raise ConfigError("target_agreement must lie in (0, 1]")


def order_mask(obs: np.ndarray, n_orders: int) -> np.ndarray:
    """Enabled order levels for decision observations, from day and stock alone."""
    obs = np.asarray(obs)
    tinv = obs[:, 1:6].sum(axis=1)
    room = np.where(obs[:, 0] >= 5, 0, n_orders - 1 - tinv)
    return np.arange(n_orders)[None, :] <= room[:, None]


# -- network gradients ---------------------------------------------------------


def _forward_cache(policy: MlpPolicy, x: np.ndarray):
    acts = [x]
    h = x
    last = len(policy.weights) - 1
    for i, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def _backward(policy: MlpPolicy, acts, dz: np.ndarray):
    grads_w = [None] * len(policy.weights)
    grads_b = [None] * len(policy.weights)
    g = dz
    for i in range(len(policy.weights) - 1, -1, -1):
        grads_w[i] = g.T @ acts[i]
        grads_b[i] = g.sum(axis=0)
        if i:
            g = (g @ policy.weights[i]) * (acts[i] > 0)
    return grads_w, grads_b


def masked_log_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, scores, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))


def distill_loss(policy: MlpPolicy, x: np.ndarray, y: np.ndarray, mask: np.ndarray) -> float:
    logp = masked_log_softmax(policy.forward(x), mask)
    return float(-logp[np.arange(y.size), y].mean())


def distill_loss_and_grads(policy: MlpPolicy, x: np.ndarray, y: np.ndarray, mask: np.ndarray):
    """Mean cross-entropy of the masked score softmax, with parameter gradients."""
    acts = _forward_cache(policy, x)
    logp = masked_log_softmax(acts[-1], mask)
    n = y.size
    loss = float(-logp[np.arange(n), y].mean())
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    gw, gb = _backward(policy, acts, dz)
    return loss, gw, gb


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def agreement(policy: MlpPolicy, obs: np.ndarray, actions: np.ndarray) -> float:
    """Fraction of observations where the masked argmax equals the dataset action."""
    mask = order_mask(obs, policy.n_outputs)
    return float(np.mean(policy.select_orders(obs, mask) == actions))


# -- distillation ----------------------------------------------------------------


@dataclass
class FitResult:
    policy: MlpPolicy
    agreement: float
    epochs: int
    reached_target: bool
    log: list[dict] = field(default_factory=list)


def fit_distilled(
    obs: np.ndarray,
    actions: np.ndarray,
    train_config: TrainConfig,
    init: Optional[MlpPolicy] = None,
    n_orders: Optional[int] = None,
) -> FitResult:
    """Fit an MLP to (observation, order level) pairs by mini-batch Adam.

    Stops once the masked-argmax agreement reaches ``target_agreement`` or
    after ``epochs`` epochs; the best policy seen is returned either way,
    with ``reached_target`` False in the latter case.
    """
    obs = np.asarray(obs, dtype=np.float64).reshape(-1, N_FEATURES)
    actions = np.asarray(actions, dtype=np.int64)
    if obs.shape[0] == 0:
        raise InvalidInput("dataset is empty")
    if obs.shape[0] != actions.size:
        raise InvalidInput("observations and actions differ in length")
    tc = train_config
    if init is None:
        if n_orders is None:
            # without a config, size the output layer so every labelled order fits
            n_orders = int(obs[:, 1:6].sum(axis=1).max()) + int(actions.max()) + 1
        init = random_policy((N_FEATURES, *tc.hidden, n_orders), tc.seed)
    policy = init.copy()
    mask = order_mask(obs, policy.n_outputs)
    if np.any(~mask[np.arange(actions.size), actions]):
        raise InvalidInput("dataset contains disabled actions")
    opt = Adam([*policy.weights, *policy.biases], tc.learning_rate)
    rng = np.random.default_rng([tc.seed, 1])
    n = actions.size
    best = (agreement(policy, obs, actions), policy.copy())
    rows = []
    epoch = 0
    if best[0] >= tc.target_agreement:
        return FitResult(best[1], best[0], 0, True, rows)
    for epoch in range(1, tc.epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, tc.batch_size):
            idx = perm[lo : lo + tc.batch_size]
            loss, gw, gb = distill_loss_and_grads(policy, obs[idx], actions[idx], mask[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            opt.step([*gw, *gb])
            total += loss * idx.size
        agr = agreement(policy, obs, actions)
        rows.append({"epoch": epoch, "loss": total / n, "agreement": agr})
        log.debug("epoch %d loss %.5f agreement %.4f", epoch, total / n, agr)
        if agr > best[0]:
            best = (agr, policy.copy())
        if agr >= tc.target_agreement:
            break
    reached = best[0] >= tc.target_agreement
    if not reached:
        log.warning("agreement %.4f below target %.4f after %d epochs", best[0], tc.target_agreement, epoch)
    return FitResult(best[1], best[0], epoch, reached, rows)


@dataclass
class DistillResult:
    policy: MlpPolicy
    fit: FitResult
    rounds: int
    dataset_size: int
    disagreements: int
    log: list[dict] = field(default_factory=list)


def distill_policy(config: ModelConfig, tabular, train_config: TrainConfig) -> DistillResult:
    """Distill ``tabular`` on the states a policy actually visits.

    Starts from the decision states of the tabular policy's induced DTMC,
    then repeatedly adds the decision states reached by the current network
    (labelled by the tabular policy) and refits, until the network's own
    induced DTMC contains no disagreement or the round budget is spent.
    """
    from .induce import build_induced
    from .solve import distill_dataset

    dtmc = build_induced(config, tabular)
    obs, actions = distill_dataset(dtmc, tabular)
    seen = set(batch_encode(obs.astype(np.int64), config).tolist())
    policy = None
    rows: list[dict] = []
    fit = None
    disagreements = -1
    for rnd in range(1, train_config.dagger_rounds + 1):
        fit = fit_distilled(obs, actions, train_config, init=policy, n_orders=config.n_orders)
        policy = fit.policy
        net_dtmc = build_induced(config, policy)
        net_obs, net_actions = distill_dataset(net_dtmc, tabular)
        chosen = policy.select_orders(net_obs, order_mask(net_obs, config.n_orders))
        disagreements = int(np.sum(chosen != net_actions))
        codes = batch_encode(net_obs.astype(np.int64), config)
        fresh = np.array([c not in seen for c in codes.tolist()], dtype=bool)
        for entry in fit.log:
            rows.append({"round": rnd, **entry})
        log.info("round %d: agreement %.4f, net DTMC %d states, %d disagreements, %d new states",
                 rnd, fit.agreement, net_dtmc.n_states, disagreements, int(fresh.sum()))
        if disagreements == 0 or not fresh.any():
            break
        seen.update(codes[fresh].tolist())
        obs = np.concatenate([obs, net_obs[fresh]])
        actions = np.concatenate([actions, net_actions[fresh]])
    return DistillResult(policy, fit, rnd, actions.size, disagreements, rows)


# -- simulation -------------------------------------------------------------------


@dataclass
class Episode:
    states: list[InventoryState]
    actions: list
    rewards: list[float]
    discounted_return: float
    undiscounted_return: float


def _demand_step(f: np.ndarray, u: np.ndarray, cdfs: np.ndarray) -> np.ndarray:
    """Demand phase for a batch of ph=1 states given one uniform draw each."""
    b = np.minimum((cdfs[f[:, 0]] <= u[:, None]).sum(axis=1), cdfs.shape[1] - 1)
    # FIFO: class r loses whatever demand is left after the older classes
    before = np.concatenate([np.zeros((f.shape[0], 1), np.int64), np.cumsum(f[:, 1:6], axis=1)[:, :-1]], axis=1)
    left = np.maximum(0, f[:, 1:6] - np.maximum(0, b[:, None] - before))
    out = np.zeros_like(f)
    out[:, 0] = (f[:, 0] + 1) % 7
    out[:, 1:5] = left[:, 1:]
    out[:, 5] = f[:, 6]
    return out


def _sample_demand(cdf: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cdf, u, side="right")), cdf.size - 1)


def simulate_episode(
    config: ModelConfig,
    policy,
    transform: Optional[PolicyTransform],
    seed,
    max_steps: int,
    discount: float = 0.99,
) -> Episode:
    """Roll out ``max_steps`` transitions from the initial state.

    ``states`` holds all ``max_steps + 1`` visited states; the reward of step
    ``t`` is minus the cost of ``states[t]``.
    """
    from .mdp import successors

    if max_steps < 1:
        raise InvalidInput("max_steps must be >= 1")
    rng = np.random.default_rng(seed)
    cdfs = np.cumsum(config.demand_table, axis=1)
    s = config.initial
    states, acts, rewards = [s], [], []
    for _ in range(max_steps):
        rewards.append(-state_cost(s, config))
        a = select_action(policy, transform, s, enabled_actions(s, config))
        acts.append(a)
        if s.ph == 1:
            from .mdp import _after_demand

            s = _after_demand(s, _sample_demand(cdfs[s.d], rng.random()))
        else:
            s = successors(s, a, config)[0][1]
        states.append(s)
    disc = float(sum(r * discount**t for t, r in enumerate(rewards)))
    return Episode(states, acts, rewards, disc, float(sum(rewards)))


@dataclass
class BatchRollout:
    """Vectorized rollouts: ``feats[t, e]`` is the state of episode ``e`` at step ``t``."""

    feats: np.ndarray
    rewards: np.ndarray

    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=0)

    def hit(self, label: str, config: ModelConfig) -> np.ndarray:
        """Per episode: whether a state with ``label`` occurs at any step 0..T."""
        from .mdp import batch_base_labels

        t, e, _ = self.feats.shape
        flags = batch_base_labels(self.feats.reshape(-1, N_FEATURES), config)[label].reshape(t, e)
        return flags.any(axis=0)


def simulate_many(
    config: ModelConfig,
    policy,
    transform: Optional[PolicyTransform],
    episodes: int,
    seed: int,
    max_steps: int,
) -> BatchRollout:
    """Episodes ``i = 0..episodes-1`` seeded by ``(seed, i)``, stepped in lockstep.

    Trajectories equal those of :func:`simulate_episode` with seed ``[seed, i]``.
    """
    if episodes < 1:
        raise InvalidInput("episodes must be >= 1")
    rngs = [np.random.default_rng([seed, i]) for i in range(episodes)]
    cdfs = np.cumsum(config.demand_table, axis=1)
    cur = np.tile(np.array(config.initial.features(), dtype=np.int64), (episodes, 1))
    traj = np.empty((max_steps + 1, episodes, N_FEATURES), dtype=np.int64)
    rewards = np.empty((max_steps, episodes))
    traj[0] = cur
    for t in range(max_steps):
        rewards[t] = -batch_cost(cur, config)
        nxt = cur.copy()
        dec = cur[:, 7] == 0
        if dec.any():
            f = cur[dec]
            k = policy.select_orders(f.astype(np.float64), order_mask(f, config.n_orders), transform)
            nxt[dec, 6] = k
            nxt[dec, 7] = 1
        dem = np.flatnonzero(~dec)
        if dem.size:
            u = np.array([rngs[i].random() for i in dem.tolist()])
            nxt[dem] = _demand_step(cur[dem], u, cdfs)
        cur = nxt
        traj[t + 1] = cur
    return BatchRollout(traj, rewards)


@dataclass
class Evaluation:
    mean: float
    stderr: float
    episodes: int


def evaluate_policy(
    config: ModelConfig,
    policy,
    transform: Optional[PolicyTransform] = None,
    episodes: int = 1000,
    seed: int = 0,
    max_steps: int = 200,
) -> Evaluation:
    """Mean and standard error of the undiscounted ``max_steps`` return."""
    if episodes < 1:
        raise InvalidInput("episodes must be >= 1")
    ret = simulate_many(config, policy, transform, episodes, seed, max_steps).returns()
    stderr = float(ret.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
    return Evaluation(float(ret.mean()), stderr, episodes)


# -- policy gradient -------------------------------------------------------------


@dataclass
class PolicyGradientResult:
    policy: MlpPolicy
    best_return: float
    log: list[dict] = field(default_factory=list)


def policy_gradient_train(
    config: ModelConfig,
    train_config: TrainConfig,
    init: Optional[MlpPolicy] = None,
) -> PolicyGradientResult:
    """Episodic REINFORCE over the masked softmax of the network scores.

    Advantages are discounted returns-to-go minus a per-time-step moving
    average baseline; an entropy bonus keeps exploration alive. Every
    ``eval_every`` episodes the greedy policy is evaluated and the best one
    is kept.
    """
    tc = train_config
    if tc.mode != "policy-gradient":
        raise ConfigError("policy_gradient_train needs mode='policy-gradient'")
    policy = (init or random_policy((N_FEATURES, *tc.hidden, config.n_orders), tc.seed)).copy()
    opt = Adam([*policy.weights, *policy.biases], tc.learning_rate)
    horizon = tc.max_episode_length
    baseline = np.zeros(horizon)
    baseline_ready = False
    cdfs = np.cumsum(config.demand_table, axis=1)
    rows: list[dict] = []

    def greedy_eval() -> float:
        return evaluate_policy(config, policy, None, tc.eval_episodes, tc.seed + 7919, horizon).mean

    best_ret = greedy_eval()
    best = policy.copy()
    rows.append({"episode": 0, "loss": float("nan"), "return": best_ret})
    done = 0
    batch_id = 0
    while done < tc.episodes:
        n_ep = min(tc.batch_size, tc.episodes - done)
        rngs = [np.random.default_rng([tc.seed, 2, done + i]) for i in range(n_ep)]
        cur = np.tile(np.array(config.initial.features(), dtype=np.int64), (n_ep, 1))
        rewards = np.zeros((horizon, n_ep))
        dec_obs, dec_act, dec_t, dec_ep = [], [], [], []
        for t in range(horizon):
            rewards[t] = -batch_cost(cur, config)
            dec = np.flatnonzero(cur[:, 7] == 0)
            nxt = cur.copy()
            if dec.size:
                f = cur[dec]
                mask = order_mask(f, config.n_orders)
                logp = masked_log_softmax(policy.forward(f.astype(np.float64)), mask)
                prob = np.exp(logp)
                u = np.array([rngs[i].random() for i in dec.tolist()])
                k = np.minimum((np.cumsum(prob, axis=1) <= u[:, None]).sum(axis=1), config.n_orders - 1)
                k = np.where(mask[np.arange(k.size), k], k, np.argmax(np.where(mask, prob, -1), axis=1))
                nxt[dec, 6] = k
                nxt[dec, 7] = 1
                dec_obs.append(f)
                dec_act.append(k)
                dec_t.append(np.full(dec.size, t))
                dec_ep.append(dec)
            dem = np.flatnonzero(cur[:, 7] == 1)
            if dem.size:
                u = np.array([rngs[i].random() for i in dem.tolist()])
                nxt[dem] = _demand_step(cur[dem], u, cdfs)
            cur = nxt
        # discounted returns-to-go
        g = np.zeros_like(rewards)
        acc = np.zeros(n_ep)
        for t in range(horizon - 1, -1, -1):
            acc = rewards[t] + tc.discount * acc
            g[t] = acc
        mean_g = g.mean(axis=1)
        if not baseline_ready:
            baseline = mean_g.copy()
            baseline_ready = True
        adv_all = g - baseline[:, None]
        baseline = tc.baseline_decay * baseline + (1 - tc.baseline_decay) * mean_g
        done += n_ep
        batch_id += 1
        if not dec_obs:
            continue
        obs = np.concatenate(dec_obs).astype(np.float64)
        act = np.concatenate(dec_act)
        ts = np.concatenate(dec_t)
        eps = np.concatenate(dec_ep)
        adv = adv_all[ts, eps]
        scale = adv.std()
        if scale > 0:
            adv = adv / scale
        loss, gw, gb = _pg_loss_and_grads(policy, obs, act, adv, tc.entropy_coef, config.n_orders)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite policy-gradient loss after {done} episodes")
        opt.step([*gw, *gb])
        if any(not np.all(np.isfinite(w)) for w in policy.weights):
            raise TrainingDiverged(f"non-finite weights after {done} episodes")
        entry = {"episode": done, "loss": loss, "return": float(rewards.sum(axis=0).mean())}
        if done % tc.eval_every < n_ep or done >= tc.episodes:
            ret = greedy_eval()
            entry["eval_return"] = ret
            if ret > best_ret:
                best_ret, best = ret, policy.copy()
        rows.append(entry)
    return PolicyGradientResult(best, best_ret, rows)


def _pg_loss_and_grads(policy, obs, act, adv, entropy_coef, n_orders):
    acts = _forward_cache(policy, obs)
    mask = order_mask(obs, n_orders)
    logp = masked_log_softmax(acts[-1], mask)
    p = np.exp(logp)
    safe_logp = np.where(mask, logp, 0.0)
    ent = -(p * safe_logp).sum(axis=1)
    n = act.size
    chosen = logp[np.arange(n), act]
    loss = float(-(adv * chosen).mean() - entropy_coef * ent.mean())
    dz = p * adv[:, None]
    dz[np.arange(n), act] -= adv
    dz += entropy_coef * p * (safe_logp + ent[:, None])
    dz = np.where(mask, dz, 0.0) / n
    gw, gb = _backward(policy, acts, dz)
    return loss, gw, gb


def write_log(rows: Sequence[dict], path: str | Path) -> None:
    keys: list[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
