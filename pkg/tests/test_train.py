import math

import numpy as np
import pytest

from plateletmc.errors import ConfigError, InvalidInput
from plateletmc.explore import explore
from plateletmc.induce import build_induced
from plateletmc.mdp import (
    InventoryState,
    ModelConfig,
    base_labels,
    batch_enabled_orders,
    enabled_actions,
    miniature_config,
    validate_state,
)
from plateletmc.policy import constant_policy, random_policy
from plateletmc.solve import TabularPolicy, distill_dataset, optimal_cost_policy
from plateletmc.train import (
    TrainConfig,
    agreement,
    distill_loss,
    distill_loss_and_grads,
    distill_policy,
    evaluate_policy,
    fit_distilled,
    order_mask,
    policy_gradient_train,
    simulate_episode,
    simulate_many,
    write_log,
)

MINI = miniature_config()
SMALL = ModelConfig(smax=6, kmax=4, rates=(2, 2, 2, 2, 2, 1.5, 1.5), lowstock_threshold=2,
                    initial=InventoryState(0, (0, 0, 0, 1, 1), 0, 0))
FAST = TrainConfig(hidden=(32, 32), learning_rate=3e-3, epochs=300, batch_size=32)


def truncated_mean(lam, kmax):
    w = [lam**b / math.factorial(b) for b in range(kmax + 1)]
    return sum(b * x for b, x in enumerate(w)) / sum(w)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    pol = random_policy((8, 16, 16, 31), 4)
    for w in pol.weights:  # larger weights give a less flat loss surface
        w *= 3.0
    x = rng.integers(0, 6, (24, 8)).astype(np.float64)
    x[:, 7] = 0
    mask = order_mask(x, 31)
    y = np.array([rng.choice(np.flatnonzero(m)) for m in mask])
    _, gw, gb = distill_loss_and_grads(pol, x, y, mask)
    params = [*pol.weights, *pol.biases]
    grads = [*gw, *gb]
    sizes = np.array([p.size for p in params])
    picks = rng.choice(sizes.sum(), 100, replace=False)
    h = 1e-5
    for flat in picks:
        j = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        idx = np.unravel_index(flat - (np.cumsum(sizes)[j] - sizes[j]), params[j].shape)
        old = params[j][idx]
        params[j][idx] = old + h
        up = distill_loss(pol, x, y, mask)
        params[j][idx] = old - h
        down = distill_loss(pol, x, y, mask)
        params[j][idx] = old
        num = (up - down) / (2 * h)
        ana = grads[j][idx]
        scale = max(abs(num), abs(ana))
        if scale < 1e-8:
            continue
        assert abs(num - ana) / scale <= 1e-4, (j, idx, num, ana)


def test_constant_tabular_policy_distills_exactly():
    mdp = explore(SMALL)
    dec = mdp.decision_states()
    feats = mdp.features_of(dec)
    tab = TabularPolicy(mdp.state_codes[dec], np.zeros(dec.size, dtype=np.int64), SMALL)
    obs, acts = distill_dataset(mdp, tab)
    res = fit_distilled(obs, acts, FAST, n_orders=SMALL.n_orders)
    assert res.agreement == 1.0 and res.reached_target
    assert agreement(res.policy, feats.astype(float), np.zeros(dec.size, dtype=np.int64)) == 1.0


def test_miniature_distillation_reaches_target():
    mdp = explore(MINI)
    tab = optimal_cost_policy(mdp, tol=1e-10).policy
    obs, acts = distill_dataset(mdp, tab)
    res = fit_distilled(obs, acts, FAST, n_orders=MINI.n_orders)
    assert res.agreement >= 0.995
    # masked argmax never picks a disabled level
    mask = batch_enabled_orders(obs.astype(np.int64), MINI)
    chosen = res.policy.select_orders(obs, mask)
    assert np.all(mask[np.arange(len(chosen)), chosen])


def test_agreement_is_order_invariant():
    rng = np.random.default_rng(1)
    pol = random_policy((8, 8, 31), 0)
    x = rng.integers(0, 6, (50, 8)).astype(float)
    x[:, 7] = 0
    y = rng.integers(0, 3, 50)
    perm = rng.permutation(50)
    assert agreement(pol, x, y) == agreement(pol, x[perm], y[perm])


def test_fit_rejects_bad_datasets():
    with pytest.raises(InvalidInput):
        fit_distilled(np.zeros((0, 8)), np.zeros(0, dtype=int), FAST, n_orders=3)
    obs = np.zeros((1, 8))
    obs[0, 0] = 5  # weekend: only Order(0)
    with pytest.raises(InvalidInput):
        fit_distilled(obs, np.array([2]), FAST, n_orders=3)


def test_unreachable_target_warns_and_returns_best():
    obs = np.zeros((2, 8))
    acts = np.array([0, 2])  # identical inputs, different targets
    res = fit_distilled(obs, acts, TrainConfig(hidden=(4,), epochs=5), n_orders=3)
    assert not res.reached_target
    assert res.agreement == 0.5


def test_distill_policy_dagger_covers_own_chain():
    mdp = explore(SMALL)
    tab = optimal_cost_policy(mdp, tol=1e-9).policy
    res = distill_policy(SMALL, tab, FAST)
    d = build_induced(SMALL, res.policy)
    obs, acts = distill_dataset(d, tab)
    assert agreement(res.policy, obs, acts) >= 0.99
    assert res.dataset_size >= obs.shape[0] * 0.5


def test_empty_inventory_order_zero_return():
    cfg = ModelConfig(initial=InventoryState(0, (0, 0, 0, 0, 0), 0, 0))
    ep = simulate_episode(cfg, constant_policy(0), None, 5, 200, discount=1.0)
    days = [t // 2 % 7 for t in range(200) if t % 2 == 1]
    want = -cfg.cost_shortage * sum(truncated_mean(cfg.rates[d], cfg.kmax) for d in days)
    assert abs(ep.undiscounted_return - want) <= 1e-9 * abs(want)
    assert ep.discounted_return == ep.undiscounted_return
    assert all(r < 0 for r in ep.rewards[1::2]) and all(r == 0 for r in ep.rewards[0::2])
    ev = evaluate_policy(cfg, constant_policy(0), episodes=3, seed=1)
    assert ev.stderr == 0.0 and abs(ev.mean - want) <= 1e-9 * abs(want)


def test_discount_zero_gives_first_reward():
    cfg = miniature_config(initial=InventoryState(0, (0, 0, 0, 0, 0), 2, 1))
    ep = simulate_episode(cfg, constant_policy(1, 3), None, 0, 10, discount=0.0)
    assert ep.discounted_return == ep.rewards[0] < 0


def test_episodes_are_deterministic_and_valid():
    pol = random_policy((8, 8, SMALL.n_orders), 2)
    a = simulate_episode(SMALL, pol, None, [3, 0], 60)
    b = simulate_episode(SMALL, pol, None, [3, 0], 60)
    assert a.states == b.states and a.rewards == b.rewards
    assert len(a.states) == 61
    for s, act in zip(a.states, a.actions):
        validate_state(s, SMALL)
        assert act in enabled_actions(s, SMALL)
    with pytest.raises(InvalidInput):
        simulate_episode(SMALL, pol, None, 0, 0)


def test_batch_rollout_matches_single_episodes():
    pol = random_policy((8, 8, SMALL.n_orders), 5)
    roll = simulate_many(SMALL, pol, None, 12, 9, 80)
    hit = roll.hit("tinv_ge_T", SMALL)
    for i in range(12):
        ep = simulate_episode(SMALL, pol, None, [9, i], 80)
        assert np.array_equal(roll.feats[:, i], np.array([s.features() for s in ep.states]))
        assert np.allclose(roll.rewards[:, i], ep.rewards, rtol=0, atol=1e-12)
        assert hit[i] == any("tinv_ge_T" in base_labels(s, SMALL) for s in ep.states)


def test_order_zero_is_far_below_cost_policy():
    mdp = explore(SMALL)
    tab = optimal_cost_policy(mdp, tol=1e-9).policy
    good = evaluate_policy(SMALL, tab, episodes=200, seed=3)
    bad = evaluate_policy(SMALL, constant_policy(0, SMALL.n_orders), episodes=200, seed=3)
    assert bad.mean < good.mean - 10 * (good.stderr + bad.stderr)


def test_policy_gradient_improves_and_is_deterministic(tmp_path):
    tc = TrainConfig(hidden=(32, 32), mode="policy-gradient", episodes=1000, learning_rate=1e-2,
                     max_episode_length=100, batch_size=16, eval_every=250, eval_episodes=64, seed=1)
    res = policy_gradient_train(MINI, tc)
    start = res.log[0]["return"]
    assert res.best_return > start
    again = policy_gradient_train(MINI, tc)
    assert [r["return"] for r in again.log] == [r["return"] for r in res.log]
    write_log(res.log, tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines()[0].startswith("episode")
    with pytest.raises(ConfigError):
        policy_gradient_train(MINI, TrainConfig())


def test_train_config_validation():
    assert TrainConfig().hidden == (256, 256, 256)
    for bad in (dict(mode="ppo"), dict(learning_rate=0), dict(batch_size=-1), dict(hidden=(0,)),
                dict(discount=1.5), dict(episodes=0), dict(max_episode_length=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_policy_gradient_step_is_zero_without_choice():
    from plateletmc.train import _pg_loss_and_grads

    rng = np.random.default_rng(4)
    obs = rng.integers(0, 5, (40, 8)).astype(float)
    obs[:, 0] = rng.integers(5, 7, 40)  # weekend: Order(0) is the only enabled action
    obs[:, 6:] = 0
    pol = random_policy((8, 16, 31), 2)
    _, gw, gb = _pg_loss_and_grads(pol, obs, np.zeros(40, dtype=np.int64), rng.normal(size=40), 0.01, 31)
    assert all(np.all(g == 0) for g in [*gw, *gb])
