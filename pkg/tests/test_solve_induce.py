import numpy as np
import pytest

from oracles import codes_of, linear_reach, linear_steps, optimal_bounded, path_until, scalar_chain
from plateletmc.errors import InvalidInput
from plateletmc.explore import explore
from plateletmc.induce import LabelerSet, build_induced, label_actions
from plateletmc.mdp import (
    InventoryState,
    ModelConfig,
    base_labels,
    enabled_actions,
    miniature_config,
    state_cost,
    successors,
)
from plateletmc.pctl import evaluate
from plateletmc.pctl.check import bounded_until, expected_steps, unbounded_reach
from plateletmc.policy import IMP_NONE, PolicyTransform, constant_policy, random_policy
from plateletmc.solve import (
    TabularPolicy,
    distill_dataset,
    max_bounded_reach,
    min_bounded_reach,
    optimal_cost_policy,
)

MINI = miniature_config()
MINI_LOW = miniature_config(initial=InventoryState(0, (0, 0, 0, 0, 1), 0, 0))
SMALL = ModelConfig(smax=6, kmax=4, rates=(2, 2, 2, 2, 2, 1.5, 1.5), lowstock_threshold=2,
                    initial=InventoryState(0, (0, 0, 0, 1, 1), 0, 0))


@pytest.fixture(scope="module", params=[MINI, MINI_LOW], ids=["mini", "mini_low"])
def mini(request):
    return request.param, explore(request.param)


@pytest.mark.parametrize("label", ["empty", "full"])
@pytest.mark.parametrize("sense", ["min", "max"])
def test_bounded_reach_matches_exhaustive_expansion(mini, label, sense):
    cfg, mdp = mini
    solver = min_bounded_reach if sense == "min" else max_bounded_reach
    states = [mdp.state(i) for i in range(mdp.n_states)]
    for bound in range(7):
        ref = optimal_bounded(cfg, label, bound, sense)
        res = solver(mdp, label, bound)
        want = np.array([ref(s, bound) for s in states])
        assert np.max(np.abs(res.values - want)) <= 1e-12
        assert res.value == res.values[mdp.initial]


@pytest.mark.parametrize("label", ["empty", "full"])
def test_greedy_min_policy_realizes_optimum(mini, label):
    cfg, mdp = mini
    for bound in (2, 4, 6):
        res = min_bounded_reach(mdp, label, bound)
        d = build_induced(cfg, res.policy)
        got = evaluate(d, f'P=? [F<={bound} "{label}"]').value
        assert abs(got - res.value) <= 1e-12


def test_min_is_monotone_in_bound(mini):
    cfg, mdp = mini
    vals = [min_bounded_reach(mdp, "empty", b).values for b in range(12)]
    assert all(np.all(a <= b + 1e-15) for a, b in zip(vals, vals[1:]))


def test_induced_values_lie_between_optima(mini):
    cfg, mdp = mini
    for seed in range(4):
        d = build_induced(cfg, random_policy((8, 6, cfg.n_orders), seed))
        for bound in range(0, 9, 2):
            for lab in ("empty", "full"):
                v = evaluate(d, f'P=? [F<={bound} "{lab}"]').value
                lo = min_bounded_reach(mdp, lab, bound).value
                hi = max_bounded_reach(mdp, lab, bound).value
                assert lo - 1e-12 <= v <= hi + 1e-12


def test_dataset_reproduces_greedy_argmin(mini):
    cfg, mdp = mini
    bound = 5
    res = min_bounded_reach(mdp, "empty", bound)
    obs, acts = distill_dataset(mdp, res.policy)
    assert len(acts) == mdp.decision_states().size
    ref = optimal_bounded(cfg, "empty", bound, "min")
    for o, a in zip(obs.astype(int), acts):
        s = InventoryState.from_features(o)
        best = None
        for e in enabled_actions(s, cfg):  # ascending order levels, first minimum wins
            q = sum(p * ref(t, bound - 1) for p, t in successors(s, e, cfg))
            if best is None or q < best[0] - 1e-15:
                best = (q, e.k)
        assert a == best[1]


def test_min_never_exceeds_max(mini):
    cfg, mdp = mini
    lo = min_bounded_reach(mdp, "empty", 10).values
    hi = max_bounded_reach(mdp, "empty", 10).values
    assert np.all(lo <= hi + 1e-15)


def test_greedy_ties_pick_smallest_order(mini):
    cfg, mdp = mini
    # within 0 steps every value is 0 or 1, so every decision state ties on all actions
    res = min_bounded_reach(mdp, "empty", 0)
    assert np.all(res.policy.orders == 0)


def oracle_policies(cfg):
    mdp = explore(cfg)
    yield "k0", constant_policy(0, cfg.n_orders)
    yield "k1", constant_policy(1, cfg.n_orders)
    yield "k2", constant_policy(2, cfg.n_orders)
    for seed in range(3):
        yield f"net{seed}", random_policy((8, 6, cfg.n_orders), seed)
    yield "min_empty", min_bounded_reach(mdp, "empty", 6).policy
    yield "max_full", max_bounded_reach(mdp, "full", 6).policy
    yield "cost", optimal_cost_policy(mdp, tol=1e-10).policy


def chooser(cfg, policy):
    from plateletmc.policy import select_action

    return lambda s: select_action(policy, None, s, enabled_actions(s, cfg)).k


@pytest.mark.parametrize("cfg", [MINI, MINI_LOW], ids=["mini", "mini_low"])
def test_induced_chains_match_scalar_oracles(cfg):
    for name, policy in oracle_policies(cfg):
        d = build_induced(cfg, policy)
        order, P, edges = scalar_chain(cfg, chooser(cfg, policy))
        assert d.n_states == len(order), name
        assert np.array_equal(d.state_codes, codes_of(order, cfg)), name
        assert np.allclose(d.row_matrix().toarray(), P, atol=1e-15, rtol=0), name
        labels = {lab: np.array([lab in base_labels(s, cfg) for s in order]) for lab in ("empty", "full", "lowstock")}
        start = order[0]
        for bound in range(7):
            for lab in ("empty", "full"):
                want = path_until(edges, start, lambda s: True, lambda s, lab=lab: lab in base_labels(s, cfg), bound)
                got = evaluate(d, f'P=? [F<={bound} "{lab}"]').value
                assert abs(got - want) <= 1e-12, (name, lab, bound)
            want = path_until(edges, start, lambda s: "lowstock" not in base_labels(s, cfg),
                              lambda s: "empty" in base_labels(s, cfg), bound)
            got = bounded_until(d, ~labels["lowstock"], labels["empty"], bound)[0]
            assert abs(got - want) <= 1e-12, (name, bound)
        for lab in ("empty", "full"):
            sol = unbounded_reach(d, labels[lab])
            assert np.max(np.abs(sol.values - linear_reach(P, labels[lab]))) <= 1e-12, (name, lab)
            t = expected_steps(d, labels[lab]).values
            ref = linear_steps(P, labels[lab])
            assert np.array_equal(np.isinf(t), np.isinf(ref)), (name, lab)
            fin = np.isfinite(ref)
            assert np.allclose(t[fin], ref[fin], rtol=1e-12, atol=1e-12), (name, lab)


def test_induced_chain_is_sub_model():
    mdp = explore(SMALL)
    policy = random_policy((8, 8, SMALL.n_orders), 3)
    d = build_induced(SMALL, policy)
    pos = np.searchsorted(mdp.state_codes, d.state_codes, sorter=np.argsort(mdp.state_codes))
    idx = np.argsort(mdp.state_codes)[pos]
    assert np.array_equal(mdp.state_codes[idx], d.state_codes)
    P = mdp.row_matrix()
    Q = d.row_matrix()
    for i in range(d.n_states):
        lo, hi = mdp.state_ptr[idx[i]], mdp.state_ptr[idx[i] + 1]
        rows = P[lo:hi].toarray()[:, idx]
        qrow = Q[i].toarray().ravel()
        assert any(np.array_equal(r, qrow) for r in rows)


def test_relevance_stop_depends_on_target():
    policy = random_policy((8, 8, SMALL.n_orders), 1)
    full = build_induced(SMALL, policy)
    a = build_induced(SMALL, policy, relevance_stop="empty")
    b = build_induced(SMALL, policy, relevance_stop="full")
    assert a.n_states <= full.n_states and b.n_states <= full.n_states
    assert (a.n_states, a.n_transitions) != (b.n_states, b.n_transitions)
    for d, lab in ((a, "empty"), (b, "full")):
        P = d.row_matrix().toarray()
        for i in np.flatnonzero(d.label_mask(lab)):
            assert P[i, i] == 1.0
        q = f'P=? [F<=40 "{lab}"]'
        assert abs(evaluate(d, q).value - evaluate(full, q).value) <= 1e-12


def test_identity_counterfactual_is_bitwise_identical():
    policy = random_policy((8, 8, SMALL.n_orders), 2)
    plain = build_induced(SMALL, policy)
    ident = build_induced(SMALL, policy, PolicyTransform(replacement={k: k for k in range(SMALL.n_orders)}))
    for name in ("state_ptr", "row_action", "row_ptr", "cols", "probs", "state_codes"):
        assert np.array_equal(getattr(plain, name), getattr(ident, name))
    assert plain.labels.keys() == ident.labels.keys()


def test_counterfactual_removes_replaced_level():
    policy = constant_policy(3, SMALL.n_orders)
    d = build_induced(SMALL, policy, PolicyTransform(replacement={3: 1}))
    assert not d.label_mask("pr_3").any()
    assert d.label_mask("pr_1").any()


def test_action_labels():
    d = build_induced(SMALL, constant_policy(3, SMALL.n_orders))
    f = d.features()
    dec = f[:, 7] == 0
    weekend = dec & (f[:, 0] >= 5)
    assert np.all(d.label_mask("pr_0")[weekend])
    # where 3 fits, a constant-3 policy orders 3; elsewhere the level falls back
    room = SMALL.smax - f[:, 1:6].sum(axis=1)
    fits = dec & ~weekend & (room >= 3)
    assert np.all(d.label_mask("pr_3")[fits])
    labelled = np.zeros(d.n_states, dtype=int)
    for k in range(SMALL.n_orders):
        labelled += d.label_mask(f"pr_{k}")
    assert np.array_equal(labelled, dec.astype(int))
    assert np.array_equal(d.label_mask("dm"), ~dec)
    assert d.label_mask("pr_6").sum() == 0  # declared even when never picked


def test_labels_can_be_rebuilt_and_disabled():
    policy = random_policy((8, 4, SMALL.n_orders), 0)
    d = build_induced(SMALL, policy, labelers=LabelerSet(base=True, action=False))
    assert "pr_0" not in d.labels and "empty" in d.labels
    label_actions(d, policy)
    assert "pr_0" in d.labels
    with pytest.raises(InvalidInput):
        LabelerSet.parse("base,colour")


def test_importance_labels_constant_policy():
    d = build_induced(SMALL, constant_policy(2, SMALL.n_orders), labelers=LabelerSet(importance=True, rounds=5))
    dec = d.features()[:, 7] == 0
    assert np.array_equal(d.label_mask(IMP_NONE), dec)
    assert not d.label_mask("imp_x1").any()


def test_tabular_policy_round_trip(tmp_path):
    mdp = explore(MINI_LOW)
    pol = min_bounded_reach(mdp, "empty", 6).policy
    pol.save(tmp_path / "p.npz")
    back = TabularPolicy.load(tmp_path / "p.npz")
    assert np.array_equal(back.codes, pol.codes) and np.array_equal(back.orders, pol.orders)
    assert back.config == pol.config
    with pytest.raises(InvalidInput):
        pol.lookup(np.array([-5]))


def test_distill_dataset_uses_enabled_actions():
    mdp = explore(SMALL)
    pol = optimal_cost_policy(mdp, tol=1e-8).policy
    d = build_induced(SMALL, pol)
    obs, acts = distill_dataset(d, pol)
    assert obs.shape == (d.decision_states().size, 8)
    for o, a in zip(obs.astype(int), acts):
        s = InventoryState.from_features(o)
        assert any(getattr(e, "k", None) == a for e in enabled_actions(s, SMALL))


def test_cost_policy_is_bellman_optimal():
    cfg = MINI_LOW
    mdp = explore(cfg)
    beta = 0.9
    res = optimal_cost_policy(mdp, discount=beta, tol=1e-13)
    assert res.converged
    states = [mdp.state(i) for i in range(mdp.n_states)]
    index = {s: i for i, s in enumerate(states)}
    # exact evaluation of the returned stationary policy
    pick = chooser(cfg, res.policy)
    from plateletmc.mdp import DM, Order

    n = len(states)
    P = np.zeros((n, n))
    c = np.array([state_cost(s, cfg) for s in states])
    for i, s in enumerate(states):
        a = DM if s.ph == 1 else Order(pick(s))
        for p, t in successors(s, a, cfg):
            P[i, index[t]] += p
    v = np.linalg.solve(np.eye(n) - beta * P, c)
    assert np.max(np.abs(v - res.values)) <= 1e-9
    # no single-state deviation improves on it
    for i, s in enumerate(states):
        for a in enabled_actions(s, cfg):
            q = c[i] + beta * sum(p * v[index[t]] for p, t in successors(s, a, cfg))
            assert q >= v[i] - 1e-9


def test_cost_policy_order_step():
    mdp = explore(SMALL)
    res = optimal_cost_policy(mdp, tol=1e-8, order_step=3)
    assert np.all(res.policy.orders % 3 == 0)
    free = optimal_cost_policy(mdp, tol=1e-8)
    assert free.value <= res.value + 1e-9
    assert res.policy.meta["order_step"] == 3
    with pytest.raises(InvalidInput):
        optimal_cost_policy(mdp, order_step=0)
    with pytest.raises(InvalidInput):
        optimal_cost_policy(mdp, discount=1.0)
