import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gae_double_sum, tabular_values_by_iteration
from v2gcoord.env import OBS_DIM, EnvConfig, V2GEnv
from v2gcoord.macpo import (AgentBatch, TrainConfig, Trainer, agent_update, collect_batch,
                            compute_gae, conjugate_gradient, discounted_sum,
                            estimate_cost_return, greedy_policy, read_training_log,
                            solve_trust_region_qp, tabular_joint_values, train)
from v2gcoord.nn import GaussianPolicy

FAST = dict(hidden=(8,), value_epochs=1, value_minibatch=50, cg_iters=5, backtrack_iters=4)


def small_env():
    return V2GEnv(EnvConfig(n_agents=2, n_evs=6, fleet_seed=1))


# --------------------------------------------------------------------- GAE


def test_gae_examples():
    r, v = [1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0]
    assert np.allclose(compute_gae(r, v, 1.0, 1.0), [3.0, 2.0, 1.0])
    assert np.allclose(compute_gae(r, v, 0.5, 1.0), [1.75, 1.5, 1.0])
    with pytest.raises(ValueError):
        compute_gae(r, v[:3], 0.9, 0.9)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 25), st.floats(0.1, 1.0), st.floats(0.0, 1.0), st.integers(0, 10 ** 6))
def test_gae_matches_double_sum(T, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(T)
    v = np.append(rng.standard_normal(T), 0.0)
    assert np.allclose(compute_gae(r, v, gamma, lam), gae_double_sum(r, v, gamma, lam),
                       atol=1e-10)


def test_gae_one_step_and_monte_carlo_limits():
    rng = np.random.default_rng(0)
    r, v = rng.standard_normal(10), np.append(rng.standard_normal(10), 0.0)
    td = r + 0.9 * v[1:] - v[:-1]
    assert np.allclose(compute_gae(r, v, 0.9, 0.0), td)
    mc = np.array([r[t:].sum() for t in range(10)]) - v[:-1]
    assert np.allclose(compute_gae(r, v, 1.0, 1.0), mc)


def test_cost_return_examples():
    assert estimate_cost_return([1, 1, 1], 0.5) == pytest.approx(1.75)
    assert estimate_cost_return([[1, 1, 1], [0, 0, 0]], 0.5) == pytest.approx(0.875)
    assert estimate_cost_return(np.zeros(20), 0.99) == 0.0
    assert discounted_sum([2.0], 0.3) == 2.0


# ---------------------------------------------------------------------- CG


def test_cg_identity_and_zero_rhs():
    g = np.array([1.0, -2.0, 3.0])
    assert np.allclose(conjugate_gradient(lambda v: v, g, 1), g)
    assert not conjugate_gradient(lambda v: v, np.zeros(3)).any()


@pytest.mark.parametrize("n", [5, 50, 200])
def test_cg_converges_on_spd(n):
    rng = np.random.default_rng(n)
    M = rng.standard_normal((n, n))
    A = M @ M.T / n + np.eye(n)
    g = rng.standard_normal(n)
    x = conjugate_gradient(lambda v: A @ v, g, iters=n, tol=1e-12)
    assert np.allclose(A @ x, g, atol=1e-8)


def test_cg_rejects_indefinite():
    with pytest.raises(FloatingPointError):
        conjugate_gradient(lambda v: -v, np.ones(2))


# ---------------------------------------------------------------------- QP


def grid_best(g, b, c, delta, H, span=None, n=801):
    """Exhaustive search of the trust-region QP on a fine 2-D grid."""
    span = span or np.sqrt(2 * delta / np.linalg.eigvalsh(H).min()) * 1.01
    xs = np.linspace(-span, span, n)
    X, Y = np.meshgrid(xs, xs)
    P = np.stack([X.ravel(), Y.ravel()], 1)
    quad = 0.5 * np.einsum("ni,ij,nj->n", P, H, P)
    ok = (quad <= delta) & (c + P @ b <= 0)
    if not ok.any():
        return None
    return float((P[ok] @ g).max())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_qp_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((2, 2))
    H = M @ M.T + 0.5 * np.eye(2)
    g, b = rng.standard_normal(2), rng.standard_normal(2)
    c = float(rng.uniform(-0.5, 0.3))
    delta = 0.05
    Hinv = np.linalg.inv(H)
    plan = solve_trust_region_qp(g, b, c, delta, Hinv @ g, Hinv @ b)
    best = grid_best(g, b, c, delta, H)
    x = plan.direction
    if best is None:
        assert plan.case == "recovery"
        return
    assert plan.case in ("constrained", "unconstrained")
    assert 0.5 * x @ H @ x <= delta * (1 + 1e-6)
    assert c + b @ x <= 1e-6
    # the grid optimum can only trail the exact one by the grid resolution
    assert g @ x >= best - 5e-3 * (np.linalg.norm(g) + 1)


def test_qp_unconstrained_step():
    g = np.array([3.0, 4.0])
    plan = solve_trust_region_qp(g, np.array([1.0, 0.0]), -10.0, 0.5, g, np.array([1.0, 0.0]))
    assert plan.case == "unconstrained"
    assert np.allclose(plan.direction, g / 5.0)
    assert plan.predicted_gain == pytest.approx(5.0)


def test_qp_recovery_step_reduces_cost():
    H = np.diag([2.0, 1.0])
    b = np.array([1.0, 1.0])
    g = np.array([1.0, 0.0])
    plan = solve_trust_region_qp(g, b, 5.0, 0.01, np.linalg.solve(H, g), np.linalg.solve(H, b))
    assert plan.case == "recovery"
    x = plan.direction
    assert b @ x < 0
    assert 0.5 * x @ H @ x == pytest.approx(0.01)


def test_qp_zero_gradient():
    plan = solve_trust_region_qp(np.zeros(2), np.zeros(2), -1.0, 0.01, np.zeros(2), None)
    assert plan.case == "zero" and not plan.direction.any()


# ------------------------------------------------------------------ updates


def make_agent_batch(rng, policy, n=60, cost_scale=0.0, jc=0.0):
    obs = rng.standard_normal((n, 4))
    draws = [policy.sample(o[None, :], rng) for o in obs]
    acts = np.array([a for a, _ in draws])
    logp = np.array([lp for _, lp in draws])
    adv = acts[:, 0] - acts[:, 0].mean()  # rewards pushing the mean up
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return AgentBatch(obs=obs, actions=acts, logp_old=logp, adv=adv,
                      cost_adv=cost_scale * acts[:, 0], discount=np.ones(n), jc=jc, n_episodes=3)


def test_agent_update_respects_trust_region_and_improves_surrogate():
    rng = np.random.default_rng(0)
    pol = GaussianPolicy(4, 1, (8,), rng)
    ab = make_agent_batch(rng, pol)
    cfg = TrainConfig(**FAST)
    rep = agent_update(0, pol, ab, np.ones(len(ab.adv)), cfg)
    assert rep.accepted and rep.kl <= cfg.kl_delta and rep.surrogate_gain > 0


def test_agent_update_recovery_lowers_cost_direction():
    rng = np.random.default_rng(1)
    pol = GaussianPolicy(4, 1, (8,), rng)
    ab = make_agent_batch(rng, pol, cost_scale=1.0, jc=5.0)
    theta = pol.get_flat()
    b = pol.grad_weighted_log_prob(ab.obs, ab.actions, ab.discount * ab.cost_adv / 3)
    rep = agent_update(0, pol, ab, np.ones(len(ab.adv)), TrainConfig(**FAST))
    assert rep.case == "recovery" and rep.accepted
    assert b @ (pol.get_flat() - theta) < 0


def test_rejected_update_restores_parameters():
    rng = np.random.default_rng(2)
    pol = GaussianPolicy(4, 1, (8,), rng)
    ab = make_agent_batch(rng, pol)
    theta = pol.get_flat().copy()
    # one backtrack with an absurd acceptance ratio cannot pass
    rep = agent_update(0, pol, ab, np.ones(len(ab.adv)),
                       TrainConfig(**{**FAST, "backtrack_iters": 1, "line_search_step": 1e6}))
    assert not rep.accepted
    assert np.array_equal(pol.get_flat(), theta)


# --------------------------------------------------------- tabular check


def random_tabular(rng, nS=3, nA=2):
    P = rng.random((nS, nA, nA, nS))
    P /= P.sum(-1, keepdims=True)
    R = rng.standard_normal((nS, nA, nA))
    pi1 = rng.dirichlet(np.ones(nA), nS)
    pi2 = rng.dirichlet(np.ones(nA), nS)
    return P, R, pi1, pi2


@pytest.mark.parametrize("seed", range(5))
def test_tabular_values_match_fixed_point(seed):
    P, R, pi1, pi2 = random_tabular(np.random.default_rng(seed))
    V, Q1, Q12 = tabular_joint_values(P, R, pi1, pi2, 0.9)
    V_it, Q_it = tabular_values_by_iteration(P, R, pi1, pi2, 0.9)
    assert np.allclose(V, V_it, atol=1e-10)
    assert np.allclose(Q12, Q_it, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_joint_advantage_splits_into_sequential_parts(seed):
    P, R, pi1, pi2 = random_tabular(np.random.default_rng(seed))
    V, Q1, Q12 = tabular_joint_values(P, R, pi1, pi2, 0.9)
    # joint advantage = agent 1's advantage + agent 2's advantage given agent 1
    for s, a1, a2 in itertools.product(range(3), range(2), range(2)):
        joint = Q12[s, a1, a2] - V[s]
        first = Q1[s, a1] - V[s]
        second = Q12[s, a1, a2] - Q1[s, a1]
        assert joint == pytest.approx(first + second, abs=1e-12)
    # each agent's expected advantage under its own policy is zero
    assert np.allclose(np.einsum("sa,sa->s", pi1, Q1) - V, 0.0, atol=1e-10)


# ------------------------------------------------------------------ training


def test_collect_batch_shapes():
    cfg = TrainConfig(**FAST)
    tr = Trainer(cfg, small_env)
    batch = collect_batch(tr.env, tr.policies, tr.critics, [1, 2, 3, 4, 5], cfg)
    assert len(batch.agents) == 2
    for ab in batch.agents:
        assert ab.obs.shape[0] == 5 * 20 and ab.n_episodes == 5
        assert abs(ab.adv.mean()) < 1e-9
    assert batch.global_obs.shape[0] == 100 and batch.returns.shape == (5,)


def test_zero_episodes_returns_untrained_policies():
    log, tr = train(TrainConfig(episodes=0, **FAST), small_env)
    assert log.rows == [] and tr.episode == 0


def test_training_step_logs_and_stays_finite():
    tr = Trainer(TrainConfig(episodes=2, parallel_envs=2, **FAST), small_env)
    tr.run()
    assert [r.episode for r in tr.log.rows] == [0, 1]
    assert all(np.isfinite(p.get_flat()).all() for p in tr.policies)
    act = greedy_policy(tr.policies)(np.zeros((2, OBS_DIM)))
    assert act.shape == (2,)


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    cfg = TrainConfig(episodes=2, parallel_envs=2, **FAST)
    straight = Trainer(cfg, small_env)
    straight.run()
    first = Trainer(cfg, small_env)
    first.run(1)
    first.save(tmp_path / "ck.json")
    resumed = Trainer.load(tmp_path / "ck.json", cfg, small_env)
    resumed.run()
    for a, b in zip(straight.policies, resumed.policies):
        assert np.array_equal(a.get_flat(), b.get_flat())
    assert [r.mean_return for r in straight.log.rows] == \
        [r.mean_return for r in resumed.log.rows]


def test_checkpoint_rejects_changed_config(tmp_path):
    cfg = TrainConfig(episodes=1, parallel_envs=2, **FAST)
    tr = Trainer(cfg, small_env)
    tr.save(tmp_path / "ck.json")
    with pytest.raises(ValueError, match="different config"):
        Trainer.load(tmp_path / "ck.json", TrainConfig(episodes=1, parallel_envs=2,
                                                       **{**FAST, "kl_delta": 0.02}), small_env)
    blob = json.loads((tmp_path / "ck.json").read_text())
    assert blob["episode"] == 0


def test_training_log_csv_round_trip(tmp_path):
    tr = Trainer(TrainConfig(episodes=1, parallel_envs=2, **FAST), small_env)
    tr.run()
    tr.log.to_csv(tmp_path / "log.csv")
    back = read_training_log(tmp_path / "log.csv")
    assert back.rows[0].episode == 0
    assert back.rows[0].mean_return == pytest.approx(tr.log.rows[0].mean_return)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=0.0)
    with pytest.raises(ValueError):
        TrainConfig(cg_iters=0)
    with pytest.raises(ValueError):
        TrainConfig(episodes=-1)
