"""Multi-agent constrained trust-region training.

Agents are updated one after another in a fresh random order each iteration.
Agent ``i_m`` maximises its advantage surrogate weighted by the probability
ratios of the agents already updated this iteration, subject to a KL trust
region and a linearised bound on its own discounted cost. The quadratic
subproblem is solved through its two-multiplier dual; when no point of the
trust region satisfies the linearised constraint, a pure cost-descent
recovery step is taken instead.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .env import OBS_DIM, V2GEnv, episode_rollout
from .nn import (Adam, GaussianPolicy, Mlp, MlpShape, dump_params, load_params)

EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 3500
    parallel_envs: int = 5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    kl_delta: float = 0.01
    cost_limit: float = 0.1
    cg_iters: int = 10
    backtrack_iters: int = 10
    backtrack_coeff: float = 0.5
    line_search_step: float = 0.1  # minimum fraction of the predicted gain a step must realise
    value_lr: float = 5e-4
    cg_damping: float = 0.1
    hidden: tuple = (64, 64)
    log_std_init: float = -0.5
    value_epochs: int = 10
    value_minibatch: int = 50
    checkpoint_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if not self.kl_delta > 0:
            raise ValueError("kl_delta must be positive")
        for name in ("cg_iters", "backtrack_iters", "parallel_envs", "value_epochs",
                     "value_minibatch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")


# ----------------------------------------------------------------- estimators


def compute_gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Backward recursion of the generalised advantage; ``values`` has one more
    entry than ``rewards`` (the bootstrap, zero at a terminal state)."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.shape[0] != r.shape[0] + 1:
        raise ValueError("values must have len(rewards) + 1 entries")
    adv = np.zeros_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv


def discounted_sum(x, gamma: float) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sum(x * gamma ** np.arange(len(x))))


def estimate_cost_return(costs, gamma: float) -> float:
    """Monte-Carlo estimate of the discounted cost return. A 2-D input is read
    as (episodes, steps) and averaged over episodes."""
    c = np.asarray(costs, dtype=float)
    if c.ndim == 1:
        return discounted_sum(c, gamma)
    return float(np.mean([discounted_sum(row, gamma) for row in c]))


def conjugate_gradient(avp: Callable, g, iters: int = 10, tol: float = 1e-10) -> np.ndarray:
    """Solve ``A x = g`` for symmetric positive-definite ``A`` given as a product."""
    g = np.asarray(g, dtype=float)
    x = np.zeros_like(g)
    r = g.copy()
    p = r.copy()
    rr = r @ r
    g_norm = math.sqrt(rr)
    if g_norm == 0.0:
        return x
    for _ in range(iters):
        ap = avp(p)
        denom = p @ ap
        if not np.isfinite(denom) or denom <= 0:
            raise FloatingPointError("conjugate gradient met a non-positive curvature")
        alpha = rr / denom
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = r @ r
        if not np.isfinite(rr_new):
            raise FloatingPointError("non-finite residual in conjugate gradient")
        if math.sqrt(rr_new) <= tol * g_norm:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


# ------------------------------------------------------------ QP dual solve


@dataclass
class StepPlan:
    direction: np.ndarray
    case: str  # "unconstrained", "constrained", "recovery", "zero"
    lam: float = 0.0
    nu: float = 0.0
    predicted_gain: float = 0.0


def solve_trust_region_qp(g, b, c, delta, hinv_g, hinv_b) -> StepPlan:
    """max g.x  s.t.  x.Hx / 2 <= delta,  c + b.x <= 0, through the dual.

    ``hinv_g``/``hinv_b`` are (approximate) H^-1 g and H^-1 b. The primal is
    recovered as x = (H^-1 g - nu H^-1 b) / lam.
    """
    q = float(g @ hinv_g)
    if hinv_b is None:
        s = 0.0
    else:
        r = float(g @ hinv_b)
        s = float(b @ hinv_b)
    if s <= EPS:
        if q <= EPS:
            return StepPlan(np.zeros_like(g), "zero")
        lam = math.sqrt(q / (2 * delta))
        return StepPlan(hinv_g / lam, "unconstrained", lam, 0.0, q / lam)

    B = 2 * delta - c * c / s
    if c > 0 and B < 0:
        # no point of the trust region satisfies the linearised constraint
        return StepPlan(-math.sqrt(2 * delta / s) * hinv_b, "recovery")
    if c <= 0 and B < 0:
        # the whole trust region is feasible
        if q <= EPS:
            return StepPlan(np.zeros_like(g), "zero")
        lam = math.sqrt(q / (2 * delta))
        return StepPlan(hinv_g / lam, "unconstrained", lam, 0.0, q / lam)

    A = max(q - r * r / s, 0.0)
    lam_b = math.sqrt(max(q, EPS) / (2 * delta))
    lam_a = math.sqrt(A / max(B, EPS)) if A > 0 else 0.0

    def f_a(lam):
        return -A / (2 * lam) - B * lam / 2 + r * c / s if lam > 0 else -np.inf

    def f_b(lam):
        return -0.5 * (q / lam + 2 * lam * delta) if lam > 0 else -np.inf

    # nu > 0 exactly on {lam : lam * c + r > 0}
    if abs(c) < EPS:
        lam = lam_a if (r > 0 and f_a(lam_a) >= f_b(lam_b)) else lam_b
    else:
        lam_mid = -r / c
        if lam_mid > 0:
            if c < 0:
                lam_a, lam_b = min(lam_a, lam_mid), max(lam_b, lam_mid)
            else:
                lam_a, lam_b = max(lam_a, lam_mid), min(lam_b, lam_mid)
            lam = lam_a if f_a(lam_a) >= f_b(lam_b) else lam_b
        else:
            lam = lam_b if c < 0 else lam_a
    lam = max(lam, EPS)
    nu = max(0.0, lam * c + r) / s
    x = (hinv_g - nu * hinv_b) / lam
    return StepPlan(x, "constrained", lam, nu, float(g @ x))


# ------------------------------------------------------------------- batches


@dataclass
class AgentBatch:
    obs: np.ndarray  # (N, obs_dim)
    actions: np.ndarray  # (N, 1)
    logp_old: np.ndarray  # (N,)
    adv: np.ndarray  # normalised reward advantage
    cost_adv: np.ndarray  # raw cost advantage
    discount: np.ndarray  # gamma^t of each sample inside its episode
    jc: float  # discounted cost return estimate
    n_episodes: int


@dataclass
class Batch:
    agents: list
    global_obs: np.ndarray
    value_targets: np.ndarray  # (N, n_agents)
    cost_targets: list  # per agent (N,)
    returns: np.ndarray  # per-episode undiscounted returns
    cost_rate: float


@dataclass
class UpdateReport:
    agent: int
    case: str
    accepted: bool
    kl: float
    surrogate_gain: float
    predicted_cost: float
    backtracks: int
    jc: float


def global_features(obs, slot, horizon):
    """Critic input: every agent's observation plus the remaining-time fraction."""
    return np.concatenate([np.asarray(obs).ravel(), [1.0 - slot / horizon]])


def _surrogate(policy, ab: AgentBatch, factor):
    ratio = np.exp(policy.log_prob(ab.obs, ab.actions) - ab.logp_old)
    return float(np.mean(ratio * factor * ab.adv)), ratio


def agent_update(agent: int, policy: GaussianPolicy, ab: AgentBatch, others_factor,
                 cfg: TrainConfig, cost_limit: float | None = None) -> UpdateReport:
    """One constrained trust-region step for a single agent (parameters updated
    in place when a step is accepted)."""
    d = cfg.cost_limit if cost_limit is None else cost_limit
    theta = policy.get_flat()
    old_dist = policy.dist(ab.obs)
    g = policy.grad_weighted_log_prob(ab.obs, ab.actions,
                                      others_factor * ab.adv / len(ab.adv))
    b = policy.grad_weighted_log_prob(ab.obs, ab.actions, ab.discount * ab.cost_adv
                                      / ab.n_episodes)
    c = ab.jc - d
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(b))):
        raise FloatingPointError(f"non-finite policy gradient for agent {agent}")
    if np.allclose(g, 0.0) and np.allclose(b, 0.0):
        return UpdateReport(agent, "zero", False, 0.0, 0.0, ab.jc, 0, ab.jc)

    def fvp(v):
        return policy.fisher_vector_product(ab.obs, v, cfg.cg_damping)

    hinv_g = conjugate_gradient(fvp, g, cfg.cg_iters)
    hinv_b = conjugate_gradient(fvp, b, cfg.cg_iters) if np.linalg.norm(b) > EPS else None
    plan = solve_trust_region_qp(g, b, c, cfg.kl_delta, hinv_g, hinv_b)
    if plan.case == "zero":
        return UpdateReport(agent, "zero", False, 0.0, 0.0, ab.jc, 0, ab.jc)

    surr_old, _ = _surrogate(policy, ab, others_factor)
    step = 1.0
    for j in range(cfg.backtrack_iters):
        dtheta = step * plan.direction
        policy.set_flat(theta + dtheta)
        kl = policy.kl_from(old_dist, ab.obs)
        surr_new, _ = _surrogate(policy, ab, others_factor)
        gain = surr_new - surr_old
        pred_cost = ab.jc + float(b @ dtheta)
        cost_ok = pred_cost <= max(d, ab.jc) + 1e-12
        if plan.case == "recovery":
            ok = kl <= cfg.kl_delta and float(b @ dtheta) < 0
        elif c > 0:
            # an infeasible policy may trade reward for getting back under the limit
            ok = kl <= cfg.kl_delta and cost_ok
        else:
            ok = (kl <= cfg.kl_delta and gain > 0
                  and gain >= cfg.line_search_step * step * plan.predicted_gain
                  and cost_ok)
        if ok and np.all(np.isfinite(policy.get_flat())):
            return UpdateReport(agent, plan.case, True, kl, gain, pred_cost, j, ab.jc)
        step *= cfg.backtrack_coeff
    policy.set_flat(theta)
    return UpdateReport(agent, plan.case, False, 0.0, 0.0, ab.jc, cfg.backtrack_iters, ab.jc)


def sequential_joint_update(policies, batch: Batch, cfg: TrainConfig,
                            rng: np.random.Generator) -> list[UpdateReport]:
    """Update agents in a random order; each later agent sees the probability
    ratios of the agents updated before it."""
    order = rng.permutation(len(policies))
    factor = np.ones(len(batch.agents[0].adv))
    reports = []
    for i in order:
        ab = batch.agents[i]
        rep = agent_update(int(i), policies[i], ab, factor, cfg)
        reports.append(rep)
        if rep.accepted:
            factor = factor * np.exp(policies[i].log_prob(ab.obs, ab.actions) - ab.logp_old)
    reports.sort(key=lambda r: r.agent)
    return reports


# -------------------------------------------------------------------- critics


class Critics:
    """Centralised reward value network (one output per agent) and one cost
    value network per agent, all reading the global state."""

    def __init__(self, n_agents: int, in_dim: int, hidden, lr: float, rng):
        self.value = Mlp(MlpShape(in_dim, tuple(hidden), n_agents), rng)
        self.costs = [Mlp(MlpShape(in_dim, tuple(hidden), 1), rng) for _ in range(n_agents)]
        self.opt_value = Adam(self.value.params.size, lr)
        self.opt_costs = [Adam(c.params.size, lr) for c in self.costs]

    def nets(self):
        return [self.value, *self.costs]

    def opts(self):
        return [self.opt_value, *self.opt_costs]


def fit_value_networks(critics: Critics, batch: Batch, cfg: TrainConfig, rng) -> list[float]:
    """Adam regression of the critics toward their lambda-return targets;
    returns the final mean-squared error of each network."""
    n = len(batch.global_obs)
    targets = [batch.value_targets] + [t[:, None] for t in batch.cost_targets]
    losses = []
    for net, opt, y in zip(critics.nets(), critics.opts(), targets):
        for _ in range(cfg.value_epochs):
            perm = rng.permutation(n)
            for start in range(0, n, cfg.value_minibatch):
                idx = perm[start:start + cfg.value_minibatch]
                pred = net.forward(batch.global_obs[idx])
                grad = net.backward(2.0 * (pred - y[idx]) / pred.size)
                net.params = opt.step(net.params, grad)
        losses.append(float(np.mean((net.forward(batch.global_obs) - y) ** 2)))
    return losses


# ------------------------------------------------------------------- rollouts


def collect_batch(env: V2GEnv, policies, critics: Critics, seeds, cfg: TrainConfig) -> Batch:
    n_agents = len(policies)
    horizon = env.cfg.horizon
    per_agent = [dict(obs=[], act=[], logp=[], adv=[], cadv=[], disc=[], ctgt=[], jc=[])
                 for _ in range(n_agents)]
    g_obs, v_tgt, ep_returns, all_costs = [], [], [], []

    for seed in seeds:
        store = []  # per step: [(action, log-prob) per agent]

        def policy_fn(obs, rng):
            acts = np.zeros(n_agents)
            store.append([])
            for i, pol in enumerate(policies):
                a, lp = pol.sample(obs[i:i + 1], rng)
                acts[i] = a[0]
                store[-1].append((a, lp))
            return acts

        trs = episode_rollout(env, policy_fn, seed)
        T = len(trs)
        gfeat = np.array([global_features(tr.states, t, horizon) for t, tr in enumerate(trs)])
        vals = critics.value.forward(gfeat)  # (T, n_agents)
        rewards = np.array([tr.reward for tr in trs])
        costs = np.array([tr.costs for tr in trs])  # (T, n_agents)
        ep_returns.append(float(rewards.sum()))
        all_costs.append(costs)
        disc = cfg.gamma ** np.arange(T)
        v_target = np.zeros((T, n_agents))
        for i in range(n_agents):
            v_ext = np.append(vals[:, i], 0.0)
            adv = compute_gae(rewards, v_ext, cfg.gamma, cfg.gae_lambda)
            v_target[:, i] = adv + vals[:, i]
            cv = critics.costs[i].forward(gfeat)[:, 0]
            cadv = compute_gae(costs[:, i], np.append(cv, 0.0), cfg.gamma, cfg.gae_lambda)
            d = per_agent[i]
            d["obs"].append(np.array([tr.states[i] for tr in trs]))
            d["act"].append(np.array([store[t][i][0] for t in range(T)]))
            d["logp"].append(np.array([store[t][i][1] for t in range(T)]))
            d["adv"].append(adv)
            d["cadv"].append(cadv)
            d["disc"].append(disc)
            d["ctgt"].append(cadv + cv)
            d["jc"].append(discounted_sum(costs[:, i], cfg.gamma))
        g_obs.append(gfeat)
        v_tgt.append(v_target)

    agents = []
    for d in per_agent:
        adv = np.concatenate(d["adv"])
        adv = (adv - adv.mean()) / (adv.std() + EPS)
        agents.append(AgentBatch(
            obs=np.concatenate(d["obs"]), actions=np.concatenate(d["act"]),
            logp_old=np.concatenate(d["logp"]), adv=adv, cost_adv=np.concatenate(d["cadv"]),
            discount=np.concatenate(d["disc"]), jc=float(np.mean(d["jc"])),
            n_episodes=len(seeds)))
    return Batch(agents=agents, global_obs=np.concatenate(g_obs),
                 value_targets=np.concatenate(v_tgt),
                 cost_targets=[np.concatenate(d["ctgt"]) for d in per_agent],
                 returns=np.array(ep_returns),
                 cost_rate=float(np.mean(np.concatenate(all_costs))))


# ---------------------------------------------------------------------- train


LOG_FIELDS = ["episode", "mean_return", "cost_rate", "kl", "accepted", "recovery_used",
              "jc_max", "value_loss"]


@dataclass
class LogRow:
    episode: int
    mean_return: float
    cost_rate: float
    kl: float
    accepted: int
    recovery_used: int
    jc_max: float
    value_loss: float


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    reports: list = field(default_factory=list)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(LOG_FIELDS) + "\n")
            for r in self.rows:
                fh.write(",".join(_fmt(getattr(r, k)) for k in LOG_FIELDS) + "\n")


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def read_training_log(path) -> TrainingLog:
    import csv
    log = TrainingLog()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LOG_FIELDS:
            raise ValueError(f"unexpected training log header: {reader.fieldnames}")
        for row in reader:
            log.rows.append(LogRow(
                episode=int(row["episode"]), mean_return=float(row["mean_return"]),
                cost_rate=float(row["cost_rate"]), kl=float(row["kl"]),
                accepted=int(row["accepted"]), recovery_used=int(row["recovery_used"]),
                jc_max=float(row["jc_max"]), value_loss=float(row["value_loss"])))
    return log


class Trainer:
    """Holds policies, critics and RNG state so a run can be checkpointed and
    resumed step for step."""

    def __init__(self, cfg: TrainConfig, env_factory: Callable[[], V2GEnv]):
        self.cfg = cfg
        self.env = env_factory()
        n = self.env.n_agents
        self.rng = np.random.default_rng(cfg.seed)
        init_rng = np.random.default_rng([cfg.seed, 7])
        self.policies = [GaussianPolicy(OBS_DIM, 1, cfg.hidden, init_rng, cfg.log_std_init)
                         for _ in range(n)]
        self.critics = Critics(n, n * OBS_DIM + 1, cfg.hidden, cfg.value_lr, init_rng)
        self.episode = 0
        self.log = TrainingLog()

    def run(self, episodes: int | None = None, checkpoint_dir=None,
            progress: Callable | None = None) -> TrainingLog:
        target = self.cfg.episodes if episodes is None else episodes
        while self.episode < target:
            self.iterate()
            if progress:
                progress(self.log.rows[-1])
            if checkpoint_dir and (self.episode % self.cfg.checkpoint_every == 0
                                   or self.episode == target):
                self.save(Path(checkpoint_dir) / "checkpoint.json")
        return self.log

    def iterate(self):
        cfg = self.cfg
        seeds = [int(s) for s in self.rng.integers(0, 2 ** 31 - 1, cfg.parallel_envs)]
        batch = collect_batch(self.env, self.policies, self.critics, seeds, cfg)
        reports = sequential_joint_update(self.policies, batch, cfg, self.rng)
        losses = fit_value_networks(self.critics, batch, cfg, self.rng)
        if not all(np.isfinite(losses)):
            raise FloatingPointError(f"non-finite critic loss at episode {self.episode}: {losses}")
        accepted = [r for r in reports if r.accepted]
        self.log.rows.append(LogRow(
            episode=self.episode,
            mean_return=float(np.mean(batch.returns)),
            cost_rate=batch.cost_rate,
            kl=float(max([r.kl for r in accepted], default=0.0)),
            accepted=len(accepted),
            recovery_used=sum(r.case == "recovery" and r.accepted for r in reports),
            jc_max=float(max(ab.jc for ab in batch.agents)),
            value_loss=float(losses[0]),
        ))
        self.log.reports.append(reports)
        self.episode += 1

    # ---------------------------------------------------------- checkpoints
    def state_dict(self) -> dict:
        return {
            "episode": self.episode,
            "train_config": {k: (list(v) if isinstance(v, tuple) else v)
                             for k, v in asdict(self.cfg).items()},
            "rng": self.rng.bit_generator.state,
            "policies": [dump_params(p.layout, p.get_flat()) for p in self.policies],
            "critics": [dump_params(n.layout, n.params, o)
                        for n, o in zip(self.critics.nets(), self.critics.opts())],
            "log": [asdict(r) for r in self.log.rows],
        }

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(self.state_dict(), fh)
        tmp.replace(path)

    def load_state(self, blob: dict):
        saved = blob.get("train_config", {})
        now = self.state_dict()["train_config"]
        # the run length may be extended on resume; everything else must agree
        diff = [f"{k}: {saved.get(k)!r} != {v!r}" for k, v in now.items()
                if k not in ("episodes", "checkpoint_every") and saved.get(k) != v]
        if diff:
            raise ValueError("checkpoint was trained with a different config: " + "; ".join(diff))
        pol = [load_params(b, p.layout) for b, p in zip(blob["policies"], self.policies)]
        if len(blob["policies"]) != len(self.policies):
            raise ValueError("checkpoint agent count does not match the environment")
        for p, v in zip(self.policies, pol):
            p.set_flat(v)
        for b, net, opt in zip(blob["critics"], self.critics.nets(), self.critics.opts()):
            net.set_params(load_params(b, net.layout, opt))
        self.rng.bit_generator.state = blob["rng"]
        self.episode = int(blob["episode"])
        self.log = TrainingLog(rows=[LogRow(**r) for r in blob["log"]])

    @classmethod
    def load(cls, path, cfg: TrainConfig, env_factory) -> "Trainer":
        with open(path) as fh:
            blob = json.load(fh)
        tr = cls(cfg, env_factory)
        tr.load_state(blob)
        return tr


def train(cfg: TrainConfig, env_factory: Callable[[], V2GEnv], checkpoint_dir=None,
          progress=None) -> tuple[TrainingLog, Trainer]:
    trainer = Trainer(cfg, env_factory)
    if checkpoint_dir:
        trainer.save(Path(checkpoint_dir) / "checkpoint.json")
    trainer.run(checkpoint_dir=checkpoint_dir, progress=progress)
    return trainer.log, trainer


def greedy_policy(policies):
    """Deterministic joint policy using each agent's mean action."""
    def act(obs, rng=None):
        return np.array([p.dist(obs[i:i + 1]).mean[0, 0] for i, p in enumerate(policies)])
    return act


# ------------------------------------------------------ tabular decomposition


def tabular_joint_values(P, R, pi1, pi2, gamma):
    """Exact values of a two-agent tabular MDP.

    ``P[s, a1, a2, s']`` transition probabilities, ``R[s, a1, a2]`` rewards,
    ``pi1[s, a1]``, ``pi2[s, a2]`` policies. Returns (V, Q1, Q12) with
    Q1[s, a1] the value of fixing agent 1's action and Q12 the joint Q.
    """
    nS = R.shape[0]
    joint = pi1[:, :, None] * pi2[:, None, :]
    P_pi = np.einsum("sab,sabt->st", joint, P)
    r_pi = np.einsum("sab,sab->s", joint, R)
    V = np.linalg.solve(np.eye(nS) - gamma * P_pi, r_pi)
    Q12 = R + gamma * np.einsum("sabt,t->sab", P, V)
    Q1 = np.einsum("sab,sb->sa", Q12, pi2)
    return V, Q1, Q12
