"""Independent reference computations shared by the unit and acceptance tests.

Nothing here imports the code under test except plain data types, so each
oracle is a second route to the same answer.
"""

from __future__ import annotations

import itertools

import numpy as np

from v2gcoord.fleet import EvSpec


# ---------------------------------------------------------------- envelopes


def random_small_instance(rng, max_evs=4, max_slots=6):
    """A handful of EVs on a short window starting at hour 0 (no midnight wrap)."""
    horizon = int(rng.integers(2, max_slots + 1))
    n = int(rng.integers(1, max_evs + 1))
    evs = []
    for i in range(n):
        arr = int(rng.integers(0, horizon))
        dep = int(rng.integers(arr + 1, horizon + 1))
        p = float(rng.choice([1.0, 1.5, 2.0]))
        cap = float(rng.choice([4.0, 6.0, 8.0]))
        soc = float(rng.uniform(0.25, 0.85))
        lo = float(rng.uniform(0.3, 0.7))
        evs.append(EvSpec(id=i, capacity_kwh=cap, p_charge_max_kw=p, p_discharge_max_kw=-p,
                          arrival_slot=arr, departure_slot=dep, soc_arrival=soc,
                          soc_min=0.2, soc_max=0.9, soc_depart_low=lo,
                          soc_depart_high=lo + 0.2, efficiency=0.95))
    return evs, horizon


def enumerate_ev_dispatches(ev: EvSpec, horizon: int, step_kw: float = 0.5, dt: float = 1.0):
    """Every per-EV power sequence on a ``step_kw`` grid that respects the EV's
    own limits: power box while plugged (zero otherwise), SOC window on every
    boundary, and the departure window (relaxed to full-power reach when the
    window is out of reach). Returns energy trajectories, shape (m, horizon + 1)."""
    q = ev.capacity_kwh
    e0 = ev.soc_arrival * q
    arr, dep = ev.arrival_slot, ev.departure_slot
    n_lo = int(round(ev.p_discharge_max_kw / step_kw))
    n_hi = int(round(ev.p_charge_max_kw / step_kw))
    levels = np.arange(n_lo, n_hi + 1) * step_kw
    eta = ev.efficiency
    traj = np.full((1, 1), e0)
    for k in range(horizon):
        cur = traj[:, -1]
        if arr <= k < dep:
            nxt = cur[:, None] + eta * levels[None, :] * dt
            ok = (nxt >= ev.soc_min * q - 1e-9) & (nxt <= ev.soc_max * q + 1e-9)
            rows, cols = np.nonzero(ok)
            traj = np.hstack([traj[rows], nxt[rows, cols][:, None]])
        else:
            traj = np.hstack([traj, cur[:, None]])
    window = dep - arr
    need_lo = min(ev.soc_depart_low * q, e0 + eta * ev.p_charge_max_kw * dt * window)
    need_hi = max(ev.soc_depart_high * q, e0 + eta * ev.p_discharge_max_kw * dt * window)
    e_dep = traj[:, dep]
    keep = (e_dep >= need_lo - 1e-9) & (e_dep <= need_hi + 1e-9)
    return traj[keep]


def admits_many(env, trajs, tol=1e-9) -> np.ndarray:
    """Vectorised envelope membership for many trajectories of full length."""
    e = np.asarray(trajs, dtype=float)
    inside = np.all((e >= env.e_lower_kwh - tol) & (e <= env.e_upper_kwh + tol), axis=1)
    diff = e[:, None, :] - e[:, :, None]
    n = e.shape[1]
    iu = np.triu_indices(n, 1)
    d = diff[:, iu[0], iu[1]]
    pair = np.all((d >= env.pair_lower[iu] - tol) & (d <= env.pair_upper[iu] + tol), axis=1)
    return inside & pair


def aggregate_combos(per_ev, rng, n_samples=200):
    """Aggregated trajectories: every EV's extreme (lowest/highest final energy)
    pairing plus random draws of one feasible trajectory per EV."""
    out = []
    extremes = [(t[np.argmin(t[:, -1])], t[np.argmax(t[:, -1])]) for t in per_ev]
    for pick in itertools.product(*extremes):
        out.append(np.sum(pick, axis=0))
    for _ in range(n_samples):
        out.append(np.sum([t[rng.integers(len(t))] for t in per_ev], axis=0))
    return np.array(out)


# ---------------------------------------------------------------------- GAE


def gae_double_sum(rewards, values, gamma, lam):
    """A_t = sum_l (gamma lam)^l delta_{t+l}, each delta recomputed from scratch."""
    T = len(rewards)
    out = np.zeros(T)
    for t in range(T):
        acc = 0.0
        for l in range(T - t):
            delta = rewards[t + l] + gamma * values[t + l + 1] - values[t + l]
            acc += (gamma * lam) ** l * delta
        out[t] = acc
    return out


# -------------------------------------------------------------- tabular CMDP


def tabular_values_by_iteration(P, R, pi1, pi2, gamma, sweeps=4000):
    """Policy evaluation by fixed-point iteration instead of a linear solve."""
    nS = R.shape[0]
    V = np.zeros(nS)
    for _ in range(sweeps):
        Q = R + gamma * np.einsum("sabt,t->sab", P, V)
        V_new = np.einsum("sa,sb,sab->s", pi1, pi2, Q)
        if np.max(np.abs(V_new - V)) < 1e-15:
            V = V_new
            break
        V = V_new
    Q = R + gamma * np.einsum("sabt,t->sab", P, V)
    return V, Q


# ------------------------------------------------------------- finite diffs


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def naive_forward(x, layers):
    """Loop-based MLP forward pass (ReLU hidden, linear output)."""
    h = [list(row) for row in np.atleast_2d(x)]
    n = len(layers) // 2
    for li in range(n):
        W, b = layers[2 * li], layers[2 * li + 1]
        out = []
        for row in h:
            z = [sum(row[i] * W[i, j] for i in range(W.shape[0])) + b[j]
                 for j in range(W.shape[1])]
            out.append([max(v, 0.0) for v in z] if li < n - 1 else z)
        h = out
    return np.array(h)
