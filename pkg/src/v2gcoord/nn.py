"""Small fully connected networks with hand-written forward/backward passes,
a diagonal Gaussian policy head, Adam, and the Fisher-vector product used by
the trust-region updates."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class MlpShape:
    input_dim: int
    hidden_dims: tuple = (64, 64)
    output_dim: int = 1

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError("all layer dims must be >= 1")

    @property
    def dims(self) -> tuple:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    def layout(self) -> list[tuple[str, tuple]]:
        out = []
        d = self.dims
        for i in range(len(d) - 1):
            out.append((f"W{i}", (d[i], d[i + 1])))
            out.append((f"b{i}", (d[i + 1],)))
        return out


def layout_size(layout) -> int:
    return int(sum(np.prod(shape) for _, shape in layout))


def unflatten(flat: np.ndarray, layout) -> list[np.ndarray]:
    out, i = [], 0
    for _, shape in layout:
        n = int(np.prod(shape))
        out.append(flat[i:i + n].reshape(shape))
        i += n
    if i != flat.size:
        raise ValueError("flat vector length does not match layout")
    return out


def flatten(arrays) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=float).ravel() for a in arrays])


class Mlp:
    """ReLU hidden layers and a linear output; parameters live in one flat vector
    (``self.params``) that the layer matrices view into."""

    def __init__(self, shape: MlpShape, rng: np.random.Generator | None = None,
                 output_scale: float = 1.0):
        self.shape = shape
        self.layout = shape.layout()
        self.params = np.zeros(layout_size(self.layout))
        if rng is not None:
            self.init_params(rng, output_scale)
        self._cache = None

    def init_params(self, rng, output_scale=1.0):
        chunks = []
        n_layers = len(self.shape.dims) - 1
        for li in range(n_layers):
            fan_in, fan_out = self.shape.dims[li], self.shape.dims[li + 1]
            gain = np.sqrt(2.0) if li < n_layers - 1 else output_scale
            w = rng.normal(0.0, gain / np.sqrt(fan_in), (fan_in, fan_out))
            chunks += [w, np.zeros(fan_out)]
        self.params[:] = flatten(chunks)

    @property
    def layers(self):
        return unflatten(self.params, self.layout)

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != self.params.shape:
            raise ValueError("parameter vector has the wrong length")
        self.params = flat.copy()

    def forward(self, x, params=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.shape.input_dim:
            raise ValueError(f"expected input dim {self.shape.input_dim}, got {x.shape[1]}")
        layers = unflatten(self.params if params is None else params, self.layout)
        acts = [x]
        pre = []
        h = x
        n = len(layers) // 2
        for li in range(n):
            z = h @ layers[2 * li] + layers[2 * li + 1]
            pre.append(z)
            h = np.maximum(z, 0.0) if li < n - 1 else z
            acts.append(h)
        self._cache = (acts, pre, layers, self.params.copy() if params is None else params)
        return h

    def backward(self, output_grad) -> np.ndarray:
        """Gradient of ``sum(output * output_grad)`` w.r.t. the flat parameters,
        using the activations cached by the last ``forward``."""
        if self._cache is None:
            raise RuntimeError("backward() without a cached forward pass")
        acts, pre, layers, used = self._cache
        g = np.atleast_2d(np.asarray(output_grad, dtype=float))
        if g.shape != acts[-1].shape:
            raise ValueError("output_grad shape does not match the cached output")
        n = len(layers) // 2
        grads = [None] * len(layers)
        for li in reversed(range(n)):
            if li < n - 1:
                g = g * (pre[li] > 0)
            grads[2 * li] = acts[li].T @ g
            grads[2 * li + 1] = g.sum(axis=0)
            g = g @ layers[2 * li].T
        return flatten(grads)

    def jvp(self, x, v) -> np.ndarray:
        """Forward-mode derivative of the output along parameter direction ``v``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        layers = self.layers
        dl = unflatten(np.asarray(v, dtype=float), self.layout)
        h, dh = x, np.zeros_like(x)
        n = len(layers) // 2
        for li in range(n):
            z = h @ layers[2 * li] + layers[2 * li + 1]
            dz = dh @ layers[2 * li] + h @ dl[2 * li] + dl[2 * li + 1]
            if li < n - 1:
                mask = z > 0
                h, dh = z * mask, dz * mask
            else:
                h, dh = z, dz
        return dh


def squash(x):
    """tanh written as the rescaled logistic 2*sigmoid(2x) - 1, range (-1, 1)."""
    return np.tanh(x)


@dataclass
class GaussianPolicyOut:
    mean: np.ndarray  # (batch, act_dim)
    log_std: np.ndarray  # (act_dim,)


def gaussian_log_prob(out: GaussianPolicyOut, action) -> np.ndarray:
    a = np.atleast_2d(np.asarray(action, dtype=float))
    std = np.exp(out.log_std)
    z = (a - out.mean) / std
    return np.sum(-0.5 * z ** 2 - out.log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_kl(p: GaussianPolicyOut, q: GaussianPolicyOut) -> np.ndarray:
    """KL(p || q) per batch row for diagonal Gaussians."""
    var_p = np.exp(2 * p.log_std)
    var_q = np.exp(2 * q.log_std)
    return np.sum(q.log_std - p.log_std + (var_p + (p.mean - q.mean) ** 2) / (2 * var_q) - 0.5,
                  axis=-1)


class GaussianPolicy:
    """Diagonal Gaussian with a squashed state-dependent mean and a learnable,
    state-independent log standard deviation. Flat parameters are the MLP
    parameters followed by the log-std vector."""

    def __init__(self, obs_dim: int, act_dim: int = 1, hidden=(64, 64),
                 rng: np.random.Generator | None = None, log_std_init: float = -0.5):
        self.net = Mlp(MlpShape(obs_dim, tuple(hidden), act_dim), rng, output_scale=0.01)
        self.act_dim = act_dim
        self.log_std = np.full(act_dim, float(log_std_init))
        self.layout = self.net.layout + [("log_std", (act_dim,))]

    @property
    def n_params(self) -> int:
        return self.net.params.size + self.act_dim

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.net.params, self.log_std])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError("parameter vector has the wrong length")
        self.net.set_params(flat[:-self.act_dim])
        self.log_std = np.clip(flat[-self.act_dim:], LOG_STD_MIN, LOG_STD_MAX)

    def dist(self, obs) -> GaussianPolicyOut:
        return GaussianPolicyOut(squash(self.net.forward(obs)), self.log_std.copy())

    def sample(self, obs, rng) -> tuple[np.ndarray, np.ndarray]:
        """Sample an action for one observation; returns (action, log_prob)."""
        d = self.dist(obs)
        a = d.mean[0] + np.exp(d.log_std) * rng.standard_normal(self.act_dim)
        return a, float(gaussian_log_prob(d, a)[0])

    def log_prob(self, obs, actions) -> np.ndarray:
        return gaussian_log_prob(self.dist(obs), actions)

    def grad_weighted_log_prob(self, obs, actions, weights) -> np.ndarray:
        """Gradient of sum_t weights[t] * log pi(a_t | s_t)."""
        d = self.dist(obs)
        a = np.atleast_2d(actions)
        w = np.asarray(weights, dtype=float)[:, None]
        var = np.exp(2 * d.log_std)
        z2 = (a - d.mean) ** 2 / var
        g_mean = w * (a - d.mean) / var
        g_pre = g_mean * (1.0 - d.mean ** 2)
        g_net = self.net.backward(g_pre)
        g_log_std = np.sum(w * (z2 - 1.0), axis=0)
        return np.concatenate([g_net, g_log_std])

    def kl_from(self, old: GaussianPolicyOut, obs) -> float:
        """Mean KL(old || self) over the batch."""
        return float(np.mean(gaussian_kl(old, self.dist(obs))))

    def kl_grad(self, old: GaussianPolicyOut, obs) -> np.ndarray:
        """Gradient of mean KL(old || self) w.r.t. this policy's parameters."""
        new = self.dist(obs)
        n = new.mean.shape[0]
        var_q = np.exp(2 * new.log_std)
        var_p = np.exp(2 * old.log_std)
        g_mean = (new.mean - old.mean) / var_q / n
        g_net = self.net.backward(g_mean * (1.0 - new.mean ** 2))
        g_ls = np.sum(1.0 - (var_p + (old.mean - new.mean) ** 2) / var_q, axis=0) / n
        return np.concatenate([g_net, g_ls])

    def fisher_vector_product(self, obs, v, damping: float = 0.0) -> np.ndarray:
        """(H + damping I) v with H the Hessian of the mean KL(pi_old || pi) at
        pi = pi_old. For this family it equals the Gauss-Newton form
        J_mu^T diag(1/sigma^2) J_mu / n on the mean and 2 I on the log-std."""
        v = np.asarray(v, dtype=float)
        vn, vs = v[:-self.act_dim], v[-self.act_dim:]
        d = self.dist(obs)
        n = d.mean.shape[0]
        dmean_dpre = 1.0 - d.mean ** 2
        jv = self.net.jvp(obs, vn) * dmean_dpre
        u = jv / np.exp(2 * d.log_std) / n
        self.net.forward(obs)
        g_net = self.net.backward(u * dmean_dpre)
        return np.concatenate([g_net, 2.0 * vs]) + damping * v


class Adam:
    def __init__(self, size: int, lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad) -> np.ndarray:
        """One descent step; returns the new parameter vector."""
        new, self.m, self.v, self.t = adam_step(params, grad, self.m, self.v, self.t,
                                                self.lr, self.betas, self.eps)
        return new


def adam_step(params, grad, m, v, t, lr=5e-4, betas=(0.9, 0.999), eps=1e-8):
    b1, b2 = betas
    t = t + 1
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad ** 2
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), m, v, t


CHECKPOINT_VERSION = 1


def layout_to_json(layout):
    return [[name, list(shape)] for name, shape in layout]


def check_layout(expected, found):
    exp = layout_to_json(expected)
    if exp != found:
        diff = [f"{e} != {f}" for e, f in zip(exp, found) if e != f]
        if len(exp) != len(found):
            diff.append(f"{len(exp)} layers expected, {len(found)} found")
        raise ValueError("checkpoint layout mismatch: " + "; ".join(diff))


def dump_params(layout, values, moments=None) -> dict:
    out = {"version": CHECKPOINT_VERSION, "layout": layout_to_json(layout),
           "values": [float(x) for x in values]}
    if moments is not None:
        out["adam"] = {"m": [float(x) for x in moments.m], "v": [float(x) for x in moments.v],
                       "t": moments.t}
    return out


def load_params(blob: dict, layout, moments: Adam | None = None) -> np.ndarray:
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    check_layout(layout, blob["layout"])
    values = np.array(blob["values"], dtype=float)
    if values.size != layout_size(layout):
        raise ValueError("checkpoint value count does not match layout")
    if moments is not None and "adam" in blob:
        moments.m = np.array(blob["adam"]["m"], dtype=float)
        moments.v = np.array(blob["adam"]["v"], dtype=float)
        moments.t = int(blob["adam"]["t"])
    return values


def save_json(path, blob):
    with open(path, "w") as fh:
        json.dump(blob, fh)
