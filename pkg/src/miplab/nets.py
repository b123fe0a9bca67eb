"""Conditional MLP policy ``pi(o, I, t)`` shared by every training variant."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndmath as nd

CHECKPOINT_FORMAT = "miplab-policynet"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    """MLP shape and conditioning.

    ``depth`` counts affine layers, so ``depth=3`` is two hidden layers.
    ``t_embedding`` is ``"raw"`` (t appended as one scalar feature) or
    ``"sinusoidal"`` with ``t_features`` sin/cos features.
    """

    hidden: int = 64
    depth: int = 3
    activation: str = "relu"
    t_embedding: str = "raw"
    t_features: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.hidden < 8:
            raise ValueError(f"hidden must be >= 8, got {self.hidden}")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.t_embedding not in ("raw", "sinusoidal"):
            raise ValueError(f"unknown t_embedding {self.t_embedding!r}")
        if self.t_embedding == "sinusoidal" and (self.t_features < 2 or self.t_features % 2):
            raise ValueError("sinusoidal t_features must be a positive even number")

    @property
    def t_dim(self):
        return 1 if self.t_embedding == "raw" else self.t_features


@dataclass
class PolicyNet:
    config: NetConfig
    obs_dim: int
    act_dim: int
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    calls: int = 0  # forward-pass counter, used to audit NFE

    @property
    def in_dim(self):
        return self.obs_dim + self.act_dim + self.config.t_dim

    @property
    def params(self):
        """Flat parameter list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_params(self, params):
        ws, bs = params[0::2], params[1::2]
        return PolicyNet(
            self.config,
            self.obs_dim,
            self.act_dim,
            [np.array(w, dtype=np.float64) for w in ws],
            [np.array(b, dtype=np.float64) for b in bs],
        )

    def copy(self):
        return self.with_params(self.params)

    def num_params(self):
        return int(sum(p.size for p in self.params))


def param_count(obs_dim, act_dim, config):
    """Closed-form affine parameter count for the MLP layout."""
    d_in = obs_dim + act_dim + config.t_dim
    h, depth = config.hidden, config.depth
    return (d_in * h + h) + (depth - 2) * (h * h + h) + (h * act_dim + act_dim)


def _orthogonal(rng, n_in, n_out, gain):
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def init(config, obs_dim, act_dim):
    """Orthogonal weights, zero biases, reproducible from ``config.seed``."""
    if obs_dim < 1 or act_dim < 1:
        raise ValueError(f"dims must be positive, got obs_dim={obs_dim}, act_dim={act_dim}")
    rng = np.random.default_rng(config.seed)
    d_in = obs_dim + act_dim + config.t_dim
    sizes = [d_in] + [config.hidden] * (config.depth - 1) + [act_dim]
    hidden_gain = np.sqrt(2.0) if config.activation == "relu" else 1.0
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = 1.0 if i == len(sizes) - 2 else hidden_gain
        weights.append(_orthogonal(rng, n_in, n_out, gain))
        biases.append(np.zeros(n_out))
    return PolicyNet(config, obs_dim, act_dim, weights, biases)


def embed_time(config, t, n):
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    if config.t_embedding == "raw":
        return t[:, None].copy()
    k = config.t_features // 2
    freqs = np.pi * 2.0 ** np.arange(k)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def forward(net, o, I, t, params=None):
    """Evaluate ``pi(o, I, t)`` on a batch.

    ``o`` is (n, obs_dim), ``I`` is (n, act_dim), ``t`` a scalar or (n,)
    array.  ``params`` optionally replaces the stored arrays, e.g. with tape
    leaves; ``o`` and ``I`` may themselves be tape tensors.  Returns an
    (n, act_dim) :class:`~miplab.ndmath.Tensor`.
    """
    o = nd.as_tensor(o)
    I = nd.as_tensor(I)
    if o.data.ndim != 2 or I.data.ndim != 2:
        raise ValueError("o and I must be 2-D (batch, dim)")
    n = o.shape[0]
    if o.shape[1] != net.obs_dim or I.shape != (n, net.act_dim):
        raise ValueError(
            f"expected o (n, {net.obs_dim}) and I (n, {net.act_dim}), got {o.shape}, {I.shape}"
        )
    net.calls += 1
    if params is None:
        params = net.params
    act = nd.relu if net.config.activation == "relu" else nd.gelu
    h = nd.concat([o, I, embed_time(net.config, t, n)])
    n_layers = len(params) // 2
    for i in range(n_layers):
        h = nd.add(nd.matmul(h, params[2 * i]), params[2 * i + 1])
        if i < n_layers - 1:
            h = act(h)
    return h


def predict(net, o, I, t):
    """Plain numpy forward (no tape)."""
    return forward(net, o, I, t).data


def spectral_bound(net):
    """Product of layer spectral norms: a Lipschitz bound for the whole map."""
    return float(np.prod([np.linalg.norm(W, 2) for W in net.weights]))


def save_checkpoint(net, path, meta=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(net.config),
        "obs_dim": net.obs_dim,
        "act_dim": net.act_dim,
        "meta": meta or {},
        "params": {
            f"{kind}{i}": p.tolist()
            for i, (W, b) in enumerate(zip(net.weights, net.biases))
            for kind, p in (("W", W), ("b", b))
        },
    }
    with open(path, "w") as f:
        json.dump(payload, f)


def load_checkpoint(path):
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a policy checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    config = NetConfig(**payload["config"])
    n = len(payload["params"]) // 2
    weights = [np.array(payload["params"][f"W{i}"], dtype=np.float64) for i in range(n)]
    biases = [np.array(payload["params"][f"b{i}"], dtype=np.float64) for i in range(n)]
    net = PolicyNet(config, payload["obs_dim"], payload["act_dim"], weights, biases)
    return net, payload["meta"]
