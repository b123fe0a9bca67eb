"""Training objectives for every policy variant, plus Adam and the train loop.

Each variant's loss is split in two phases:

* :func:`prepare` draws the per-sample noise ``z`` and times ``t`` from the
  seed and evaluates every stop-gradient quantity (first-stage outputs fed to
  a second stage) outside the tape;
* :func:`objective` builds the differentiable loss on a tape given those
  frozen inputs.

Keeping the frozen inputs explicit is what makes the stop-gradient
semantics testable against finite differences.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndmath as nd
from .nets import NetConfig, PolicyNet, forward, init, predict

log = logging.getLogger(__name__)

KINDS = (
    "Regression",
    "Flow",
    "StraightFlow",
    "TSD",
    "MIP",
    "RR",
    "MIPDagger",
    "MIPNoSupervision",
    "MIPObs",
    "MIPDaggerObs",
)
TWO_STAGE = ("TSD", "MIP", "RR", "MIPDagger", "MIPNoSupervision", "MIPObs", "MIPDaggerObs")
MIP_FAMILY = ("MIP", "MIPDagger", "MIPNoSupervision", "MIPObs", "MIPDaggerObs")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Variant:
    kind: str
    t_star: float = 0.9
    loss_norm: str = "L2"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown variant kind {self.kind!r}")
        if not 0.0 < self.t_star <= 1.0:
            raise ValueError(f"t_star must lie in (0, 1], got {self.t_star}")
        if self.kind in MIP_FAMILY and self.t_star >= 1.0:
            raise ValueError(f"{self.kind} needs t_star < 1")
        if self.loss_norm not in ("L1", "L2"):
            raise ValueError(f"loss_norm must be L1 or L2, got {self.loss_norm!r}")

    @property
    def first_stage_target(self):
        """Coefficient c such that the first stage regresses onto c * a."""
        if self.kind in ("RR", "MIPDagger", "MIPObs", "MIPDaggerObs"):
            return self.t_star
        return 1.0

    @property
    def second_stage_gain(self):
        """Multiplier mapping a first-stage output to the second-stage input."""
        if self.kind in ("RR", "MIPObs"):
            return 1.0
        return self.t_star


def interpolant(z, a, t):
    """I_t = (1 - t) z + t a with t broadcast over rows."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    return (1.0 - t) * z + t * a


def _distance(variant, pred, target):
    diff = nd.sub(pred, target)
    per = nd.square(diff) if variant.loss_norm == "L2" else nd.smooth_abs(diff)
    return nd.mean(nd.row_sum(per))


def _first_stage_obs(variant, O, z_obs):
    if variant.kind in ("MIPObs", "MIPDaggerObs"):
        return O + (1.0 - variant.t_star) * z_obs
    return O


def prepare(variant, net, O, A, seed):
    """Draw noise and evaluate stop-gradient inputs for one minibatch."""
    O = np.asarray(O, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if O.ndim != 2 or A.ndim != 2 or O.shape[0] != A.shape[0] or O.shape[0] == 0:
        raise ValueError(f"bad batch shapes {O.shape}, {A.shape}")
    if O.shape[1] != net.obs_dim or A.shape[1] != net.act_dim:
        raise ValueError("batch dims do not match the network")
    n = O.shape[0]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(A.shape)
    t = rng.uniform(0.0, 1.0, size=n)
    z_obs = rng.standard_normal(O.shape)
    ts = variant.t_star
    frozen = {"z": z, "t": t, "z_obs": z_obs}
    zeros = np.zeros_like(A)
    k = variant.kind
    if k == "RR":
        frozen["second_input"] = predict(net, O, zeros, 0.0)
    elif k == "TSD":
        frozen["second_input"] = ts * predict(net, O, z, 0.0)
    elif k in ("MIPDagger", "MIPNoSupervision"):
        frozen["second_input"] = ts * predict(net, O, zeros, 0.0) + (1.0 - ts) * z
    elif k == "MIPDaggerObs":
        O1 = _first_stage_obs(variant, O, z_obs)
        frozen["second_input"] = ts * predict(net, O1, zeros, 0.0) + (1.0 - ts) * z
    return frozen


def objective(variant, net, params, O, A, frozen):
    """Differentiable loss (a scalar Tensor) given frozen noise/sg inputs."""
    z, t = frozen["z"], frozen["t"]
    ts = variant.t_star
    zeros = np.zeros_like(A)
    k = variant.kind

    def pi(obs, I, tt):
        return forward(net, obs, I, tt, params=params)

    if k == "Regression":
        return _distance(variant, pi(O, zeros, 0.0), A)
    if k == "Flow":
        return _distance(variant, pi(O, interpolant(z, A, t), t), A - z)
    if k == "StraightFlow":
        return _distance(variant, pi(O, z, 0.0), A)
    if k == "MIP":
        return mip_loss_terms(variant, pi, O, A, z, ts)
    if k == "TSD":
        first = _distance(variant, pi(O, z, 0.0), interpolant(z, A, ts) / ts)
        second = _distance(variant, pi(O, frozen["second_input"], ts), A)
        return nd.add(first, second)
    if k == "MIPNoSupervision":
        return _distance(variant, pi(O, frozen["second_input"], ts), A)
    # remaining kinds: first stage regresses to t_star * a
    O1 = _first_stage_obs(variant, O, frozen["z_obs"])
    first = _distance(variant, pi(O1, zeros, 0.0), ts * A)
    if k == "MIPObs":
        second_in = interpolant(z, A, ts)
    else:  # RR, MIPDagger, MIPDaggerObs
        second_in = frozen["second_input"]
    second = _distance(variant, pi(O, second_in, ts), A)
    return nd.add(first, second)


def mip_loss_terms(variant, pi, O, A, z, t_star):
    """MIP: ||pi(o, 0, 0) - a|| + ||pi(o, I_t*, t*) - a|| with unit weights."""
    zeros = np.zeros_like(A)
    first = _distance(variant, pi(O, zeros, 0.0), A)
    second = _distance(variant, pi(O, interpolant(z, A, t_star), t_star), A)
    return nd.add(first, second)


def loss_and_grad(variant, net, O, A, seed, frozen=None):
    """Return ``(loss, grads)``; grads align with ``net.params``."""
    if frozen is None:
        frozen = prepare(variant, net, O, A, seed)
    tape = nd.Tape()
    leaves = [tape.leaf(p) for p in net.params]
    value = objective(variant, net, leaves, np.asarray(O, float), np.asarray(A, float), frozen)
    grads = tape.backward(value)
    loss = value.item()
    if not np.isfinite(loss):
        raise nd.NonFiniteError("loss is not finite")
    return loss, grads


def loss(variant, net, batch, rng_seed):
    """Loss and gradients for a batch given as a list of ``(o, a)`` pairs."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    O = np.stack([np.asarray(o, float).ravel() for o, _ in batch])
    A = np.stack([np.asarray(a, float).ravel() for _, a in batch])
    return loss_and_grad(variant, net, O, A, rng_seed)


def loss_value(variant, net, O, A, seed, params=None, frozen=None):
    """Scalar loss without gradients (for finite-difference checks)."""
    if frozen is None:
        frozen = prepare(variant, net, O, A, seed)
    params = net.params if params is None else params
    return objective(variant, net, params, np.asarray(O, float), np.asarray(A, float), frozen).item()


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            out.append(p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return out


@dataclass(frozen=True)
class OptConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    batch_size: int = 32
    steps: int = 2000
    n_checkpoints: int = 5
    checkpoint_every: int = 0  # 0: spread checkpoints evenly over the run
    seed: int = 0


@dataclass
class TrainResult:
    net: PolicyNet
    losses: list
    checkpoints: list = field(default_factory=list)  # (step, PolicyNet)


def checkpoint_steps(steps, n_checkpoints, every=0):
    """``n_checkpoints`` evenly spaced steps ending at ``steps``.

    With ``every > 0`` the spacing is ``every`` steps (the last checkpoints
    of a run saved at that cadence); otherwise they span the whole run.
    """
    if n_checkpoints <= 0:
        return []
    if every > 0:
        return sorted({steps - i * every for i in range(n_checkpoints) if steps - i * every > 0})
    return sorted({int(round(steps * (i + 1) / n_checkpoints)) for i in range(n_checkpoints)})


def train(variant, net, O, A, opt=OptConfig()):
    """Minibatch Adam on normalized ``(O, A)`` arrays.

    Minibatch indices come from ``opt.seed``; the per-step noise seed is
    derived from ``(opt.seed, step)`` so runs are bit-reproducible.
    """
    O = np.asarray(O, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    n = O.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng([opt.seed, 1])
    params = [p.copy() for p in net.params]
    adam = Adam(params, lr=opt.lr, betas=opt.betas)
    marks = set(checkpoint_steps(opt.steps, opt.n_checkpoints, opt.checkpoint_every))
    cur = net.with_params(params)
    losses, checkpoints = [], []
    bs = min(opt.batch_size, n)
    for step in range(1, opt.steps + 1):
        idx = rng.choice(n, size=bs, replace=False) if bs < n else np.arange(n)
        try:
            value, grads = loss_and_grad(variant, cur, O[idx], A[idx], [opt.seed, 2, step])
        except nd.NonFiniteError as exc:
            raise TrainingDiverged(
                f"{variant.kind}: non-finite loss at step {step} "
                f"(last finite loss {losses[-1] if losses else 'n/a'})"
            ) from exc
        losses.append(value)
        params = adam.step(params, grads)
        cur = net.with_params(params)
        if step in marks:
            checkpoints.append((step, cur.copy()))
    return TrainResult(cur, losses, checkpoints)


@dataclass(frozen=True)
class TrainConfig:
    """JSON-serializable training configuration."""

    variant: str = "MIP"
    t_star: float = 0.9
    loss_norm: str = "L2"
    net: NetConfig = NetConfig()
    opt: OptConfig = OptConfig()

    @property
    def variant_obj(self):
        return Variant(self.variant, self.t_star, self.loss_norm)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        net = NetConfig(**d.pop("net", {}))
        optd = dict(d.pop("opt", {}))
        if "betas" in optd:
            optd["betas"] = tuple(optd["betas"])
        return cls(net=net, opt=OptConfig(**optd), **d)


def init_for(train_config, obs_dim, act_dim):
    return init(train_config.net, obs_dim, act_dim)
