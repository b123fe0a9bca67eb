"""Policy analysis: Lipschitz estimation by action perturbation, Monte-Carlo
Q estimation, off-manifold norms and validation losses.

Policies are callables ``policy(obs, t, rng) -> chunk actions`` in raw
(unnormalized) units, the same interface the rollout code uses.  The
control environments are fully observed, so observations double as
settable states.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndmath as nd
from .samplers import SamplerConfig, default_nfe, sample_action


# --------------------------------------------------------------------------
# helpers


def knn(X, queries, k):
    """Indices of the ``k`` nearest rows of X for each query (exact, ties by index)."""
    X = np.asarray(X, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if k < 1:
        raise ValueError("k must be >= 1")
    if X.shape[0] < k:
        raise ValueError(f"need at least k={k} reference points, have {X.shape[0]}")
    d2 = ((queries[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def action_spread(O_norm, A_norm, k=5):
    """Per-sample ambiguity: max pairwise distance among the actions of the
    k nearest neighbouring states."""
    idx = knn(O_norm, O_norm, k)
    nb = A_norm[idx]  # (n, k, act)
    diff = nb[:, :, None, :] - nb[:, None, :, :]
    return np.sqrt((diff**2).sum(axis=3)).max(axis=(1, 2))


def critical_indices(O_norm, A_norm, n_states, k=5, mode="spread", rng=None):
    """``n_states`` most ambiguous dataset samples (or a uniform draw)."""
    n = O_norm.shape[0]
    n_states = min(n_states, n)
    if mode == "uniform":
        rng = np.random.default_rng(0) if rng is None else rng
        return np.sort(rng.choice(n, size=n_states, replace=False))
    if mode != "spread":
        raise ValueError(f"unknown critical-state mode {mode!r}")
    spread = action_spread(O_norm, A_norm, k)
    return np.argsort(-spread, kind="stable")[:n_states]


def execute_chunk(env, states, chunk_actions):
    """Apply chunk actions open loop; returns (states, reward, done).

    Rows that reach success stop moving and collect reward 1 once.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64)).copy()
    n = states.shape[0]
    steps = np.asarray(chunk_actions, dtype=np.float64).reshape(n, env.chunk, env.step_dim)
    done = np.zeros(n, dtype=bool)
    reward = np.zeros(n)
    for j in range(env.chunk):
        nxt, r, hit = env.step(states, np.where(done[:, None], 0.0, steps[:, j]))
        states = np.where(done[:, None], states, nxt)
        reward += np.where(done, 0.0, r)
        done |= hit
    return states, reward, done


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------------
# Lipschitz


@dataclass
class LipschitzReport:
    L: float
    per_state: list
    eps: float
    n_states: int
    n_perturb: int
    coverage: float = 1.0

    def to_json(self):
        return asdict(self)


def perturb_rollouts(env, stats, states, actions, eps, n_perturb, rng):
    """Perturb normalized expert chunks and execute them.

    Returns ``(nominal_next, perturbed_next, eta)`` with shapes (S, obs),
    (S, P, obs), (S, P, act).
    """
    S = states.shape[0]
    a_bar = stats.norm_act(actions)
    nominal, _, _ = execute_chunk(env, states, actions)
    eta = eps * rng.standard_normal((S, n_perturb, a_bar.shape[1]))
    pert = stats.denorm_act((a_bar[:, None, :] + eta).reshape(S * n_perturb, -1))
    rep = np.repeat(states, n_perturb, axis=0)
    nxt, _, _ = execute_chunk(env, rep, pert)
    return nominal, nxt.reshape(S, n_perturb, -1), eta


def estimate_lipschitz(env, dataset, policy, eps=0.05, n_states=100, n_perturb=64, seed=0,
                       k=5, critical="spread"):
    """Zeroth-order Lipschitz estimate on critical states.

    For each critical state the expert chunk is perturbed in normalized
    units by eta ~ N(0, eps^2 I) and executed; the local constant is
    max_i ||abar_i - abar|| / ||eta_i|| where abar_i is the normalized policy
    output at the i-th perturbed next state and abar the normalized policy
    output at the nominal next state.  L is the mean over states.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    stats = dataset.stats
    O, A = dataset.pairs(env)
    On, An = stats.norm_obs(O), stats.norm_act(A)
    rng = np.random.default_rng([seed, 31])
    idx = critical_indices(On, An, n_states, k, critical, rng)
    nominal, pert, eta = perturb_rollouts(env, stats, O[idx], A[idx], eps, n_perturb, rng)
    S = len(idx)
    base = stats.norm_act(policy(env.observe(nominal), 0, rng))
    flat = env.observe(pert.reshape(S * n_perturb, -1))
    preds = stats.norm_act(policy(flat, 0, rng)).reshape(S, n_perturb, -1)
    per_state = []
    skipped = 0
    for s in range(S):
        if not (np.all(np.isfinite(preds[s])) and np.all(np.isfinite(base[s]))):
            skipped += 1
            continue
        r = np.linalg.norm(preds[s] - base[s], axis=1) / np.linalg.norm(eta[s], axis=1)
        per_state.append(float(r.max()))
    if skipped:
        warnings.warn(f"Lipschitz estimate skipped {skipped}/{S} critical states", RuntimeWarning)
    if not per_state:
        raise RuntimeError("no critical state produced a finite rollout")
    return LipschitzReport(float(np.mean(per_state)), per_state, eps, S, n_perturb, 1.0 - skipped / S)


def perturbed_states(env, dataset, eps=0.05, n_states=32, seed=0, k=5, critical="spread"):
    """One perturbed next state per critical state (for manifold checks)."""
    stats = dataset.stats
    O, A = dataset.pairs(env)
    On, An = stats.norm_obs(O), stats.norm_act(A)
    rng = np.random.default_rng([seed, 32])
    idx = critical_indices(On, An, n_states, k, critical, rng)
    _, pert, _ = perturb_rollouts(env, stats, O[idx], A[idx], eps, 1, rng)
    return pert[:, 0, :]


# --------------------------------------------------------------------------
# Q estimation


@dataclass
class QReport:
    actions: np.ndarray
    q: np.ndarray
    n_mc: int
    horizon: int
    gamma: float = 1.0

    def to_json(self):
        return {"actions": self.actions.tolist(), "q": self.q.tolist(), "n_mc": self.n_mc,
                "horizon": self.horizon, "gamma": self.gamma}


def estimate_q(env, policy, state, n_actions, n_mc, seed=0, t0=0):
    """Q(a_i, o) = r(o, a_i) + mean over n_mc continuation returns.

    ``policy`` must be stochastic for the n_actions draws to differ.  The
    first action executes one chunk from ``state`` (env time ``t0``); the
    continuation runs the same policy to the horizon.  Rewards are sparse
    and undiscounted.
    """
    from .envs import rollout

    if not hasattr(env, "step"):
        raise ValueError("environment cannot be reset to a state")
    state = np.atleast_2d(np.asarray(state, dtype=np.float64))
    if state.shape[0] != 1:
        raise ValueError("estimate_q takes a single state")
    rng = np.random.default_rng([seed, 41])
    acts = np.asarray(policy(env.observe(np.repeat(state, n_actions, axis=0)), t0, rng), dtype=np.float64)
    nxt, r, done = execute_chunk(env, np.repeat(state, n_actions, axis=0), acts)
    q = r.copy()
    remaining = env.horizon - t0 - env.chunk
    live = ~done
    if remaining > 0 and live.any():
        sub = _with_horizon(env, remaining)
        starts = np.repeat(nxt[live], n_mc, axis=0)
        _, succ = rollout(sub, lambda o, t, g: policy(o, t + t0 + env.chunk, g), starts, rng, record=False)
        q[live] += succ.reshape(-1, n_mc).mean(axis=1)
    return QReport(acts, q, n_mc, env.horizon)


def _with_horizon(env, horizon):
    import copy

    sub = copy.copy(env)
    sub.horizon = int(horizon)
    return sub


# --------------------------------------------------------------------------
# manifold adherence


@dataclass
class ManifoldReport:
    off_l2: float
    off_l1: float
    per_state_l2: list
    per_state_l1: list
    k: int
    validation_l2: float = float("nan")
    validation_l1: float = float("nan")

    def to_json(self):
        return asdict(self)


def off_manifold_norm(O_train, A_train, queries, predictions, k=5):
    """Residual of each prediction after projection onto the span of the
    actions at its k nearest training states (all in normalized units).

    Returns a :class:`ManifoldReport` with L2 (least squares) and L1
    (least absolute deviations) residuals averaged over queries.
    """
    O_train = np.asarray(O_train, dtype=np.float64)
    A_train = np.asarray(A_train, dtype=np.float64)
    predictions = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    idx = knn(O_train, queries, k)
    l2, l1 = [], []
    for row, pred in zip(idx, predictions):
        basis = A_train[row].T  # (act_dim, k)
        l2.append(nd.lstsq_residual(basis, pred))
        l1.append(nd.lstsq_residual_l1(basis, pred))
    return ManifoldReport(float(np.mean(l2)), float(np.mean(l1)), l2, l1, k)


def manifold_study(env, dataset, net, variant, val_O, val_A, sampler=None, n_states=32, k=5, eps=0.05, seed=0):
    """Off-manifold norms at perturbed states plus validation losses."""
    sampler = SamplerConfig(nfe=default_nfe(variant)) if sampler is None else sampler
    stats = dataset.stats
    O, A = dataset.pairs(env)
    On, An = stats.norm_obs(O), stats.norm_act(A)
    q = stats.norm_obs(env.observe(perturbed_states(env, dataset, eps, n_states, seed, k)))
    pred = sample_action(net, variant, q, sampler)
    rep = off_manifold_norm(On, An, q, pred, k)
    rep.validation_l2 = validation_loss(net, variant, val_O, val_A, "L2", sampler)
    rep.validation_l1 = validation_loss(net, variant, val_O, val_A, "L1", sampler)
    return rep


def validation_loss(net, variant, O, A, norm="L2", sampler=None):
    """Mean per-sample error of deterministic (z = 0) inference on a held-out split."""
    O = np.asarray(O, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if O.shape[0] == 0:
        raise ValueError("empty validation split")
    sampler = SamplerConfig(nfe=default_nfe(variant)) if sampler is None else sampler
    if sampler.mode != "deterministic_z0":
        raise ValueError("validation loss uses deterministic inference")
    pred = sample_action(net, variant, O, sampler)
    return prediction_loss(pred, A, norm)


def prediction_loss(pred, target, norm="L2"):
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if norm == "L2":
        return float(np.mean(np.sum(diff**2, axis=1)))
    if norm == "L1":
        return float(np.mean(np.sum(np.abs(diff), axis=1)))
    raise ValueError(f"unknown norm {norm!r}")


# --------------------------------------------------------------------------
# piecewise-projection metrics


def _rel_residual(P, F):
    num = np.linalg.norm(F - F @ P.T, axis=1)
    den = np.linalg.norm(F, axis=1)
    return num / den


def _nanmean(x):
    x = x[~np.isnan(x)]
    return float(x.mean()) if x.size else float("nan")


def appg_projection_metrics(predict_fn, task, n_points=512, boundary_width=0.02):
    """Projection metrics ``||(I - P) f|| / ||f||`` on a uniform grid of c.

    * ``subspace_diagonal``: P = P_i for the piece containing c;
    * ``off_diagonal``: mean over the other pieces j != i of the same ratio
      with P_j (how far predictions stay from the wrong subspaces);
    * ``boundary``: points within ``boundary_width`` of an interior edge,
      with P the projector onto the span of both adjacent subspaces.

    ``predict_fn(c)`` maps an (n, 1) array to (n, d) predictions.  Points
    with zero-norm predictions are excluded and counted.
    """
    c = ((np.arange(n_points) + 0.5) / n_points).reshape(-1, 1)
    F = np.asarray(predict_fn(c), dtype=np.float64)
    ok = np.linalg.norm(F, axis=1) > 0
    pieces = task.piece(c)
    diag = np.full(n_points, np.nan)
    off = np.full(n_points, np.nan)
    for i in range(task.m):
        sel = ok & (pieces == i)
        if not sel.any():
            continue
        diag[sel] = _rel_residual(task.projectors[i], F[sel])
        others = [_rel_residual(task.projectors[j], F[sel]) for j in range(task.m) if j != i]
        off[sel] = np.mean(others, axis=0)
    bvals = []
    for e in range(1, task.m):
        sel = ok & (np.abs(c[:, 0] - task.edges[e]) <= boundary_width)
        if sel.any():
            bvals.append(_rel_residual(task.boundary_projector(e - 1), F[sel]))
    boundary = float(np.mean(np.concatenate(bvals))) if bvals else float("nan")
    return {
        "subspace_diagonal": _nanmean(diag),
        "off_diagonal": _nanmean(off),
        "boundary": boundary,
        "excluded": int((~ok).sum()),
    }


# --------------------------------------------------------------------------
# records


@dataclass
class MetricRecord:
    metric: str
    variant: str
    seed: int
    checkpoint: int
    value: float
    config_hash: str
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def write_jsonl(records, path):
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def fmt(x):
    """17 significant digits: exact round trip for float64."""
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(rows, path, columns):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) for c in columns])
