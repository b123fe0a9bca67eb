"""Deterministic toy environments, scripted experts and dataset tooling.

Control tasks (``NarrowGap2D``, ``ForkMaze2D``, ``LinearGaussian``) share a
batched interface: states are ``(n, state_dim)`` arrays, ``step`` is a pure
function of ``(states, actions)`` and the reward is 1 exactly on the step
that reaches success.  Policies act in action chunks: one call returns
``chunk`` consecutive per-step actions flattened into one vector.

``Sin1OverX`` and ``PiecewiseProjection`` are single-step supervised tasks
(no dynamics, no success predicate).
"""

from __future__ import annotations

import copy
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

DATASET_FORMAT = "miplab-dataset"
DATASET_VERSION = 1


class ExpertFailure(RuntimeError):
    """Scripted expert or relabeling policy could not fill its quota."""


# --------------------------------------------------------------------------
# geometry


def _segment_hit(p, d, rects):
    """Earliest entry fraction in [0, 1] of segments p + s d into open rects.

    Returns an (n,) array; 1.0 where nothing is hit.
    """
    n = p.shape[0]
    tau = np.ones(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        for x0, y0, x1, y1 in rects:
            enter = np.full(n, -np.inf)
            leave = np.full(n, np.inf)
            for ax, lo, hi in ((0, x0, x1), (1, y0, y1)):
                pa, da = p[:, ax], d[:, ax]
                still = da == 0.0
                t1 = (lo - pa) / da
                t2 = (hi - pa) / da
                e = np.where(still, np.where((pa > lo) & (pa < hi), -np.inf, np.inf), np.minimum(t1, t2))
                l_ = np.where(still, np.where((pa > lo) & (pa < hi), np.inf, -np.inf), np.maximum(t1, t2))
                enter = np.maximum(enter, e)
                leave = np.minimum(leave, l_)
            hit = (enter < leave) & (leave > 0.0) & (enter < 1.0)
            tau = np.where(hit, np.minimum(tau, np.clip(enter, 0.0, 1.0)), tau)
    return tau


def _box_exit(p, d):
    """Largest fraction in [0, 1] keeping p + s d inside the unit square."""
    s = np.ones(p.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        for ax in (0, 1):
            pa, da = p[:, ax], d[:, ax]
            lim = np.where(da > 0, (1.0 - pa) / da, np.where(da < 0, -pa / da, np.inf))
            s = np.minimum(s, np.clip(lim, 0.0, 1.0))
    return s


# --------------------------------------------------------------------------
# control environments


class PointEnv:
    """Point mass in the unit square with rectangular obstacles and a goal disc."""

    kind = "point"
    state_dim = 2
    obs_dim = 2
    step_dim = 2

    def __init__(self, a_max, horizon, chunk, goal, goal_radius, obstacles):
        self.a_max = float(a_max)
        self.horizon = int(horizon)
        self.chunk = int(chunk)
        self.goal = np.asarray(goal, dtype=np.float64)
        self.goal_radius = float(goal_radius)
        self.obstacles = [tuple(map(float, r)) for r in obstacles]

    @property
    def act_dim(self):
        return self.chunk * self.step_dim

    def observe(self, states):
        return np.asarray(states, dtype=np.float64).copy()

    def success(self, states):
        states = np.atleast_2d(states)
        return np.linalg.norm(states - self.goal, axis=1) <= self.goal_radius

    def move(self, states, actions):
        """Clipped displacement that stops at the first obstacle face."""
        p = np.atleast_2d(np.asarray(states, dtype=np.float64))
        d = np.clip(np.atleast_2d(np.asarray(actions, dtype=np.float64)), -self.a_max, self.a_max)
        s = np.minimum(_segment_hit(p, d, self.obstacles), _box_exit(p, d))
        # clip guards the box against rounding in p + s d
        return np.clip(p + s[:, None] * d, 0.0, 1.0)

    def step(self, states, actions):
        """Returns ``(next_states, reward, done)`` for a batch."""
        nxt = self.move(states, actions)
        done = self.success(nxt)
        return nxt, done.astype(np.float64), done

    def in_obstacle(self, states):
        states = np.atleast_2d(states)
        inside = np.zeros(states.shape[0], dtype=bool)
        for x0, y0, x1, y1 in self.obstacles:
            inside |= (
                (states[:, 0] > x0) & (states[:, 0] < x1) & (states[:, 1] > y0) & (states[:, 1] < y1)
            )
        return inside

    def params(self):
        raise NotImplementedError


class NarrowGap2D(PointEnv):
    """Slab wall at x in [0.45, 0.55] pierced by a corridor of width ``w``
    centred at y = 0.5; the goal disc sits behind it.

    The default step bound leaves a clean expert about 15% slack on the
    64-step horizon, so the task is precise in space (the corridor) and in
    time (a policy that dawdles runs out of steps).
    """

    kind = "NarrowGap2D"

    def __init__(self, w=0.1, a_max=0.012, horizon=64, chunk=8, goal=(0.8, 0.5), goal_radius=0.08,
                 wall=(0.45, 0.55), start_x=(0.05, 0.08), start_y=(0.35, 0.65)):
        self.w = float(w)
        self.wall = tuple(map(float, wall))
        self.start_x = tuple(start_x)
        self.start_y = tuple(start_y)
        x0, x1 = self.wall
        obstacles = [(x0, -1.0, x1, 0.5 - w / 2), (x0, 0.5 + w / 2, x1, 2.0)]
        super().__init__(a_max, horizon, chunk, goal, goal_radius, obstacles)

    def reset(self, rng, n):
        xs = rng.uniform(*self.start_x, size=n)
        ys = rng.uniform(*self.start_y, size=n)
        return np.stack([xs, ys], axis=1)

    def waypoints(self, states):
        """Expert route: line up before the corridor, run through it, go home."""
        states = np.atleast_2d(states)
        x0, x1 = self.wall
        pre = np.array([x0 - 0.05, 0.5])
        post = np.array([x1 + 0.02, 0.5])
        wp = np.empty_like(states)
        before = states[:, 0] < x0 - 0.05 + 1e-9
        aligned = np.abs(states[:, 1] - 0.5) < 1e-9
        inside = states[:, 0] < x1
        wp[:] = self.goal
        wp[inside] = post
        wp[before & ~aligned] = pre
        return wp

    def params(self):
        return {
            "w": self.w, "a_max": self.a_max, "horizon": self.horizon, "chunk": self.chunk,
            "start_x": list(self.start_x), "start_y": list(self.start_y),
        }


class ForkMaze2D(PointEnv):
    """A square obstacle blocks the straight path; go round it left (above)
    or right (below)."""

    kind = "ForkMaze2D"

    def __init__(self, a_max=0.03, horizon=64, chunk=8, goal=(0.85, 0.5), goal_radius=0.08,
                 block=(0.4, 0.35, 0.6, 0.65), start_y=(0.3, 0.7)):
        self.block = tuple(map(float, block))
        self.start_y = tuple(start_y)
        super().__init__(a_max, horizon, chunk, goal, goal_radius, [self.block])

    def reset(self, rng, n):
        xs = rng.uniform(0.05, 0.15, size=n)
        ys = rng.uniform(*self.start_y, size=n)
        return np.stack([xs, ys], axis=1)

    def waypoints(self, states, side):
        """``side`` is +1 (left / above) or -1 (right / below) per row."""
        states = np.atleast_2d(states)
        x0, y0, x1, y1 = self.block
        # lane y clears the block by 0.1; corners first so no leg cuts the block
        lane = 0.5 + np.asarray(side, dtype=np.float64) * (0.5 * (y1 - y0) + 0.1)
        x = states[:, 0]
        wp = np.repeat(self.goal[None, :], len(states), axis=0)
        far = np.where(x < x0 - 1e-9, x0, x1)
        near = x < x1 - 1e-9
        wp[near] = np.stack([far, lane], axis=1)[near]
        return wp

    def classify(self, states):
        """'left', 'right' or 'other' from the side the path passed the block."""
        states = np.atleast_2d(states)
        x0, _, x1, _ = self.block
        mask = (states[:, 0] >= x0) & (states[:, 0] <= x1)
        if not mask.any():
            return "other"
        y = states[mask, 1]
        if np.all(y > 0.5):
            return "left"
        if np.all(y < 0.5):
            return "right"
        return "other"

    def params(self):
        return {"a_max": self.a_max, "horizon": self.horizon, "chunk": self.chunk}


class LinearGaussian:
    """o ~ N(0, I), expert a = Theta o + sigma * noise; transition o' = a.

    With ``chunk=1`` a policy's output is the next state, which makes the
    Lipschitz estimator's difference quotients available in closed form.
    """

    kind = "LinearGaussian"
    chunk = 1

    def __init__(self, theta, sigma=0.0, horizon=1):
        self.theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        self.sigma = float(sigma)
        self.horizon = int(horizon)
        self.obs_dim = self.state_dim = self.theta.shape[1]
        self.act_dim = self.step_dim = self.theta.shape[0]

    def reset(self, rng, n):
        return rng.standard_normal((n, self.obs_dim))

    def observe(self, states):
        return np.asarray(states, dtype=np.float64).copy()

    def step(self, states, actions):
        nxt = np.atleast_2d(np.asarray(actions, dtype=np.float64)).copy()
        zero = np.zeros(nxt.shape[0])
        return nxt, zero, zero.astype(bool)

    def success(self, states):
        return np.zeros(np.atleast_2d(states).shape[0], dtype=bool)

    def expert(self, states, rng):
        a = states @ self.theta.T
        if self.sigma > 0:
            a = a + self.sigma * rng.standard_normal(a.shape)
        return a

    def params(self):
        return {"theta": self.theta.tolist(), "sigma": self.sigma}


# --------------------------------------------------------------------------
# supervised toy tasks


class Sin1OverX:
    """y = sin(1/x) for x ~ U[0.05, 1]."""

    kind = "Sin1OverX"
    obs_dim = 1
    act_dim = 1

    def __init__(self, lo=0.05, hi=1.0):
        self.lo, self.hi = lo, hi

    def target(self, x):
        return np.sin(1.0 / np.asarray(x))

    def sample(self, rng, n):
        x = rng.uniform(self.lo, self.hi, size=(n, 1))
        return x, self.target(x)


class PiecewiseProjection:
    """c in [0, 1] split into ``m`` pieces; on piece i the target is
    P_i g(c) with P_i an orthogonal projector onto a random k-dim subspace
    of R^d and g a smooth curve."""

    kind = "PiecewiseProjection"
    obs_dim = 1

    def __init__(self, d=16, k=4, m=4, seed=0):
        self.d, self.k, self.m = d, k, m
        self.act_dim = d
        rng = np.random.default_rng(seed)
        self.bases = []
        for _ in range(m):
            q, _ = np.linalg.qr(rng.standard_normal((d, k)))
            self.bases.append(q)
        self.projectors = [U @ U.T for U in self.bases]
        self.freq = rng.uniform(0.5, 2.0, size=d)
        self.phase = rng.uniform(0.0, 2 * np.pi, size=d)
        self.edges = np.linspace(0.0, 1.0, m + 1)

    def piece(self, c):
        c = np.asarray(c, dtype=np.float64).ravel()
        return np.clip(np.searchsorted(self.edges, c, side="right") - 1, 0, self.m - 1)

    def g(self, c):
        c = np.asarray(c, dtype=np.float64).reshape(-1, 1)
        return np.sin(2 * np.pi * self.freq[None, :] * c + self.phase[None, :]) + 0.5

    def target(self, c):
        c = np.asarray(c, dtype=np.float64).reshape(-1, 1)
        G = self.g(c)
        idx = self.piece(c)
        out = np.empty_like(G)
        for i in range(self.m):
            sel = idx == i
            out[sel] = G[sel] @ self.projectors[i].T
        return out

    def boundary_projector(self, i):
        """Projector onto span(range P_i + range P_{i+1})."""
        U = np.concatenate([self.bases[i], self.bases[i + 1]], axis=1)
        q, r = np.linalg.qr(U)
        rank = int(np.sum(np.abs(np.diag(r)) > 1e-10))
        q = q[:, :rank]
        return q @ q.T

    def sample(self, rng, n):
        c = rng.uniform(0.0, 1.0, size=(n, 1))
        return c, self.target(c)


# --------------------------------------------------------------------------
# scripted experts


@dataclass(frozen=True)
class ExpertStyle:
    """``kind`` in clean | noisy | delayed | left | right | split | mixed.

    Corruptions compose with any route kind: ``sigma > 0`` adds Gaussian
    noise to every executed step; ``p > 0`` delays a fraction ``p`` of
    episodes.  A delayed episode freezes for ``duration`` steps at chunk
    boundaries in ``[chunk, window)``: once, at a random boundary, when
    ``rate == 0``; otherwise independently at each boundary with
    probability ``rate``.  ``noisy`` and ``delayed`` name those corruptions
    on the default route.
    left/right/split/mixed: ForkMaze2D route choice (split = by side of the
    symmetry axis at the start, mixed = fair coin per episode).
    """

    kind: str = "clean"
    sigma: float = 0.0
    p: float = 0.0
    duration: int = 8
    rate: float = 0.0
    window: int = 48

    def __post_init__(self):
        if self.kind not in ("clean", "noisy", "delayed", "left", "right", "split", "mixed"):
            raise ValueError(f"unknown expert style {self.kind!r}")
        if self.sigma < 0 or not 0 <= self.p <= 1 or not 0 <= self.rate <= 1:
            raise ValueError("sigma must be >= 0; p and rate must lie in [0, 1]")
        if self.duration < 1:
            raise ValueError("pause duration must be >= 1")


def _toward(env, states, wp, speed):
    """Per-step displacement of length <= speed toward waypoints."""
    d = wp - states
    dist = np.linalg.norm(d, axis=1, keepdims=True)
    scale = np.minimum(1.0, speed / np.maximum(dist, 1e-12))
    return d * scale


class ScriptedExpert:
    """Closed-loop per chunk: plans ``env.chunk`` steps by simulating the
    deterministic dynamics from the current state."""

    def __init__(self, env, style=ExpertStyle(), speed=None):
        self.env = env
        self.style = style
        self.speed = env.a_max if speed is None else speed

    def episode_params(self, states, rng):
        """Per-episode randomness: route side and pause schedule.

        ``pauses[i, k]`` marks a pause starting at step ``k * chunk``.
        """
        n = states.shape[0]
        st = self.style
        if st.kind == "left":
            side = np.ones(n)
        elif st.kind == "right":
            side = -np.ones(n)
        elif st.kind == "mixed":
            side = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
        else:
            side = np.where(states[:, 1] >= 0.5, 1.0, -1.0)
        n_slots = max(2, -(-st.window // self.env.chunk))
        pauses = np.zeros((n, n_slots), dtype=bool)
        if st.p > 0:
            delayed = rng.uniform(size=n) < st.p
            # slot 0 is never used: pausing at t = 0 piles zero labels onto
            # the initial states
            if st.rate > 0:
                pauses[:, 1:] = rng.uniform(size=(n, n_slots - 1)) < st.rate
            else:
                pauses[np.arange(n), rng.integers(1, n_slots, size=n)] = True
            pauses &= delayed[:, None]
        return {"side": side, "pauses": pauses}

    def frozen(self, ep, t):
        """Rows whose expert is paused at env time ``t``."""
        k, offset = divmod(int(t), self.env.chunk)
        if k >= ep["pauses"].shape[1] or offset >= self.style.duration:
            return np.zeros(ep["pauses"].shape[0], dtype=bool)
        return ep["pauses"][:, k]

    def _waypoints(self, states, side):
        if isinstance(self.env, ForkMaze2D):
            return self.env.waypoints(states, side)
        return self.env.waypoints(states)

    def plan(self, states, t, ep, rng=None):
        """Chunk of actions (n, chunk * 2) starting at env time ``t``."""
        env = self.env
        states = np.atleast_2d(states).copy()
        steps = []
        for j in range(env.chunk):
            a = _toward(env, states, self._waypoints(states, ep["side"]), self.speed)
            a = np.where(self.frozen(ep, t + j)[:, None], 0.0, a)
            if self.style.sigma > 0:
                a = a + self.style.sigma * rng.standard_normal(a.shape)
            steps.append(a)
            states = env.move(states, a)
        return np.concatenate(steps, axis=1)


def scripted_expert(env, state, style=ExpertStyle(), t=0, rng=None):
    """One action chunk for a single state (convenience wrapper)."""
    rng = np.random.default_rng(0) if rng is None else rng
    ex = ScriptedExpert(env, style)
    states = np.atleast_2d(state)
    ep = ex.episode_params(states, rng)
    return ex.plan(states, t, ep, rng)[0]


# --------------------------------------------------------------------------
# rollouts


@dataclass
class Trajectory:
    seed: int
    states: np.ndarray  # (T + 1, state_dim)
    actions: np.ndarray  # (T, step_dim) executed per-step actions
    success: bool
    mode: str = ""

    @property
    def length(self):
        return len(self.actions)

    def to_json(self):
        return {
            "seed": int(self.seed),
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "success": bool(self.success),
            "mode": self.mode,
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            int(d["seed"]),
            np.asarray(d["states"], dtype=np.float64).reshape(-1, 2) if len(d["states"]) else np.zeros((0, 2)),
            np.asarray(d["actions"], dtype=np.float64).reshape(-1, 2) if len(d["actions"]) else np.zeros((0, 2)),
            bool(d["success"]),
            d.get("mode", ""),
        )


def replay(env, traj):
    """Re-execute stored actions from the stored initial state."""
    s = traj.states[:1].copy()
    out = [s[0].copy()]
    for a in traj.actions:
        s, _, _ = env.step(s, a[None, :])
        out.append(s[0].copy())
    return np.array(out)


def rollout(env, policy, init_states, rng, execute=None, record=True):
    """Run a batch of episodes in lockstep.

    ``policy(obs, t, rng) -> (n, chunk * step_dim)`` chunk actions.  The
    first ``execute`` steps of every chunk are applied open loop before the
    policy is queried again.
    """
    execute = env.chunk if execute is None else int(execute)
    if not 1 <= execute <= env.chunk:
        raise ValueError("execute horizon must lie in [1, chunk]")
    states = np.array(init_states, dtype=np.float64)
    n = states.shape[0]
    done = env.success(states)
    done_at = np.where(done, 0, -1)
    hist_s = [states.copy()]
    hist_a = []
    t = 0
    while t < env.horizon and not done.all():
        chunk = np.asarray(policy(env.observe(states), t, rng), dtype=np.float64)
        chunk = chunk.reshape(n, env.chunk, env.step_dim)
        for j in range(execute):
            if t >= env.horizon or done.all():
                break
            a = np.where(done[:, None], 0.0, chunk[:, j])
            nxt, _, hit = env.step(states, a)
            states = np.where(done[:, None], states, nxt)
            newly = hit & ~done
            done_at = np.where(newly, t + 1, done_at)
            done = done | hit
            hist_a.append(a)
            hist_s.append(states.copy())
            t += 1
    S = np.stack(hist_s, axis=1)
    A = np.stack(hist_a, axis=1) if hist_a else np.zeros((n, 0, env.step_dim))
    trajs = []
    if record:
        for i in range(n):
            T = done_at[i] if done_at[i] >= 0 else A.shape[1]
            trajs.append(Trajectory(0, S[i, : T + 1].copy(), A[i, :T].copy(), bool(done_at[i] >= 0)))
    return trajs, done_at >= 0


def _episode_seeds(seed, n):
    return np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)


# --------------------------------------------------------------------------
# datasets


@dataclass
class Stats:
    obs_mean: np.ndarray
    obs_std: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray

    @classmethod
    def fit(cls, O, A):
        def ms(X):
            m = X.mean(axis=0)
            s = X.std(axis=0)
            return m, np.where(s > 1e-12, s, 1.0)

        om, os_ = ms(O)
        am, as_ = ms(A)
        return cls(om, os_, am, as_)

    def norm_obs(self, O):
        return (O - self.obs_mean) / self.obs_std

    def norm_act(self, A):
        return (A - self.act_mean) / self.act_std

    def denorm_act(self, A):
        return A * self.act_std + self.act_mean

    def denorm_obs(self, O):
        return O * self.obs_std + self.obs_mean

    def to_json(self):
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d):
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def chunk_pairs(env, trajs, stride=1):
    """(obs_t, actions[t : t + chunk]) for t = 0, stride, 2 stride, ...

    Windows running past the episode end are zero-padded.  ``stride=chunk``
    keeps only the states at which a policy executing whole chunks replans.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    O, A = [], []
    for tr in trajs:
        T = tr.length
        if T == 0:
            continue
        obs = env.observe(tr.states[:T])
        pad = np.concatenate([tr.actions, np.zeros((env.chunk, env.step_dim))], axis=0)
        for t in range(0, T, stride):
            O.append(obs[t])
            A.append(pad[t : t + env.chunk].ravel())
    return np.array(O), np.array(A)


@dataclass
class Dataset:
    env_kind: str
    env_params: dict
    trajectories: list
    provenance: str = "scripted"
    stats: Stats = None
    meta: dict = field(default_factory=dict)
    stride: int = 1

    def pairs(self, env):
        return chunk_pairs(env, self.trajectories, self.stride)

    def normalized(self, env):
        O, A = self.pairs(env)
        return self.stats.norm_obs(O), self.stats.norm_act(A)


def make_dataset(env, trajs, provenance, meta=None, stats=None, stride=1):
    O, A = chunk_pairs(env, trajs, stride)
    stats = Stats.fit(O, A) if stats is None else stats
    return Dataset(env.kind, env.params(), trajs, provenance, stats, meta or {}, stride)


def split_dataset(env, ds, val_fraction=0.2):
    """Trajectory-level train/validation split; stats refit on the train part."""
    n_val = max(1, int(round(len(ds.trajectories) * val_fraction)))
    train = make_dataset(env, ds.trajectories[:-n_val], ds.provenance, ds.meta, stride=ds.stride)
    val = Dataset(env.kind, env.params(), ds.trajectories[-n_val:], ds.provenance, train.stats, ds.meta, ds.stride)
    return train, val


def gen_dataset(env, style, n_traj, seed, max_factor=10, batch=64, horizon=None, stride=1):
    """Roll out the scripted expert; keep exactly ``n_traj`` successes.

    ``horizon`` optionally gives the demonstrator a longer time budget than
    the evaluation episodes (useful with delayed experts).
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if horizon is not None:
        env = copy.copy(env)
        env.horizon = int(horizon)
    expert = ScriptedExpert(env, style)
    kept = []
    attempts = 0
    seeds = _episode_seeds(seed, n_traj * max_factor)
    while len(kept) < n_traj and attempts < n_traj * max_factor:
        chunk_seeds = seeds[attempts : attempts + batch]
        attempts += len(chunk_seeds)
        rngs = [np.random.default_rng(int(s)) for s in chunk_seeds]
        init = np.concatenate([env.reset(r, 1) for r in rngs])
        ep = expert.episode_params(init, np.random.default_rng([seed, attempts]))
        noise_rng = np.random.default_rng([seed, attempts, 7])

        def policy(obs, t, _rng):
            return expert.plan(obs, t, ep, noise_rng)

        trajs, _ = rollout(env, policy, init, noise_rng)
        for s, tr, side in zip(chunk_seeds, trajs, ep["side"]):
            tr.seed = int(s)
            if isinstance(env, ForkMaze2D):
                tr.mode = env.classify(tr.states)
            if tr.success and len(kept) < n_traj:
                kept.append(tr)
    if len(kept) < n_traj:
        raise ExpertFailure(f"only {len(kept)}/{n_traj} successful episodes in {attempts} attempts")
    return make_dataset(env, kept, style.kind, {"seed": int(seed), "style": asdict(style)}, stride=stride)


class NetPolicy:
    """Wrap a trained network as an environment policy (handles normalization)."""

    def __init__(self, net, variant, stats, sampler=None):
        from .samplers import SamplerConfig, default_nfe

        self.net = net
        self.variant = variant
        self.stats = stats
        self.sampler = SamplerConfig(nfe=default_nfe(variant)) if sampler is None else sampler

    def __call__(self, obs, t=0, rng=None):
        from .samplers import sample_action

        a = sample_action(self.net, self.variant, self.stats.norm_obs(obs), self.sampler, rng)
        return self.stats.denorm_act(a)


def expert_policy(env, style=ExpertStyle()):
    """Scripted expert as a ``policy(obs, t, rng)`` callable.

    Episode parameters (side, pauses) are drawn at ``t == 0`` and held for
    the rest of the rollout, so the policy expects full-batch lockstep calls.
    """
    expert = ScriptedExpert(env, style)
    ep = {}

    def policy(obs, t, rng):
        if t == 0 or not ep:
            ep.clear()
            ep.update(expert.episode_params(obs, rng))
        return expert.plan(obs, t, ep, rng)

    return policy


@dataclass
class EvalResult:
    success_rate: float
    successes: np.ndarray
    trajectories: list


def eval_policy(env, policy, n_episodes, seed, execute=None):
    """Success rate over ``n_episodes`` seeded initial states."""
    rng = np.random.default_rng([seed, 11])
    init = env.reset(np.random.default_rng([seed, 10]), n_episodes)
    trajs, succ = rollout(env, policy, init, rng, execute=execute)
    for i, tr in enumerate(trajs):
        tr.seed = i
        if isinstance(env, ForkMaze2D):
            tr.mode = env.classify(tr.states)
    return EvalResult(float(succ.mean()), succ, trajs)


def relabel_deterministic(env, net, variant, stats, n_traj, seed, sampler=None, min_success=0.05, stride=1):
    """Roll out a trained flow policy with z = 0 and keep successful episodes.

    Initial states come from ``seed`` (use seeds disjoint from evaluation).
    Every stored action is exactly the deterministic re-inference at the
    stored observation.
    """
    from .samplers import SamplerConfig, default_nfe

    sampler = SamplerConfig(nfe=default_nfe(variant)) if sampler is None else sampler
    if sampler.mode != "deterministic_z0":
        raise ValueError("relabeling requires deterministic (z = 0) inference")
    policy = NetPolicy(net, variant, stats, sampler)
    kept, attempts = [], 0
    batch = max(16, n_traj)
    max_attempts = int(np.ceil(n_traj / min_success))
    while len(kept) < n_traj and attempts < max_attempts:
        rng = np.random.default_rng([seed, 20, attempts])
        init = env.reset(rng, batch)
        trajs, _ = rollout(env, policy, init, rng)
        for i, tr in enumerate(trajs):
            tr.seed = attempts + i
            if tr.success and len(kept) < n_traj:
                kept.append(tr)
        attempts += batch
    if len(kept) < n_traj:
        raise ExpertFailure(
            f"relabeling policy reached only {len(kept)}/{n_traj} successes in {attempts} episodes"
        )
    return make_dataset(env, kept, "relabeled", {"seed": int(seed), "variant": variant.kind}, stride=stride)


def mode_histogram(env, trajectories):
    """Counts of ``(left, right, other)`` route choices."""
    counts = {"left": 0, "right": 0, "other": 0}
    for tr in trajectories:
        label = env.classify(tr.states) if hasattr(env, "classify") else "other"
        counts[label] += 1
    return counts


# --------------------------------------------------------------------------
# files


def make_env(kind, **params):
    table = {"NarrowGap2D": NarrowGap2D, "ForkMaze2D": ForkMaze2D}
    if kind not in table:
        raise ValueError(f"unknown env kind {kind!r}")
    return table[kind](**params)


def save_dataset(ds, path):
    """JSONL: a versioned header line, then one trajectory per line; stats in
    a ``.stats.json`` sidecar."""
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "env": ds.env_kind,
        "env_params": ds.env_params,
        "provenance": ds.provenance,
        "meta": ds.meta,
        "stride": ds.stride,
    }
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for tr in ds.trajectories:
            f.write(json.dumps(tr.to_json()) + "\n")
    with open(str(path) + ".stats.json", "w") as f:
        json.dump(ds.stats.to_json(), f)


def load_dataset(path):
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: not a dataset file")
        if header.get("version") != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
        trajs = [Trajectory.from_json(json.loads(line)) for line in f if line.strip()]
    with open(str(path) + ".stats.json") as f:
        stats = Stats.from_json(json.load(f))
    return Dataset(
        header["env"], header["env_params"], trajs, header["provenance"], stats, header["meta"], header["stride"]
    )


def warn_skip(msg):
    warnings.warn(msg, RuntimeWarning, stacklevel=2)
