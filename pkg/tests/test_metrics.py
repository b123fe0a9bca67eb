import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from miplab import envs, metrics
from miplab import ndmath as nd
from miplab.objectives import Variant

from conftest import constant_net


class Chain1D:
    """Integer chain: each step moves +1 if the action is positive, else -1.
    Success at x >= goal.  Small enough for exhaustive Q enumeration."""

    chunk = 1
    step_dim = 1
    act_dim = 1

    def __init__(self, goal=2, horizon=4):
        self.goal = goal
        self.horizon = horizon

    def observe(self, states):
        return np.asarray(states, dtype=np.float64).copy()

    def success(self, states):
        return np.atleast_2d(states)[:, 0] >= self.goal

    def step(self, states, actions):
        nxt = states + np.where(np.asarray(actions) > 0, 1.0, -1.0)
        done = self.success(nxt)
        return nxt, done.astype(float), done


def coin_policy(p):
    def policy(obs, t, rng):
        return np.where(rng.uniform(size=(obs.shape[0], 1)) < p, 1.0, -1.0)

    return policy


def exact_success(x, steps, p, goal):
    """P(reach goal within ``steps`` moves) by enumeration."""
    if x >= goal:
        return 1.0
    if steps == 0:
        return 0.0
    return p * exact_success(x + 1, steps - 1, p, goal) + (1 - p) * exact_success(x - 1, steps - 1, p, goal)


@pytest.mark.parametrize("x0,p", [(0, 0.5), (0, 0.7), (-1, 0.6), (1, 0.3)])
def test_estimate_q_matches_enumeration(x0, p):
    env = Chain1D(goal=2, horizon=5)
    n_mc = 4000
    rep = metrics.estimate_q(env, coin_policy(p), np.array([[float(x0)]]), 6, n_mc, seed=3)
    for a, q in zip(rep.actions[:, 0], rep.q):
        x1 = x0 + (1 if a > 0 else -1)
        r = 1.0 if x1 >= env.goal else 0.0
        cont = 0.0 if r else exact_success(x1, env.horizon - 1, p, env.goal)
        exact = r + cont
        sigma = np.sqrt(cont * (1 - cont) / n_mc)
        assert abs(q - exact) <= 3 * sigma + 1e-12


def test_estimate_q_rejects_batches():
    with pytest.raises(ValueError):
        metrics.estimate_q(Chain1D(), coin_policy(0.5), np.zeros((2, 1)), 2, 2)


def linear_dataset(theta, n=200, seed=0):
    env = envs.LinearGaussian(theta)
    rng = np.random.default_rng(seed)
    trajs = []
    for i, o in enumerate(env.reset(rng, n)):
        a = env.expert(o[None], rng)[0]
        trajs.append(envs.Trajectory(i, np.stack([o, a]), a[None], False))
    return env, envs.make_dataset(env, trajs, "linear")


def test_lipschitz_zero_for_constant_policy():
    env, ds = linear_dataset(np.array([[1.0, 0.5], [0.0, 2.0]]))
    rep = metrics.estimate_lipschitz(env, ds, lambda o, t, g: np.full((len(o), 2), 3.0), n_states=20, n_perturb=16)
    assert rep.L == 0.0


@pytest.mark.parametrize("c", [1.0, 2.0, -0.5])
def test_lipschitz_closed_form_scaled_identity(c):
    # o' = a so the policy sees the perturbed action itself; in normalized
    # units every difference quotient is exactly |c|
    env, ds = linear_dataset(np.array([[1.0, 0.5], [0.0, 2.0]]))
    st = ds.stats

    def policy(o, t, g):
        return st.denorm_act(c * st.norm_act(o))

    rep = metrics.estimate_lipschitz(env, ds, policy, n_states=20, n_perturb=16)
    assert abs(rep.L - abs(c)) <= 1e-6
    assert rep.coverage == 1.0


def test_lipschitz_rejects_bad_eps():
    env, ds = linear_dataset(np.eye(2))
    with pytest.raises(ValueError):
        metrics.estimate_lipschitz(env, ds, lambda o, t, g: o, eps=0.0)


def test_off_manifold_zero_inside_span():
    rng = np.random.default_rng(0)
    O = rng.standard_normal((30, 2))
    A = rng.standard_normal((30, 6))
    q = O[:4] + 1e-3
    idx = metrics.knn(O, q, 5)
    pred = np.stack([A[i].T @ rng.standard_normal(5) for i in idx])
    rep = metrics.off_manifold_norm(O, A, q, pred, k=5)
    assert rep.off_l2 <= 1e-12
    assert rep.off_l1 <= 1e-9


def test_off_manifold_equals_lstsq_residual():
    rng = np.random.default_rng(1)
    O = rng.standard_normal((40, 3))
    A = rng.standard_normal((40, 8))
    q = rng.standard_normal((6, 3))
    pred = rng.standard_normal((6, 8))
    rep = metrics.off_manifold_norm(O, A, q, pred, k=5)
    idx = metrics.knn(O, q, 5)
    for r, row, p in zip(rep.per_state_l2, idx, pred):
        B = A[row].T
        c, *_ = np.linalg.lstsq(B, p, rcond=None)
        assert abs(r - np.linalg.norm(p - B @ c)) <= 1e-12


def test_off_manifold_orthogonal_prediction():
    O = np.arange(10.0).reshape(-1, 1)
    A = np.zeros((10, 3))
    A[:, 0] = 1.0
    rep = metrics.off_manifold_norm(O, A, [[0.0]], [[0.0, 3.0, 4.0]], k=2)
    assert rep.off_l2 == pytest.approx(5.0)
    assert rep.off_l1 == pytest.approx(7.0)


def test_knn_ties_stable_and_k_check():
    X = np.array([[0.0], [1.0], [-1.0], [2.0]])
    np.testing.assert_array_equal(metrics.knn(X, [[0.0]], 3), [[0, 1, 2]])
    with pytest.raises(ValueError):
        metrics.knn(X, [[0.0]], 5)


def test_validation_loss_identities():
    net = constant_net([1.0, -2.0])
    O = np.zeros((5, 2))
    A = np.zeros((5, 2))
    v = Variant("Regression")
    assert metrics.validation_loss(net, v, O, A, "L2") == pytest.approx(5.0)
    assert metrics.validation_loss(net, v, O, A, "L1") == pytest.approx(3.0)
    assert metrics.validation_loss(net, v, O, np.tile([1.0, -2.0], (5, 1))) == pytest.approx(0.0, abs=1e-24)
    with pytest.raises(ValueError):
        metrics.validation_loss(net, v, O[:0], A[:0])


def test_prediction_loss_bad_norm():
    with pytest.raises(ValueError):
        metrics.prediction_loss(np.zeros((1, 1)), np.zeros((1, 1)), "Linf")


def test_appg_metrics_zero_for_exact_targets():
    task = envs.PiecewiseProjection(seed=2)
    m = metrics.appg_projection_metrics(task.target, task)
    assert m["subspace_diagonal"] <= 1e-12
    assert m["boundary"] <= 1e-12
    assert m["excluded"] == 0
    assert 0.0 < m["off_diagonal"] <= 1.0


def test_appg_metrics_per_point_oracle():
    task = envs.PiecewiseProjection(seed=3)
    rng = np.random.default_rng(0)
    W = rng.standard_normal((1, task.d))

    def f(c):
        return task.target(c) + 0.1 * np.sin(7 * c) @ W

    n = 64
    m = metrics.appg_projection_metrics(f, task, n_points=n, boundary_width=0.05)
    c = (np.arange(n) + 0.5) / n
    diag, off, bnd = [], [], []
    for ci in c:
        y = f(np.array([[ci]]))[0]
        i = int(task.piece([ci])[0])
        ratio = lambda P: np.linalg.norm(y - P @ y) / np.linalg.norm(y)
        diag.append(ratio(task.projectors[i]))
        off.append(np.mean([ratio(task.projectors[j]) for j in range(task.m) if j != i]))
        for e in range(1, task.m):
            if abs(ci - task.edges[e]) <= 0.05:
                bnd.append(ratio(task.boundary_projector(e - 1)))
    assert m["subspace_diagonal"] == pytest.approx(np.mean(diag), abs=1e-12)
    assert m["off_diagonal"] == pytest.approx(np.mean(off), abs=1e-12)
    assert m["boundary"] == pytest.approx(np.mean(bnd), abs=1e-12)


def test_appg_zero_predictions_excluded():
    task = envs.PiecewiseProjection(seed=0)
    m = metrics.appg_projection_metrics(lambda c: np.zeros((len(c), task.d)), task, n_points=16)
    assert m["excluded"] == 16
    assert np.isnan(m["boundary"])


def test_execute_chunk_stops_on_success():
    env = envs.NarrowGap2D()
    s = np.array([[0.8 - 0.085, 0.5]])
    chunk = np.tile([env.a_max, 0.0], env.chunk)[None]
    nxt, r, done = metrics.execute_chunk(env, s, chunk)
    assert done[0] and r[0] == 1.0
    assert nxt[0, 0] == pytest.approx(0.8 - 0.085 + env.a_max)


def test_critical_indices_pick_ambiguous_states():
    O = np.concatenate([np.zeros((5, 1)), np.full((5, 1), 10.0)])
    A = np.concatenate([np.array([[0.0], [1.0], [0.0], [1.0], [0.0]]), np.zeros((5, 1))])
    idx = metrics.critical_indices(O, A, 5, k=5)
    assert set(idx) == set(range(5))
    with pytest.raises(ValueError):
        metrics.critical_indices(O, A, 2, mode="worst")


def test_config_hash_key_order_invariant():
    assert metrics.config_hash({"a": 1, "b": [1, 2]}) == metrics.config_hash({"b": [1, 2], "a": 1})
    assert metrics.config_hash({"a": 1}) != metrics.config_hash({"a": 2})


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_fmt_round_trips(x):
    assert float(metrics.fmt(x)) == x


def test_write_csv_fixed_columns(tmp_path):
    p = tmp_path / "t.csv"
    metrics.write_csv([{"b": 2.0, "a": "x"}], p, ["a", "b"])
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["a", "b"] and rows[1] == ["x", "2"]
