import json

import numpy as np
import pytest

from miplab import envs, nets
from miplab import theory_lab as th
from miplab.objectives import OptConfig, Variant, train


def std_spec(sigma2=1.0, theta=None, bias=None):
    theta = np.zeros((2, 2)) if theta is None else np.asarray(theta, dtype=np.float64)
    bias = np.zeros(2) if bias is None else np.asarray(bias, dtype=np.float64)
    return th.GaussianTargetSpec(theta, bias, sigma2)


def test_velocity_hand_values():
    spec = std_spec()
    x = np.array([[0.3, -2.0], [1.0, 4.0]])
    np.testing.assert_allclose(th.gaussian_velocity(spec, np.zeros((2, 2)), x, 0.5), 0.0, atol=1e-15)
    np.testing.assert_allclose(th.gaussian_velocity(spec, np.zeros((2, 2)), x, 0.0), -x)
    t = 0.3
    np.testing.assert_allclose(
        th.gaussian_velocity(spec, np.zeros((2, 2)), x, t), (2 * t - 1) / ((1 - t) ** 2 + t**2) * x
    )
    with pytest.raises(ValueError):
        th.gaussian_velocity(spec, np.zeros((1, 2)), x[:1], 1.5)


@pytest.mark.parametrize("t", [0.0, 0.3, 0.7, 0.95])
def test_velocity_matches_mc_regression(t):
    spec = th.make_spec(4.0, 1.0, seed=1)
    o = np.array([[0.4, -0.7]])
    n = 1_000_000
    rng = np.random.default_rng(0)
    z = rng.standard_normal((n, 2))
    a = spec.mean(o) + np.sqrt(spec.sigma2) * rng.standard_normal((n, 2))
    I = (1 - t) * z + t * a
    y = a - z
    X = np.hstack([np.ones((n, 1)), I])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    cov = np.linalg.inv(X.T @ X)
    se = np.sqrt(np.outer(np.diag(cov), resid.var(axis=0)))
    # closed form is affine in x: intercept mu (1 - g t), slope g I
    g = th.velocity_slope(spec, t)
    mu = spec.mean(o)[0]
    ref = np.vstack([mu * (1 - g * t), g * np.eye(2)])
    assert np.all(np.abs(coef - ref) <= 3 * se + 1e-12)


def test_contractivity_exact_for_gaussian():
    grid = np.linspace(0.01, 0.99, 99)
    for k in (0.25, 1.0, 4.0, 100.0):
        spec = th.make_spec(k, 1.0)
        slopes = np.array([th.velocity_slope(spec, t) for t in grid])
        np.testing.assert_allclose(slopes, th.contractivity_bound(k, grid), rtol=1e-12, atol=1e-12)
        assert th.contractivity_check(spec, grid) <= 1e-9
    assert th.contractivity_bound(1.0, 0.5) == 0.0
    with pytest.raises(ValueError):
        th.contractivity_check(th.make_spec(1.0, 1.0), [0.0, 0.5])


def test_contractivity_sharp_limit():
    # as kappa grows the bound approaches -1 / (1 - t)
    assert th.contractivity_bound(1e6, 0.9) == pytest.approx(-1 / 0.1, rel=1e-3)


def test_flow_transports_to_target():
    spec = th.make_spec(4.0, 1.0, seed=3)
    o = np.array([[0.2, 0.1]])
    n = 10_000
    a = th.flow_map(spec, np.repeat(o, n, axis=0), np.random.default_rng(0).standard_normal((n, 2)), 1024)
    se = np.sqrt(spec.sigma2 / n)
    assert np.all(np.abs(a.mean(axis=0) - spec.mean(o)[0]) <= 3 * se)
    var_se = spec.sigma2 * np.sqrt(2.0 / n)
    assert np.all(np.abs(a.var(axis=0, ddof=1) - spec.sigma2) <= 3 * var_se)


def test_theorem1_examples():
    rec = th.verify_theorem1(th.make_spec(1.0, 1.0))
    assert rec.rhs == pytest.approx(np.sqrt(2.0))
    assert rec.holds and rec.lhs <= rec.rhs
    zero = th.verify_theorem1(th.GaussianTargetSpec(np.zeros((2, 2)), np.ones(2), 1.0))
    assert zero.lhs == pytest.approx(0.0, abs=1e-8) and zero.holds
    near = th.verify_theorem1(th.make_spec(100.0, 1.0))
    assert near.rhs == pytest.approx(np.sqrt(1.01)) and near.holds
    assert json.loads(rec.to_json())["kappa"] == 1.0


def test_theorem1_grid_holds():
    recs = th.theorem1_grid(n_z=4, n_o=4)
    assert len(recs) == 12
    assert all(r.holds and r.margin >= 0 for r in recs)


def test_euler_jacobian_exact_for_affine_mean():
    # Euler carries the mean exactly, so the o-Jacobian is Theta at any step count
    spec = th.make_spec(0.25, 2.0)
    o, z = np.array([[0.5, -1.0]]), np.array([[1.0, 2.0]])
    for nfe in (1, 2, 7):
        np.testing.assert_allclose(th.jacobian_o(spec, o, z, nfe=nfe)[0], spec.theta, atol=1e-8)
    rec = th.verify_theorem1(spec, nfe_ref=4)
    assert rec.discretization <= 1e-8


@pytest.mark.parametrize("t_end", [0.25, 0.5, 0.75])
def test_intermediate_time_bound(t_end):
    for k in (0.25, 1.0, 100.0):
        spec = th.make_spec(k, 1.5, seed=2)
        rng = np.random.default_rng(0)
        o, z = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
        J = th.jacobian_o(spec, o, z, nfe=1024, t_end=t_end)
        lhs = max(np.linalg.norm(Ji, 2) for Ji in J)
        assert lhs <= th.integral_bound(spec, t_end) * (1 + 1e-3)


def test_jacobian_sign_flip_symmetry():
    spec = th.make_spec(1.0, 1.0)
    o, z = np.array([[0.1, 0.2]]), np.array([[0.3, -0.1]])
    a = th.jacobian_o(spec, o, z, nfe=64, h=1e-4)
    b = th.jacobian_o(spec, o, z, nfe=64, h=-1e-4)
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_transport_error_shrinks_with_nfe():
    spec = th.make_spec(4.0, 1.0, seed=0)
    o = np.array([0.3, -0.2])
    m8, c8 = th.transport_error(spec, o, 8, seed=1)
    m64, c64 = th.transport_error(spec, o, 64, seed=1)
    se_m, se_c = th.mc_standard_errors(spec, 10_000)
    assert m64 <= m8 / 2 + 3 * se_m
    assert c64 <= c8 / 2 + 3 * se_c


def test_spec_validation():
    with pytest.raises(ValueError):
        th.GaussianTargetSpec(np.eye(2), np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        th.GaussianTargetSpec(np.eye(2), np.zeros(3), 1.0)
    assert th.make_spec(4.0, 2.0).kappa == pytest.approx(4.0)
    assert np.linalg.norm(th.make_spec(4.0, 2.0).theta, 2) == pytest.approx(2.0)


def linear_gaussian_data(theta, n=400):
    env = envs.LinearGaussian(theta)
    rng = np.random.default_rng(0)
    trajs = []
    for i, o in enumerate(env.reset(rng, n)):
        a = env.expert(o[None], rng)[0]
        trajs.append(envs.Trajectory(i, np.stack([o, a]), a[None], False))
    return env, envs.make_dataset(env, trajs, "linear")


def test_trained_field_lipschitz_untrained_zero():
    env, ds = linear_gaussian_data(np.eye(2))
    zero = {"a": lambda o, t, g: np.zeros((len(o), 2)), "b": lambda o, t, g: np.zeros((len(o), 2))}
    out = th.trained_field_lipschitz(env, ds, zero, n_states=10, n_perturb=8)
    assert out == {"a": 0.0, "b": 0.0}


def test_trained_field_lipschitz_linear_gaussian():
    c, s = np.cos(0.4), np.sin(0.4)
    theta = 1.5 * np.array([[c, -s], [s, c]])
    env, ds = linear_gaussian_data(theta)
    O, A = ds.normalized(env)
    pols = {}
    for kind in ("Regression", "Flow"):
        net = nets.init(nets.NetConfig(hidden=64, activation="gelu", seed=0), 2, 2)
        v = Variant(kind)
        net = train(v, net, O, A, OptConfig(steps=3000, n_checkpoints=0)).net
        pols[kind] = envs.NetPolicy(net, v, ds.stats)
    out = th.trained_field_lipschitz(env, ds, pols, n_states=20, n_perturb=32)
    # o' = a, so a normalized perturbation eta moves the policy output by
    # Theta eta in normalized units; Theta is a scaled rotation
    ref = np.linalg.norm(theta, 2)
    for name, L in out.items():
        assert abs(L - ref) <= 0.2 * ref, (name, L, ref)
