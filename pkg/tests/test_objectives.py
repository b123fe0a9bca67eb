import numpy as np
import pytest

from miplab import nets
from miplab import objectives as ob

from conftest import constant_net


def _batch(seed=0, n=8, obs=3, act=4):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, obs)), rng.standard_normal((n, act))


def _fd_check(variant, net, O, A, seed, n_probes=20):
    frozen = ob.prepare(variant, net, O, A, seed)
    _, grads = ob.loss_and_grad(variant, net, O, A, None, frozen=frozen)
    scale = max(np.abs(g).max() for g in grads)
    rng = np.random.default_rng([seed, 99])
    h = 1e-5
    worst = 0.0
    for _ in range(n_probes):
        k = rng.integers(len(net.params))
        idx = tuple(rng.integers(s) for s in net.params[k].shape)
        plus = [p.copy() for p in net.params]
        minus = [p.copy() for p in net.params]
        plus[k][idx] += h
        minus[k][idx] -= h
        fd = (ob.loss_value(variant, net, O, A, None, plus, frozen)
              - ob.loss_value(variant, net, O, A, None, minus, frozen)) / (2 * h)
        ad = grads[k][idx]
        worst = max(worst, abs(ad - fd) / max(abs(ad), abs(fd), 1e-3 * scale))
    return worst


@pytest.mark.parametrize("kind", ob.KINDS)
@pytest.mark.parametrize("norm", ["L2", "L1"])
def test_gradients_match_finite_differences(kind, norm):
    v = ob.Variant(kind, loss_norm=norm)
    O, A = _batch(1)
    net = nets.init(nets.NetConfig(hidden=16, activation="gelu", seed=4), 3, 4)
    assert _fd_check(v, net, O, A, [4, 5]) <= 1e-4


def test_regression_perfect_fit_zero_loss():
    a = np.array([0.5, -1.0])
    net = constant_net(a, obs_dim=3)
    O = np.random.default_rng(0).standard_normal((5, 3))
    A = np.tile(a, (5, 1))
    for kind in ("Regression", "MIP", "StraightFlow"):
        assert ob.loss_value(ob.Variant(kind), net, O, A, 0) == 0.0


def test_flow_single_sample_hand_value():
    net = nets.init(nets.NetConfig(hidden=8, seed=2), 2, 2)
    o, a = np.array([[0.3, -0.2]]), np.array([[1.0, 2.0]])
    z, t = np.array([[0.5, -0.5]]), np.array([0.25])
    frozen = {"z": z, "t": t, "z_obs": np.zeros_like(o)}
    I = 0.75 * z + 0.25 * a
    # hand forward pass
    h = np.concatenate([o, I, [[0.25]]], axis=1)
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ W + b
        if i < len(net.weights) - 1:
            h = np.maximum(h, 0.0)
    expected = float(np.sum((h - (a - z)) ** 2))
    got = ob.loss_value(ob.Variant("Flow"), net, o, a, None, frozen=frozen)
    assert got == pytest.approx(expected, rel=1e-14)


def test_interpolant_endpoints():
    rng = np.random.default_rng(0)
    z, a = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    np.testing.assert_array_equal(ob.interpolant(z, a, 1.0), a)
    np.testing.assert_array_equal(ob.interpolant(z, a, 0.0), z)


def test_straightflow_equals_regression_with_zero_noise():
    O, A = _batch(2)
    net = nets.init(nets.NetConfig(hidden=16, seed=1), 3, 4)
    frozen = {"z": np.zeros_like(A), "t": np.zeros(len(A)), "z_obs": np.zeros_like(O)}
    sf = ob.loss_value(ob.Variant("StraightFlow"), net, O, A, None, frozen=frozen)
    reg = ob.loss_value(ob.Variant("Regression"), net, O, A, None, frozen=frozen)
    assert sf == reg


def test_tsd_first_target_unbiased():
    a = np.array([0.7, -1.3])
    ts = 0.9
    z = np.random.default_rng(0).standard_normal((10_000, 2))
    target = ob.interpolant(z, a, ts) / ts
    se = (1 - ts) / ts / np.sqrt(len(z))
    assert np.all(np.abs(target.mean(axis=0) - a) <= 3 * se)


def test_mip_at_t_star_one_is_twice_regression():
    O, A = _batch(3)
    net = nets.init(nets.NetConfig(hidden=16, seed=2), 3, 4)
    # make the net ignore its action input and time feature
    W0 = net.weights[0].copy()
    W0[3:, :] = 0.0
    net = nets.PolicyNet(net.config, 3, 4, [W0] + net.weights[1:], net.biases)
    v = ob.Variant("MIP")

    def pi(obs, I, tt):
        return nets.forward(net, obs, I, tt)

    mip = ob.mip_loss_terms(v, pi, O, A, np.zeros_like(A), 1.0).item()
    reg = ob.loss_value(ob.Variant("Regression"), net, O, A, 0)
    assert mip == 2 * reg


@pytest.mark.parametrize("kind", ["Regression", "RR"])
def test_loss_invariant_under_batch_permutation(kind):
    O, A = _batch(4)
    net = nets.init(nets.NetConfig(hidden=16, seed=3), 3, 4)
    perm = np.random.default_rng(0).permutation(len(O))
    v = ob.Variant(kind)
    # deterministic objectives: no per-sample noise involved
    assert ob.loss_value(v, net, O, A, 0) == pytest.approx(ob.loss_value(v, net, O[perm], A[perm], 0), rel=1e-13)


def test_mip_permutation_with_matching_noise():
    O, A = _batch(5)
    net = nets.init(nets.NetConfig(hidden=16, seed=3), 3, 4)
    v = ob.Variant("MIP")
    fr = ob.prepare(v, net, O, A, 7)
    perm = np.random.default_rng(1).permutation(len(O))
    fr_p = {k: val[perm] for k, val in fr.items()}
    a = ob.loss_value(v, net, O, A, None, frozen=fr)
    b = ob.loss_value(v, net, O[perm], A[perm], None, frozen=fr_p)
    assert a == pytest.approx(b, rel=1e-13)


def test_variant_validation():
    with pytest.raises(ValueError):
        ob.Variant("MIP", t_star=1.0)
    with pytest.raises(ValueError):
        ob.Variant("Nope")
    with pytest.raises(ValueError):
        ob.Variant("Flow", loss_norm="L3")
    ob.Variant("RR", t_star=1.0)


def test_shape_errors():
    net = nets.init(nets.NetConfig(), 3, 4)
    with pytest.raises(ValueError):
        ob.loss_and_grad(ob.Variant("MIP"), net, np.ones((2, 2)), np.ones((2, 4)), 0)
    with pytest.raises(ValueError):
        ob.loss(ob.Variant("MIP"), net, [], 0)


def test_loss_batch_list_form():
    O, A = _batch(6)
    net = nets.init(nets.NetConfig(hidden=16), 3, 4)
    v = ob.Variant("Flow")
    l1, g1 = ob.loss(v, net, list(zip(O, A)), 3)
    l2, g2 = ob.loss_and_grad(v, net, O, A, 3)
    assert l1 == l2
    for p, q in zip(g1, g2):
        np.testing.assert_array_equal(p, q)


def test_train_regression_matches_ols():
    rng = np.random.default_rng(0)
    theta = np.array([[1.0, -0.5], [0.3, 0.8]])
    O = rng.standard_normal((512, 2))
    A = O @ theta.T + 0.05 * rng.standard_normal((512, 2))
    ols = np.linalg.lstsq(np.c_[O, np.ones(512)], A, rcond=None)[0]
    net = nets.init(nets.NetConfig(hidden=32, activation="gelu", seed=0), 2, 2)
    opt = ob.OptConfig(steps=4000, batch_size=128, n_checkpoints=0)
    res = ob.train(ob.Variant("Regression"), net, O, A, opt)
    grid = rng.standard_normal((200, 2))
    pred = nets.predict(res.net, grid, np.zeros((200, 2)), 0.0)
    assert np.abs(pred - np.c_[grid, np.ones(200)] @ ols).mean() <= 1e-2


@pytest.mark.parametrize("kind", ["Regression", "MIP", "Flow", "RR"])
def test_train_constant_target(kind):
    rng = np.random.default_rng(1)
    O = rng.standard_normal((256, 2))
    A = np.tile([0.4, -0.2], (256, 1))
    net = nets.init(nets.NetConfig(hidden=16, seed=1), 2, 2)
    v = ob.Variant(kind)
    res = ob.train(v, net, O, A, ob.OptConfig(steps=3000, n_checkpoints=0))
    from miplab.samplers import SamplerConfig, default_nfe, sample_action

    pred = sample_action(res.net, v, O[:64], SamplerConfig(nfe=default_nfe(v)))
    assert np.mean(np.sum((pred - A[:64]) ** 2, axis=1)) <= 1e-4


def test_train_deterministic_and_checkpoints():
    O, A = _batch(7, n=64)
    net = nets.init(nets.NetConfig(hidden=16), 3, 4)
    opt = ob.OptConfig(steps=50, n_checkpoints=5, seed=3)
    r1 = ob.train(ob.Variant("Flow"), net, O, A, opt)
    r2 = ob.train(ob.Variant("Flow"), net, O, A, opt)
    assert r1.losses == r2.losses
    assert [s for s, _ in r1.checkpoints] == [10, 20, 30, 40, 50]


def test_checkpoint_steps():
    assert ob.checkpoint_steps(100, 5) == [20, 40, 60, 80, 100]
    assert ob.checkpoint_steps(30000, 5, every=2000) == [22000, 24000, 26000, 28000, 30000]
    assert ob.checkpoint_steps(3000, 5, every=2000) == [1000, 3000]
    assert ob.checkpoint_steps(10, 0) == []


def test_train_divergence_reported():
    O, A = _batch(8, n=16)
    A = A * 1e200
    net = nets.init(nets.NetConfig(hidden=16), 3, 4)
    with pytest.raises(ob.TrainingDiverged):
        ob.train(ob.Variant("Regression"), net, O, A, ob.OptConfig(steps=5))


def test_train_config_round_trip():
    cfg = ob.TrainConfig(variant="RR", net=nets.NetConfig(hidden=32), opt=ob.OptConfig(steps=10))
    import json

    back = ob.TrainConfig.from_dict(json.loads(cfg.to_json()))
    assert back == cfg
