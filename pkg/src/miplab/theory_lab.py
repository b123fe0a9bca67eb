"""Numerical checks of the flow-map Lipschitz bound on Gaussian targets.

For a | o ~ N(mu(o), sigma^2 I) with mu(o) = Theta o + b, noise z ~ N(0, I)
and interpolant I_t = (1 - t) z + t a, the conditional-expectation velocity
is affine in x:

    b_t(x) = mu + g(t) (x - t mu),   g(t) = (t sigma^2 - (1 - t)) / D_t,
    D_t = (1 - t)^2 + t^2 sigma^2,

so grad_x b_t = g(t) I and grad_o b_t = Theta (1 - t) / D_t.  The exact
flow map is Phi(z, o) = mu(o) + sigma z, hence grad_o Phi = Theta.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import integrate

from .samplers import euler_integrate


@dataclass(frozen=True)
class GaussianTargetSpec:
    theta: np.ndarray  # (act_dim, obs_dim)
    bias: np.ndarray  # (act_dim,)
    sigma2: float = 1.0

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError("sigma^2 must be positive")
        if self.bias.shape != (self.theta.shape[0],):
            raise ValueError("bias must match the action dimension")

    @property
    def kappa(self):
        return 1.0 / self.sigma2

    @property
    def obs_dim(self):
        return self.theta.shape[1]

    @property
    def act_dim(self):
        return self.theta.shape[0]

    def mean(self, o):
        return np.atleast_2d(o) @ self.theta.T + self.bias


def make_spec(kappa, theta_norm, obs_dim=2, act_dim=2, seed=0):
    """Random Theta rescaled to spectral norm ``theta_norm``; sigma^2 = 1/kappa."""
    rng = np.random.default_rng(seed)
    T = rng.standard_normal((act_dim, obs_dim))
    n = np.linalg.norm(T, 2)
    T = T * (theta_norm / n) if theta_norm > 0 else np.zeros_like(T)
    return GaussianTargetSpec(T, rng.standard_normal(act_dim) * 0.5, 1.0 / kappa)


def _gain(sigma2, t):
    D = (1 - t) ** 2 + t**2 * sigma2
    return (t * sigma2 - (1 - t)) / D


def gaussian_velocity(spec, o, x, t):
    """Exact E[a - z | I_t = x, o] for the Gaussian target."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    mu = spec.mean(o)
    return mu + _gain(spec.sigma2, t) * (np.atleast_2d(x) - t * mu)


def velocity_slope(spec, t):
    """grad_x b_t (a multiple of the identity)."""
    return _gain(spec.sigma2, t)


def contractivity_bound(kappa, t):
    """(kappa alpha alpha' + beta beta') / (kappa alpha^2 + beta^2) with
    alpha = 1 - t, beta = t."""
    alpha, beta = 1.0 - t, t
    return (kappa * alpha * -1.0 + beta * 1.0) / (kappa * alpha**2 + beta**2)


def contractivity_check(spec, t_grid):
    """Max of (field slope - bound) over the grid; <= 0 means the bound holds."""
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if np.any(t_grid <= 0) or np.any(t_grid >= 1):
        raise ValueError("t grid must lie inside (0, 1)")
    slopes = np.array([velocity_slope(spec, t) for t in t_grid])
    bounds = contractivity_bound(spec.kappa, t_grid)
    return float(np.max(slopes - bounds))


def flow_map(spec, o, z, nfe=1024):
    """Euler-integrated Phi(z, o) for a batch of (o, z) rows."""
    o = np.atleast_2d(o)
    return euler_integrate(lambda x, t: gaussian_velocity(spec, o, x, t), z, nfe)


def flow_map_partial(spec, o, z, t_end, nfe=1024):
    """Phi_{0, t_end}: Euler with step t_end / nfe."""
    o = np.atleast_2d(o)
    a = np.array(z, dtype=np.float64)
    h = t_end / nfe
    for k in range(nfe):
        a = a + h * gaussian_velocity(spec, o, a, k * h)
    return a


def jacobian_o(spec, o, z, nfe=1024, h=1e-4, t_end=1.0):
    """Central-difference d Phi / d o for each (o, z) row: (n, act, obs)."""
    o = np.atleast_2d(np.asarray(o, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n, k = o.shape
    J = np.empty((n, spec.act_dim, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = h
        plus = flow_map_partial(spec, o + e, z, t_end, nfe)
        minus = flow_map_partial(spec, o - e, z, t_end, nfe)
        J[:, :, j] = (plus - minus) / (2 * h)
    return J


def integral_bound(spec, t_end=1.0):
    """int_0^t sqrt((k(1-t)^2 + t^2) / (k(1-s)^2 + s^2)) ||grad_o b_s|| ds."""
    k = spec.kappa
    L = np.linalg.norm(spec.theta, 2)
    num = k * (1 - t_end) ** 2 + t_end**2

    def f(s):
        D = (1 - s) ** 2 + s**2 * spec.sigma2
        return np.sqrt(num / (k * (1 - s) ** 2 + s**2)) * L * (1 - s) / D

    val, _ = integrate.quad(f, 0.0, t_end, limit=200, epsabs=1e-13, epsrel=1e-12)
    return float(val)


@dataclass
class Theorem1Record:
    kappa: float
    theta_norm: float
    lhs: float
    rhs: float
    margin: float
    rhs_integral: float
    discretization: float  # |lhs(nfe) - lhs(nfe / 2)|
    holds: bool

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def verify_theorem1(spec, n_z=8, n_o=8, nfe_ref=1024, h=1e-4, seed=0, tol=1e-2):
    """max ||grad_o Phi|| over probes vs sqrt(1 + 1/kappa) ||Theta||.

    Raises ``RuntimeError`` when halving the step count moves the estimate
    by more than ``tol`` (relative), i.e. the integration is too coarse.
    """
    rng = np.random.default_rng(seed)
    o = rng.standard_normal((n_o, spec.obs_dim))
    z = rng.standard_normal((n_z, spec.act_dim))
    O = np.repeat(o, n_z, axis=0)
    Z = np.tile(z, (n_o, 1))

    def lhs_at(nfe):
        J = jacobian_o(spec, O, Z, nfe, h)
        return max(float(np.linalg.norm(Ji, 2)) for Ji in J)

    lhs = lhs_at(nfe_ref)
    coarse = lhs_at(nfe_ref // 2)
    disc = abs(lhs - coarse)
    L = float(np.linalg.norm(spec.theta, 2))
    rhs = float(np.sqrt(1.0 + 1.0 / spec.kappa) * L)
    scale = max(rhs, 1e-12)
    if disc > tol * scale:
        raise RuntimeError(f"discretization change {disc:.3g} exceeds tolerance; raise nfe_ref")
    rhs_int = float(np.sqrt(1.0 + 1.0 / spec.kappa) * integral_bound_plain(spec))
    return Theorem1Record(
        spec.kappa, L, lhs, rhs, rhs - lhs, rhs_int, disc, bool(lhs <= rhs * (1 + tol))
    )


def integral_bound_plain(spec):
    """int_0^1 ||grad_o b_s|| ds (the factor multiplying sqrt(1 + 1/kappa))."""
    L = np.linalg.norm(spec.theta, 2)
    val, _ = integrate.quad(
        lambda s: L * (1 - s) / ((1 - s) ** 2 + s**2 * spec.sigma2), 0.0, 1.0, limit=200
    )
    return float(val)


def transport_error(spec, o, nfe, n_draws=10_000, seed=0):
    """Mean and covariance errors of Euler samples at a fixed observation."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_draws, spec.act_dim))
    a = flow_map(spec, np.repeat(np.atleast_2d(o), n_draws, axis=0), z, nfe)
    mu = spec.mean(o)[0]
    mean_err = float(np.linalg.norm(a.mean(axis=0) - mu))
    cov_err = float(np.linalg.norm(np.cov(a.T) - spec.sigma2 * np.eye(spec.act_dim)))
    return mean_err, cov_err


def mc_standard_errors(spec, n_draws):
    """Rough 1-sigma Monte-Carlo floors for the two transport errors."""
    d = spec.act_dim
    return (
        float(np.sqrt(d * spec.sigma2 / n_draws)),
        float(spec.sigma2 * np.sqrt(2.0 * d * d / n_draws)),
    )


def theorem1_grid(kappas=(0.25, 1.0, 4.0, 100.0), theta_norms=(0.5, 1.0, 2.0), seed=0, **kw):
    return [verify_theorem1(make_spec(k, tn, seed=seed), seed=seed, **kw) for k in kappas for tn in theta_norms]


def trained_field_lipschitz(env, dataset, policies, **lip_kw):
    """Lipschitz estimates for several named policies on the same states."""
    from .metrics import estimate_lipschitz

    out = {}
    for name, pol in policies.items():
        out[name] = estimate_lipschitz(env, dataset, pol, **lip_kw).L
    return out
