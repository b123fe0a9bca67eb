"""Inference procedures: Euler flow integration, two-step MIP-style
inference, straight-flow multi-step integration and the sampling modes
(zero noise, stochastic, mean over k draws)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndmath as nd
from .nets import predict
from .objectives import TWO_STAGE, Variant

MODES = ("deterministic_z0", "stochastic", "mean_over_k")
# variants whose inference consumes the initial noise z
NOISE_DRIVEN = ("Flow", "StraightFlow", "TSD")


@dataclass(frozen=True)
class SamplerConfig:
    nfe: int = 9
    mode: str = "deterministic_z0"
    k: int = 64
    t_star: float = 0.9

    def __post_init__(self):
        if self.nfe < 1:
            raise ValueError("nfe must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.mode == "mean_over_k" and self.k < 2:
            raise ValueError("mean_over_k needs k >= 2")


def euler_integrate(field, z, nfe):
    """Fixed-step Euler: a_{k+1} = a_k + h * field(a_k, h k), a_0 = z.

    ``field(x, t)`` returns the velocity at state x and scalar time t; the
    field is evaluated at the left endpoint of each step.
    """
    if nfe < 1:
        raise ValueError("nfe must be >= 1")
    a = np.array(z, dtype=np.float64)
    h = 1.0 / nfe
    for k in range(nfe):
        a = a + h * np.asarray(field(a, k * h), dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise nd.NonFiniteError(f"Euler trajectory became non-finite at step {k}")
    return a


def flow_infer(net, o, z, nfe):
    """Integrate a velocity-head network from z at observation batch o."""
    o = np.atleast_2d(o)
    return euler_integrate(lambda x, t: predict(net, o, x, t), z, nfe)


def two_step_infer(net, o, variant, z=None):
    """First stage at (I=0, t=0) (or I=z for TSD), then one refinement.

    Always exactly two forward passes.  The second-stage input is the first
    output scaled by the variant's gain (t* for MIP).
    """
    o = np.atleast_2d(o)
    n = o.shape[0]
    ts = variant.t_star
    if variant.kind == "TSD":
        first_in = np.zeros((n, net.act_dim)) if z is None else np.asarray(z, float)
    else:
        first_in = np.zeros((n, net.act_dim))
    a0 = predict(net, o, first_in, 0.0)
    return predict(net, o, variant.second_stage_gain * a0, ts)


def mip_infer(net, o, t_star=0.9):
    """â0 = pi(o, 0, 0); â = pi(o, t* â0, t*)."""
    return two_step_infer(net, o, Variant("MIP", t_star))


def sf_multistep(net, o, z, grid):
    """Straight-flow integrator over an increasing grid ``s_0 = 0 < ... < 1``.

    a_t = (t - s)/(1 - s) * pi(o, I_s, 0) + (1 - t)/(1 - s) * a_s, where the
    network input is I_s = s a_s + (1 - s) z (so a one-step grid is exactly
    pi(o, z, 0), and with z = 0 the input is s a_s).
    """
    grid = [float(s) for s in grid]
    if not grid or grid[0] != 0.0:
        raise ValueError("grid must start at 0")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be strictly increasing")
    if grid[-1] >= 1.0:
        raise ValueError("grid points must lie in [0, 1)")
    o = np.atleast_2d(o)
    z = np.asarray(z, dtype=np.float64)
    a = z.copy()
    stops = grid[1:] + [1.0]
    for s, t in zip(grid, stops):
        pred = predict(net, o, s * a + (1.0 - s) * z, 0.0)
        a = (t - s) / (1.0 - s) * pred + (1.0 - t) / (1.0 - s) * a
    return a


def _infer(net, variant, o, z, nfe):
    k = variant.kind
    n = o.shape[0]
    if k == "Regression":
        if nfe != 1:
            raise ValueError("Regression supports only nfe=1")
        return predict(net, o, np.zeros((n, net.act_dim)), 0.0)
    if k == "Flow":
        return flow_infer(net, o, z, nfe)
    if k == "StraightFlow":
        return sf_multistep(net, o, z, [i / nfe for i in range(nfe)])
    if k in TWO_STAGE:
        if nfe == 1:
            first_in = z if k == "TSD" else np.zeros((n, net.act_dim))
            return predict(net, o, first_in, 0.0) / variant.first_stage_target
        if nfe == 2:
            return two_step_infer(net, o, variant, z=z)
        raise ValueError(f"{k} supports nfe in (1, 2), got {nfe}")
    raise ValueError(f"no inference rule for {k}")


def default_nfe(variant):
    """NFE used when none is requested: 9 Euler steps for Flow, two passes
    for two-stage variants, one otherwise."""
    if variant.kind == "Flow":
        return 9
    if variant.kind in TWO_STAGE:
        return 2
    return 1


def supported_nfe(variant, nfe):
    k = variant.kind
    if k == "Regression":
        return nfe == 1
    if k in TWO_STAGE:
        return nfe in (1, 2)
    return nfe >= 1


def sample_action(net, variant, o, config=SamplerConfig(), rng=None):
    """Sample actions for a batch of observations under ``config.mode``."""
    o = np.atleast_2d(np.asarray(o, dtype=np.float64))
    n = o.shape[0]
    if config.mode != "deterministic_z0" and variant.kind not in NOISE_DRIVEN:
        raise ValueError(f"mode {config.mode!r} is meaningless for {variant.kind}")
    if config.mode == "deterministic_z0":
        return _infer(net, variant, o, np.zeros((n, net.act_dim)), config.nfe)
    if rng is None:
        raise ValueError(f"mode {config.mode!r} needs an rng")
    if config.mode == "stochastic":
        return _infer(net, variant, o, rng.standard_normal((n, net.act_dim)), config.nfe)
    # all k draws in one batch: row j*n + i is draw j for observation i
    z = rng.standard_normal((config.k * n, net.act_dim))
    draws = _infer(net, variant, np.tile(o, (config.k, 1)), z, config.nfe)
    return draws.reshape(config.k, n, net.act_dim).mean(axis=0)
