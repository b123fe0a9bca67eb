"""Comparative studies: the variant grid, the NFE study, sampling-strategy
evidence on the fork maze, manifold adherence and the toy-function study.

Every cell of a grid trains one variant with one seed on a dataset shared by
all cells, then evaluates a fixed set of checkpoints.  Results are
append-only JSONL rows keyed by a hash of the cell configuration, so a grid
interrupted half-way resumes where it stopped.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import envs
from .metrics import config_hash, estimate_lipschitz, manifold_study, prediction_loss, appg_projection_metrics
from .nets import NetConfig, init, save_checkpoint
from .objectives import OptConfig, Variant, train
from .samplers import SamplerConfig, default_nfe, sample_action, supported_nfe

log = logging.getLogger("miplab.experiments")

NFE_MENU = (1, 2, 3, 9)
VARIANTS = ("Regression", "Flow", "MIP", "RR", "StraightFlow")


class PlanError(ValueError):
    """Malformed experiment plan."""


@dataclass
class ExperimentPlan:
    name: str = "grid"
    env: str = "NarrowGap2D"
    env_params: dict = field(default_factory=dict)
    expert: dict = field(default_factory=dict)  # ExpertStyle fields
    n_traj: int = 200
    data_seed: int = 0
    collection_horizon: int = 0  # 0: the environment horizon
    stride: int = 1
    val_fraction: float = 0.0
    variants: list = field(default_factory=lambda: list(VARIANTS))
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    t_star: float = 0.9
    net: dict = field(default_factory=dict)  # NetConfig fields except seed
    opt: dict = field(default_factory=dict)  # OptConfig fields except seed
    nfe_menu: list = field(default_factory=list)  # empty: each variant's default
    n_eval: int = 100
    eval_seed: int = 100
    metrics: list = field(default_factory=list)  # "manifold", "lipschitz"
    lipschitz_eps: float = 0.05
    manifold_states: int = 32

    def __post_init__(self):
        for kind in self.variants:
            try:
                Variant(kind, self.t_star)
            except ValueError as exc:
                raise PlanError(str(exc)) from exc
        if not self.seeds:
            raise PlanError("plan needs at least one seed")
        if "seed" in self.net or "seed" in self.opt:
            raise PlanError("net/opt seeds are derived from the cell seed; remove them from the plan")
        bad = set(self.metrics) - {"manifold", "lipschitz"}
        if bad:
            raise PlanError(f"unknown metrics {sorted(bad)}")
        if "manifold" in self.metrics and self.val_fraction <= 0:
            raise PlanError("the manifold metric needs val_fraction > 0")
        try:
            NetConfig(**self.net)
            OptConfig(**_opt_kwargs(self.opt))
            envs.ExpertStyle(**self.expert)
        except (TypeError, ValueError) as exc:
            raise PlanError(str(exc)) from exc

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise PlanError(f"unknown plan keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as exc:
                raise PlanError(f"{path}: {exc}") from exc
        return cls.from_dict(d)

    def data_key(self):
        keys = ("env", "env_params", "expert", "n_traj", "data_seed", "collection_horizon", "stride", "val_fraction")
        return {k: getattr(self, k) for k in keys}

    def cell_hash(self, variant, seed):
        d = self.to_dict()
        for k in ("name", "variants", "seeds"):
            d.pop(k)
        d.update(variant=variant, seed=int(seed))
        return config_hash(d)


def _opt_kwargs(d):
    d = dict(d)
    if "betas" in d:
        d["betas"] = tuple(d["betas"])
    return d


@dataclass
class ResultRow:
    experiment: str
    variant: str
    seed: int
    checkpoint: object  # step number, "best" or "last5"
    metric: str
    value: float
    config_hash: str

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def read_rows(path):
    if not os.path.exists(path):
        return []
    with open(path) as f:
        return [ResultRow(**json.loads(line)) for line in f if line.strip()]


def append_rows(rows, path):
    with open(path, "a") as f:
        for r in rows:
            f.write(r.to_json() + "\n")


# --------------------------------------------------------------------------
# data


def build_data(plan):
    """(env, train dataset, validation dataset or None) for a plan."""
    env = envs.make_env(plan.env, **plan.env_params)
    style = envs.ExpertStyle(**plan.expert)
    ds = envs.gen_dataset(
        env, style, plan.n_traj, plan.data_seed, horizon=plan.collection_horizon or None, stride=plan.stride
    )
    if plan.val_fraction > 0:
        train_ds, val_ds = envs.split_dataset(env, ds, plan.val_fraction)
        return env, train_ds, val_ds
    return env, ds, None


def variant_nfes(plan, variant):
    if not plan.nfe_menu:
        return [default_nfe(variant)]
    return [n for n in plan.nfe_menu if supported_nfe(variant, n)]


# --------------------------------------------------------------------------
# grid


def run_cell(plan, env, ds, val, kind, seed, net_dir=None):
    """Train one (variant, seed) cell and evaluate its checkpoints."""
    v = Variant(kind, plan.t_star)
    h = plan.cell_hash(kind, seed)
    O, A = ds.normalized(env)
    net = init(NetConfig(**plan.net, seed=int(seed)), O.shape[1], A.shape[1])
    res = train(v, net, O, A, OptConfig(**_opt_kwargs(plan.opt), seed=int(seed)))
    rows = []

    def row(ckpt, metric, value):
        rows.append(ResultRow(plan.name, kind, int(seed), ckpt, metric, float(value), h))

    row(res.checkpoints[-1][0] if res.checkpoints else len(res.losses), "final_loss", res.losses[-1])
    checkpoints = res.checkpoints or [(len(res.losses), res.net)]
    for nfe in variant_nfes(plan, v):
        sampler = SamplerConfig(nfe=nfe, t_star=plan.t_star)
        rates = []
        for step, c in checkpoints:
            sr = envs.eval_policy(env, envs.NetPolicy(c, v, ds.stats, sampler), plan.n_eval, plan.eval_seed)
            rates.append(sr.success_rate)
            row(step, f"success_nfe{nfe}", sr.success_rate)
        row("best", f"success_nfe{nfe}", max(rates))
        row("last5", f"success_nfe{nfe}", float(np.mean(rates[-5:])))
    for nfe in plan.nfe_menu:
        if not supported_nfe(v, nfe):
            row("skipped", f"success_nfe{nfe}", float("nan"))
    final = res.net
    step = checkpoints[-1][0]
    if "manifold" in plan.metrics:
        Ov, Av = val.normalized(env)
        rep = manifold_study(env, ds, final, v, Ov, Av, n_states=plan.manifold_states, eps=plan.lipschitz_eps)
        row(step, "off_manifold_l2", rep.off_l2)
        row(step, "off_manifold_l1", rep.off_l1)
        row(step, "validation_l2", rep.validation_l2)
        row(step, "validation_l1", rep.validation_l1)
    if "lipschitz" in plan.metrics:
        pol = envs.NetPolicy(final, v, ds.stats)
        rep = estimate_lipschitz(env, ds, pol, eps=plan.lipschitz_eps, seed=int(seed))
        row(step, "lipschitz", rep.L)
    if net_dir is not None:
        save_checkpoint(final, os.path.join(net_dir, f"{kind}-s{seed}.json"), {"cell": h})
    row(step, "cell_complete", 1.0)
    return rows


def _cell_job(args):
    plan_dict, kind, seed, net_dir = args
    plan = ExperimentPlan.from_dict(plan_dict)
    env, ds, val = build_data(plan)
    try:
        return run_cell(plan, env, ds, val, kind, seed, net_dir)
    except Exception as exc:  # recorded, grid continues
        return _failure(plan, kind, seed, exc)


def _failure(plan, kind, seed, exc):
    log.error("cell %s/seed %s failed: %s", kind, seed, exc)
    return [ResultRow(plan.name, kind, int(seed), "error", "cell_failed", float("nan"), plan.cell_hash(kind, seed))]


def run_grid(plan, out_dir=None, workers=1, data=None):
    """Run every (variant, seed) cell not already completed in ``out_dir``.

    Returns all rows for this plan (old and new).  Rows of each cell are
    appended in plan order, so a rerun produces identical files whatever
    the worker count.
    """
    results = os.path.join(out_dir, "results.jsonl") if out_dir else None
    net_dir = os.path.join(out_dir, "nets") if out_dir else None
    if out_dir:
        os.makedirs(net_dir, exist_ok=True)
    existing = read_rows(results) if results else []
    done = {r.config_hash for r in existing if r.metric == "cell_complete"}
    cells = [(k, s) for k in plan.variants for s in plan.seeds if plan.cell_hash(k, s) not in done]
    new_rows = []
    if cells:
        if workers > 1 and len(cells) > 1:
            jobs = [(plan.to_dict(), k, s, net_dir) for k, s in cells]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for rows in pool.map(_cell_job, jobs):
                    new_rows.extend(rows)
                    if results:
                        append_rows(rows, results)
        else:
            env, ds, val = build_data(plan) if data is None else data
            for k, s in cells:
                log.info("cell %s seed %s", k, s)
                try:
                    rows = run_cell(plan, env, ds, val, k, s, net_dir)
                except Exception as exc:  # recorded, grid continues
                    rows = _failure(plan, k, s, exc)
                new_rows.extend(rows)
                if results:
                    append_rows(rows, results)
    hashes = {plan.cell_hash(k, s) for k in plan.variants for s in plan.seeds}
    return [r for r in existing if r.config_hash in hashes] + new_rows


def summarize(rows, checkpoint="last5"):
    """{(variant, metric): (mean over seeds, std, n)} for summary rows."""
    groups = {}
    for r in rows:
        if r.checkpoint != checkpoint:
            continue
        groups.setdefault((r.variant, r.metric), []).append(r.value)
    return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in groups.items()}


def final_metrics(rows):
    """Mean over seeds of the per-cell final-net metrics (manifold, Lipschitz)."""
    names = ("off_manifold_l2", "off_manifold_l1", "validation_l2", "validation_l1", "lipschitz")
    groups = {}
    for r in rows:
        if r.metric in names:
            groups.setdefault((r.variant, r.metric), []).append(r.value)
    return {k: float(np.mean(v)) for k, v in groups.items()}


def nfe_study(plan, nfe_list=NFE_MENU, out_dir=None, workers=1, data=None):
    """Success per (variant, NFE); incompatible pairs are recorded as skipped."""
    plan = ExperimentPlan.from_dict({**plan.to_dict(), "nfe_menu": list(nfe_list)})
    rows = run_grid(plan, out_dir, workers, data)
    table = []
    summ = summarize(rows)
    for kind in plan.variants:
        for nfe in nfe_list:
            key = (kind, f"success_nfe{nfe}")
            if supported_nfe(Variant(kind, plan.t_star), nfe) and key in summ:
                m, s, n = summ[key]
                table.append({"variant": kind, "nfe": nfe, "success": m, "std": s, "n_seeds": n, "skipped": 0})
            else:
                table.append({"variant": kind, "nfe": nfe, "success": float("nan"), "std": float("nan"),
                              "n_seeds": 0, "skipped": 1})
    return table


# --------------------------------------------------------------------------
# evidence on the fork maze


def fork_plan(**over):
    base = dict(
        name="evidence",
        env="ForkMaze2D",
        expert={"kind": "split"},
        n_traj=200,
        stride=8,
        variants=["Flow"],
        net={"hidden": 128},
        opt={"steps": 20000},
        n_eval=100,
    )
    base.update(over)
    return ExperimentPlan.from_dict(base)


def sampling_strategies(env, net, variant, stats, n_eval, seed, nfe=None, k=64):
    """Success under z = 0, stochastic and mean-over-k sampling."""
    nfe = default_nfe(variant) if nfe is None else nfe
    out = {}
    for mode in ("deterministic_z0", "stochastic", "mean_over_k"):
        pol = envs.NetPolicy(net, variant, stats, SamplerConfig(nfe=nfe, mode=mode, k=k))
        out[mode] = envs.eval_policy(env, pol, n_eval, seed)
    return out


def evidence_suite(plan, relabel_traj=None):
    """Sampling-strategy table, route histogram and relabeled-data comparison.

    Per seed: train a flow on the plan's data, evaluate the three sampling
    modes, histogram the routes of stochastic rollouts; then relabel with
    the seed's z = 0 flow and retrain Flow and Regression on the relabeled
    data.
    """
    env, ds, _ = build_data(plan)
    O, A = ds.normalized(env)
    flow = Variant("Flow", plan.t_star)
    reg = Variant("Regression", plan.t_star)
    opt = _opt_kwargs(plan.opt)
    relabel_traj = plan.n_traj if relabel_traj is None else relabel_traj
    rows = []

    def row(seed, metric, value, variant="Flow", ckpt="final"):
        rows.append(ResultRow(plan.name, variant, int(seed), ckpt, metric, float(value), plan.cell_hash(variant, seed)))

    histograms = {}
    for seed in plan.seeds:
        net = init(NetConfig(**plan.net, seed=int(seed)), O.shape[1], A.shape[1])
        trained = train(flow, net, O, A, OptConfig(**opt, seed=int(seed))).net
        res = sampling_strategies(env, trained, flow, ds.stats, plan.n_eval, plan.eval_seed)
        for mode, r in res.items():
            row(seed, f"success_{mode}", r.success_rate)
        hist = envs.mode_histogram(env, res["stochastic"].trajectories)
        histograms[int(seed)] = hist
        for side, count in hist.items():
            row(seed, f"route_{side}", count)
        # retrain on z = 0 rollouts of this flow (relabel seeds disjoint from eval)
        rel = envs.relabel_deterministic(env, trained, flow, ds.stats, relabel_traj, 1000 + int(seed), stride=ds.stride)
        rel = envs.make_dataset(env, rel.trajectories, "relabeled", rel.meta, stats=ds.stats, stride=ds.stride)
        Or, Ar = rel.normalized(env)
        for v in (flow, reg):
            for source, (Ot, At) in (("original", (O, A)), ("relabeled", (Or, Ar))):
                net = init(NetConfig(**plan.net, seed=int(seed)), O.shape[1], A.shape[1])
                m = train(v, net, Ot, At, OptConfig(**opt, seed=int(seed))).net
                sr = envs.eval_policy(env, envs.NetPolicy(m, v, ds.stats), plan.n_eval, plan.eval_seed)
                row(seed, f"success_{source}", sr.success_rate, variant=v.kind)
    return rows, histograms


# --------------------------------------------------------------------------
# toy functions


@dataclass
class ToyConfig:
    variants: list = field(default_factory=lambda: ["Regression", "Flow", "StraightFlow", "MIP"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    sin_n: int = 1024
    sin_net: dict = field(default_factory=lambda: {"hidden": 64, "depth": 4})
    sin_steps: int = 20000
    proj_n: int = 50
    proj_net: dict = field(default_factory=lambda: {"hidden": 256, "depth": 3})
    proj_steps: int = 10000
    proj_task: dict = field(default_factory=lambda: {"d": 16, "k": 4, "m": 4, "seed": 0})
    batch_size: int = 32
    lr: float = 1e-3
    n_test: int = 1024


def _fit_predict(kind, net_cfg, X, Y, steps, seed, batch_size, lr):
    v = Variant(kind)
    net = init(NetConfig(**net_cfg, seed=int(seed)), X.shape[1], Y.shape[1])
    trained = train(v, net, X, Y, OptConfig(lr=lr, batch_size=batch_size, steps=steps, n_checkpoints=0, seed=int(seed))).net
    sampler = SamplerConfig(nfe=default_nfe(v))
    return lambda x: sample_action(trained, v, x, sampler)


def toyfn_study(cfg=ToyConfig()):
    """L1/L2 reconstruction on both tasks plus projection metrics.

    Inputs and targets are used unnormalized: an affine rescaling of the
    targets would move the subspaces the projection metrics refer to.
    """
    rows = []
    h = config_hash(asdict(cfg))
    sin = envs.Sin1OverX()
    proj = envs.PiecewiseProjection(**cfg.proj_task)
    xs = np.linspace(sin.lo, sin.hi, cfg.n_test).reshape(-1, 1)
    cs = ((np.arange(cfg.n_test) + 0.5) / cfg.n_test).reshape(-1, 1)
    for kind in cfg.variants:
        for seed in cfg.seeds:
            def row(task, metric, value):
                rows.append(ResultRow(f"toy_{task}", kind, int(seed), "final", metric, float(value), h))

            X, Y = sin.sample(np.random.default_rng([seed, 30]), cfg.sin_n)
            f = _fit_predict(kind, cfg.sin_net, X, Y, cfg.sin_steps, seed, cfg.batch_size, cfg.lr)
            pred = f(xs)
            row("sin", "l2", prediction_loss(pred, sin.target(xs), "L2"))
            row("sin", "l1", prediction_loss(pred, sin.target(xs), "L1"))
            C, Yc = proj.sample(np.random.default_rng([seed, 31]), cfg.proj_n)
            g = _fit_predict(kind, cfg.proj_net, C, Yc, cfg.proj_steps, seed, cfg.batch_size, cfg.lr)
            pred = g(cs)
            row("proj", "l2", prediction_loss(pred, proj.target(cs), "L2"))
            row("proj", "l1", prediction_loss(pred, proj.target(cs), "L1"))
            for name, val in appg_projection_metrics(g, proj, n_points=cfg.n_test).items():
                row("proj", name, val)
    return rows


def toy_table(rows):
    """{(task, variant, metric): mean over seeds}."""
    groups = {}
    for r in rows:
        groups.setdefault((r.experiment, r.variant, r.metric), []).append(r.value)
    return {k: float(np.mean(v)) for k, v in groups.items()}


# --------------------------------------------------------------------------
# presets


def narrowgap_plan(**over):
    """Precision-task preset: a delayed demonstrator whose chunks are
    bimodal (move or pause) at replanning states, under a tight time
    budget."""
    base = dict(
        name="narrowgap",
        env="NarrowGap2D",
        env_params={"w": 0.1},
        expert={"kind": "delayed", "p": 1.0, "duration": 8, "rate": 0.15, "window": 128},
        n_traj=1000,
        collection_horizon=160,
        stride=8,
        val_fraction=0.1,
        net={"hidden": 128},
        opt={"steps": 30000, "checkpoint_every": 2000},
        nfe_menu=list(NFE_MENU),
        n_eval=100,
        metrics=["manifold"],
    )
    base.update(over)
    return ExperimentPlan.from_dict(base)
