"""Command-line entry point: ``python -m miplab <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 1 runtime failure.  Result
files never contain timestamps; logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys

import numpy as np

from . import envs, experiments as ex, linear_lab, theory_lab
from .metrics import estimate_lipschitz, fmt, off_manifold_norm, perturbed_states, validation_loss, write_csv
from .nets import NetConfig, init, load_checkpoint, save_checkpoint
from .objectives import OptConfig, Variant, train
from .samplers import MODES, SamplerConfig, default_nfe, sample_action

log = logging.getLogger("miplab")


class ConfigError(Exception):
    """Bad flags, plan files or inputs (exit code 2)."""


PRESETS = {"narrowgap": ex.narrowgap_plan, "fork": ex.fork_plan}


# --------------------------------------------------------------------------
# helpers


def _plan(args):
    if getattr(args, "plan", None):
        if not os.path.exists(args.plan):
            raise ConfigError(f"plan file {args.plan} not found")
        plan = ex.ExperimentPlan.load(args.plan)
    else:
        plan = PRESETS[args.preset]()
    over = {}
    if getattr(args, "seeds", None):
        over["seeds"] = [int(s) for s in args.seeds]
    if getattr(args, "data_seed", None) is not None:
        over["data_seed"] = args.data_seed
    if over:
        plan = ex.ExperimentPlan.from_dict({**plan.to_dict(), **over})
    return plan


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _guard(path, force):
    """Refuse to clobber an existing result unless ``--force``."""
    if os.path.exists(path):
        if not force:
            raise ConfigError(f"{path} exists; pass --force to overwrite")
        if os.path.isdir(path):
            shutil.rmtree(path)
        else:
            os.remove(path)


def _write_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=1)
        f.write("\n")


def _rows_csv(rows, path):
    cols = ["experiment", "variant", "seed", "checkpoint", "metric", "value", "config_hash"]
    write_csv([r.__dict__ for r in rows], path, cols)


def _load_policy(path):
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint {path} not found")
    net, meta = load_checkpoint(path)
    for key in ("variant", "stats", "env", "env_params"):
        if key not in meta:
            raise ConfigError(f"{path}: checkpoint lacks {key!r} metadata (not written by `train`)")
    variant = Variant(meta["variant"], meta.get("t_star", 0.9))
    stats = envs.Stats.from_json(meta["stats"])
    env = envs.make_env(meta["env"], **meta["env_params"])
    return net, variant, stats, env, meta


def _dataset(path):
    if not os.path.exists(path):
        raise ConfigError(f"dataset {path} not found")
    return envs.load_dataset(path)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    plan = _plan(args)
    out = _out_dir(args.out)
    path = os.path.join(out, "data.jsonl")
    _guard(path, args.force)
    env, ds, val = ex.build_data(plan)
    save_dataset_pair(ds, val, out)
    log.info("wrote %d trajectories to %s", len(ds.trajectories), path)


def save_dataset_pair(ds, val, out):
    envs.save_dataset(ds, os.path.join(out, "data.jsonl"))
    if val is not None:
        envs.save_dataset(val, os.path.join(out, "val.jsonl"))


def cmd_train(args):
    ds = _dataset(args.data)
    env = envs.make_env(ds.env_kind, **ds.env_params)
    plan = _plan(args)
    out = _out_dir(args.out)
    stem = os.path.join(out, f"{args.variant}-s{args.seed}")
    _guard(stem + ".json", args.force)
    v = Variant(args.variant, plan.t_star)
    O, A = ds.normalized(env)
    net = init(NetConfig(**plan.net, seed=args.seed), O.shape[1], A.shape[1])
    opt = dict(ex._opt_kwargs(plan.opt))
    if args.steps is not None:
        opt["steps"] = args.steps
    res = train(v, net, O, A, OptConfig(**opt, seed=args.seed))
    meta = {
        "variant": v.kind,
        "t_star": v.t_star,
        "stats": ds.stats.to_json(),
        "env": ds.env_kind,
        "env_params": ds.env_params,
        "seed": args.seed,
    }
    for step, c in res.checkpoints:
        save_checkpoint(c, f"{stem}-step{step}.json", {**meta, "step": step})
    save_checkpoint(res.net, stem + ".json", {**meta, "step": len(res.losses)})
    write_csv([{"step": i + 1, "loss": l} for i, l in enumerate(res.losses)], stem + "-loss.csv", ["step", "loss"])


def cmd_eval(args):
    net, v, stats, env, _ = _load_policy(args.checkpoint)
    nfe = args.nfe or default_nfe(v)
    sampler = SamplerConfig(nfe=nfe, mode=args.mode, k=args.k, t_star=v.t_star)
    res = envs.eval_policy(env, envs.NetPolicy(net, v, stats, sampler), args.episodes, args.seed)
    _guard(args.out, args.force)
    row = {"variant": v.kind, "nfe": nfe, "mode": args.mode, "episodes": args.episodes,
           "seed": args.seed, "success_rate": res.success_rate}
    if isinstance(env, envs.ForkMaze2D):
        row.update(envs.mode_histogram(env, res.trajectories))
    write_csv([row], args.out, list(row))


def cmd_metrics(args):
    net, v, stats, env, _ = _load_policy(args.checkpoint)
    ds = _dataset(args.data)
    ds.stats = stats
    _guard(args.out, args.force)
    pol = envs.NetPolicy(net, v, stats)
    lip = estimate_lipschitz(env, ds, pol, eps=args.eps, n_states=args.n_states, seed=args.seed)
    O, A = ds.pairs(env)
    On, An = stats.norm_obs(O), stats.norm_act(A)
    q = stats.norm_obs(env.observe(perturbed_states(env, ds, args.eps, args.manifold_states, args.seed)))
    man = off_manifold_norm(On, An, q, sample_action(net, v, q, SamplerConfig(nfe=default_nfe(v))))
    row = {"variant": v.kind, "lipschitz": lip.L, "coverage": lip.coverage,
           "off_manifold_l2": man.off_l2, "off_manifold_l1": man.off_l1}
    if args.val:
        val = _dataset(args.val)
        val.stats = stats
        Ov, Av = val.normalized(env)
        row["validation_l2"] = validation_loss(net, v, Ov, Av, "L2")
        row["validation_l1"] = validation_loss(net, v, Ov, Av, "L1")
    write_csv([row], args.out, list(row))


def cmd_nfe_study(args):
    plan = _plan(args)
    out = _out_dir(args.out)
    if args.force:
        _guard(os.path.join(out, "results.jsonl"), True)
    _write_json(plan.to_dict(), os.path.join(out, "plan.json"))
    nfes = [int(n) for n in args.nfe] if args.nfe else list(ex.NFE_MENU)
    table = ex.nfe_study(plan, nfes, out, args.workers)
    write_csv(table, os.path.join(out, "nfe_table.csv"), ["variant", "nfe", "success", "std", "n_seeds", "skipped"])
    rows = ex.read_rows(os.path.join(out, "results.jsonl"))
    if any(r.metric == "cell_failed" for r in rows):
        failed = sorted({f"{r.variant}/seed{r.seed}" for r in rows if r.metric == "cell_failed"})
        raise RuntimeError(f"failed cells: {', '.join(failed)}")


def cmd_evidence(args):
    plan = _plan(args)
    out = _out_dir(args.out)
    path = os.path.join(out, "evidence.jsonl")
    _guard(path, args.force)
    rows, hists = ex.evidence_suite(plan)
    ex.append_rows(rows, path)
    _rows_csv(rows, os.path.join(out, "evidence.csv"))
    write_csv([{"seed": s, **h} for s, h in sorted(hists.items())], os.path.join(out, "routes.csv"),
              ["seed", "left", "right", "other"])


def cmd_toyfn(args):
    cfg = ex.ToyConfig()
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config {args.config} not found")
        with open(args.config) as f:
            try:
                cfg = ex.ToyConfig(**json.load(f))
            except TypeError as exc:
                raise ConfigError(str(exc)) from exc
    if args.seeds:
        cfg = ex.ToyConfig(**{**cfg.__dict__, "seeds": [int(s) for s in args.seeds]})
    out = _out_dir(args.out)
    path = os.path.join(out, "toy.jsonl")
    _guard(path, args.force)
    rows = ex.toyfn_study(cfg)
    ex.append_rows(rows, path)
    table = [{"task": t, "variant": v, "metric": m, "mean": val} for (t, v, m), val in sorted(ex.toy_table(rows).items())]
    write_csv(table, os.path.join(out, "toy_table.csv"), ["task", "variant", "metric", "mean"])


def cmd_linear_check(args):
    _guard(args.out, args.force)
    s_grid = np.array([float(s) for s in args.s]) if args.s else np.geomspace(0.1, 10.0, 9)
    rows = linear_lab.shrinkage_sweep(s_grid, args.eta, args.c1, args.c2, args.lambda1, args.lambda2)
    for r in rows:
        r.update(eta=args.eta, c1=args.c1, c2=args.c2, lambda1=args.lambda1, lambda2=args.lambda2)
    cols = ["s", "rho", "phi_shrink", "B_ii", "B_equals_theta", "eta", "c1", "c2", "lambda1", "lambda2"]
    write_csv(rows, args.out, cols)


def cmd_theory_check(args):
    _guard(args.out, args.force)
    rows = []
    for k in args.kappa:
        for tn in args.theta_norm:
            spec = theory_lab.make_spec(k, tn, seed=args.seed)
            rec = theory_lab.verify_theorem1(spec, seed=args.seed, nfe_ref=args.nfe)
            viol = theory_lab.contractivity_check(spec, np.linspace(0.01, 0.99, 99))
            rows.append({"kappa": k, "theta_norm": tn, "lhs": rec.lhs, "rhs": rec.rhs, "margin": rec.margin,
                         "contractivity_violation": viol, "holds": int(rec.holds)})
    write_csv(rows, args.out, ["kappa", "theta_norm", "lhs", "rhs", "margin", "contractivity_violation", "holds"])


def cmd_report(args):
    """Plot-ready CSVs from the result files found under ``--results``."""
    src = args.results
    if not os.path.isdir(src):
        raise ConfigError(f"results directory {src} not found")
    out = _out_dir(args.out or src)
    wrote = 0
    grid = os.path.join(src, "results.jsonl")
    if os.path.exists(grid):
        rows = ex.read_rows(grid)
        summ = ex.summarize(rows)
        for which in ("last5", "best"):
            table = [{"variant": v, "metric": m, "mean": a, "std": s, "n_seeds": n}
                     for (v, m), (a, s, n) in sorted(ex.summarize(rows, which).items())]
            write_csv(table, os.path.join(out, f"variant_comparison_{which}.csv"),
                      ["variant", "metric", "mean", "std", "n_seeds"])
        nfe = [{"variant": v, "nfe": int(m.rsplit("nfe", 1)[1]), "success": a, "std": s, "n_seeds": n}
               for (v, m), (a, s, n) in sorted(summ.items()) if m.startswith("success_nfe")]
        write_csv(nfe, os.path.join(out, "nfe_comparison.csv"), ["variant", "nfe", "success", "std", "n_seeds"])
        man = [{"variant": v, "metric": m, "mean": val} for (v, m), val in sorted(ex.final_metrics(rows).items())]
        write_csv(man, os.path.join(out, "manifold_adherence.csv"), ["variant", "metric", "mean"])
        curves = [r.__dict__ for r in rows if isinstance(r.checkpoint, int) and r.metric.startswith("success")]
        write_csv(curves, os.path.join(out, "checkpoint_curves.csv"),
                  ["variant", "seed", "checkpoint", "metric", "value"])
        wrote += 1
    evid = os.path.join(src, "evidence.jsonl")
    if os.path.exists(evid):
        rows = ex.read_rows(evid)
        groups = {}
        for r in rows:
            groups.setdefault((r.variant, r.metric), []).append(r.value)
        table = [{"variant": v, "metric": m, "mean": float(np.mean(x)), "std": float(np.std(x)), "n_seeds": len(x)}
                 for (v, m), x in sorted(groups.items())]
        write_csv(table, os.path.join(out, "sampling_strategies.csv"), ["variant", "metric", "mean", "std", "n_seeds"])
        wrote += 1
    toy = os.path.join(src, "toy.jsonl")
    if os.path.exists(toy):
        rows = ex.read_rows(toy)
        table = [{"task": t, "variant": v, "metric": m, "mean": val} for (t, v, m), val in sorted(ex.toy_table(rows).items())]
        write_csv(table, os.path.join(out, "toy_functions.csv"), ["task", "variant", "metric", "mean"])
        wrote += 1
    if not wrote:
        raise ConfigError(f"no result files (results.jsonl, evidence.jsonl, toy.jsonl) under {src}")


# --------------------------------------------------------------------------
# parser


def _add_plan(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--plan", help="experiment plan JSON")
    g.add_argument("--preset", choices=sorted(PRESETS), default="narrowgap")
    p.add_argument("--seeds", nargs="+", help="override the plan's training seeds")
    p.add_argument("--data-seed", type=int, help="override the plan's data seed")


def build_parser():
    parser = argparse.ArgumentParser(prog="miplab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate demonstrations for a plan")
    _add_plan(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant on a dataset file")
    _add_plan(p)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="success rate of a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--nfe", type=int)
    p.add_argument("--mode", choices=MODES, default="deterministic_z0")
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", help="Lipschitz and off-manifold metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--n-states", type=int, default=100)
    p.add_argument("--manifold-states", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("nfe-study", help="variant grid over the NFE menu (resumable)")
    _add_plan(p)
    p.add_argument("--nfe", nargs="+")
    p.add_argument("--workers", type=int, default=int(os.environ.get("MIPLAB_WORKERS", "1")))
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_nfe_study)

    p = sub.add_parser("evidence", help="sampling strategies, routes and relabeling on the fork maze")
    _add_plan(p)
    p.set_defaults(preset="fork")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evidence)

    p = sub.add_parser("toyfn", help="toy-function reconstruction and projection study")
    p.add_argument("--config")
    p.add_argument("--seeds", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_toyfn)

    p = sub.add_parser("linear-check", help="isotropic shrinkage factors of the linear surrogate")
    p.add_argument("--lambda1", type=float, default=0.1)
    p.add_argument("--lambda2", type=float, default=0.1)
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--c1", type=float, default=0.9)
    p.add_argument("--c2", type=float, default=0.1)
    p.add_argument("--s", nargs="+", help="singular values (default: 9 log-spaced in [0.1, 10])")
    p.add_argument("--out", default="linear_check.csv")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_linear_check)

    p = sub.add_parser("theory-check", help="flow-map Lipschitz bound on Gaussian targets")
    p.add_argument("--kappa", type=float, nargs="+", default=[0.25, 1.0, 4.0, 100.0])
    p.add_argument("--theta-norm", type=float, nargs="+", default=[0.5, 1.0, 2.0])
    p.add_argument("--nfe", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="theory_check.csv")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_theory_check)

    p = sub.add_parser("report", help="plot-ready CSVs from result files")
    p.add_argument("--results", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on bad syntax
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (ConfigError, ex.PlanError) as exc:
        print(f"miplab {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"miplab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
