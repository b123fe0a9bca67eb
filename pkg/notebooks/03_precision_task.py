# %% [markdown]
# # Variants on the narrow-gap task
#
# A reduced grid (fewer demonstrations and steps) that runs in a few
# minutes.  The full preset is `miplab nfe-study --preset narrowgap --out DIR`
# followed by `miplab report --results DIR`.

# %%
import logging

import numpy as np

from miplab import envs, experiments as E

logging.basicConfig(level=logging.INFO, format="%(message)s")

plan = E.narrowgap_plan(name="demo", n_traj=200, opt={"steps": 4000, "checkpoint_every": 500},
                        seeds=[0], n_eval=50)
rows = E.run_grid(plan)

# %%
summ = E.summarize(rows)
for (kind, metric), (mean, _, _) in sorted(summ.items()):
    if metric.startswith("success"):
        print(f"{kind:12s} {metric:14s} {mean:.2f}")

# %% [markdown]
# Manifold adherence of the final nets: residual of each prediction after
# projection onto the span of neighbouring demonstration chunks.

# %%
for (kind, metric), v in sorted(E.final_metrics(rows).items()):
    print(f"{kind:12s} {metric:16s} {v:.3f}")

# %% [markdown]
# What the demonstrator does at a replanning state: chunks are either a
# full-speed move or a pause, which is what separates a conditional mean
# from a sampler.

# %%
env = envs.NarrowGap2D()
style = envs.ExpertStyle(**plan.expert)
ds = envs.gen_dataset(env, style, 50, 0, horizon=160, stride=8)
O, A = ds.pairs(env)
speed = np.linalg.norm(A.reshape(len(A), env.chunk, 2), axis=2).mean(axis=1) / env.a_max
print(np.histogram(speed, bins=[0, 0.05, 0.5, 0.95, 1.01])[0])
