# %% [markdown]
# # Sampling strategies and toy functions
#
# A flow trained on the fork maze is evaluated with z = 0, with fresh noise
# and with the average of 64 samples; routes taken under fresh noise show
# whether both branches survive.

# %%
from miplab import experiments as E

plan = E.fork_plan(seeds=[0], opt={"steps": 4000}, n_traj=100, n_eval=50)
rows, hist = E.evidence_suite(plan, relabel_traj=50)
for r in rows:
    print(f"{r.variant:10s} {r.metric:28s} {r.value:.2f}")
print(hist)

# %% [markdown]
# Toy functions: reconstruction error on `sin(1/x)` and subspace metrics on
# the piecewise projection task (small budget).

# %%
cfg = E.ToyConfig(seeds=[0], sin_steps=3000, proj_steps=2000)
for key, v in sorted(E.toy_table(E.toyfn_study(cfg)).items()):
    print(key, round(v, 4))
