# %% [markdown]
# # Linear surrogate of two-pass inference
#
# Population ridge fits of `a_hat = B o + C w` with `w = c1 a + c2 z`, and
# the composed map `Phi = B2 + c1 C2 B1`.  Diagonal `Theta` makes every
# quantity a per-direction shrinkage factor.

# %%
import numpy as np

from miplab import linear_lab as ll

s = np.logspace(-1, 1, 9)

# %% [markdown]
# With no ridge on `B` the factors do not depend on the singular value.

# %%
for lam1 in (0.0, 0.1, 1.0):
    rows = ll.shrinkage_sweep(s, eta=0.3, c1=0.9, c2=0.1, lam1=lam1, lam2=0.1)
    print(f"lambda1={lam1:<4}", " ".join(f"{r['phi_shrink']:.3f}" for r in rows))

# %% [markdown]
# Closed forms against the gradient-descent oracle on a random full spec.

# %%
spec = ll.random_spec(np.random.default_rng(0), d=5)
B, C = ll.gd_oracle(spec, "B")
sol = ll.ridge_B(spec)
print("||B - B_gd|| =", np.linalg.norm(sol.B - B), " normal-eq residuals:", sol.residuals(spec, "B"))

# %% [markdown]
# Noise-free, unregularized data: the first pass recovers `Theta` exactly.

# %%
exact = ll.ridge_B(ll.isotropic_spec(s, eta=0.0, lambda1=0.0))
print(np.abs(np.diag(exact.B) - s).max())
