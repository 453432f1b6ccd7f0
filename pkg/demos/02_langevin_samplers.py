# %% [markdown]
# # Langevin samplers
#
# SGLD takes a gradient step on an energy and adds Gaussian noise of scale
# sqrt(2 gamma) * epsilon. At stationarity it samples exp(-energy / eps^2).
# The RMSprop and Adam variants precondition the gradient but not the noise,
# so on a Gaussian they settle on a slightly wider normal.

# %%
import numpy as np
from scipy import stats

from mixat.samplers import SamplerConfig, adjusted_normal_variance, diagnose, get_target, run_chains

target = get_target("standard-normal")

# %% [markdown]
# 256 chains of 50k steps each, first 20% discarded. The KS test uses a
# thinned subset of 10k draws so the retained draws are nearly independent.

# %%
for kind in ("sgld", "rmsprop-sgld", "adam-sgld"):
    cfg = SamplerConfig(gamma=0.01, epsilon=1.0, kind=kind, seed=0)
    ref = adjusted_normal_variance(cfg)
    traj = run_chains(target, cfg, 50000, n_chains=256)
    out = diagnose(traj, stats.norm(scale=np.sqrt(ref)).cdf)
    print(f"{kind:13s} predicted var {ref:.4f}  mean {out['mean']:+.4f}  var {out['variance']:.4f}  "
          f"KS {out['ks_statistic']:.4f} < {out['ks_critical']:.4f}")

# %% [markdown]
# Non-Gaussian targets: a two-component mixture and a banana whose first
# coordinate is standard normal.

# %%
for name in ("gaussian-mixture", "banana"):
    t = get_target(name)
    traj = run_chains(t, SamplerConfig(gamma=0.01, epsilon=1.0, seed=1), 30000, n_chains=256)
    out = diagnose(traj, t.cdf(1.0))
    print(f"{name:17s} mean {out['mean']:+.4f}  var {out['variance']:.4f}  KS {out['ks_statistic']:.4f}")

# %% [markdown]
# Without noise the chain is plain gradient descent and stops at the mode.

# %%
traj = run_chains(target, SamplerConfig(gamma=0.05, epsilon=0.0), 2000, n_chains=3,
                  init=np.array([[3.0], [-2.0], [0.5]]))
print("terminal points:", traj[-1].ravel())
