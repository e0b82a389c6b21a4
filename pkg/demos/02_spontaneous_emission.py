# %% [markdown]
# # Spontaneous emission under photodetection
#
# A qubit in |+x> decays into a zero-temperature bath while emitted photons
# are counted.  Trajectories either jump to |g> (classical heat -hbar w0) or
# drift towards |e> or |g> without a click, the drift being quantum heat.

# %%
from __future__ import annotations

import numpy as np

from qthermo import SpontaneousEmissionOracle, run_ensemble, spontaneous_emission

gamma, duration = 1.0, 2.0
spec = spontaneous_emission(gamma=gamma, duration=duration, dt=1e-3)
stats = run_ensemble(spec, 5000, master_seed=0)
oracle = SpontaneousEmissionOracle(gamma)

# %%
ts = stats.time_series
print("  t     P_jump  exact   U_nojump  exact")
for t, p, u in zip(ts["t"], ts["jump_fraction"], ts["u_nojump"]):
    print(f"{t:5.2f}  {p:.4f}  {oracle.p_j(t):.4f}  {u:+.4f}  {oracle.u_nj(t):+.4f}")

# %% [markdown]
# Every jump trajectory exchanges exactly one quantum with the bath and
# ends with quantum heat +hbar w0 / 2.

# %%
per = stats.per_trajectory
jumped = per["jumps"] > 0
print("Q_cl on jumps:", np.unique(per["q_cl"][jumped]))
print("Q_q on jumps: ", per["q_q"][jumped].min(), "..", per["q_q"][jumped].max())
print("no-jump boundary entropy:", per["boundary"][~jumped][0], "exact", np.log(2 / (1 + np.exp(-gamma * duration))))
print("jump conditional entropy:", per["conditional"][jumped][0])
