# %% [markdown]
# # Diffusive monitoring of the qubit energy
#
# Continuous weak measurement of sigma_z unravels pure dephasing into a
# diffusive trajectory.  Energy changes are pure quantum heat, proportional
# to the Wiener increment and the squared coherence.

# %%
from __future__ import annotations

import numpy as np
from scipy import stats as sps

from qthermo import KET_PLUS_X, run_trajectory
from qthermo.model import dephasing_model
from qthermo.unraveling import trajectory_rng

gamma, dt = 0.1, 0.01
rec = run_trajectory(dephasing_model(gamma), "qsd", KET_PLUS_X, 0.0, 10.0, dt, trajectory_rng(0, 0))
psi = rec.states[:-1]
x = 4 * np.sqrt(gamma) * rec.outcomes[:, 0] * np.abs(psi[:, 0] * np.conj(psi[:, 1])) ** 2
fit = sps.linregress(x, np.diff(rec.ledger.u_series))
print(f"dU against 4 sqrt(G) w0 dw |<s->|^2: slope {fit.slope:.4f}, intercept {fit.intercept:.1e}")

# %% [markdown]
# Long runs collapse onto |e> or |g>: the energy change becomes +-hbar w0 / 2.

# %%
long = run_trajectory(dephasing_model(1.0), "qsd", KET_PLUS_X, 0.0, 15.0, dt, trajectory_rng(0, 1))
print("final energy change:", long.ledger.u_series[-1] - long.ledger.u_series[0])
