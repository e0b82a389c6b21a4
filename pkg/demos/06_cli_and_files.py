# %% [markdown]
# # Configs, record files and exported tables
#
# The same runs are available from the ``qthermo`` command.  This script
# drives it in-process and reads back what it wrote.

# %%
from __future__ import annotations

import tempfile
from pathlib import Path

from qthermo.cli import main
from qthermo.io import read_records

work = Path(tempfile.mkdtemp())
config = work / "feedback.yaml"
config.write_text(
    "experiment: DephasingFeedback\n"
    "parameters: {gamma_phi: 0.1, cutoff: 0.05}\n"
    "n_trajectories: 200\n"
    "export: {records: true}\n"
)
main(["validate", "--config", str(config)])
main(["run", "--config", str(config), "--seed", "7", "--out", str(work / "out")])

# %%
for path in sorted((work / "out").iterdir()):
    print(path.name, path.stat().st_size, "bytes")
records = read_records(work / "out" / "records.jsonl")
print(len(records), "records; first final energy", records[0].ledger.u_series[-1])

# %%
main(["enumerate", "--experiment", "PrepareMeasure", "--out", str(work / "pm")])
print((work / "pm" / "dist_q_q.csv").read_text())
