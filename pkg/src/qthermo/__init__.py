"""Stochastic thermodynamics of monitored open quantum systems.

Quantum-jump and quantum-state-diffusion trajectories of small open
systems, per-trajectory energy bookkeeping (work, classical heat, quantum
heat, feedback work), entropy production and fluctuation-theorem
estimators, plus an ensemble runner and a small command-line tool.
"""

from __future__ import annotations

from .core import (
    KET_E,
    KET_G,
    KET_PLUS_X,
    SIGMA_MINUS,
    SIGMA_PLUS,
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    density_from_states,
    expectation,
    fidelity,
    plus_theta,
    theta_basis,
    trace_distance,
    von_neumann_entropy,
)
from .ensemble import EnsembleStats, Enumeration, enumerate_trajectories, histogram, run_ensemble
from .errors import *  # noqa: F401,F403
from .experiments import (
    EXPERIMENTS,
    PRESETS,
    ExperimentSpec,
    FeedbackController,
    SpontaneousEmissionOracle,
    build_preset,
    dephasing_feedback,
    jarzynski_closed,
    jarzynski_open,
    prepare_measure,
    quantum_heat_std,
    spontaneous_emission,
)
from .io import RunConfig, export_plot_data, parse_config, read_records, write_records
from .irreversibility import (
    EntropyBreakdown,
    Estimate,
    entropy_production,
    fluctuation_theorem_estimator,
    jarzynski_estimator,
    mean_entropy_production,
)
from .ledger import ThermoLedger
from .model import (
    HamiltonianSchedule,
    KrausSet,
    LindbladChannel,
    OpenSystemModel,
    build_qj_kraus,
    lindblad_evolve,
    thermal_state,
)
from .outcomes import Diffusive, Jump, NoJump
from .unraveling import Protocol, TrajectoryRecord, propagate, qj_step, qsd_step, run_trajectory, simulate

__version__ = "0.1.0"
