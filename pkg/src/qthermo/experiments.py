"""Preset experiments: models, protocols, feedback control and analytic oracles.

Qubit presets use ``H = (w0/2) sigma_z`` unless stated otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from .core import (
    KET_E,
    KET_G,
    KET_PLUS_X,
    SIGMA_X,
    SIGMA_Z,
    fidelity,
    plus_theta,
    theta_basis,
)
from .errors import TreeTooLargeError
from .irreversibility import StateDistribution
from .model import (
    HamiltonianSchedule,
    OpenSystemModel,
    closed_qubit,
    dephasing_model,
    spontaneous_emission_model,
    thermal_qubit_model,
    thermal_state,
    transverse_ramp,
)
from .unraveling import (
    BRANCH_CUTOFF,
    Protocol,
    _matvec,
    _OperatorCache,
    qj_candidates,
    qj_selection_probs,
    steps_between,
)

EXPERIMENTS = ("PrepareMeasure", "SpontaneousEmission", "DephasingFeedback", "JarzynskiClosed", "JarzynskiOpen")

#: How the reversed process picks its initial state.
REVERSE_PRIORS = ("final_mixture", "thermal", None)


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    model: OpenSystemModel
    protocol: Protocol
    parameters: Mapping[str, Any] = field(default_factory=dict)
    reverse_prior: str | None = "final_mixture"

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}")
        if self.reverse_prior not in REVERSE_PRIORS:
            raise ValueError(f"unknown reverse prior {self.reverse_prior!r}")

    @property
    def beta(self) -> float | None:
        return self.parameters.get("beta", self.model.beta)


def _check_angle(name: str, theta: float) -> None:
    if not 0 <= theta <= math.pi:
        raise ValueError(f"{name} must lie in [0, pi], got {theta}")


def _check_positive(name: str, value: float) -> None:
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")


# -- prepare and measure ------------------------------------------------------------


def prepare_measure(
    theta_prep: float = math.pi / 3,
    theta_meas: float = 0.0,
    omega0: float = 1.0,
    mixed_preparation: bool = False,
) -> ExperimentSpec:
    """Prepare ``|+_theta_prep>`` and measure in ``{|+-_theta_meas>}``.

    The mixed variant prepares ``cos^2(theta/2)|e><e| + sin^2(theta/2)|g><g|``
    by sampling ``|e>`` or ``|g>``.
    """
    _check_angle("theta_prep", theta_prep)
    _check_angle("theta_meas", theta_meas)
    _check_positive("omega0", omega0)
    if mixed_preparation:
        c2 = math.cos(theta_prep / 2) ** 2
        states, probs = np.array([KET_E, KET_G]), np.array([c2, 1 - c2])
    else:
        states, probs = plus_theta(theta_prep)[None, :], np.ones(1)
    protocol = Protocol(states, probs, scheme="qj", n_steps=0, final_basis=theta_basis(theta_meas))
    params = dict(theta_prep=theta_prep, theta_meas=theta_meas, omega0=omega0, mixed=bool(mixed_preparation))
    return ExperimentSpec("PrepareMeasure", closed_qubit(omega0), protocol, params)


def prepare_measure_oracle(theta_prep: float, theta_meas: float, omega0: float = 1.0) -> dict[str, np.ndarray]:
    """Exact outcome probabilities and quantum heats of the pure protocol."""
    psi = plus_theta(theta_prep)
    basis = theta_basis(theta_meas)
    probs = np.abs(basis.conj().T @ psi) ** 2
    u0 = 0.5 * omega0 * math.cos(theta_prep)
    energies = 0.5 * omega0 * np.real(np.einsum("ij,ik,kj->j", basis.conj(), SIGMA_Z, basis))
    return {"probs": probs, "q_q": energies - u0}


# -- spontaneous emission ------------------------------------------------------------


def spontaneous_emission(
    gamma: float = 1.0,
    omega0: float = 1.0,
    duration: float = 1.0,
    dt: float | None = None,
    kraus: str = "exponential",
) -> ExperimentSpec:
    """Qubit in ``|+_x>`` decaying into a zero-temperature bath, photons counted."""
    _check_positive("gamma", gamma)
    _check_positive("duration", duration)
    dt = 1e-3 / gamma if dt is None else dt
    protocol = Protocol.pure(KET_PLUS_X, scheme="qj", dt=dt, n_steps=steps_between(0.0, duration, dt), kraus=kraus)
    params = dict(gamma=gamma, omega0=omega0, duration=duration, dt=dt, kraus=kraus)
    return ExperimentSpec("SpontaneousEmission", spontaneous_emission_model(gamma, omega0), protocol, params)


@dataclass(frozen=True)
class SpontaneousEmissionOracle:
    """Closed forms for emission from ``|+_x>`` at zero temperature."""

    gamma: float
    omega0: float = 1.0

    def p_nj(self, t):
        return 0.5 * (1 + np.exp(-self.gamma * np.asarray(t)))

    def p_j(self, t):
        return 0.5 * (1 - np.exp(-self.gamma * np.asarray(t)))

    def psi_nj(self, t: float) -> np.ndarray:
        g, w = self.gamma, self.omega0
        amp = np.array([np.exp(-(g + 1j * w) * t / 2), np.exp(1j * w * t / 2)])
        return amp / math.sqrt(1 + math.exp(-g * t))

    def u_nj(self, t):
        x = np.exp(-self.gamma * np.asarray(t))
        return 0.5 * self.omega0 * (x - 1) / (x + 1)

    def boundary_nj(self, t):
        return np.log(2 / (1 + np.exp(-self.gamma * np.asarray(t))))

    def boundary_j(self, t):
        return np.log(2 / (1 - np.exp(-self.gamma * np.asarray(t))))

    def mean_boundary(self, t):
        p = self.p_nj(t)
        return -(p * np.log(p) + (1 - p) * np.log(1 - p))

    q_cl_jump = property(lambda self: -self.omega0)
    q_q_jump = property(lambda self: 0.5 * self.omega0)


# -- dephasing with feedback -----------------------------------------------------------


def _ry(phi: np.ndarray) -> np.ndarray:
    c, s = np.cos(phi / 2), np.sin(phi / 2)
    out = np.zeros(np.shape(phi) + (2, 2), dtype=complex)
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


def _wrap(angle):
    return (np.asarray(angle) + np.pi) % (2 * np.pi) - np.pi


def _xz_angle(states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Polar angle in the x-z plane and its radius, per row."""
    a, b = states[..., 0], states[..., 1]
    z = np.abs(a) ** 2 - np.abs(b) ** 2
    x = 2 * np.real(np.conj(a) * b)
    return np.arctan2(x, z), np.hypot(x, z)


def feedback_control_angle(current: np.ndarray, target: np.ndarray) -> float:
    """Angle ``phi`` such that ``exp(-i phi sigma_y / 2)`` best maps ``current`` onto ``target``.

    Both states are taken in the same frame; the rotation aligns their
    projections on the x-z great circle.
    """
    a_cur, _ = _xz_angle(np.asarray(current, dtype=complex))
    a_tgt, _ = _xz_angle(np.asarray(target, dtype=complex))
    return float(_wrap(a_tgt - a_cur))


def control_unitary(phi) -> np.ndarray:
    """``exp(-i phi sigma_y / 2)``."""
    return _ry(np.asarray(phi, dtype=float))


def kick_work(alpha, radius, phi, omega0: float):
    """Energy change ``(w0/2) r (cos(alpha + phi) - cos(alpha))`` of a y-rotation."""
    return 0.5 * omega0 * radius * (np.cos(alpha + phi) - np.cos(alpha))


def _clip_angles(alpha, radius, phi, omega0: float, cutoff: float, grid: int = 65, iters: int = 60):
    """Shrink ``phi`` to the first angle along ``[0, phi]`` where ``|dW| = cutoff``."""
    frac = np.linspace(0.0, 1.0, grid)
    work = np.abs(kick_work(alpha[:, None], radius[:, None], phi[:, None] * frac[None, :], omega0))
    over = work > cutoff
    clip = over.any(axis=1)
    if not clip.any():
        return phi, clip
    first = np.argmax(over[clip], axis=1)
    lo = frac[first - 1]
    hi = frac[first]
    a, r, p = alpha[clip], radius[clip], phi[clip]
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        bad = np.abs(kick_work(a, r, p * mid, omega0)) > cutoff
        hi = np.where(bad, mid, hi)
        lo = np.where(bad, lo, mid)
    out = phi.copy()
    out[clip] = p * lo
    return out, clip


@dataclass(frozen=True)
class FeedbackController:
    """Stabilizes ``exp(-i w0 sigma_z t / 2)|+_theta>`` with ``sigma_y`` kicks.

    Kicks are computed in the frame rotating with the bare Hamiltonian, where
    the target is fixed; ``cutoff`` bounds ``|dW_fb|`` per kick.
    """

    omega0: float = 1.0
    theta: float = math.pi / 2
    cutoff: float | None = None

    def target(self, t: float) -> np.ndarray:
        phase = np.exp(-0.5j * self.omega0 * t * np.array([1.0, -1.0]))
        return phase * plus_theta(self.theta)

    def angles(self, t: float, states: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rot = np.exp(0.5j * self.omega0 * t * np.array([1.0, -1.0]))
        alpha, radius = _xz_angle(states * rot[None, :])
        phi = _wrap(self.theta - alpha)
        if self.cutoff is not None:
            phi, _ = _clip_angles(alpha, radius, phi, self.omega0, self.cutoff)
        return phi, alpha, radius

    def __call__(self, t: float, states: np.ndarray, outcome=None) -> np.ndarray:
        phi, _, _ = self.angles(t, states)
        rz = np.exp(-0.5j * self.omega0 * t * np.array([1.0, -1.0]))
        ry = _ry(phi)
        return rz[None, :, None] * ry * rz.conj()[None, None, :]


def dephasing_feedback(
    gamma_phi: float = 0.1,
    omega0: float = 1.0,
    duration: float = 1.5,
    dt: float = 0.01,
    cutoff: float | None = None,
    feedback: bool = True,
    theta: float = math.pi / 2,
) -> ExperimentSpec:
    """Weak ``sigma_z`` monitoring from ``|+_theta>``, optionally with feedback."""
    _check_positive("gamma_phi", gamma_phi)
    _check_positive("duration", duration)
    _check_angle("theta", theta)
    if cutoff is not None:
        _check_positive("cutoff", cutoff)
    controller = FeedbackController(omega0, theta, cutoff) if feedback else None
    protocol = Protocol.pure(
        plus_theta(theta), scheme="qsd", dt=dt, n_steps=steps_between(0.0, duration, dt), controller=controller
    )
    params = dict(gamma_phi=gamma_phi, omega0=omega0, duration=duration, dt=dt, cutoff=cutoff, feedback=feedback, theta=theta)
    return ExperimentSpec("DephasingFeedback", dephasing_model(gamma_phi, omega0), protocol, params, reverse_prior=None)


def quantum_heat_std(theta, gamma_phi: float, dt: float, omega0: float = 1.0):
    """Leading-order std of one diffusive heat increment at latitude ``theta``."""
    return omega0 * np.sqrt(gamma_phi * dt) * np.sin(theta) ** 2


# -- Jarzynski ----------------------------------------------------------------------------


def frequency_quench(omega0: float, omega1: float, t_switch: float) -> HamiltonianSchedule:
    return HamiltonianSchedule.piecewise(0.5 * omega0 * SIGMA_Z, 0.5 * omega1 * SIGMA_Z, t_switch)


def axis_quench(omega0: float, t_switch: float) -> HamiltonianSchedule:
    """``(w0/2) sigma_z`` switched to ``(w0/2) sigma_x``."""
    return HamiltonianSchedule.piecewise(0.5 * omega0 * SIGMA_Z, 0.5 * omega0 * SIGMA_X, t_switch)


def commuting_ramp(omega0: float, omega1: float, duration: float) -> HamiltonianSchedule:
    """``(w(t)/2) sigma_z`` with ``w`` linear from ``omega0`` to ``omega1``."""

    def h(t: float) -> np.ndarray:
        s = min(max(t / duration, 0.0), 1.0)
        return 0.5 * (omega0 + (omega1 - omega0) * s) * SIGMA_Z

    return HamiltonianSchedule(h)


def jarzynski_protocol(
    drive: HamiltonianSchedule,
    beta: float,
    duration: float,
    dt: float,
    open_system: bool = False,
    gamma: float = 0.5,
    omega0: float = 1.0,
) -> ExperimentSpec:
    """Two-point energy measurement around a driven evolution.

    The first measurement of the thermal state is realized by sampling an
    eigenstate of ``H(0)`` with its Gibbs weight.  The open variant couples
    the qubit to a detailed-balance bath at ``beta`` (gap ``omega0``) and
    monitors the emitted and absorbed quanta.
    """
    _check_positive("beta", beta)
    _check_positive("duration", duration)
    if open_system:
        model = thermal_qubit_model(gamma, omega0, beta, hamiltonian=drive)
        kraus = "first_order"
    else:
        model = OpenSystemModel(2, drive, (), beta=beta)
        kraus = "exponential"
    evals, evecs = np.linalg.eigh(drive(0.0))
    rho0 = thermal_state(model, beta, 0.0)
    probs = np.real(np.einsum("ji,jk,ki->i", evecs.conj(), rho0, evecs))
    protocol = Protocol(
        evecs.T.copy(), probs, scheme="qj", dt=dt, n_steps=steps_between(0.0, duration, dt), kraus=kraus,
        final_basis="energy",
    )
    name = "JarzynskiOpen" if open_system else "JarzynskiClosed"
    params = dict(beta=beta, duration=duration, dt=dt, gamma=gamma if open_system else 0.0, omega0=omega0)
    return ExperimentSpec(name, model, protocol, params, reverse_prior="thermal")


def jarzynski_closed(
    beta: float = 1.0,
    omega0: float = 1.0,
    omega1: float = 2.0,
    quench: str = "frequency",
    duration: float = 1.0,
    dt: float = 0.01,
) -> ExperimentSpec:
    """Closed qubit: sudden ``omega0 -> omega1`` quench at mid-protocol,
    sudden ``sigma_z -> sigma_x`` quench, or a commuting linear ramp."""
    t_switch = 0.5 * duration
    if quench == "frequency":
        drive = frequency_quench(omega0, omega1, t_switch)
    elif quench == "axis":
        drive = axis_quench(omega0, t_switch)
    elif quench == "ramp":
        drive = commuting_ramp(omega0, omega1, duration)
    else:
        raise ValueError(f"unknown quench {quench!r}")
    spec = jarzynski_protocol(drive, beta, duration, dt, open_system=False, omega0=omega0)
    params = dict(spec.parameters, omega1=omega1, quench=quench)
    return ExperimentSpec(spec.name, spec.model, spec.protocol, params, spec.reverse_prior)


def jarzynski_open(
    beta: float = 1.0,
    omega0: float = 1.0,
    gamma: float = 0.5,
    amplitude: float = 1.0,
    duration: float = 2.0,
    dt: float = 2e-3,
) -> ExperimentSpec:
    """Qubit driven by a transverse ramp while exchanging quanta with a thermal bath."""
    spec = jarzynski_protocol(transverse_ramp(omega0, amplitude, duration), beta, duration, dt, True, gamma, omega0)
    params = dict(spec.parameters, amplitude=amplitude)
    return ExperimentSpec(spec.name, spec.model, spec.protocol, params, spec.reverse_prior)


# -- reference distributions for the reversed process -------------------------------------------


def _merge(states: np.ndarray, probs: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    keep_states: list[np.ndarray] = []
    keep_probs: list[float] = []
    for psi, p in zip(states, probs):
        if keep_states:
            f = fidelity(np.array(keep_states), psi[None, :])
            hit = int(np.argmax(f))
            if f[hit] >= 1 - tol:
                keep_probs[hit] += p
                continue
        keep_states.append(psi)
        keep_probs.append(p)
    return np.array(keep_states), np.array(keep_probs)


def final_state_distribution(spec: ExperimentSpec, merge_tol: float = 1e-10, max_states: int = 10_000) -> StateDistribution:
    """Exact distribution of final states, merging coinciding branches step by step.

    Uses the same kernels as the trajectory engine, so final states of
    sampled trajectories match the returned states to rounding.
    """
    model, protocol = spec.model, spec.protocol
    if protocol.scheme != "qj" and protocol.n_steps:
        raise ValueError("final-state enumeration needs discrete outcomes")
    keep = protocol.initial_probs > 0
    states, probs = _merge(protocol.initial_states[keep], protocol.initial_probs[keep], merge_tol)
    times = protocol.times
    cache = _OperatorCache(model, protocol, reverse=False)
    for n in range(protocol.n_steps):
        ops, _, _ = cache.qj(times[n])
        phi, weights = qj_candidates(ops, states)
        sel = qj_selection_probs(weights)
        rows, labels = np.nonzero(sel > BRANCH_CUTOFF)
        post = phi[rows, labels] / np.sqrt(weights[rows, labels])[:, None]
        new_probs = probs[rows] * sel[rows, labels]
        if protocol.controller is not None:
            kicks = protocol.controller(times[n + 1], post, labels)
            if kicks is not None:
                post = _matvec(np.asarray(kicks, dtype=complex), post)
        states, probs = _merge(post, new_probs, merge_tol)
        if states.shape[0] > max_states:
            raise TreeTooLargeError(f"more than {max_states} distinct states")
    basis = protocol.final_basis_matrix(model)
    if basis is not None:
        born = np.abs(states.conj() @ basis) ** 2
        return StateDistribution(basis.T.copy(), probs @ born)
    return StateDistribution(states, probs)


def reverse_reference(spec: ExperimentSpec):
    """Distribution ``p_r`` of the reversed initial state, or ``None``."""
    if spec.reverse_prior is None:
        return None
    if spec.reverse_prior == "thermal":
        return thermal_state(spec.model, spec.beta, spec.protocol.t_final)
    return final_state_distribution(spec)


# -- registry -----------------------------------------------------------------------------------


@dataclass(frozen=True)
class Parameter:
    default: Any
    kind: type
    doc: str
    nullable: bool = False


PRESETS: dict[str, tuple[Callable[..., ExperimentSpec], dict[str, Parameter]]] = {
    "PrepareMeasure": (
        lambda theta_prep, theta_meas, omega0, mixed: prepare_measure(theta_prep, theta_meas, omega0, mixed),
        {
            "theta_prep": Parameter(math.pi / 3, float, "preparation angle (rad)"),
            "theta_meas": Parameter(0.0, float, "measurement basis angle (rad)"),
            "omega0": Parameter(1.0, float, "qubit frequency (energy unit hbar w0)"),
            "mixed": Parameter(False, bool, "prepare the energy-diagonal mixture instead"),
        },
    ),
    "SpontaneousEmission": (
        spontaneous_emission,
        {
            "gamma": Parameter(1.0, float, "decay rate Gamma (1/time)"),
            "omega0": Parameter(1.0, float, "qubit frequency"),
            "duration": Parameter(1.0, float, "protocol duration (time)"),
            "dt": Parameter(1e-3, float, "timestep (time)"),
            "kraus": Parameter("exponential", str, "first_order or exponential no-jump operator"),
        },
    ),
    "DephasingFeedback": (
        dephasing_feedback,
        {
            "gamma_phi": Parameter(0.1, float, "pure dephasing rate Gamma* (1/time)"),
            "omega0": Parameter(1.0, float, "qubit frequency"),
            "duration": Parameter(1.5, float, "protocol duration (time)"),
            "dt": Parameter(0.01, float, "timestep (time)"),
            "cutoff": Parameter(None, float, "max |dW_fb| per kick (energy); null = unlimited", nullable=True),
            "feedback": Parameter(True, bool, "enable the stabilizing controller"),
            "theta": Parameter(math.pi / 2, float, "target latitude (rad)"),
        },
    ),
    "JarzynskiClosed": (
        jarzynski_closed,
        {
            "beta": Parameter(1.0, float, "inverse temperature (1/energy)"),
            "omega0": Parameter(1.0, float, "initial qubit frequency"),
            "omega1": Parameter(2.0, float, "frequency after the quench"),
            "quench": Parameter("frequency", str, "frequency, axis or ramp"),
            "duration": Parameter(1.0, float, "protocol duration (time)"),
            "dt": Parameter(0.01, float, "timestep (time)"),
        },
    ),
    "JarzynskiOpen": (
        jarzynski_open,
        {
            "beta": Parameter(1.0, float, "bath inverse temperature (1/energy)"),
            "omega0": Parameter(1.0, float, "qubit frequency"),
            "gamma": Parameter(0.5, float, "bath coupling rate (1/time)"),
            "amplitude": Parameter(1.0, float, "final transverse drive amplitude (energy)"),
            "duration": Parameter(2.0, float, "protocol duration (time)"),
            "dt": Parameter(2e-3, float, "timestep (time)"),
        },
    ),
}


def build_preset(name: str, **overrides) -> ExperimentSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    builder, params = PRESETS[name]
    unknown = set(overrides) - set(params)
    if unknown:
        raise ValueError(f"unknown parameters for {name}: {sorted(unknown)}")
    values = {k: overrides.get(k, p.default) for k, p in params.items()}
    return builder(**values)
