"""Open quantum system declarations, Kraus sets and the Lindblad oracle.

Units: hbar = 1.  Energies are measured in units of ``hbar * w0`` when a
reference frequency exists, times in units of ``1 / w0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .core import (
    DENSITY_TOL,
    NORM_TOL,
    SIGMA_MINUS,
    SIGMA_PLUS,
    SIGMA_X,
    SIGMA_Z,
    as_operator,
    check_hermitian,
)
from .errors import DimMismatchError, TimestepTooLargeError

#: Largest allowed ``dt * max_k Gamma_k``.
WEAK_REGIME = 0.1

KRAUS_MODES = ("first_order", "exponential")


@dataclass(frozen=True)
class HamiltonianSchedule:
    """Time-dependent system Hamiltonian ``H_s(t)``."""

    evaluator: Callable[[float], np.ndarray]
    is_static: bool = False
    dim: int = field(init=False)

    def __post_init__(self):
        h0 = check_hermitian(self.evaluator(0.0), name="H_s(0)")
        object.__setattr__(self, "dim", h0.shape[0])

    @classmethod
    def static(cls, h) -> "HamiltonianSchedule":
        h = check_hermitian(np.array(h, dtype=complex), name="H_s")
        h.setflags(write=False)
        return cls(lambda t: h, is_static=True)

    @classmethod
    def piecewise(cls, h_before, h_after, t_switch: float) -> "HamiltonianSchedule":
        """Sudden quench: ``h_before`` for ``t < t_switch``, ``h_after`` afterwards."""
        h_before = check_hermitian(np.array(h_before, dtype=complex), name="H_before")
        h_after = check_hermitian(np.array(h_after, dtype=complex), name="H_after")
        return cls(lambda t: h_before if t < t_switch else h_after)

    def __call__(self, t: float) -> np.ndarray:
        return self.evaluator(t)

    def check(self, times: Sequence[float]) -> None:
        for t in times:
            check_hermitian(self.evaluator(t), name=f"H_s({t:g})")


@dataclass(frozen=True)
class LindbladChannel:
    """A Lindblad operator ``L_k`` with rate ``Gamma_k``.

    ``basis_labels = (i, j)`` declares the single-transition form
    ``L = |j><i|`` in the model's pointer basis.
    """

    operator: np.ndarray
    rate: float
    basis_labels: tuple[int, int] | None = None
    name: str = ""

    def __post_init__(self):
        op = as_operator(self.operator).copy()
        op.setflags(write=False)
        object.__setattr__(self, "operator", op)
        if not self.rate >= 0:
            raise ValueError(f"channel rate must be non-negative, got {self.rate}")
        if self.basis_labels is not None:
            i, j = self.basis_labels
            object.__setattr__(self, "basis_labels", (int(i), int(j)))

    @property
    def is_single_transition(self) -> bool:
        return self.basis_labels is not None


@dataclass(frozen=True)
class KrausSet:
    """Kraus operators for one timestep.  Label 0 is the no-jump outcome,
    label ``k >= 1`` the jump through channel ``k - 1``."""

    operators: np.ndarray
    labels: tuple[int, ...]
    timestep: float

    def completeness_error(self) -> float:
        total = np.einsum("kji,kjl->il", self.operators.conj(), self.operators)
        return float(np.max(np.abs(total - np.eye(total.shape[0]))))


@dataclass(frozen=True)
class OpenSystemModel:
    dim: int
    hamiltonian: HamiltonianSchedule
    channels: tuple[LindbladChannel, ...] = ()
    pointer_basis: np.ndarray | None = None
    beta: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.hamiltonian.dim != self.dim:
            raise DimMismatchError(f"Hamiltonian dimension {self.hamiltonian.dim} != {self.dim}")
        if len(self.channels) > self.dim**2 - 1:
            raise ValueError(f"at most {self.dim ** 2 - 1} Lindblad channels allowed")
        basis = np.eye(self.dim, dtype=complex) if self.pointer_basis is None else as_operator(self.pointer_basis, self.dim)
        if np.max(np.abs(basis.conj().T @ basis - np.eye(self.dim))) > NORM_TOL:
            raise ValueError("pointer basis is not orthonormal")
        basis = basis.copy()
        basis.setflags(write=False)
        object.__setattr__(self, "pointer_basis", basis)
        for ch in self.channels:
            as_operator(ch.operator, self.dim)
            if ch.basis_labels is not None:
                i, j = ch.basis_labels
                expected = np.outer(basis[:, j], basis[:, i].conj())
                if np.max(np.abs(ch.operator - expected)) > NORM_TOL:
                    raise ValueError(f"channel {ch.name or ch.basis_labels} is not |j><i| in the pointer basis")
        if self.beta is not None and self.beta < 0:
            raise ValueError("inverse temperature must be non-negative")

    @property
    def rates(self) -> np.ndarray:
        return np.array([ch.rate for ch in self.channels], dtype=float)

    @property
    def max_rate(self) -> float:
        return float(self.rates.max()) if self.channels else 0.0

    def h_eff(self, t: float) -> np.ndarray:
        """``H_s(t) - (i/2) sum_k Gamma_k L_k^dag L_k``."""
        h = np.array(self.hamiltonian(t), dtype=complex)
        for ch in self.channels:
            h = h - 0.5j * ch.rate * (ch.operator.conj().T @ ch.operator)
        return h

    def pointer_energies(self, t: float) -> np.ndarray:
        """``eps_i(t) = <i|H_s(t)|i>`` for the pointer basis states."""
        h = self.hamiltonian(t)
        b = self.pointer_basis
        return np.einsum("ji,jk,ki->i", b.conj(), h, b).real

    def classical_heat(self, k: int, t: float) -> float:
        """``Q_cl = eps_j - eps_i`` for a jump through channel ``k``."""
        ch = self.channels[k]
        if ch.basis_labels is None:
            from .errors import ChannelNotSingleTransitionError

            raise ChannelNotSingleTransitionError(f"channel {k} has no (i, j) basis labels")
        eps = self.pointer_energies(t)
        i, j = ch.basis_labels
        return float(eps[j] - eps[i])

    def stationary_state(self, t: float, beta: float | None = None) -> np.ndarray:
        """Pointer-diagonal Gibbs state ``pi_s`` used for thermal reversals."""
        beta = self.beta if beta is None else beta
        if beta is None:
            from .errors import MissingTemperatureError

            raise MissingTemperatureError("model has no inverse temperature")
        w = _gibbs_weights(self.pointer_energies(t), beta)
        b = self.pointer_basis
        return (b * w) @ b.conj().T

    def check_timestep(self, dt: float) -> None:
        if not dt > 0:
            raise TimestepTooLargeError(f"timestep must be positive, got {dt}")
        if dt * self.max_rate >= WEAK_REGIME:
            raise TimestepTooLargeError(
                f"dt * max rate = {dt * self.max_rate:.3g} leaves the weak-measurement regime (< {WEAK_REGIME})"
            )


def _gibbs_weights(energies: np.ndarray, beta: float) -> np.ndarray:
    energies = np.asarray(energies, dtype=float)
    shifted = energies - energies.min()
    if np.isinf(beta):
        w = (shifted <= 1e-12).astype(float)
    else:
        w = np.exp(-beta * shifted)
    return w / w.sum()


def _exponential_jump_weights(model: OpenSystemModel, dt: float) -> np.ndarray:
    """Jump weights that make the Kraus set exactly complete whenever
    ``H_s`` is diagonal in the pointer basis (exact survival probability)."""
    rates = model.rates
    weights = rates * dt
    outflow: dict[int, float] = {}
    for ch in model.channels:
        if ch.basis_labels is not None:
            outflow[ch.basis_labels[0]] = outflow.get(ch.basis_labels[0], 0.0) + ch.rate
    for k, ch in enumerate(model.channels):
        if ch.basis_labels is not None and ch.rate > 0:
            x = outflow[ch.basis_labels[0]] * dt
            weights[k] = rates[k] * dt * (-np.expm1(-x) / x)
    return weights


def no_jump_operator(model: OpenSystemModel, t: float, dt: float, kraus: str = "first_order") -> np.ndarray:
    h_eff = model.h_eff(t)
    if kraus == "first_order":
        return np.eye(model.dim, dtype=complex) - 1j * dt * h_eff
    if kraus == "exponential":
        return expm(-1j * dt * h_eff)
    raise ValueError(f"unknown Kraus mode {kraus!r}; expected one of {KRAUS_MODES}")


def build_qj_kraus(model: OpenSystemModel, t: float, dt: float, kraus: str = "first_order") -> KrausSet:
    """Quantum-jump Kraus set ``{M_0, M_1, ..., M_K}`` for one timestep.

    ``first_order`` gives ``M_0 = 1 - i dt H_eff`` and ``M_k = sqrt(Gamma_k dt) L_k``.
    ``exponential`` uses ``M_0 = exp(-i dt H_eff)`` with jump weights
    ``Gamma_k dt (1 - exp(-x)) / x``, which agree to first order and close
    the set exactly for pointer-diagonal Hamiltonians.
    """
    model.check_timestep(dt)
    m0 = no_jump_operator(model, t, dt, kraus)
    weights = _exponential_jump_weights(model, dt) if kraus == "exponential" else model.rates * dt
    ops = [m0] + [np.sqrt(w) * ch.operator for w, ch in zip(weights, model.channels)]
    return KrausSet(np.array(ops), tuple(range(len(ops))), dt)


def lindblad_rhs(rho: np.ndarray, model: OpenSystemModel, t: float) -> np.ndarray:
    h = model.hamiltonian(t)
    out = -1j * (h @ rho - rho @ h)
    for ch in model.channels:
        L = ch.operator
        LdL = L.conj().T @ L
        out = out + ch.rate * (L @ rho @ L.conj().T - 0.5 * (LdL @ rho + rho @ LdL))
    return out


def lindblad_step(rho: np.ndarray, model: OpenSystemModel, t: float, dt: float) -> np.ndarray:
    """One explicit Euler step of the Lindblad master equation."""
    model.check_timestep(dt)
    rho = as_operator(rho, model.dim)
    new = rho + dt * lindblad_rhs(rho, model, t)
    new = 0.5 * (new + new.conj().T)
    return new / np.trace(new).real


def lindblad_evolve(rho0: np.ndarray, model: OpenSystemModel, t0: float, dt: float, n_steps: int) -> np.ndarray:
    """Euler trajectory of the master equation; returns ``(n_steps + 1, d, d)``."""
    out = np.empty((n_steps + 1, model.dim, model.dim), dtype=complex)
    out[0] = rho0
    for n in range(n_steps):
        out[n + 1] = lindblad_step(out[n], model, t0 + n * dt, dt)
    return out


def thermal_state(model: OpenSystemModel, beta: float, t: float = 0.0) -> np.ndarray:
    """Gibbs state ``exp(-beta H_s(t)) / Z``; ``beta = inf`` gives the ground state."""
    evals, evecs = np.linalg.eigh(model.hamiltonian(t))
    w = _gibbs_weights(evals, beta)
    rho = (evecs * w) @ evecs.conj().T
    return 0.5 * (rho + rho.conj().T)


def equilibrium_free_energy(model: OpenSystemModel, beta: float, t: float = 0.0) -> float:
    """``F = -log(Z) / beta`` evaluated without overflow."""
    evals = np.linalg.eigvalsh(model.hamiltonian(t))
    e_min = evals.min()
    if np.isinf(beta):
        return float(e_min)
    if beta == 0:
        raise ValueError("free energy diverges at beta = 0")
    return float(e_min - np.log(np.sum(np.exp(-beta * (evals - e_min)))) / beta)


def energy_eigenbasis(model: OpenSystemModel, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and eigenvectors (columns) of ``H_s(t)``."""
    return np.linalg.eigh(model.hamiltonian(t))


# -- qubit model builders ---------------------------------------------------


def qubit_hamiltonian(omega0: float = 1.0) -> np.ndarray:
    return 0.5 * omega0 * SIGMA_Z


def closed_qubit(omega0: float = 1.0) -> OpenSystemModel:
    return OpenSystemModel(2, HamiltonianSchedule.static(qubit_hamiltonian(omega0)))


def spontaneous_emission_model(gamma: float, omega0: float = 1.0) -> OpenSystemModel:
    """Qubit coupled to a zero-temperature bath through ``sigma_-``."""
    decay = LindbladChannel(SIGMA_MINUS, gamma, basis_labels=(0, 1), name="decay")
    return OpenSystemModel(2, HamiltonianSchedule.static(qubit_hamiltonian(omega0)), (decay,), beta=np.inf)


def dephasing_model(gamma_phi: float, omega0: float = 1.0) -> OpenSystemModel:
    """Qubit continuously monitored along ``sigma_z`` at rate ``gamma_phi``."""
    monitor = LindbladChannel(SIGMA_Z, gamma_phi, name="dephasing")
    return OpenSystemModel(2, HamiltonianSchedule.static(qubit_hamiltonian(omega0)), (monitor,))


def bose_occupation(beta: float, omega0: float) -> float:
    if np.isinf(beta):
        return 0.0
    return float(1.0 / np.expm1(beta * omega0))


def thermal_qubit_model(
    gamma: float,
    omega0: float,
    beta: float,
    hamiltonian: HamiltonianSchedule | None = None,
) -> OpenSystemModel:
    """Qubit in a detailed-balance bath: ``sigma_-`` at ``Gamma (n + 1)``,
    ``sigma_+`` at ``Gamma n`` with ``n`` the Bose occupation at ``w0``."""
    nbar = bose_occupation(beta, omega0)
    channels = (
        LindbladChannel(SIGMA_MINUS, gamma * (nbar + 1), basis_labels=(0, 1), name="emission"),
        LindbladChannel(SIGMA_PLUS, gamma * nbar, basis_labels=(1, 0), name="absorption"),
    )
    if hamiltonian is None:
        hamiltonian = HamiltonianSchedule.static(qubit_hamiltonian(omega0))
    return OpenSystemModel(2, hamiltonian, channels, beta=beta)


def transverse_ramp(omega0: float, amplitude: float, duration: float) -> HamiltonianSchedule:
    """``(w0/2) sigma_z + (lambda(t)/2) sigma_x`` with ``lambda`` ramped
    linearly from 0 to ``amplitude`` over ``duration``.

    The drive has no diagonal part, so the pointer energies stay ``+-w0/2``.
    """

    def h(t: float) -> np.ndarray:
        lam = amplitude * min(max(t / duration, 0.0), 1.0)
        return 0.5 * omega0 * SIGMA_Z + 0.5 * lam * SIGMA_X

    return HamiltonianSchedule(h)


__all__ = [
    "DENSITY_TOL",
    "HamiltonianSchedule",
    "KrausSet",
    "LindbladChannel",
    "OpenSystemModel",
    "bose_occupation",
    "build_qj_kraus",
    "closed_qubit",
    "dephasing_model",
    "energy_eigenbasis",
    "equilibrium_free_energy",
    "lindblad_evolve",
    "lindblad_rhs",
    "lindblad_step",
    "no_jump_operator",
    "qubit_hamiltonian",
    "spontaneous_emission_model",
    "thermal_qubit_model",
    "thermal_state",
    "transverse_ramp",
]
