"""Stochastic thermodynamic bookkeeping along single trajectories.

Per step the engine records, at the Hamiltonian of the step start,

* ``dq``: energy change caused by the measurement (heat),
* ``dq_cl``: the part of ``dq`` fixed by a single-transition jump,
* ``fb_work``: energy change across a feedback kick,
* ``dw``: ``<psi|H(t_{n+1}) - H(t_n)|psi>`` (drive work).

An optional final projective measurement adds ``final_heat``, which is
pure quantum heat.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import as_operator, check_hermitian, expectation
from .errors import ChannelNotSingleTransitionError, DimMismatchError
from .model import LindbladChannel, OpenSystemModel
from .outcomes import Diffusive, to_label


@dataclass(frozen=True)
class ThermoLedger:
    u_series: np.ndarray
    dw_series: np.ndarray
    dq_series: np.ndarray
    dq_cl_series: np.ndarray
    fb_work_series: np.ndarray
    final_heat: float = 0.0
    split_available: bool = True

    @property
    def dq_q_series(self) -> np.ndarray:
        return self.dq_series - self.dq_cl_series

    @property
    def u_initial(self) -> float:
        return float(self.u_series[0])

    @property
    def u_final(self) -> float:
        return float(self.u_series[-1] + self.final_heat)

    @property
    def delta_u(self) -> float:
        return self.u_final - self.u_initial

    @property
    def w_total(self) -> float:
        return float(np.sum(self.dw_series))

    @property
    def fb_work_total(self) -> float:
        return float(np.sum(self.fb_work_series))

    @property
    def q_cl_total(self) -> float:
        return float(np.sum(self.dq_cl_series))

    @property
    def q_q_total(self) -> float:
        return float(np.sum(self.dq_q_series) + self.final_heat)

    @property
    def q_total(self) -> float:
        return float(np.sum(self.dq_series) + self.final_heat)

    def first_law_residual(self) -> float:
        """``dU - (W + W_fb + Q_cl + Q_q)`` for the whole trajectory."""
        return self.delta_u - (self.w_total + self.fb_work_total + self.q_cl_total + self.q_q_total)


def internal_energy(state: np.ndarray, h: np.ndarray) -> float:
    """``U = <psi|H|psi>``."""
    return float(np.real(expectation(state, check_hermitian(h, name="H"))))


def work_increment(state: np.ndarray, h_before: np.ndarray, h_after: np.ndarray) -> float:
    """``dW = <psi|dH|psi>`` with ``dH = h_after - h_before``."""
    h_before = as_operator(h_before)
    h_after = as_operator(h_after)
    if h_before.shape != h_after.shape:
        raise DimMismatchError("Hamiltonians have different shapes")
    return float(np.real(expectation(state, h_after - h_before)))


def heat_increment(state_pre: np.ndarray, state_post: np.ndarray, h: np.ndarray) -> float:
    """Energy change ``U(post) - U(pre)`` at fixed Hamiltonian."""
    return internal_energy(state_post, h) - internal_energy(state_pre, h)


def _resolve_channel(channel, model: OpenSystemModel) -> LindbladChannel:
    if isinstance(channel, LindbladChannel):
        return channel
    return model.channels[int(channel)]


def split_heat_qj(state_pre: np.ndarray, channel, model: OpenSystemModel, t: float = 0.0) -> tuple[float, float]:
    """Classical and quantum heat of a jump ``|i> -> |j>``.

    Returns ``(eps_j - eps_i, eps_i - U_0)`` where ``U_0`` is the energy of
    the pre-jump state.  ``channel`` is a channel or its index in the model.
    """
    ch = _resolve_channel(channel, model)
    if ch.basis_labels is None:
        raise ChannelNotSingleTransitionError("heat split needs a channel of the form |j><i|")
    eps = model.pointer_energies(t)
    i, j = ch.basis_labels
    u0 = internal_energy(state_pre, model.hamiltonian(t))
    return float(eps[j] - eps[i]), float(eps[i] - u0)


def heat_operator_qj(state: np.ndarray, model: OpenSystemModel, outcome, t: float, dt: float) -> float:
    """Expectation of the quantum-jump heat increment operator.

    With ``Delta = H - U`` the jump branch gives
    ``<L^dag Delta L> / <L^dag L>`` and the no-jump branch
    ``-dt sum_k Gamma_k Re<L_k^dag L_k Delta>`` (``dN dt = 0``).
    """
    h = model.hamiltonian(t)
    u = internal_energy(state, h)
    delta = h - u * np.eye(model.dim)
    label = to_label(outcome)
    if label == 0:
        total = 0.0
        for ch in model.channels:
            LdL = ch.operator.conj().T @ ch.operator
            total += ch.rate * np.real(expectation(state, LdL @ delta))
        return float(-dt * total)
    L = model.channels[label - 1].operator
    norm = np.real(expectation(state, L.conj().T @ L))
    if norm <= 0:
        raise ValueError("jump has zero probability from this state")
    return float(np.real(expectation(state, L.conj().T @ delta @ L)) / norm)


def heat_operator_qsd(state: np.ndarray, model: OpenSystemModel, dw, t: float, dt: float) -> float:
    """Expectation of the diffusive heat increment operator (Ito form).

    ``dt sum_k Gamma_k <L^dag H L - {L^dag L, H}/2> + sum_k sqrt(Gamma_k) dw_k <L^dag Delta + Delta L>``.
    """
    if isinstance(dw, Diffusive):
        dw = dw.dw
    dw = np.atleast_1d(np.asarray(dw, dtype=float))
    if dw.shape != (len(model.channels),):
        raise DimMismatchError(f"expected {len(model.channels)} Wiener increments, got {dw.shape}")
    h = model.hamiltonian(t)
    u = internal_energy(state, h)
    delta = h - u * np.eye(model.dim)
    total = 0.0
    for ch, dwk in zip(model.channels, dw):
        L = ch.operator
        Ld = L.conj().T
        drift = Ld @ h @ L - 0.5 * (Ld @ L @ h + h @ Ld @ L)
        total += ch.rate * dt * np.real(expectation(state, drift))
        total += np.sqrt(ch.rate) * dwk * np.real(expectation(state, Ld @ delta + delta @ L))
    return float(total)


def ledger_from_states(
    states: np.ndarray,
    pre_feedback: np.ndarray | None,
    times: np.ndarray,
    model: OpenSystemModel,
    outcomes=None,
    final_state: np.ndarray | None = None,
) -> ThermoLedger:
    """Rebuild a ledger from stored states (independent of the engine).

    ``states[n]`` is the state at ``times[n]``; ``pre_feedback[n]`` the state
    right after the measurement of step ``n`` (before any kick).  Jump labels
    in ``outcomes`` enable the classical/quantum split.
    """
    n_steps = len(times) - 1
    post = states[1:] if pre_feedback is None else pre_feedback
    u = np.empty(n_steps + 1)
    dq = np.zeros(n_steps)
    dq_cl = np.zeros(n_steps)
    dw = np.zeros(n_steps)
    fb = np.zeros(n_steps)
    split = True
    u[0] = internal_energy(states[0], model.hamiltonian(times[0]))
    for n in range(n_steps):
        h = model.hamiltonian(times[n])
        h_next = model.hamiltonian(times[n + 1])
        dq[n] = heat_increment(states[n], post[n], h)
        fb[n] = heat_increment(post[n], states[n + 1], h)
        dw[n] = work_increment(states[n + 1], h, h_next)
        u[n + 1] = internal_energy(states[n + 1], h_next)
        if outcomes is not None and np.ndim(outcomes[n]) == 0 and int(outcomes[n]) > 0:
            ch = model.channels[int(outcomes[n]) - 1]
            if ch.basis_labels is None:
                split = False
            else:
                dq_cl[n] = model.classical_heat(int(outcomes[n]) - 1, times[n])
    final_heat = 0.0
    if final_state is not None:
        final_heat = heat_increment(states[-1], final_state, model.hamiltonian(times[-1]))
    return ThermoLedger(u, dw, dq, dq_cl, fb, final_heat, split)
