"""Trajectory probabilities, time-reversed Kraus operators and entropy production.

Divergences are encoded with ``math.inf``: a reversed trajectory of zero
probability gives an infinite conditional entropy production and contributes
``exp(-inf) = 0`` to exponential averages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import as_state, fidelity, von_neumann_entropy
from .errors import (
    AllDivergentError,
    EmptyInputError,
    MissingTemperatureError,
    NonCommutingInvariantStateError,
    ProtocolShapeError,
)
from .model import KrausSet, OpenSystemModel, build_qj_kraus, equilibrium_free_energy

#: Tolerance for matching a final state against a reference distribution.
MATCH_TOL = 1e-10


# -- entropy containers ------------------------------------------------------


def _add(a: float, b: float) -> float:
    if math.isinf(a) or math.isinf(b):
        return math.inf
    return a + b


@dataclass(frozen=True)
class EntropyBreakdown:
    """Boundary and conditional parts of ``Delta_i s`` (nats).

    ``boundary`` is ``None`` when no reference distribution for the final
    state exists (diffusive records); ``total`` then equals ``conditional``.
    """

    boundary: float | None
    conditional: float

    @property
    def total(self) -> float:
        if self.boundary is None:
            return self.conditional
        return _add(self.boundary, self.conditional)

    @property
    def is_divergent(self) -> bool:
        return math.isinf(self.total)


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    n: int
    n_divergent: int = 0


@dataclass(frozen=True)
class StateDistribution:
    """Discrete distribution over pure states (phases ignored)."""

    states: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=complex))
        probs = np.asarray(self.probs, dtype=float).ravel()
        if states.shape[0] != probs.size:
            raise ValueError("one probability per state required")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "probs", probs)

    def probability_of(self, psi: np.ndarray, tol: float = MATCH_TOL) -> float:
        match = fidelity(self.states, as_state(psi)[None, :]) >= 1 - tol
        return float(math.fsum(self.probs[match]))

    def density(self) -> np.ndarray:
        return np.einsum("n,ni,nj->ij", self.probs, self.states, self.states.conj())


def reverse_prior(psi: np.ndarray, final) -> float:
    """Probability ``p_r(psi_N)`` of starting the reversed trajectory in ``psi``.

    ``final`` is a :class:`StateDistribution` or a density matrix having
    ``psi`` as an eigenvector; the matching eigenvalue is returned.
    """
    if isinstance(final, StateDistribution):
        return final.probability_of(psi)
    rho = np.asarray(final, dtype=complex)
    psi = as_state(psi)
    rho_psi = rho @ psi
    lam = float(np.real(np.vdot(psi, rho_psi)))
    if np.linalg.norm(rho_psi - lam * psi) > 1e-9:
        raise ValueError("final state is not an eigenvector of the final mixture; pass a StateDistribution")
    return max(lam, 0.0)


def reverse_prior_batch(states: np.ndarray, final) -> np.ndarray:
    """Vectorized :func:`reverse_prior` over the rows of ``states``."""
    states = np.asarray(states, dtype=complex)
    if isinstance(final, StateDistribution):
        f = np.abs(states.conj() @ final.states.T) ** 2
        return np.where(f >= 1 - MATCH_TOL, final.probs[None, :], 0.0).sum(axis=1)
    rho = np.asarray(final, dtype=complex)
    rho_psi = states @ rho.T
    lam = np.real(np.sum(states.conj() * rho_psi, axis=1))
    if np.any(np.linalg.norm(rho_psi - lam[:, None] * states, axis=1) > 1e-9):
        raise ValueError("final states are not eigenvectors of the final mixture; pass a StateDistribution")
    return np.maximum(lam, 0.0)


# -- reversed Kraus operators -------------------------------------------------


@dataclass(frozen=True)
class ReversedKrausSet:
    operators: np.ndarray
    labels: tuple[int, ...]


def _resolve_beta(model: OpenSystemModel, beta: float | None) -> float:
    beta = model.beta if beta is None else beta
    if beta is None:
        raise MissingTemperatureError("thermal reversal needs an inverse temperature")
    return float(beta)


def reversed_kraus_qj(direct: KrausSet, model: OpenSystemModel, beta: float | None = None, t: float = 0.0) -> ReversedKrausSet:
    """Time-reversed quantum-jump Kraus operators.

    The no-jump reversal is ``M_0^dag`` (``1 + i dt H_eff^dag`` at first
    order).  Jumps use ``sqrt(pi) M^dag sqrt(pi)^-1`` with ``pi`` the
    pointer-diagonal Gibbs state, which reduces to ``exp(beta Q_cl / 2) M^dag``
    for single-transition channels.  At zero temperature only that reduced
    form is used, with ``exp(-inf) = 0``.
    """
    ops = [direct.operators[0].conj().T]
    if model.channels:
        beta = _resolve_beta(model, beta)
        basis = model.pointer_basis
        if math.isinf(beta):
            for k, ch in enumerate(model.channels):
                m_dag = direct.operators[k + 1].conj().T
                if ch.basis_labels is None:
                    raise ValueError("zero-temperature reversal needs single-transition channels")
                q_cl = model.classical_heat(k, t)
                if q_cl < 0 or not np.any(m_dag):
                    ops.append(np.zeros_like(m_dag))
                elif q_cl == 0:
                    ops.append(m_dag)
                else:
                    raise ValueError(f"channel {k} absorbs energy from a zero-temperature bath")
        else:
            eps = model.pointer_energies(t)
            shifted = eps - eps.min()
            half = np.exp(-0.5 * beta * shifted)
            sqrt_pi = (basis * half) @ basis.conj().T
            sqrt_pi_inv = (basis / half) @ basis.conj().T
            for k in range(len(model.channels)):
                ops.append(sqrt_pi @ direct.operators[k + 1].conj().T @ sqrt_pi_inv)
    return ReversedKrausSet(np.array(ops), direct.labels)


def _invariant_state(model: OpenSystemModel, t: float) -> np.ndarray:
    if model.beta is not None:
        return model.stationary_state(t)
    return np.eye(model.dim, dtype=complex) / model.dim


def check_qsd_reversible(model: OpenSystemModel, t: float = 0.0) -> None:
    """Require ``[pi_s, L_k] = 0`` for every monitored channel."""
    pi = _invariant_state(model, t)
    for k, ch in enumerate(model.channels):
        if np.max(np.abs(pi @ ch.operator - ch.operator @ pi)) > MATCH_TOL:
            raise NonCommutingInvariantStateError(f"invariant state does not commute with channel {k}")


def qsd_kraus_batch(dr: np.ndarray, model: OpenSystemModel, t: float, dt: float) -> np.ndarray:
    """Diffusive Kraus operators ``1 - i dt H_eff + sum_k sqrt(Gamma_k) dr_k L_k``.

    ``dr`` has shape ``(m, K)``: the measurement record increments.  The
    Gaussian weight of the record is left out since it cancels against the
    reversed operator.
    """
    eye = np.eye(model.dim, dtype=complex)
    base = eye - 1j * dt * model.h_eff(t)
    ls = np.array([ch.operator for ch in model.channels]).reshape(-1, model.dim, model.dim)
    coeff = np.asarray(dr, dtype=float) * np.sqrt(model.rates)
    return base[None] + np.einsum("mk,kij->mij", coeff, ls)


def reversed_qsd_batch(dr: np.ndarray, model: OpenSystemModel, t: float, dt: float) -> np.ndarray:
    """``1 + i dt H_eff^dag + sum_k sqrt(Gamma_k) dr_k^* L_k^dag`` for each row of ``dr``."""
    eye = np.eye(model.dim, dtype=complex)
    base = eye + 1j * dt * model.h_eff(t).conj().T
    ls = np.array([ch.operator.conj().T for ch in model.channels]).reshape(-1, model.dim, model.dim)
    coeff = np.conj(np.asarray(dr, dtype=float)) * np.sqrt(model.rates)
    return base[None] + np.einsum("mk,kij->mij", coeff, ls)


def reversed_kraus_qsd(dr, model: OpenSystemModel, t: float, dt: float) -> np.ndarray:
    """Reversed diffusive Kraus operator for the record increment ``dr``.

    Requires the invariant state to commute with the monitored observables.
    """
    check_qsd_reversible(model, t)
    dr = np.atleast_1d(np.asarray(dr, dtype=float))
    return reversed_qsd_batch(dr[None, :], model, t, dt)[0]


# -- trajectory probabilities -------------------------------------------------


def log_direct_probability(record, model: OpenSystemModel) -> float:
    """``log P_d[gamma] = log p_d(psi_0) + log |<psi_N| prod M |psi_0>|^2``.

    Replays the recorded outcomes with freshly built Kraus operators.
    """
    psi0 = record.initial_state
    amp = psi0.copy()
    log_scale = 0.0
    times = record.times
    dt = times[1] - times[0] if len(times) > 1 else 0.0
    for n in range(len(times) - 1):
        t = times[n]
        if record.scheme == "qj":
            op = build_qj_kraus(model, t, dt, record.kraus).operators[int(record.outcomes[n])]
        else:
            pre = record.states[n]
            x = np.array([2 * np.real(np.vdot(pre, ch.operator @ pre)) for ch in model.channels])
            dr = record.outcomes[n] + np.sqrt(model.rates) * x * dt
            op = qsd_kraus_batch(dr[None, :], model, t, dt)[0]
        amp = op @ amp
        if record.controls is not None:
            amp = record.controls[n] @ amp
        norm = np.linalg.norm(amp)
        if norm == 0:
            return -math.inf
        log_scale += math.log(norm)
        amp = amp / norm
    final = record.final_state
    overlap = abs(np.vdot(final, amp)) ** 2
    if overlap == 0:
        return -math.inf
    return math.log(record.initial_probability) + 2 * log_scale + math.log(overlap)


def direct_probability(record, model: OpenSystemModel) -> float:
    return math.exp(log_direct_probability(record, model))


def entropy_production(record, model: OpenSystemModel | None = None, final_mixture=None) -> EntropyBreakdown:
    """Boundary and conditional entropy production of one trajectory.

    ``boundary = log(p_d(psi_0) / p_r(psi_N))`` with ``p_r`` read from
    ``final_mixture``; ``conditional = log(P_d[gamma|psi_0] / P_r[gamma_r|psi_N])``.
    """
    if np.isnan(record.log_pr):
        raise MissingTemperatureError("record carries no reversed probability")
    conditional = math.inf if record.log_pr == -math.inf else float(record.log_pd - record.log_pr)
    boundary = None
    if final_mixture is not None:
        p_r = reverse_prior(record.final_state, final_mixture)
        boundary = math.inf if p_r <= 0 else math.log(record.initial_probability) - math.log(p_r)
    return EntropyBreakdown(boundary, conditional)


def _totals(samples) -> np.ndarray:
    return np.array([s.total if isinstance(s, EntropyBreakdown) else float(s) for s in samples], dtype=float)


def mean_entropy_production(samples: Iterable, weights: Sequence[float] | None = None) -> Estimate:
    """Mean of ``Delta_i s`` over finite samples.

    With ``weights`` (exact enumeration) the weighted sum is returned with
    zero standard error; divergent samples must then carry zero weight.
    """
    values = _totals(samples)
    if values.size == 0:
        raise EmptyInputError("no entropy samples")
    finite = np.isfinite(values)
    n_div = int(np.sum(~finite))
    if not finite.any():
        raise AllDivergentError("every sample diverges")
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if np.any(w[~finite] > 0):
            raise AllDivergentError("divergent trajectories have non-zero weight; the mean is infinite")
        value = math.fsum(w[finite] * values[finite])
        return Estimate(value, 0.0, int(values.size), n_div)
    v = values[finite]
    stderr = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return Estimate(math.fsum(v) / v.size, stderr, int(v.size), n_div)


def expected_mean_entropy(final_rho: np.ndarray, initial_rho: np.ndarray | None = None) -> float:
    """``S_VN(rho_N) - S_VN(rho_0)``, the mean entropy production of a
    protocol with pure-state trajectories in the eigenbases of both."""
    s0 = 0.0 if initial_rho is None else von_neumann_entropy(initial_rho)
    return von_neumann_entropy(final_rho) - s0


def fluctuation_theorem_estimator(samples: Iterable, weights: Sequence[float] | None = None) -> Estimate:
    """Estimate ``<exp(-Delta_i s)>``.

    With ``weights`` the sum ``sum_gamma P[gamma] exp(-Delta_i s)`` is exact
    (enumeration); otherwise the sample mean and its standard error are
    returned.  Divergent samples contribute zero.
    """
    values = _totals(samples)
    if values.size == 0:
        raise EmptyInputError("no entropy samples")
    expo = np.exp(-values)
    n_div = int(np.sum(np.isinf(values)))
    if weights is not None:
        return Estimate(math.fsum(np.asarray(weights, dtype=float) * expo), 0.0, int(values.size), n_div)
    stderr = float(np.std(expo, ddof=1) / np.sqrt(expo.size)) if expo.size > 1 else 0.0
    return Estimate(math.fsum(expo) / expo.size, stderr, int(expo.size), n_div)


# -- Jarzynski ------------------------------------------------------------------


@dataclass(frozen=True)
class JarzynskiResult:
    delta_u_form: Estimate
    split_form: Estimate
    exponents_delta_u: np.ndarray
    exponents_split: np.ndarray

    @property
    def max_discrepancy(self) -> float:
        if self.exponents_delta_u.size == 0:
            return 0.0
        return float(np.max(np.abs(np.exp(-self.exponents_delta_u) - np.exp(-self.exponents_split))))


def _is_eigenstate(psi: np.ndarray, h: np.ndarray) -> bool:
    h_psi = h @ psi
    e = np.vdot(psi, h_psi)
    return bool(np.linalg.norm(h_psi - e * psi) <= 1e-8)


def jarzynski_estimator(
    records: Sequence,
    model: OpenSystemModel,
    beta: float,
    delta_f: float | None = None,
    weights: Sequence[float] | None = None,
) -> JarzynskiResult:
    """Jarzynski averages over two-point-measurement records.

    Exponents per trajectory are ``beta (dU - Q_cl - dF)`` and
    ``beta (W + W_fb - dF) + beta Q_q``; they coincide by the first law.
    """
    if not records:
        raise EmptyInputError("no records")
    t0, t_n = records[0].times[0], records[0].times[-1]
    if delta_f is None:
        delta_f = equilibrium_free_energy(model, beta, t_n) - equilibrium_free_energy(model, beta, t0)
    h0, h_n = model.hamiltonian(t0), model.hamiltonian(t_n)
    a = np.empty(len(records))
    b = np.empty(len(records))
    for r, rec in enumerate(records):
        if rec.final_index is None:
            raise ProtocolShapeError("record has no final energy measurement")
        if not (_is_eigenstate(rec.initial_state, h0) and _is_eigenstate(rec.final_state, h_n)):
            raise ProtocolShapeError("record does not start and end in energy eigenstates")
        led = rec.ledger
        a[r] = beta * (led.delta_u - led.q_cl_total - delta_f)
        b[r] = beta * (led.w_total + led.fb_work_total - delta_f) + beta * led.q_q_total
    return JarzynskiResult(
        fluctuation_theorem_estimator(a, weights),
        fluctuation_theorem_estimator(b, weights),
        a,
        b,
    )


__all__ = [
    "EntropyBreakdown",
    "Estimate",
    "JarzynskiResult",
    "ReversedKrausSet",
    "StateDistribution",
    "check_qsd_reversible",
    "direct_probability",
    "entropy_production",
    "expected_mean_entropy",
    "fluctuation_theorem_estimator",
    "jarzynski_estimator",
    "log_direct_probability",
    "mean_entropy_production",
    "qsd_kraus_batch",
    "reverse_prior",
    "reverse_prior_batch",
    "reversed_kraus_qj",
    "reversed_kraus_qsd",
    "reversed_qsd_batch",
]
