"""Quantum-jump and quantum-state-diffusion trajectories.

The engine propagates a batch of trajectories at once.  Every trajectory
owns a random stream derived from ``(master_seed, index)`` and draws, in
this order: one uniform for the initial state, the per-step noise (one
uniform per step for jumps, ``K`` Gaussian increments of variance ``dt``
per step for diffusion) and one uniform for the final projective
measurement.  All draws are made whether or not they are used, so records
depend only on the seed and the trajectory index.

A step from ``t_n`` to ``t_{n+1}`` consists of

1. the measurement (Kraus operator built at ``t_n``),
2. an optional feedback kick returned by ``controller(t_{n+1}, states, outcomes)``,
3. the Hamiltonian update ``H(t_n) -> H(t_{n+1})``.

Besides the states and the ledger the engine accumulates the direct and
reversed Kraus products ``A = M_N ... M_1`` and ``B = M^r_1 ... M^r_N`` so
that ``P_d = |<psi_N|A|psi_0>|^2`` and ``P_r = |<psi_0|B|psi_N>|^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import ZERO_NORM, as_state, normalize
from .errors import (
    DimMismatchError,
    MissingTemperatureError,
    NonCommutingInvariantStateError,
    TimestepTooLargeError,
    TreeTooLargeError,
)
from .irreversibility import (
    check_qsd_reversible,
    qsd_kraus_batch,
    reversed_kraus_qj,
    reversed_qsd_batch,
)
from .ledger import ThermoLedger
from .model import KRAUS_MODES, OpenSystemModel, build_qj_kraus
from .outcomes import Diffusive, from_label

SCHEMES = ("qj", "qsd")

#: Outcomes less likely than this are dropped when enumerating.
BRANCH_CUTOFF = 1e-15

#: Steps between renormalizations of the accumulated Kraus products.
RESCALE_EVERY = 16

#: Upper bound on the total jump probability of one step.
MAX_JUMP_PROBABILITY = 0.5

Controller = Callable[[float, np.ndarray, np.ndarray], "np.ndarray | None"]


# -- random streams ---------------------------------------------------------------


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for trajectory ``index``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(master_seed, spawn_key=(index,))))


@dataclass(frozen=True)
class Noise:
    u_init: np.ndarray
    steps: np.ndarray
    u_final: np.ndarray


def draw_noise(rng: np.random.Generator, scheme: str, n_steps: int, n_channels: int, dt: float) -> Noise:
    u_init = rng.random()
    if scheme == "qj":
        steps = rng.random(n_steps)
    else:
        steps = rng.standard_normal((n_steps, n_channels)) * math.sqrt(dt)
    u_final = rng.random()
    return Noise(np.array([u_init]), steps[None], np.array([u_final]))


def noise_for(master_seed: int, indices: Sequence[int], protocol: "Protocol", n_channels: int) -> Noise:
    parts = [
        draw_noise(trajectory_rng(master_seed, int(i)), protocol.scheme, protocol.n_steps, n_channels, protocol.dt)
        for i in indices
    ]
    return Noise(
        np.concatenate([p.u_init for p in parts]),
        np.concatenate([p.steps for p in parts]),
        np.concatenate([p.u_final for p in parts]),
    )


# -- protocol -----------------------------------------------------------------------


@dataclass(frozen=True)
class Protocol:
    """Prepare, evolve under monitoring, optionally measure projectively.

    ``initial_states`` (rows) are drawn with ``initial_probs``;
    ``final_basis`` is a matrix whose columns form the measurement basis,
    or ``"energy"`` for the eigenbasis of ``H(t_N)``.
    """

    initial_states: np.ndarray
    initial_probs: np.ndarray
    scheme: str = "qj"
    dt: float = 1e-3
    n_steps: int = 0
    t0: float = 0.0
    kraus: str = "first_order"
    final_basis: np.ndarray | str | None = None
    controller: Controller | None = None

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.initial_states, dtype=complex))
        states = normalize(states)
        probs = np.asarray(self.initial_probs, dtype=float).ravel()
        if probs.size != states.shape[0]:
            raise ValueError("one preparation probability per initial state required")
        if np.any(probs < 0) or abs(probs.sum() - 1) > 1e-10:
            raise ValueError("preparation probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "initial_states", states)
        object.__setattr__(self, "initial_probs", probs / probs.sum())
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.kraus not in KRAUS_MODES:
            raise ValueError(f"unknown Kraus mode {self.kraus!r}")
        if not self.dt > 0:
            raise TimestepTooLargeError("timestep must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise ValueError("n_steps must be a non-negative integer")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        if isinstance(self.final_basis, str):
            if self.final_basis != "energy":
                raise ValueError("final_basis must be a matrix or 'energy'")
        elif self.final_basis is not None:
            basis = np.asarray(self.final_basis, dtype=complex)
            if np.max(np.abs(basis.conj().T @ basis - np.eye(basis.shape[0]))) > 1e-10:
                raise ValueError("final measurement basis is not orthonormal")
            object.__setattr__(self, "final_basis", basis)

    @classmethod
    def pure(cls, state, **kwargs) -> "Protocol":
        return cls(np.asarray(state, dtype=complex)[None, :], np.ones(1), **kwargs)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def t_final(self) -> float:
        return self.t0 + self.dt * self.n_steps

    def final_basis_matrix(self, model: OpenSystemModel) -> np.ndarray | None:
        if self.final_basis is None:
            return None
        if isinstance(self.final_basis, str):
            return np.linalg.eigh(model.hamiltonian(self.t_final))[1]
        return self.final_basis


def steps_between(t0: float, t_final: float, dt: float) -> int:
    n = (t_final - t0) / dt
    if not t_final > t0:
        raise ValueError("final time must exceed the initial time")
    if abs(n - round(n)) > 1e-9 * max(1.0, n):
        raise ValueError("(t_N - t_0) / dt must be an integer")
    return int(round(n))


# -- record ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryRecord:
    """One monitored trajectory.

    ``outcomes`` holds integer labels (0 = no jump, ``k`` = channel ``k - 1``)
    for jump records and the ``(N, K)`` Wiener increments for diffusive
    records.  ``states`` has ``N + 1`` rows, ``states[0]`` being the prepared
    state; it is ``None`` for summary-only records.  ``log_prob`` is the log
    probability of the discrete choices made (preparation, jumps, final
    projection).  ``log_pd`` and ``log_pr`` are the conditional direct and
    reversed log probabilities ``log P_d[gamma|psi_0]`` and
    ``log P_r[gamma_r|psi_N]``.
    """

    times: np.ndarray
    scheme: str
    kraus: str
    outcomes: np.ndarray
    states: np.ndarray | None
    initial_state: np.ndarray
    initial_index: int
    initial_probability: float
    seed: int | None
    index: int
    ledger: ThermoLedger
    log_prob: float
    log_pd: float
    log_pr: float
    final_index: int | None = None
    final_state_: np.ndarray | None = None
    controls: np.ndarray | None = None
    pre_feedback: np.ndarray | None = None

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def final_state(self) -> np.ndarray:
        return self.final_state_

    @property
    def jump_count(self) -> int:
        if self.scheme != "qj":
            return 0
        return int(np.count_nonzero(self.outcomes))

    def outcome(self, n: int):
        if self.scheme == "qj":
            return from_label(int(self.outcomes[n]))
        return Diffusive(self.outcomes[n])


# -- kernels ------------------------------------------------------------------------------


# Small-dimension products written as explicit sums over the inner index:
# fast for d = 2 and independent of the batch size bit for bit.


def _matvec(op: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """``op @ psi`` per row; ``op`` is ``(d, d)`` or ``(m, d, d)``."""
    out = op[..., :, 0] * psi[:, None, 0]
    for j in range(1, psi.shape[1]):
        out = out + op[..., :, j] * psi[:, None, j]
    return out


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` for stacks of small matrices."""
    out = a[..., :, 0, None] * b[..., None, 0, :]
    for j in range(1, a.shape[-1]):
        out = out + a[..., :, j, None] * b[..., None, j, :]
    return out


def _expect(psi: np.ndarray, h: np.ndarray) -> np.ndarray:
    return np.sum((psi.conj() * _matvec(h, psi)).real, axis=1)


def _pick(u: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Inverse-CDF choice per row, never landing on a zero-probability outcome."""
    cum = np.cumsum(probs, axis=1)
    idx = np.sum(u[:, None] >= cum, axis=1)
    last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last)


def qj_candidates(ops: np.ndarray, psi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized post-states ``(m, K+1, d)`` and Born weights ``(m, K+1)``."""
    phi = np.stack([_matvec(op, psi) for op in ops], axis=1)
    return phi, np.sum(phi.real**2 + phi.imag**2, axis=-1)


def qj_selection_probs(weights: np.ndarray) -> np.ndarray:
    """Selection probabilities: jumps at their Born weight, no jump takes the rest."""
    jumps = weights[:, 1:]
    total = jumps.sum(axis=1)
    if np.any(total >= MAX_JUMP_PROBABILITY):
        raise TimestepTooLargeError(f"total jump probability {total.max():.3g} per step is too large")
    return np.concatenate([(1.0 - total)[:, None], jumps], axis=1)


def qj_choose(u: np.ndarray, sel: np.ndarray) -> np.ndarray:
    """Labels from uniforms: jumps first in channel order, no jump otherwise."""
    jumps = sel[:, 1:]
    if jumps.shape[1] == 0:
        return np.zeros(u.shape[0], dtype=np.int64)
    cum = np.cumsum(jumps, axis=1)
    idx = np.sum(u[:, None] >= cum, axis=1)
    return np.where(idx == jumps.shape[1], 0, idx + 1)


def qsd_update(psi: np.ndarray, model: OpenSystemModel, t: float, dt: float, dw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Euler-Maruyama step of the norm-preserving diffusive equation.

    ``dpsi = -i H psi dt - (1/2) sum Gamma (L^dag L - <X> L + <X>^2/4) psi dt
    + sum sqrt(Gamma) dw (L - <X>/2) psi`` with ``X = L + L^dag``, followed by
    renormalization.  Returns the new states and the record increments
    ``dr = dw + sqrt(Gamma) <X> dt``.
    """
    h = model.hamiltonian(t)
    rates = model.rates
    sg = np.sqrt(rates)
    ls = np.array([ch.operator for ch in model.channels]).reshape(-1, model.dim, model.dim)
    ldl = np.einsum("kji,kjl->kil", ls.conj(), ls)
    l_psi = np.einsum("kij,mj->mki", ls, psi)
    x = 2.0 * np.einsum("mi,mki->mk", psi.conj(), l_psi).real
    drift = -1j * np.einsum("ij,mj->mi", h, psi)
    ldl_psi = np.einsum("kij,mj->mki", ldl, psi)
    drift = drift - 0.5 * np.einsum(
        "k,mki->mi", rates, ldl_psi - x[:, :, None] * l_psi + 0.25 * (x**2)[:, :, None] * psi[:, None, :]
    )
    kick = np.einsum("mk,mki->mi", sg[None, :] * dw, l_psi - 0.5 * x[:, :, None] * psi[:, None, :])
    new = normalize(psi + dt * drift + kick)
    return new, dw + sg[None, :] * x * dt


class _OperatorCache:
    """Kraus sets and heat tables per step (computed once for static models)."""

    def __init__(self, model: OpenSystemModel, protocol: Protocol, reverse: bool):
        self.model = model
        self.protocol = protocol
        self.static = model.hamiltonian.is_static
        self.reverse = reverse
        self._cached: tuple | None = None

    def qj(self, t: float):
        if self.static and self._cached is not None:
            return self._cached
        model, dt = self.model, self.protocol.dt
        kset = build_qj_kraus(model, t, dt, self.protocol.kraus)
        rev = None
        if self.reverse:
            try:
                rev = reversed_kraus_qj(kset, model, t=t).operators
            except (MissingTemperatureError, ValueError):
                rev = None
        eps = model.pointer_energies(t)
        q_cl = np.zeros(len(model.channels) + 1)
        for k, ch in enumerate(model.channels):
            q_cl[k + 1] = eps[ch.basis_labels[1]] - eps[ch.basis_labels[0]] if ch.basis_labels else np.nan
        out = (kset.operators, rev, q_cl)
        if self.static:
            self._cached = out
        return out


# -- batch engine -----------------------------------------------------------------------------


SNAPSHOT_FIELDS = ("u", "q", "q_cl", "w", "fb", "jumps")


@dataclass
class TrajectoryBatch:
    """Arrays for ``m`` trajectories (rows); see :class:`TrajectoryRecord`.

    Totals and snapshots at ``sample_steps`` are always present.  Per-step
    series (``outcomes``, ``u``, ``dq``, ...) are ``None`` in summary mode.
    Snapshot ``q`` is the cumulative heat, ``q_cl`` its classical part,
    ``w`` the drive work, ``fb`` the feedback work and ``jumps`` the jump
    count, all up to the sampled step.
    """

    model: OpenSystemModel
    protocol: Protocol
    seed: int | None
    indices: np.ndarray
    initial_index: np.ndarray
    log_p_init: np.ndarray
    log_prob: np.ndarray
    log_pd: np.ndarray
    log_pr: np.ndarray
    u_initial: np.ndarray
    u_last: np.ndarray
    q_steps: np.ndarray
    q_cl: np.ndarray
    w: np.ndarray
    fb: np.ndarray
    jump_count: np.ndarray
    split_ok: np.ndarray
    final_index: np.ndarray | None
    final_heat: np.ndarray
    final_states: np.ndarray
    sample_steps: np.ndarray
    sample_states: np.ndarray
    snapshots: dict[str, np.ndarray]
    outcomes: np.ndarray | None = None
    u: np.ndarray | None = None
    dq: np.ndarray | None = None
    dq_cl: np.ndarray | None = None
    dw: np.ndarray | None = None
    fb_work: np.ndarray | None = None
    states: np.ndarray | None = None
    controls: np.ndarray | None = None
    pre_feedback: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.u_initial.shape[0]

    @property
    def initial_states(self) -> np.ndarray:
        return self.protocol.initial_states[self.initial_index]

    @property
    def probabilities(self) -> np.ndarray:
        return np.exp(self.log_prob)

    @property
    def q_cl_total(self) -> np.ndarray:
        return self.q_cl

    @property
    def q_q_total(self) -> np.ndarray:
        return self.q_steps - self.q_cl + self.final_heat

    @property
    def delta_u(self) -> np.ndarray:
        return self.u_last + self.final_heat - self.u_initial

    def ledger(self, i: int) -> ThermoLedger:
        if self.u is None:
            raise ValueError("batch was propagated without per-step series")
        return ThermoLedger(
            self.u[i],
            self.dw[i],
            self.dq[i],
            self.dq_cl[i],
            self.fb_work[i],
            float(self.final_heat[i]),
            bool(self.split_ok[i]),
        )

    def record(self, i: int) -> TrajectoryRecord:
        return TrajectoryRecord(
            times=self.protocol.times,
            scheme=self.protocol.scheme,
            kraus=self.protocol.kraus,
            outcomes=self.outcomes[i],
            states=None if self.states is None else self.states[i],
            initial_state=self.initial_states[i],
            initial_index=int(self.initial_index[i]),
            initial_probability=float(np.exp(self.log_p_init[i])),
            seed=self.seed,
            index=int(self.indices[i]),
            ledger=self.ledger(i),
            log_prob=float(self.log_prob[i]),
            log_pd=float(self.log_pd[i]),
            log_pr=float(self.log_pr[i]),
            final_index=None if self.final_index is None else int(self.final_index[i]),
            final_state_=self.final_states[i],
            controls=None if self.controls is None else self.controls[i],
            pre_feedback=None if self.pre_feedback is None else self.pre_feedback[i],
        )

    def records(self) -> list[TrajectoryRecord]:
        return [self.record(i) for i in range(self.size)]


def _rescale(mats: np.ndarray, log_scale: np.ndarray) -> None:
    """Normalize each matrix to unit max-norm, tracking the log amplitude scale."""
    s = np.max(np.abs(mats), axis=(1, 2))
    zero = s == 0
    s_safe = np.where(zero, 1.0, s)
    mats /= s_safe[:, None, None]
    with np.errstate(divide="ignore"):
        log_scale += np.where(zero, -np.inf, np.log(s_safe))


def _log_sandwich(bra: np.ndarray, mats: np.ndarray, ket: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    amp = np.sum(bra.conj() * _matvec(mats, ket), axis=1)
    with np.errstate(divide="ignore"):
        return np.where(np.isneginf(log_scale), -np.inf, 2 * log_scale + np.log(np.abs(amp) ** 2))


class _Rows:
    """Per-row running quantities that follow the branching of the batch."""

    def __init__(self, **arrays):
        self.__dict__.update(arrays)

    def take(self, parent: np.ndarray) -> None:
        for key, value in self.__dict__.items():
            self.__dict__[key] = value[parent]


def propagate(
    model: OpenSystemModel,
    protocol: Protocol,
    noise: Noise | None = None,
    *,
    branch: bool = False,
    keep_series: bool = True,
    keep_states: bool = False,
    sample_steps: Sequence[int] = (),
    max_nodes: int = 10**6,
    seed: int | None = None,
    indices: Sequence[int] | None = None,
    reverse: bool = True,
) -> TrajectoryBatch:
    """Propagate a batch of trajectories.

    With ``noise`` each row follows its own pre-drawn random numbers.  With
    ``branch=True`` every outcome of non-negligible probability is followed
    instead (exact enumeration); ``log_prob`` then holds the branch
    probability and the total node count is capped by ``max_nodes``.
    ``keep_series=False`` keeps only totals and snapshots at ``sample_steps``.
    """
    d = model.dim
    n_steps = protocol.n_steps
    dt = protocol.dt
    times = protocol.times
    scheme = protocol.scheme
    n_ch = len(model.channels)
    keep_states = keep_states and keep_series
    if n_steps:
        model.check_timestep(dt)
    if branch and scheme == "qsd" and n_steps:
        raise ValueError("diffusive trajectories cannot be enumerated")
    if not branch and noise is None:
        raise ValueError("noise is required unless branching")
    sample_steps = np.unique(np.asarray(sample_steps, dtype=int))
    if sample_steps.size and (sample_steps.min() < 0 or sample_steps.max() > n_steps):
        raise ValueError("sample steps outside the time grid")
    sample_set = set(sample_steps.tolist())

    probs0 = protocol.initial_probs
    if branch:
        init = np.flatnonzero(probs0 > 0)
    else:
        init = _pick(noise.u_init, np.broadcast_to(probs0, (noise.u_init.size, probs0.size)))
    m = init.size
    psi0 = protocol.initial_states[init]
    psi = psi0.copy()
    eye = np.eye(d, dtype=complex)
    h = model.hamiltonian(times[0])
    u_now = _expect(psi, h)
    rows = _Rows(
        psi0=psi0,
        init=init,
        log_p_init=np.log(probs0[init]),
        log_prob=np.log(probs0[init]),
        log_pd=np.zeros(m),
        ids=np.arange(m) if indices is None else np.asarray(indices),
        u0=u_now.copy(),
        q=np.zeros(m),
        q_cl=np.zeros(m),
        w=np.zeros(m),
        fb=np.zeros(m),
        jumps=np.zeros(m, dtype=np.int64),
        split=np.ones(m, dtype=bool),
        amp_d=np.broadcast_to(eye, (m, d, d)).copy() if scheme == "qsd" else np.zeros((m, 0, 0)),
        scale_d=np.zeros(m),
        amp_r=np.broadcast_to(eye, (m, d, d)).copy(),
        scale_r=np.zeros(m),
    )
    reverse_ok = reverse
    if scheme == "qsd" and n_steps and reverse:
        try:
            check_qsd_reversible(model, protocol.t0)
        except NonCommutingInvariantStateError:
            reverse_ok = False

    # levels: 0 after preparation, n + 1 after step n, then the projection
    parents: list[np.ndarray | None] = []
    series: dict[str, list[np.ndarray]] = {
        k: [] for k in ("label", "dq", "dq_cl", "dw", "fb", "u", "state", "pre_fb", "control")
    }
    snaps: dict[int, dict[str, np.ndarray]] = {}

    def snapshot(step: int) -> None:
        snaps[step] = {
            "state": psi, "u": u_now, "q": rows.q, "q_cl": rows.q_cl, "w": rows.w, "fb": rows.fb, "jumps": rows.jumps,
        }

    if keep_series:
        series["u"].append(u_now)
    if keep_states:
        series["state"].append(psi)
    if 0 in sample_set:
        snapshot(0)

    cache = _OperatorCache(model, protocol, reverse)
    nodes = m
    for n in range(n_steps):
        t = times[n]
        if scheme == "qj":
            ops, rev_ops, q_cl_table = cache.qj(t)
            if rev_ops is None:
                reverse_ok = False
            phi, weights = qj_candidates(ops, psi)
            sel = qj_selection_probs(weights)
            if branch:
                parent, label = np.nonzero(sel > BRANCH_CUTOFF)
                src = parent
            else:
                parent = None
                label = qj_choose(noise.steps[:, n], sel)
                src = np.arange(m)
            norms = weights[src, label]
            if np.any(norms < ZERO_NORM**2):
                raise TimestepTooLargeError("selected outcome has vanishing norm")
            post = phi[src, label] / np.sqrt(norms)[:, None]
            step_log_prob = np.log(sel[src, label])
            if parent is not None:
                rows.take(parent)
                u_now = u_now[parent]
            rows.log_prob = rows.log_prob + step_log_prob
            rows.log_pd = rows.log_pd + np.log(norms)
            if reverse_ok:
                rows.amp_r = _matmul(rows.amp_r, rev_ops[label])
            dq_cl = q_cl_table[label]
            split = ~np.isnan(dq_cl)
            dq_cl = np.where(split, dq_cl, 0.0)
            rows.split = rows.split & split
            rows.jumps = rows.jumps + (label != 0)
            outcome = label
            label_store = label.astype(np.int16)
        else:
            parent = None
            dw = noise.steps[:, n, :]
            post, dr = qsd_update(psi, model, t, dt, dw)
            rows.amp_d = _matmul(qsd_kraus_batch(dr, model, t, dt), rows.amp_d)
            if reverse_ok:
                rows.amp_r = _matmul(rows.amp_r, reversed_qsd_batch(dr, model, t, dt))
            dq_cl = np.zeros(m)
            outcome = dw
            label_store = dw
        parents.append(parent)
        m = post.shape[0]
        if n % RESCALE_EVERY == RESCALE_EVERY - 1:
            if scheme == "qsd":
                _rescale(rows.amp_d, rows.scale_d)
            _rescale(rows.amp_r, rows.scale_r)

        u_post = _expect(post, h)
        dq = u_post - u_now
        fb = np.zeros(m)
        if protocol.controller is not None:
            kicks = protocol.controller(times[n + 1], post, outcome)
            kicks = np.broadcast_to(eye, (m, d, d)) if kicks is None else np.asarray(kicks, dtype=complex)
            if keep_states:
                series["pre_fb"].append(post)
                series["control"].append(kicks)
            post = normalize(_matvec(kicks, post))
            fb = _expect(post, h) - u_post
            if scheme == "qsd":
                rows.amp_d = _matmul(kicks, rows.amp_d)
            rows.amp_r = _matmul(rows.amp_r, np.swapaxes(kicks.conj(), 1, 2))

        h_next = model.hamiltonian(times[n + 1])
        work = np.zeros(m) if model.hamiltonian.is_static else _expect(post, h_next - h)
        u_now = _expect(post, h_next)
        h = h_next
        psi = post
        rows.q = rows.q + dq
        rows.q_cl = rows.q_cl + dq_cl
        rows.w = rows.w + work
        rows.fb = rows.fb + fb

        if keep_series:
            for key, value in (("label", label_store), ("dq", dq), ("dq_cl", dq_cl), ("dw", work), ("fb", fb), ("u", u_now)):
                series[key].append(value)
        if keep_states:
            series["state"].append(psi)
        if n + 1 in sample_set:
            snapshot(n + 1)
        if branch:
            nodes += m
            if nodes > max_nodes:
                raise TreeTooLargeError(f"outcome tree exceeds {max_nodes} nodes")

    u_last = u_now
    basis = protocol.final_basis_matrix(model)
    final_index = None
    final_heat = np.zeros(m)
    if basis is not None:
        amps = _matvec(basis.conj().T, psi)
        born = amps.real**2 + amps.imag**2
        if branch:
            parent, j = np.nonzero(born > BRANCH_CUTOFF)
            src = parent
        else:
            parent, j = None, _pick(noise.u_final, born)
            src = np.arange(m)
        step_born = born[src, j]
        if parent is not None:
            rows.take(parent)
            u_last = u_last[parent]
        parents.append(parent)
        rows.log_prob = rows.log_prob + np.log(step_born)
        rows.log_pd = rows.log_pd + np.log(step_born)
        projected = basis[:, j].T.copy()
        proj = projected[:, :, None] * projected[:, None, :].conj()
        if scheme == "qsd":
            rows.amp_d = _matmul(proj, rows.amp_d)
        rows.amp_r = _matmul(rows.amp_r, proj)
        final_heat = _expect(projected, h) - u_last
        final_index = j
        psi = projected
        m = psi.shape[0]

    if scheme == "qsd":
        _rescale(rows.amp_d, rows.scale_d)
        log_pd = _log_sandwich(psi, rows.amp_d, rows.psi0, rows.scale_d)
    else:
        log_pd = rows.log_pd
    if reverse_ok:
        _rescale(rows.amp_r, rows.scale_r)
        log_pr = _log_sandwich(rows.psi0, rows.amp_r, psi, rows.scale_r)
    else:
        log_pr = np.full(m, np.nan)

    # map every level onto the final rows
    level_idx: list[np.ndarray] = [np.arange(m)] * (len(parents) + 1)
    idx = np.arange(m)
    for lvl in range(len(parents), 0, -1):
        p = parents[lvl - 1]
        if p is not None:
            idx = p[idx]
        level_idx[lvl - 1] = idx

    def gather(values: list[np.ndarray], first_level: int, empty_shape: tuple, dtype=float) -> np.ndarray:
        if not values:
            return np.zeros((m,) + empty_shape, dtype=dtype)
        return np.stack([arr[level_idx[first_level + k]] for k, arr in enumerate(values)], axis=1)

    if sample_steps.size:
        snap_out = {
            key: np.stack([snaps[s][key][level_idx[s]] for s in sample_steps], axis=1)
            for key in SNAPSHOT_FIELDS + ("state",)
        }
    else:
        snap_out = {key: np.zeros((m, 0)) for key in SNAPSHOT_FIELDS}
    sample_states = snap_out.pop("state", np.zeros((m, 0, d), dtype=complex))

    extra = {}
    if keep_series:
        label_shape = (0,) if scheme == "qj" else (0, n_ch)
        extra = dict(
            outcomes=gather(series["label"], 1, label_shape, np.int16 if scheme == "qj" else float),
            u=gather(series["u"], 0, (0,)),
            dq=gather(series["dq"], 1, (0,)),
            dq_cl=gather(series["dq_cl"], 1, (0,)),
            dw=gather(series["dw"], 1, (0,)),
            fb_work=gather(series["fb"], 1, (0,)),
            states=gather(series["state"], 0, (0, d), complex) if keep_states else None,
            controls=gather(series["control"], 1, (0, d, d), complex) if series["control"] else None,
            pre_feedback=gather(series["pre_fb"], 1, (0, d), complex) if series["pre_fb"] else None,
        )

    return TrajectoryBatch(
        model=model,
        protocol=protocol,
        seed=seed,
        indices=rows.ids,
        initial_index=rows.init,
        log_p_init=rows.log_p_init,
        log_prob=rows.log_prob,
        log_pd=log_pd,
        log_pr=log_pr,
        u_initial=rows.u0,
        u_last=u_last,
        q_steps=rows.q,
        q_cl=rows.q_cl,
        w=rows.w,
        fb=rows.fb,
        jump_count=rows.jumps,
        split_ok=rows.split,
        final_index=final_index,
        final_heat=final_heat,
        final_states=psi,
        sample_steps=sample_steps,
        sample_states=sample_states,
        snapshots=snap_out,
        **extra,
    )


# -- single-step and single-trajectory API -----------------------------------------------------


def qj_step(state, model: OpenSystemModel, t: float, dt: float, rng: np.random.Generator, kraus: str = "first_order"):
    """One quantum-jump step; returns the new state and the outcome."""
    psi = as_state(state)[None, :]
    ops = build_qj_kraus(model, t, dt, kraus).operators
    phi, weights = qj_candidates(ops, psi)
    sel = qj_selection_probs(weights)
    label = qj_choose(np.array([rng.random()]), sel)
    post = phi[0, label[0]] / math.sqrt(weights[0, label[0]])
    return post, from_label(int(label[0]))


def qsd_step(state, model: OpenSystemModel, t: float, dt: float, rng: np.random.Generator, dw=None):
    """One diffusive step; ``dw`` overrides the Gaussian draw."""
    model.check_timestep(dt)
    psi = as_state(state)[None, :]
    if dw is None:
        dw = rng.standard_normal(len(model.channels)) * math.sqrt(dt)
    dw = np.atleast_1d(np.asarray(dw, dtype=float))
    if dw.shape != (len(model.channels),):
        raise DimMismatchError(f"expected {len(model.channels)} Wiener increments, got shape {dw.shape}")
    post, _ = qsd_update(psi, model, t, dt, dw[None, :])
    return post[0], Diffusive(dw)


def run_trajectory(
    model: OpenSystemModel,
    scheme: str,
    initial,
    t0: float,
    t_final: float,
    dt: float,
    rng: np.random.Generator,
    feedback: Controller | None = None,
    kraus: str = "first_order",
    final_basis=None,
) -> TrajectoryRecord:
    """Simulate one trajectory from a pure initial state and keep every state."""
    n_steps = steps_between(t0, t_final, dt)
    protocol = Protocol.pure(
        as_state(initial), scheme=scheme, dt=dt, n_steps=n_steps, t0=t0, kraus=kraus,
        final_basis=final_basis, controller=feedback,
    )
    noise = draw_noise(rng, scheme, n_steps, len(model.channels), dt)
    return propagate(model, protocol, noise, keep_states=True, seed=None).record(0)


def simulate(
    model: OpenSystemModel,
    protocol: Protocol,
    master_seed: int,
    indices: Sequence[int],
    *,
    keep_series: bool = True,
    keep_states: bool = False,
    sample_steps: Sequence[int] = (),
) -> TrajectoryBatch:
    """Propagate trajectories ``indices`` with streams derived from ``master_seed``."""
    noise = noise_for(master_seed, indices, protocol, len(model.channels))
    return propagate(
        model, protocol, noise, keep_series=keep_series, keep_states=keep_states,
        sample_steps=sample_steps, seed=master_seed, indices=indices,
    )
