"""Monte-Carlo ensembles, exact enumeration and distributions.

Trajectory ``i`` of an ensemble always uses the random stream derived from
``(master_seed, i)`` and is propagated in the fixed chunk
``i // chunk_size``, so results do not depend on the number of threads.
Reductions run over arrays concatenated in index order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import fidelity
from .errors import EmptyInputError, TrajectoryError
from .experiments import ExperimentSpec, reverse_reference
from .irreversibility import Estimate, reverse_prior_batch
from .model import equilibrium_free_energy
from .unraveling import TrajectoryBatch, TrajectoryRecord, propagate, simulate

DEFAULT_CHUNK = 1024

#: Grouping tolerance of exact-value binning.
EXACT_TOL = 1e-9
MAX_BINS = 1000


# -- histograms -------------------------------------------------------------------------


def exact_distribution(samples, weights=None, tol: float = EXACT_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Group values closer than ``tol``; returns sorted values and their masses."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise EmptyInputError("no samples")
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float).ravel()
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(x) > tol) + 1])
    values = x[starts]
    masses = np.array([math.fsum(w[a:b]) for a, b in zip(starts, np.append(starts[1:], x.size))])
    return values, masses / math.fsum(masses)


def _fd_bins(x: np.ndarray) -> int:
    """Freedman-Diaconis bin count, capped so heavy tails cannot blow up memory."""
    q75, q25 = np.percentile(x, [75, 25])
    span = float(np.ptp(x))
    if not (q75 > q25 and span > 0):
        return 1
    width = 2 * (q75 - q25) * x.size ** (-1 / 3)
    return int(min(MAX_BINS, max(1, math.ceil(span / width))))


def histogram(samples, weights=None, policy="fd", tol: float = EXACT_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Normalized histogram ``(edges, masses)``.

    ``policy`` is ``"fd"`` (Freedman-Diaconis), ``"exact"`` (one bin per
    distinct value up to ``tol``), a bin count or an array of edges.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise EmptyInputError("no samples")
    w = None if weights is None else np.asarray(weights, dtype=float).ravel()
    if isinstance(policy, str) and policy == "exact":
        values, masses = exact_distribution(x, w, tol)
        if values.size == 1:
            edges = np.array([values[0] - 0.5, values[0] + 0.5])
        else:
            mids = 0.5 * (values[1:] + values[:-1])
            edges = np.concatenate([[2 * values[0] - mids[0]], mids, [2 * values[-1] - mids[-1]]])
        return edges, masses
    if isinstance(policy, str) and policy == "fd":
        policy = _fd_bins(x)
    edges = np.histogram_bin_edges(x, bins=policy)
    counts, edges = np.histogram(x, bins=edges, weights=w)
    total = counts.sum()
    return edges, counts / total


def increment_distribution(increments, total: float, edges, tol: float = 1e-12) -> tuple[np.ndarray, bool]:
    """Per-trajectory increment distribution ``sum_n delta(x - x_n) / X``.

    Returns bin masses scaled by ``1 / total`` and whether that scaling was
    applied; for ``|total| < tol`` the raw counts are returned.
    """
    counts, _ = np.histogram(np.asarray(increments, dtype=float), bins=edges)
    if abs(total) < tol:
        return counts.astype(float), False
    return counts / total, True


# -- statistics -----------------------------------------------------------------------------


@dataclass
class EnsembleStats:
    n_trajectories: int
    sample_times: np.ndarray
    mean_density_by_time: np.ndarray
    histograms: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    estimators: dict[str, Estimate] = field(default_factory=dict)
    divergent_count: int = 0
    per_trajectory: dict[str, np.ndarray] = field(default_factory=dict)
    time_series: dict[str, np.ndarray] = field(default_factory=dict)
    increments: dict[str, np.ndarray] = field(default_factory=dict)
    records: list[TrajectoryRecord] | None = None
    weights: np.ndarray | None = None
    experiment: str = ""


def _estimate(values: np.ndarray, weights: np.ndarray | None = None) -> Estimate:
    values = np.asarray(values, dtype=float)
    if weights is not None:
        return Estimate(math.fsum(weights * values), 0.0, values.size)
    if values.size == 0:
        return Estimate(math.nan, math.nan, 0)
    stderr = float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return Estimate(math.fsum(values) / values.size, stderr, values.size)


def _merge_batches(batches: Sequence[TrajectoryBatch]) -> dict[str, np.ndarray]:
    fields = (
        "indices", "initial_index", "log_p_init", "log_prob", "log_pd", "log_pr", "u_initial", "u_last",
        "q_steps", "q_cl", "w", "fb", "jump_count", "split_ok", "final_heat", "final_states", "sample_states",
    )
    out = {f: np.concatenate([getattr(b, f) for b in batches]) for f in fields}
    for key in batches[0].snapshots:
        out["snap_" + key] = np.concatenate([b.snapshots[key] for b in batches])
    if batches[0].final_index is not None:
        out["final_index"] = np.concatenate([b.final_index for b in batches])
    if batches[0].dq is not None:
        out["dq_q_steps"] = np.concatenate([b.dq - b.dq_cl for b in batches])
        out["fb_steps"] = np.concatenate([b.fb_work for b in batches])
    return out


def _summarize(spec: ExperimentSpec, data: dict[str, np.ndarray], weights: np.ndarray | None) -> EnsembleStats:
    protocol = spec.protocol
    n = data["indices"].size
    m_steps = np.asarray(data.get("sample_steps", []), dtype=int)
    times = protocol.times[m_steps] if m_steps.size else np.zeros(0)
    w_avg = np.full(n, 1.0 / n) if weights is None else weights
    states = data["sample_states"]
    rho_t = np.einsum("m,msi,msj->sij", w_avg, states, states.conj()) if states.shape[1] else np.zeros((0,) + (spec.model.dim,) * 2)

    q_q = data["q_steps"] - data["q_cl"] + data["final_heat"]
    delta_u = data["u_last"] + data["final_heat"] - data["u_initial"]
    per = {
        "index": data["indices"],
        "jumps": data["jump_count"],
        "delta_u": delta_u,
        "work": data["w"],
        "fb_work": data["fb"],
        "q_cl": data["q_cl"],
        "q_q": q_q,
        "log_pd": data["log_pd"],
        "log_pr": data["log_pr"],
        "initial_index": data["initial_index"],
    }
    if "final_index" in data:
        per["final_index"] = data["final_index"]

    stats = EnsembleStats(n, times, rho_t, per_trajectory=per, weights=weights, experiment=spec.name)
    est = stats.estimators
    est["mean_delta_u"] = _estimate(delta_u, weights)
    est["mean_work"] = _estimate(data["w"], weights)
    est["mean_q_cl"] = _estimate(data["q_cl"], weights)
    est["mean_q_q"] = _estimate(q_q, weights)
    if protocol.scheme == "qj" and protocol.n_steps:
        est["jump_fraction"] = _estimate((data["jump_count"] > 0).astype(float), weights)
    if protocol.controller is not None:
        est["mean_fb_work"] = _estimate(data["fb"], weights)
        target = getattr(protocol.controller, "target", None)
        if target is not None:
            fid = fidelity(data["final_states"], target(protocol.t_final)[None, :])
            per["final_fidelity"] = fid
            est["final_fidelity"] = _estimate(fid, weights)

    # entropy production
    reference = reverse_reference(spec)
    with np.errstate(divide="ignore", invalid="ignore"):
        conditional = np.where(np.isneginf(data["log_pr"]), np.inf, data["log_pd"] - data["log_pr"])
        if reference is not None:
            p_r = reverse_prior_batch(data["final_states"], reference)
            boundary = np.where(p_r > 0, data["log_p_init"] - np.log(np.where(p_r > 0, p_r, 1.0)), np.inf)
            total = boundary + conditional
            per["boundary"] = boundary
        else:
            total = conditional
    per["conditional"] = conditional
    per["entropy"] = total
    available = ~np.isnan(total)
    if available.any():
        finite = np.isfinite(total) & available
        stats.divergent_count = int(np.sum(np.isinf(total)))
        expo = np.where(available, np.exp(-np.where(available, total, 0.0)), 0.0)
        if weights is None:
            est["fluctuation_theorem"] = _estimate(expo[available])
            est["mean_entropy"] = _estimate(total[finite])
        else:
            est["fluctuation_theorem"] = _estimate(expo, weights)
            kept = np.where(finite, weights, 0.0)
            if kept.sum() > 0:
                est["mean_entropy"] = _estimate(np.where(finite, total, 0.0), kept / math.fsum(kept))
        if finite.any():
            stats.histograms["entropy"] = histogram(total[finite], None if weights is None else weights[finite], _policy(spec, weights))

    if spec.reverse_prior == "thermal":
        beta = spec.beta
        df = equilibrium_free_energy(spec.model, beta, protocol.t_final) - equilibrium_free_energy(spec.model, beta, protocol.t0)
        a = beta * (delta_u - data["q_cl"] - df)
        b = beta * (data["w"] + data["fb"] - df) + beta * q_q
        per["jarzynski_exponent"] = a
        est["jarzynski"] = _estimate(np.exp(-a), weights)
        est["jarzynski_split"] = _estimate(np.exp(-b), weights)

    stats.histograms["q_q"] = histogram(q_q, weights, _policy(spec, weights))

    # time series at the sampled steps
    if m_steps.size:
        jumped = data["snap_jumps"] > 0
        wts = w_avg[:, None]
        ts = stats.time_series
        ts["t"] = times
        ts["jump_fraction"] = np.sum(wts * jumped, axis=0)
        for key in ("u", "q", "q_cl", "w", "fb"):
            ts["mean_" + key] = np.sum(wts * data["snap_" + key], axis=0)
        ts["mean_q_q"] = ts["mean_q"] - ts["mean_q_cl"]
        with np.errstate(invalid="ignore", divide="ignore"):
            ts["u_jump"] = np.sum(wts * jumped * data["snap_u"], axis=0) / ts["jump_fraction"]
            ts["u_nojump"] = np.sum(wts * ~jumped * data["snap_u"], axis=0) / (1 - ts["jump_fraction"])
            p = ts["jump_fraction"]
            ts["boundary_entropy"] = -np.nan_to_num(p * np.log(p)) - np.nan_to_num((1 - p) * np.log(1 - p))

    if "dq_q_steps" in data and data["dq_q_steps"].size:
        stats.increments["dq_q"] = data["dq_q_steps"]
        stats.increments["fb_work"] = data["fb_steps"]
    return stats


def _policy(spec: ExperimentSpec, weights) -> str:
    discrete = weights is not None or spec.name in ("PrepareMeasure", "JarzynskiClosed")
    return "exact" if discrete else "fd"


# -- runners --------------------------------------------------------------------------------


def _run_chunk(spec: ExperimentSpec, master_seed: int, start: int, stop: int, keep_records: bool, sample_steps, keep_series: bool):
    indices = np.arange(start, stop)
    try:
        return simulate(
            spec.model, spec.protocol, master_seed, indices,
            keep_series=keep_series or keep_records, keep_states=keep_records, sample_steps=sample_steps,
        )
    except Exception as exc:  # attach the first trajectory index of the failing chunk
        index = start
        for i in indices:
            try:
                simulate(spec.model, spec.protocol, master_seed, [i], sample_steps=sample_steps)
            except Exception:
                index = int(i)
                break
        raise TrajectoryError(index, exc) from exc


def run_ensemble(
    spec: ExperimentSpec,
    n: int,
    master_seed: int = 0,
    threads: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
    keep_records: bool = False,
    sample_steps: Sequence[int] | None = None,
    keep_increments: bool | None = None,
) -> EnsembleStats:
    """Run ``n`` trajectories of ``spec`` and aggregate their statistics.

    ``threads`` only changes the execution schedule; ``threads=1`` runs in the
    calling thread.  ``sample_steps`` defaults to ten evenly spaced steps
    (plus the start).  Per-step increments are kept for feedback runs unless
    ``keep_increments`` says otherwise.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if chunk_size < 1:
        raise ValueError("chunk_size must be positive")
    n_steps = spec.protocol.n_steps
    if sample_steps is None:
        sample_steps = np.unique(np.linspace(0, n_steps, 11).round().astype(int)) if n_steps else np.array([0])
    if keep_increments is None:
        keep_increments = spec.protocol.controller is not None
    bounds = [(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]

    def job(b):
        return _run_chunk(spec, master_seed, b[0], b[1], keep_records, sample_steps, keep_increments)

    if threads <= 1:
        batches = [job(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            batches = list(pool.map(job, bounds))
    data = _merge_batches(batches)
    data["sample_steps"] = np.asarray(sample_steps)
    stats = _summarize(spec, data, None)
    if keep_records:
        stats.records = [r for b in batches for r in b.records()]
    return stats


@dataclass
class Enumeration:
    records: list[TrajectoryRecord]
    probabilities: np.ndarray
    stats: EnsembleStats

    @property
    def total_probability(self) -> float:
        return math.fsum(self.probabilities)


def enumerate_trajectories(spec: ExperimentSpec, max_nodes: int = 10**6, sample_steps: Sequence[int] | None = None) -> Enumeration:
    """Every outcome sequence of a discrete protocol with its exact probability."""
    n_steps = spec.protocol.n_steps
    if sample_steps is None:
        sample_steps = np.unique(np.linspace(0, n_steps, 11).round().astype(int)) if n_steps else np.array([0])
    batch = propagate(spec.model, spec.protocol, branch=True, keep_states=True, max_nodes=max_nodes, sample_steps=sample_steps)
    probs = batch.probabilities
    data = _merge_batches([batch])
    data["sample_steps"] = np.asarray(sample_steps)
    stats = _summarize(spec, data, probs)
    return Enumeration(batch.records(), probs, stats)
