"""Acceptance criteria, each checked at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL`` line; the lines are also
collected into the ``acceptance criteria`` section of the pytest summary.
"""

from __future__ import annotations

import math
import time

import numpy as np
from scipy import stats as sps

from qthermo.cli import main
from qthermo.core import KET_PLUS_X, trace_distance, von_neumann_entropy
from qthermo.ensemble import enumerate_trajectories, run_ensemble
from qthermo.experiments import (
    dephasing_feedback,
    jarzynski_closed,
    jarzynski_open,
    prepare_measure,
    quantum_heat_std,
    spontaneous_emission,
)
from qthermo.model import dephasing_model, equilibrium_free_energy
from qthermo.unraveling import run_trajectory, trajectory_rng

THETAS = (np.pi / 6, np.pi / 3, np.pi / 2)


def three_sigma(value: float, target: float, stderr: float) -> bool:
    return abs(value - target) <= 3 * stderr


def ks_critical_1pct(n: int, m: int) -> float:
    return 1.628 * math.sqrt((n + m) / (n * m))


def test_criterion_01_prepare_measure_fluctuation_theorem(criterion):
    start = time.perf_counter()
    exact, mc = [], []
    for theta in THETAS:
        spec = prepare_measure(theta_prep=theta)
        exact.append(enumerate_trajectories(spec).stats.estimators["fluctuation_theorem"].value)
        mc.append(run_ensemble(spec, 10_000, 1).estimators["fluctuation_theorem"])
    elapsed = time.perf_counter() - start
    ok_exact = all(abs(v - 1) <= 1e-12 for v in exact)
    ok_mc = all(three_sigma(e.value, 1.0, e.stderr) for e in mc)
    detail = (
        "enumeration <exp(-s)> = " + ", ".join(f"{v:.15g}" for v in exact)
        + "; MC = " + ", ".join(f"{e.value:.4f}+/-{e.stderr:.1e}" for e in mc)
        + f"; {elapsed:.1f} s"
    )
    criterion(1, ok_exact and ok_mc and elapsed < 10, detail)


def test_criterion_02_entropy_equals_von_neumann(criterion):
    errs = []
    for theta in THETAS:
        mean = enumerate_trajectories(prepare_measure(theta_prep=theta)).stats.estimators["mean_entropy"].value
        s_vn = von_neumann_entropy(np.diag([np.cos(theta / 2) ** 2, np.sin(theta / 2) ** 2]))
        errs.append(abs(mean - s_vn))
    criterion(2, max(errs) <= 1e-12, "max |<s> - S_VN| = %.3g" % max(errs))


def test_criterion_03_spontaneous_emission(criterion):
    gamma, dt, n = 1.0, 1e-3, 10_000
    start = time.perf_counter()
    failures = []
    for gt in (0.5, 1.0, 2.0):
        stats = run_ensemble(spontaneous_emission(gamma=gamma, duration=gt / gamma, dt=dt), n, 3)
        per = stats.per_trajectory
        jumped = per["jumps"] > 0
        p = (1 - math.exp(-gt)) / 2
        frac = jumped.mean()
        if abs(frac - p) > 3 * math.sqrt(p * (1 - p) / n):
            failures.append(f"jump fraction {frac} vs {p} at Gt={gt}")
        if not np.all(per["q_cl"][jumped] == -1.0):
            failures.append(f"Q_cl not exactly -1 at Gt={gt}")
        if np.max(np.abs(per["q_q"][jumped] - 0.5)) > 5 * gamma * dt:
            failures.append(f"Q_q off by {np.max(np.abs(per['q_q'][jumped] - 0.5)):.3g} at Gt={gt}")
        b_err = np.max(np.abs(per["boundary"][~jumped] - math.log(2 / (1 + math.exp(-gt)))))
        if b_err > 1e-6:
            failures.append(f"no-jump boundary entropy off by {b_err:.3g} at Gt={gt}")
        if not np.all(np.isposinf(per["conditional"][jumped])):
            failures.append(f"finite conditional entropy on a jump trajectory at Gt={gt}")
    elapsed = time.perf_counter() - start
    if elapsed >= 60:
        failures.append(f"runtime {elapsed:.1f} s")
    criterion(3, not failures, "; ".join(failures) or f"all four checks at Gt in {{0.5, 1, 2}}; {elapsed:.1f} s")


def _oracle_emission(t: float, gamma: float, omega0: float) -> np.ndarray:
    # |+x> under spontaneous emission
    ee = 0.5 * math.exp(-gamma * t)
    eg = 0.5 * math.exp(-gamma * t / 2) * np.exp(-1j * omega0 * t)
    return np.array([[ee, eg], [np.conj(eg), 1 - ee]])


def _oracle_dephasing(t: float, gamma: float, omega0: float) -> np.ndarray:
    # |+x> under pure dephasing with L = sqrt(gamma) sigma_z
    eg = 0.5 * math.exp(-2 * gamma * t) * np.exp(-1j * omega0 * t)
    return np.array([[0.5, eg], [np.conj(eg), 0.5]])


def test_criterion_04_unraveling_matches_lindblad(criterion):
    n, dt = 10_000, 1e-3
    cases = (
        ("qj", spontaneous_emission(gamma=1.0, duration=2.0, dt=dt), _oracle_emission, 1.0),
        ("qsd", dephasing_feedback(gamma_phi=1.0, duration=2.0, dt=dt, feedback=False), _oracle_dephasing, 1.0),
    )
    worst = {}
    ok = True
    for name, spec, oracle, rate in cases:
        stats = run_ensemble(spec, n, 4)
        bound = max(3 / math.sqrt(n), 10 * rate * dt)
        dists = [trace_distance(rho, oracle(t, rate, 1.0)) for t, rho in zip(stats.sample_times[1:], stats.mean_density_by_time[1:])]
        ok &= len(dists) == 10 and max(dists) <= bound
        worst[name] = (max(dists), bound)
    criterion(4, ok, ", ".join(f"{k}: max D = {d:.4f} <= {b:.3f}" for k, (d, b) in worst.items()))


def test_criterion_05_qsd_energy_increment_law(criterion):
    gamma, dt = 0.1, 0.01
    rec = run_trajectory(dephasing_model(gamma), "qsd", KET_PLUS_X, 0.0, 1000 * dt, dt, trajectory_rng(5, 0))
    psi = rec.states[:-1]
    coherence = np.abs(psi[:, 0] * np.conj(psi[:, 1])) ** 2
    x = 4 * math.sqrt(gamma) * rec.outcomes[:, 0] * coherence
    fit = sps.linregress(x, np.diff(rec.ledger.u_series))
    ok = abs(fit.slope - 1) <= 0.05 and abs(fit.intercept) <= 1e-3
    criterion(5, ok, f"slope {fit.slope:.4f}, intercept {fit.intercept:.2e} over {x.size} steps")


def test_criterion_06_feedback_matching(criterion):
    n = 1000
    free = run_ensemble(dephasing_feedback(gamma_phi=0.1), n, 6)
    fb = free.increments["fb_work"].ravel()
    mq = -free.increments["dq_q"].ravel()
    ks = sps.ks_2samp(fb, mq).statistic
    crit = ks_critical_1pct(fb.size, mq.size)
    fid_free = free.estimators["final_fidelity"]
    clipped = run_ensemble(dephasing_feedback(gamma_phi=0.1, cutoff=0.05), n, 6)
    fid_cut = clipped.estimators["final_fidelity"]
    gap = fid_free.value - fid_cut.value
    sigma = math.hypot(fid_free.stderr, fid_cut.stderr)
    ok = ks < crit and fid_free.value >= 0.99 and gap >= 3 * sigma
    detail = f"KS {ks:.2e} < {crit:.2e}; fidelity {fid_free.value:.6f} vs cutoff {fid_cut.value:.6f} (gap {gap / sigma:.1f} sigma)"
    criterion(6, ok, detail)


def test_criterion_07_quantum_heat_spread_and_cutoff_ordering(criterion):
    n, gamma, dt = 1000, 0.1, 0.01
    thetas = (np.pi / 8, np.pi / 4, np.pi / 2)
    ratios, fids = [], []
    for theta in thetas:
        free = run_ensemble(dephasing_feedback(gamma_phi=gamma, dt=dt, theta=theta), n, 7)
        ratios.append(free.increments["dq_q"].std() / quantum_heat_std(theta, gamma, dt))
        fids.append(run_ensemble(dephasing_feedback(gamma_phi=gamma, dt=dt, theta=theta, cutoff=0.05), n, 7).estimators["final_fidelity"])
    std_ok = all(abs(r - 1) <= 0.1 for r in ratios)
    order_ok = all(
        a.value - b.value >= -3 * math.hypot(a.stderr, b.stderr) for a, b in zip(fids[:-1], fids[1:])
    )
    detail = "std ratios " + ", ".join(f"{r:.3f}" for r in ratios) + "; fidelities " + ", ".join(f"{f.value:.7f}" for f in fids)
    criterion(7, std_ok and order_ok, detail)


def test_criterion_08_closed_jarzynski(criterion):
    worst_avg = worst_branch = 0.0
    for beta in (0.5, 1.0, 2.0):
        for quench in ("frequency", "axis"):
            spec = jarzynski_closed(beta=beta, quench=quench)
            result = enumerate_trajectories(spec)
            worst_avg = max(worst_avg, abs(result.stats.estimators["jarzynski"].value - 1))
            per = result.stats.per_trajectory
            p = spec.protocol
            df = equilibrium_free_energy(spec.model, beta, p.t_final) - equilibrium_free_energy(spec.model, beta, p.t0)
            full = np.exp(-beta * (per["delta_u"] - df))
            split = np.exp(-beta * (per["work"] + per["fb_work"] - df) - beta * per["q_q"])
            worst_branch = max(worst_branch, float(np.max(np.abs(full - split))))
    ok = worst_avg <= 1e-12 and worst_branch <= 1e-12
    criterion(8, ok, f"max |<exp(-b(dU-dF))> - 1| = {worst_avg:.2e}, max branch split gap = {worst_branch:.2e}")


def test_criterion_09_open_jarzynski(criterion):
    spec = jarzynski_open()
    sample = run_ensemble(spec, 100, 9, keep_records=True)
    beta = spec.beta
    gaps = [abs(r.log_pr - (beta * r.ledger.q_cl_total + r.log_pd)) for r in sample.records]
    est = run_ensemble(spec, 10_000, 9).estimators["jarzynski"]
    ok = max(gaps) <= 1e-9 and three_sigma(est.value, 1.0, est.stderr)
    criterion(9, ok, f"max |log P_r - beta Q_cl - log P_d| = {max(gaps):.2e}; MC {est.value:.4f} +/- {est.stderr:.4f}")


def test_criterion_10_reproducibility(criterion, tmp_path):
    configs = {
        "emission": "experiment: SpontaneousEmission\nparameters: {dt: 0.01}\nn_trajectories: 300\nexport: {records: true}\n",
        "feedback": "experiment: DephasingFeedback\nparameters: {cutoff: 0.05}\nn_trajectories: 100\nexport: {records: true}\n",
        "jarzynski": "experiment: JarzynskiOpen\nn_trajectories: 200\nexport: {records: true}\n",
    }
    mismatches = []
    for name, text in configs.items():
        cfg = tmp_path / f"{name}.yaml"
        cfg.write_text(text)
        runs = {}
        for tag, extra in (("a", ["--single-thread"]), ("b", ["--single-thread"]), ("c", ["--threads", "4"])):
            out = tmp_path / name / tag
            assert main(["run", "--config", str(cfg), "--seed", "2024", "--out", str(out)] + extra) == 0
            runs[tag] = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
        for tag in ("b", "c"):
            if runs[tag] != runs["a"]:
                mismatches.append(f"{name}/{tag}")
        if "records.jsonl" not in runs["a"]:
            mismatches.append(f"{name}: no record file")
    criterion(10, not mismatches, "; ".join(mismatches) or "records and tables byte-identical across runs and thread counts")
