from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qthermo.core import KET_E, KET_G, KET_PLUS_X, SIGMA_MINUS, SIGMA_Z, density_from_states, expectation, normalize, projector, trace_distance
from qthermo.errors import DimMismatchError, TimestepTooLargeError
from qthermo.model import closed_qubit, dephasing_model, lindblad_evolve, lindblad_step, spontaneous_emission_model
from qthermo.outcomes import Diffusive, Jump, NoJump, from_label, to_label
from qthermo.unraveling import (
    Noise,
    Protocol,
    draw_noise,
    propagate,
    qj_step,
    qsd_step,
    run_trajectory,
    simulate,
    steps_between,
    trajectory_rng,
)

H = 0.5 * SIGMA_Z


def psi_nj(t, gamma, omega0=1.0):
    amp = np.array([np.exp(-(gamma + 1j * omega0) * t / 2), np.exp(1j * omega0 * t / 2)])
    return amp / np.sqrt(1 + np.exp(-gamma * t))


def same_ray(a, b, tol):
    return abs(abs(np.vdot(a, b)) - 1) < tol


def no_jump_noise(n_steps):
    return Noise(np.array([0.5]), np.full((1, n_steps), 1 - 1e-12), np.array([0.5]))


class TestOutcomes:
    def test_labels(self):
        assert to_label(NoJump()) == 0
        assert to_label(Jump(2)) == 3
        assert from_label(3) == Jump(2)
        assert from_label(0) == NoJump()

    def test_diffusive_equality(self):
        assert Diffusive(np.array([0.1, 0.2])) == Diffusive(np.array([0.1, 0.2]))
        assert Diffusive(np.array([0.1])) != Diffusive(np.array([0.2]))

    def test_negative_channel(self):
        with pytest.raises(ValueError):
            Jump(-1)


class TestQJStep:
    def test_dark_state(self, rng):
        model = spontaneous_emission_model(1.0)
        psi = KET_G.copy()
        for _ in range(100):
            psi, out = qj_step(psi, model, 0.0, 1e-2, rng)
            assert out == NoJump()
        assert abs(psi[1]) == pytest.approx(1, abs=1e-12)

    def test_excited_jump_rate(self):
        gamma, dt, n = 1.0, 0.01, 20000
        model = spontaneous_emission_model(gamma)
        rng = np.random.default_rng(3)
        jumps = 0
        for _ in range(n):
            post, out = qj_step(KET_E, model, 0.0, dt, rng)
            if out == Jump(0):
                jumps += 1
                assert same_ray(post, KET_G, 1e-14)
        p = gamma * dt
        assert abs(jumps / n - p) < 4 * np.sqrt(p * (1 - p) / n)

    def test_too_large(self, rng):
        model = spontaneous_emission_model(10.0)
        with pytest.raises(TimestepTooLargeError):
            qj_step(KET_E, model, 0.0, 0.05, rng)

    @given(st.integers(0, 2**32 - 1))
    def test_norm(self, seed):
        rng = np.random.default_rng(seed)
        psi = normalize(rng.standard_normal(2) + 1j * rng.standard_normal(2))
        out, _ = qj_step(psi, spontaneous_emission_model(2.0), 0.0, 1e-2, rng)
        assert abs(np.linalg.norm(out) - 1) <= 1e-10


class TestNoJumpBranch:
    @pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
    def test_exponential_mode_exact(self, t):
        dt, gamma = 1e-3, 1.0
        n = steps_between(0.0, t, dt)
        protocol = Protocol.pure(KET_PLUS_X, dt=dt, n_steps=n, kraus="exponential")
        rec = propagate(spontaneous_emission_model(gamma), protocol, no_jump_noise(n), keep_states=True).record(0)
        assert rec.jump_count == 0
        assert same_ray(rec.final_state, psi_nj(t, gamma), 1e-12)

    def test_first_order_mode_converges(self):
        t, gamma = 1.0, 1.0
        errs = []
        for dt in (1e-2, 1e-3):
            n = steps_between(0.0, t, dt)
            protocol = Protocol.pure(KET_PLUS_X, dt=dt, n_steps=n)
            rec = propagate(spontaneous_emission_model(gamma), protocol, no_jump_noise(n), keep_states=True).record(0)
            errs.append(1 - abs(np.vdot(rec.final_state, psi_nj(t, gamma))))
        assert errs[1] < errs[0] / 5

    @given(st.floats(0, np.pi), st.floats(0, 2 * np.pi))
    def test_trace_preserving_variant_agrees(self, a, b):
        # subtracting <L^dag L> inside H_eff only changes the norm at first order
        psi = np.array([np.cos(a / 2), np.exp(1j * b) * np.sin(a / 2)])
        model = spontaneous_emission_model(1.0)
        lam = SIGMA_MINUS.conj().T @ SIGMA_MINUS
        for dt in (1e-3, 1e-4):
            shifted = model.h_eff(0.0) + 0.5j * expectation(psi, lam).real * np.eye(2)
            plain = normalize((np.eye(2) - 1j * dt * model.h_eff(0.0)) @ psi)
            other = normalize((np.eye(2) - 1j * dt * shifted) @ psi)
            assert np.linalg.norm(plain - other) <= 2 * dt**2


class TestQSDStep:
    def test_pointer_state_fixed(self, rng):
        model = dephasing_model(0.3)
        psi = KET_E.copy()
        for _ in range(50):
            psi, out = qsd_step(psi, model, 0.0, 1e-3, rng)
            assert isinstance(out, Diffusive)
        assert same_ray(psi, KET_E, 1e-14)
        assert expectation(psi, H).real == pytest.approx(0.5, abs=1e-14)

    def test_energy_increment_plus_x(self):
        gamma, dt = 0.1, 1e-4
        model = dephasing_model(gamma)
        for dw in (0.01, -0.004, 0.002):
            post, _ = qsd_step(KET_PLUS_X, model, 0.0, dt, None, dw=[dw])
            du = expectation(post, H).real
            assert du == pytest.approx(np.sqrt(gamma) * dw, abs=5 * gamma * dw**2 + 1e-12)

    def test_mean_matches_lindblad(self):
        gamma, dt, n = 0.5, 1e-2, 20000
        model = dephasing_model(gamma)
        rng = np.random.default_rng(11)
        posts = np.array([qsd_step(KET_PLUS_X, model, 0.0, dt, rng)[0] for _ in range(n)])
        oracle = lindblad_step(projector(KET_PLUS_X), model, 0.0, dt)
        assert trace_distance(density_from_states(posts), oracle) < 3 / np.sqrt(n) * np.sqrt(gamma * dt) + 10 * (gamma * dt) ** 2

    def test_wrong_increment_count(self, rng):
        with pytest.raises(DimMismatchError):
            qsd_step(KET_PLUS_X, dephasing_model(0.1), 0.0, 1e-3, rng, dw=[0.1, 0.2])


class TestRunTrajectory:
    def test_closed_system_deterministic(self, rng):
        rec = run_trajectory(closed_qubit(1.0), "qj", KET_PLUS_X, 0.0, 1.0, 1e-3, rng, kraus="exponential")
        assert np.all(rec.outcomes == 0)
        expected = np.array([np.exp(-0.5j), np.exp(0.5j)]) / np.sqrt(2)
        assert same_ray(rec.final_state, expected, 1e-12)
        assert len(rec.outcomes) == len(rec.times) - 1
        assert rec.states.shape == (len(rec.times), 2)

    def test_states_normalized(self, rng):
        rec = run_trajectory(dephasing_model(0.5), "qsd", KET_PLUS_X, 0.0, 1.0, 1e-3, rng)
        assert np.all(np.abs(np.linalg.norm(rec.states, axis=1) - 1) <= 1e-10)

    def test_dephasing_collapses_to_pointer_states(self):
        gamma, dt, n = 1.0, 1e-2, 400
        protocol = Protocol.pure(KET_PLUS_X, scheme="qsd", dt=dt, n_steps=1000)
        batch = simulate(dephasing_model(gamma), protocol, 5, range(n), keep_series=False)
        z = expectation(batch.final_states, SIGMA_Z).real
        assert np.all(np.abs(np.abs(z) - 1) < 1e-3)
        assert abs(np.mean(z > 0) - 0.5) < 3 * np.sqrt(0.25 / n)

    def test_jump_fraction(self):
        gamma, dt, n = 1.0, 1e-3, 4000
        protocol = Protocol.pure(KET_PLUS_X, dt=dt, n_steps=1000)
        batch = simulate(spontaneous_emission_model(gamma), protocol, 21, range(n), keep_series=False)
        p = (1 - np.exp(-1.0)) / 2
        assert abs(np.mean(batch.jump_count > 0) - p) < 3 * np.sqrt(p * (1 - p) / n)

    def test_reproducible(self):
        model = dephasing_model(0.2)
        a = run_trajectory(model, "qsd", KET_PLUS_X, 0.0, 0.5, 1e-3, trajectory_rng(9, 4))
        b = run_trajectory(model, "qsd", KET_PLUS_X, 0.0, 0.5, 1e-3, trajectory_rng(9, 4))
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.outcomes, b.outcomes)

    def test_bad_grid(self, rng):
        with pytest.raises(ValueError):
            run_trajectory(closed_qubit(), "qj", KET_E, 0.0, 1.0, 0.3, rng)
        with pytest.raises(ValueError):
            run_trajectory(closed_qubit(), "qj", KET_E, 1.0, 0.0, 0.1, rng)


class TestUnravelingConsistency:
    @pytest.mark.parametrize("scheme,model", [("qj", spontaneous_emission_model(1.0)), ("qsd", dephasing_model(1.0))])
    def test_mean_density_matches_lindblad(self, scheme, model):
        n, dt, steps = 2000, 1e-2, 100
        protocol = Protocol.pure(KET_PLUS_X, scheme=scheme, dt=dt, n_steps=steps)
        sample = list(range(0, steps + 1, 10))
        batch = simulate(model, protocol, 2, range(n), keep_series=False, sample_steps=sample)
        oracle = lindblad_evolve(projector(KET_PLUS_X), model, 0.0, dt, steps)
        for j, s in enumerate(sample):
            rho = density_from_states(batch.sample_states[:, j])
            assert trace_distance(rho, oracle[s]) <= max(3 / np.sqrt(n), 10 * dt)


class TestNoise:
    def test_wiener_statistics(self):
        dt, n = 1e-3, 200000
        noise = draw_noise(np.random.default_rng(0), "qsd", n, 1, dt)
        dw = noise.steps[0, :, 0]
        assert abs(dw.mean()) <= 4 * np.sqrt(dt / n)
        assert abs(dw.var() / dt - 1) < 0.05

    def test_streams_independent_of_batch(self):
        protocol = Protocol.pure(KET_PLUS_X, scheme="qsd", dt=1e-3, n_steps=50)
        model = dephasing_model(0.3)
        whole = simulate(model, protocol, 4, range(6), keep_states=True)
        part = simulate(model, protocol, 4, [3], keep_states=True)
        assert np.array_equal(whole.states[3], part.states[0])
        assert whole.log_pd[3] == part.log_pd[0]


class TestProtocol:
    def test_probabilities_checked(self):
        with pytest.raises(ValueError):
            Protocol(np.array([KET_E, KET_G]), np.array([0.6, 0.6]))

    def test_basis_checked(self):
        with pytest.raises(ValueError):
            Protocol.pure(KET_E, final_basis=np.array([[1, 1], [0, 1]]))

    def test_scheme_checked(self):
        with pytest.raises(ValueError):
            Protocol.pure(KET_E, scheme="heterodyne")
