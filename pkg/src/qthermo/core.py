"""Dense linear algebra helpers for small Hilbert spaces.

States are 1-D complex arrays, operators and density matrices are 2-D
complex arrays.  Most helpers also accept a leading batch axis on the
state argument, which the trajectory engine relies on.

Qubit convention: index 0 is the excited state ``|e>``, index 1 the
ground state ``|g>``, so ``SIGMA_Z = diag(1, -1)`` and the Hamiltonian
``(w0 / 2) * SIGMA_Z`` gives ``U_e = +w0/2``.
"""

from __future__ import annotations

import numpy as np

from .errors import DimMismatchError, InvalidDensityError, NotHermitianError, ZeroNormError

ZERO_NORM = 1e-14
NORM_TOL = 1e-10
HERMITIAN_TOL = 1e-12
DENSITY_TOL = 1e-10

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)  # |g><e|
SIGMA_PLUS = SIGMA_MINUS.conj().T
IDENTITY2 = np.eye(2, dtype=complex)

KET_E = np.array([1, 0], dtype=complex)
KET_G = np.array([0, 1], dtype=complex)
KET_PLUS_X = np.array([1, 1], dtype=complex) / np.sqrt(2)


def plus_theta(theta: float) -> np.ndarray:
    """``|+_theta> = cos(theta/2)|e> + sin(theta/2)|g>``."""
    return np.array([np.cos(theta / 2), np.sin(theta / 2)], dtype=complex)


def minus_theta(theta: float) -> np.ndarray:
    """``|-_theta> = -sin(theta/2)|e> + cos(theta/2)|g>``."""
    return np.array([-np.sin(theta / 2), np.cos(theta / 2)], dtype=complex)


def theta_basis(theta: float) -> np.ndarray:
    """Measurement basis ``{|+_theta>, |-_theta>}`` as matrix columns."""
    return np.column_stack([plus_theta(theta), minus_theta(theta)])


def as_state(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    if psi.ndim != 1 or psi.size == 0:
        raise DimMismatchError(f"a state must be a non-empty vector, got shape {psi.shape}")
    return psi


def as_operator(op, dim: int | None = None) -> np.ndarray:
    op = np.asarray(op, dtype=complex)
    if op.ndim != 2 or op.shape[0] != op.shape[1]:
        raise DimMismatchError(f"an operator must be square, got shape {op.shape}")
    if dim is not None and op.shape[0] != dim:
        raise DimMismatchError(f"operator has dimension {op.shape[0]}, expected {dim}")
    return op


def is_hermitian(op: np.ndarray, tol: float = HERMITIAN_TOL) -> bool:
    op = as_operator(op)
    return bool(np.max(np.abs(op - op.conj().T), initial=0.0) <= tol)


def check_hermitian(op: np.ndarray, tol: float = HERMITIAN_TOL, name: str = "operator") -> np.ndarray:
    op = as_operator(op)
    if not is_hermitian(op, tol):
        raise NotHermitianError(f"{name} is not Hermitian within {tol:g}")
    return op


def _check_dims(psi: np.ndarray, op: np.ndarray) -> None:
    if psi.shape[-1] != op.shape[-1]:
        raise DimMismatchError(f"state dimension {psi.shape[-1]} does not match operator {op.shape}")


def normalize(psi: np.ndarray) -> np.ndarray:
    """Return ``psi / ||psi||``; works row-wise on a batch of states."""
    psi = np.asarray(psi, dtype=complex)
    norm = np.sqrt(np.sum(np.abs(psi) ** 2, axis=-1, keepdims=True))
    if np.any(norm < ZERO_NORM):
        raise ZeroNormError("cannot normalize a state of zero norm")
    return psi / norm


def expectation(psi: np.ndarray, op: np.ndarray) -> complex | np.ndarray:
    """``<psi|A|psi>`` for one state or a batch of states (last axis)."""
    psi = np.asarray(psi, dtype=complex)
    op = as_operator(op)
    _check_dims(psi, op)
    value = np.einsum("...i,ij,...j->...", psi.conj(), op, psi)
    return value[()] if np.ndim(value) == 0 else value


def apply_kraus(op: np.ndarray, psi: np.ndarray) -> tuple[np.ndarray, float]:
    """Apply a Kraus operator without renormalizing.

    Returns the vector ``M|psi>`` and the outcome probability
    ``<psi|M^dag M|psi>``.
    """
    psi = as_state(psi)
    op = as_operator(op)
    _check_dims(psi, op)
    out = op @ psi
    return out, float(np.vdot(out, out).real)


def projector(psi: np.ndarray) -> np.ndarray:
    psi = as_state(psi)
    return np.outer(psi, psi.conj())


def fidelity(a: np.ndarray, b: np.ndarray) -> float | np.ndarray:
    """``|<a|b>|^2`` for normalized pure states (batched over rows)."""
    return np.abs(np.sum(np.conj(a) * b, axis=-1)) ** 2


def check_density(rho: np.ndarray, tol: float = DENSITY_TOL) -> np.ndarray:
    rho = as_operator(rho)
    if np.max(np.abs(rho - rho.conj().T)) > tol:
        raise InvalidDensityError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1) > tol:
        raise InvalidDensityError(f"density matrix has trace {np.trace(rho).real:.12g}")
    if np.min(np.linalg.eigvalsh(rho)) < -tol:
        raise InvalidDensityError("density matrix has a negative eigenvalue")
    return rho


def von_neumann_entropy(rho: np.ndarray) -> float:
    """Von Neumann entropy in nats."""
    rho = check_density(rho)
    evals = np.clip(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)), 0.0, None)
    evals = evals[evals > ZERO_NORM]
    return float(-np.sum(evals * np.log(evals)))


def shannon_entropy(probs) -> float:
    p = np.asarray(probs, dtype=float)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = as_operator(a)
    b = as_operator(b)
    if a.shape != b.shape:
        raise DimMismatchError(f"shapes {a.shape} and {b.shape} differ")
    diff = a - b
    return float(0.5 * np.sum(np.abs(np.linalg.eigvalsh(0.5 * (diff + diff.conj().T)))))


def density_from_states(states: np.ndarray, weights=None) -> np.ndarray:
    """Weighted mixture of pure states, ``sum_n w_n |psi_n><psi_n|``.

    Without weights this is the plain ensemble average.
    """
    states = np.asarray(states, dtype=complex)
    if weights is None:
        weights = np.full(states.shape[0], 1.0 / states.shape[0])
    return np.einsum("n,ni,nj->ij", np.asarray(weights, dtype=float), states, states.conj())


def bloch_vector(psi: np.ndarray) -> np.ndarray:
    """Bloch vector ``(<X>, <Y>, <Z>)`` of qubit states (batched)."""
    psi = np.asarray(psi, dtype=complex)
    return np.stack(
        [expectation(psi, SIGMA_X).real, expectation(psi, SIGMA_Y).real, expectation(psi, SIGMA_Z).real],
        axis=-1,
    )


def random_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random unitary via QR of a complex Gaussian matrix."""
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diagonal(r)
    return q * (d / np.abs(d))
