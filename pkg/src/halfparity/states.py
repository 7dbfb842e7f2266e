"""Two-qubit states in the coupled basis of the half-parity observable.

Everything in this package works in the basis

    (t- , t0 , t+ , s)  =  (|00>, (|01>+|10>)/sqrt2, |11>, (|01>-|10>)/sqrt2)

ordered so that the half-parity observable X = (sigma_z1 + sigma_z2)/2 is
diagonal with eigenvalues (+1, 0, -1, 0).  |0> is the sigma_z = +1 state of
each qubit and |11> is the ground state.  In this basis every channel we
implement (X-measurement updates, symmetric sigma_y rotations, sigma_z and
relaxation dissipators) maps real symmetric density matrices to real
symmetric density matrices, so states are stored as real symmetric 4x4
arrays.  All functions accept stacked states of shape (..., 4, 4) and
broadcast over the leading axes.

The symmetric sigma_y rotation U(theta) = exp(-i theta (sigma_y1+sigma_y2)/2)
acts on the triplet block as the spin-1 rotation

    U(theta) = [[ (1+c)/2, -s/r2, (1-c)/2, 0],
                [  s/r2,     c,   -s/r2,   0],
                [ (1-c)/2,  s/r2, (1+c)/2, 0],
                [   0,       0,     0,     1]]

with c = cos(theta), s = sin(theta), r2 = sqrt(2); the singlet is untouched.
This sign convention is the one consistent with the closed-form rotated
fidelity below (the sin(2 theta) cross term fixes it): note U(+pi/2)|00> is
the equal superposition (|0>+|1>)(|0>+|1>)/2 while U(+pi/2)|11> is the
product state with the opposite coherence signs.
"""

from __future__ import annotations

import numpy as np

SQRT2 = np.sqrt(2.0)
SQRT8 = np.sqrt(8.0)

# Index names for readability: rho[T0, T0] is the entanglement fidelity.
TMINUS, T0, TPLUS, SINGLET = 0, 1, 2, 3

# Eigenvalues of X = (sigma_z1 + sigma_z2)/2 in basis order.
X_DIAG = np.array([1.0, 0.0, -1.0, 0.0])

# (x_i - x_j)^2 and (x_i + x_j), used by the measurement superoperators.
X_DIFF_SQ = (X_DIAG[:, None] - X_DIAG[None, :]) ** 2
X_SUM = X_DIAG[:, None] + X_DIAG[None, :]

# Generator of the symmetric sigma_y rotation: U(theta) = expm(theta * ROT_GEN).
ROT_GEN = np.array(
    [
        [0.0, -1.0, 0.0, 0.0],
        [1.0, 0.0, -1.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
    ]
) / SQRT2

# Columns are the coupled basis states written in the computational basis
# (|00>, |01>, |10>, |11>):  rho_comp = BASIS @ rho @ BASIS.T
BASIS_TO_COMPUTATIONAL = np.array(
    [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0 / SQRT2, 0.0, 1.0 / SQRT2],
        [0.0, 1.0 / SQRT2, 0.0, -1.0 / SQRT2],
        [0.0, 0.0, 1.0, 0.0],
    ]
)

# sigma_y x sigma_y in the computational basis (spin flip for concurrence).
_YY_COMPUTATIONAL = np.array(
    [
        [0.0, 0.0, 0.0, -1.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0, 0.0],
    ]
)

# Single-qubit operators lifted to the coupled basis.  sigma_z1 swaps t0 and
# s (phase flip on qubit 1 toggles the exchange symmetry); the lowering
# operators relax toward the ground state |1> of each qubit.
SIGMA_Z1 = np.array(
    [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
    ]
)
SIGMA_Z2 = np.array(
    [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, -1.0],
        [0.0, 0.0, -1.0, 0.0],
        [0.0, -1.0, 0.0, 0.0],
    ]
)
SIGMA_MINUS1 = np.array(
    [
        [0.0, 0.0, 0.0, 0.0],
        [1.0 / SQRT2, 0.0, 0.0, 0.0],
        [0.0, 1.0 / SQRT2, 0.0, 1.0 / SQRT2],
        [-1.0 / SQRT2, 0.0, 0.0, 0.0],
    ]
)
SIGMA_MINUS2 = np.array(
    [
        [0.0, 0.0, 0.0, 0.0],
        [1.0 / SQRT2, 0.0, 0.0, 0.0],
        [0.0, 1.0 / SQRT2, 0.0, -1.0 / SQRT2],
        [1.0 / SQRT2, 0.0, 0.0, 0.0],
    ]
)


class StateError(ValueError):
    """A density matrix violated a structural invariant (trace, symmetry,
    positivity).  Positivity failures usually mean an integrator step was
    too large; they are surfaced, never repaired."""


def pure(amplitudes) -> np.ndarray:
    """Density matrix of a real pure state given its coupled-basis amplitudes."""
    v = np.asarray(amplitudes, dtype=float)
    v = v / np.linalg.norm(v)
    return np.outer(v, v)


def t_minus() -> np.ndarray:
    return pure([1.0, 0.0, 0.0, 0.0])


def t_zero() -> np.ndarray:
    """The target Bell state (|01>+|10>)/sqrt2."""
    return pure([0.0, 1.0, 0.0, 0.0])


def t_plus() -> np.ndarray:
    """|11><11|, the two-qubit ground state."""
    return pure([0.0, 0.0, 1.0, 0.0])


def singlet() -> np.ndarray:
    return pure([0.0, 0.0, 0.0, 1.0])


def psi0() -> np.ndarray:
    """Equal superposition (|0>+|1>)(|0>+|1>)/2, the standard initial state.

    In the coupled basis its amplitudes are (1/2, 1/sqrt2, 1/2, 0); all its
    coherences are positive.
    """
    return pure([0.5, 1.0 / SQRT2, 0.5, 0.0])


def mixed_triplet() -> np.ndarray:
    """Maximally mixed state on the triplet subspace, diag(1/3, 1/3, 1/3, 0)."""
    return np.diag([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0])


def symmetrize(rho: np.ndarray) -> np.ndarray:
    """Restore exact matrix symmetry after matmul-based updates."""
    return 0.5 * (rho + np.swapaxes(rho, -1, -2))


def trace(rho: np.ndarray) -> np.ndarray:
    return np.trace(rho, axis1=-2, axis2=-1)


def normalize(rho: np.ndarray) -> np.ndarray:
    return rho / trace(rho)[..., None, None]


def purity(rho: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...ji->...", rho, rho)


def expect_x(rho: np.ndarray) -> np.ndarray:
    """<X> = rho[t-,t-] - rho[t+,t+]."""
    return rho[..., TMINUS, TMINUS] - rho[..., TPLUS, TPLUS]


def validate_state(rho: np.ndarray, trace_tol: float = 1e-9, eig_tol: float = 1e-9) -> None:
    """Check the structural invariants; raise StateError on violation.

    Positivity is asserted, never repaired: a minimum eigenvalue below
    -eig_tol is reported to the caller as a signal that an integration step
    was too large.
    """
    rho = np.asarray(rho)
    if rho.shape[-2:] != (4, 4):
        raise StateError(f"expected trailing shape (4, 4), got {rho.shape}")
    asym = np.max(np.abs(rho - np.swapaxes(rho, -1, -2)))
    if asym > 1e-13:
        raise StateError(f"matrix not symmetric (max asymmetry {asym:.3e})")
    tr_err = np.max(np.abs(trace(rho) - 1.0))
    if tr_err > trace_tol:
        raise StateError(f"trace deviates from 1 by {tr_err:.3e}")
    min_eig = np.min(np.linalg.eigvalsh(rho))
    if min_eig < -eig_tol:
        raise StateError(
            f"minimum eigenvalue {min_eig:.3e} < -{eig_tol:.0e}; "
            "integration step too large"
        )


def fidelity_t0(rho: np.ndarray) -> np.ndarray:
    """Entanglement fidelity <t0| rho |t0>, the t0 diagonal element."""
    return rho[..., T0, T0]


def rotation_matrix(theta) -> np.ndarray:
    """Symmetric sigma_y rotation U(theta) (see module docstring); broadcasts
    over array-valued theta to shape theta.shape + (4, 4)."""
    theta = np.asarray(theta, dtype=float)
    c = np.cos(theta)
    s = np.sin(theta)
    u = np.zeros(theta.shape + (4, 4))
    u[..., 0, 0] = 0.5 * (1.0 + c)
    u[..., 0, 1] = -s / SQRT2
    u[..., 0, 2] = 0.5 * (1.0 - c)
    u[..., 1, 0] = s / SQRT2
    u[..., 1, 1] = c
    u[..., 1, 2] = -s / SQRT2
    u[..., 2, 0] = 0.5 * (1.0 - c)
    u[..., 2, 1] = s / SQRT2
    u[..., 2, 2] = 0.5 * (1.0 + c)
    u[..., 3, 3] = 1.0
    return u


def apply_symmetric_y_rotation(rho: np.ndarray, theta) -> np.ndarray:
    """Conjugate rho by U(theta).  The rotation is orthogonal and block
    diagonal, so trace, spectrum, concurrence and the singlet population are
    preserved exactly."""
    u = rotation_matrix(theta)
    out = u @ rho @ np.swapaxes(u, -1, -2)
    return symmetrize(out)


def fidelity_after_rotation(rho: np.ndarray, theta) -> np.ndarray:
    """Closed form for fidelity_t0(apply_symmetric_y_rotation(rho, theta)):

        F(theta) = rho_t0t0 + (1/4) [ sqrt8 sin(2 theta) (rho_t-t0 - rho_t0t+)
                   + (1 - cos(2 theta)) (1 - 3 rho_t0t0 - 2 rho_t-t+ - rho_ss) ]
    """
    theta = np.asarray(theta, dtype=float)
    f = rho[..., T0, T0]
    a = rho[..., TMINUS, T0] - rho[..., T0, TPLUS]
    b = 1.0 - 3.0 * f - 2.0 * rho[..., TMINUS, TPLUS] - rho[..., SINGLET, SINGLET]
    return f + 0.25 * (SQRT8 * np.sin(2.0 * theta) * a + (1.0 - np.cos(2.0 * theta)) * b)


def is_01_symmetric(rho: np.ndarray, tol: float = 1e-9) -> bool:
    """True iff rho is invariant under flipping |0> <-> |1> on both qubits.

    The flip swaps t- and t+, fixes t0 and negates s, so the conditions are
    rho_t-t- == rho_t+t+, rho_t-t0 == rho_t0t+, rho_t-s == -rho_t+s and
    rho_t0s == 0.  A symmetric state has <X> = 0 (within 2 tol).
    """
    return bool(
        np.all(np.abs(rho[..., TMINUS, TMINUS] - rho[..., TPLUS, TPLUS]) <= tol)
        and np.all(np.abs(rho[..., TMINUS, T0] - rho[..., T0, TPLUS]) <= tol)
        and np.all(np.abs(rho[..., TMINUS, SINGLET] + rho[..., TPLUS, SINGLET]) <= tol)
        and np.all(np.abs(rho[..., T0, SINGLET]) <= tol)
    )


def to_computational(rho: np.ndarray) -> np.ndarray:
    """Rewrite rho in the computational basis (|00>, |01>, |10>, |11>)."""
    return BASIS_TO_COMPUTATIONAL @ rho @ BASIS_TO_COMPUTATIONAL.T


def from_computational(rho_comp: np.ndarray) -> np.ndarray:
    return BASIS_TO_COMPUTATIONAL.T @ rho_comp @ BASIS_TO_COMPUTATIONAL


def concurrence(rho: np.ndarray):
    """Wootters concurrence C = max(0, l1 - l2 - l3 - l4).

    The l_i are the decreasingly sorted square roots of the eigenvalues of
    rho (sy x sy) rho* (sy x sy), evaluated in the computational basis.  For
    the real states used here rho* = rho.  Broadcasts; a single state gives
    a plain float.
    """
    rc = to_computational(np.asarray(rho, dtype=float))
    m = rc @ _YY_COMPUTATIONAL @ rc @ _YY_COMPUTATIONAL
    ev = np.linalg.eigvals(m)
    # eigenvalues are nonnegative real up to roundoff
    lam = np.sort(np.sqrt(np.clip(ev.real, 0.0, None)), axis=-1)
    c = np.maximum(0.0, lam[..., 3] - lam[..., 2] - lam[..., 1] - lam[..., 0])
    return float(c) if c.ndim == 0 else c
