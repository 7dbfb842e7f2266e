"""Finite-time Gaussian measurement of the half-parity observable.

A measurement of strength k (rad/us), efficiency eta and duration dt yields
an average voltage DV whose statistics, conditioned on eigenstate i, are
Gaussian with mean x_i in (+1, 0, -1, 0) and standard deviation

    sigma_true = 1 / sqrt(8 eta k dt).

The conditioning operator is diagonal in the coupled basis,

    Omega_DV = (4 eta k dt / pi)^(1/4) exp[-2 eta k dt (DV - X)^2],

and the unobserved fraction (1 - eta) of the signal acts as pure dephasing,
multiplying element (i, j) by exp[-k (1-eta) dt (x_i - x_j)^2].

Two sigma conventions appear in steady-state formulas elsewhere in the
package: sampling always uses sigma_true above, while erfc-style tail
expressions use sigma_erfc = 1/sqrt(4 eta k dt) = sigma_true * sqrt(2), the
usual P(G > a) = erfc(a / (sigma sqrt 2)) / 2 rewriting.  Both are exposed
here so the factor of sqrt(2) lives in exactly one place.

The continuous limit is integrated by Euler-Maruyama steps of

    drho = D[M] rho dt + H[M] rho sqrt(eta) dW,      M = sqrt(2k) X,

which emit the voltage increment dV = <X> dt + dW / sqrt(8 eta k).  All
state-valued functions broadcast over stacked states of shape (..., 4, 4).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .states import X_DIAG, X_DIFF_SQ, X_SUM, StateError, expect_x, trace


class ImpossibleOutcomeError(ValueError):
    """Conditioning on an outcome whose probability density underflowed."""


@dataclass(frozen=True)
class MeasurementConfig:
    """Measurement strength k (rad/us), efficiency eta, step duration dt (us).

    The same type serves both the finite rounds (dt is the round length) and
    the continuous integrator (dt is the Euler step).
    """

    k: float
    eta: float
    dt: float

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"measurement strength k must be positive, got {self.k}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"efficiency eta must lie in [0, 1], got {self.eta}")
        if not self.dt > 0:
            raise ValueError(f"duration dt must be positive, got {self.dt}")

    @property
    def ekt(self) -> float:
        """eta * k * dt, the dimensionless observed measurement strength."""
        return self.eta * self.k * self.dt

    @property
    def sigma_true(self) -> float:
        """Standard deviation of the outcome about its branch mean."""
        return 1.0 / np.sqrt(8.0 * self.ekt)

    @property
    def sigma_erfc(self) -> float:
        """sigma_true * sqrt(2); the width entering erfc tail formulas."""
        return 1.0 / np.sqrt(4.0 * self.ekt)

    def with_dt(self, dt: float) -> "MeasurementConfig":
        return replace(self, dt=dt)


def povm_operator(dv, cfg: MeasurementConfig) -> np.ndarray:
    """Diagonal conditioning operator Omega_DV (observed channel only).

    Broadcasts over array-valued dv to shape dv.shape + (4, 4).
    """
    g = gaussian_amplitudes(dv, cfg)
    out = np.zeros(g.shape[:-1] + (4, 4))
    idx = np.arange(4)
    out[..., idx, idx] = g
    return out


def gaussian_amplitudes(dv, cfg: MeasurementConfig) -> np.ndarray:
    """The four diagonal entries of Omega_DV, shape dv.shape + (4,)."""
    dv = np.asarray(dv, dtype=float)
    norm = (4.0 * cfg.ekt / np.pi) ** 0.25
    return norm * np.exp(-2.0 * cfg.ekt * (dv[..., None] - X_DIAG) ** 2)


def outcome_density(rho: np.ndarray, dv, cfg: MeasurementConfig) -> np.ndarray:
    """p(DV) = Tr[Omega rho Omega] = sum_i g_i(DV)^2 rho_ii.

    A Gaussian mixture over the eigenvalue branches; integrates to 1.
    """
    g2 = gaussian_amplitudes(dv, cfg) ** 2
    pops = np.diagonal(rho, axis1=-2, axis2=-1)
    return g2 @ pops if pops.ndim == 1 else np.einsum("...i,...i->...", g2, pops)


def sample_outcome(rho: np.ndarray, cfg: MeasurementConfig, rng: np.random.Generator) -> float:
    """Draw one average voltage: branch i with probability rho_ii, then a
    Gaussian about x_i with standard deviation sigma_true."""
    pops = np.clip(np.diagonal(rho), 0.0, None)
    pops = pops / pops.sum()
    branch = rng.choice(4, p=pops)
    return float(X_DIAG[branch] + cfg.sigma_true * rng.standard_normal())


def unobserved_factor(cfg: MeasurementConfig) -> np.ndarray:
    """Elementwise dephasing from the unobserved signal fraction."""
    return np.exp(-cfg.k * (1.0 - cfg.eta) * cfg.dt * X_DIFF_SQ)


def discrete_update(rho: np.ndarray, dv: float, cfg: MeasurementConfig) -> np.ndarray:
    """State conditioned on average voltage dv over one round of length dt.

    Observed channel Omega rho Omega / Tr, then the unobserved-channel
    dephasing factor; both are elementwise in this basis.
    """
    p = outcome_density(rho, dv, cfg)
    if np.any(p < 1e-300):
        raise ImpossibleOutcomeError(
            f"outcome {dv} has probability density {np.min(p):.3e}; impossible record"
        )
    g = gaussian_amplitudes(dv, cfg)
    kernel = g[..., :, None] * g[..., None, :] * unobserved_factor(cfg)
    out = rho * kernel
    return out / trace(out)[..., None, None]


def continuous_step(
    rho: np.ndarray,
    cfg: MeasurementConfig,
    dw,
    check: bool = True,
):
    """One Euler-Maruyama step of the measurement master equation.

    Returns (rho', dV).  dw is the Wiener increment, Gaussian(0, dt); it may
    be an array broadcasting against stacked states.  With check=True the
    updated state's positivity is verified (min eigenvalue >= -1e-6) and a
    StateError raised otherwise, signalling that dt is too large.
    """
    dt = cfg.dt
    dw = np.asarray(dw, dtype=float)
    ex = expect_x(rho)
    drift = -cfg.k * X_DIFF_SQ * rho
    noise = np.sqrt(2.0 * cfg.k) * (X_SUM * rho - 2.0 * ex[..., None, None] * rho)
    out = rho + drift * dt + np.sqrt(cfg.eta) * noise * dw[..., None, None]
    out = out / trace(out)[..., None, None]
    if check:
        min_eig = np.min(np.linalg.eigvalsh(out))
        if min_eig < -1e-6:
            raise StateError(
                f"positivity violated (min eigenvalue {min_eig:.3e}); dt too large"
            )
    dv = ex * dt + dw / np.sqrt(8.0 * cfg.eta * cfg.k)
    return out, dv


def completeness_residual(cfg: MeasurementConfig, nodes: int = 200, span: float = 6.0) -> float:
    """Max deviation of the quadrature of Omega'Omega over DV from identity.

    Gauss-Legendre over [min(x) - span sigma, max(x) + span sigma].  The
    effects are diagonal, so the residual is max_i |integral g_i^2 - 1|.
    """
    residual = _effect_integral_residual(cfg, nodes, span)
    doubled = _effect_integral_residual(cfg, 2 * nodes, span)
    # refinement agreement confirms the quadrature itself converged
    return float(max(residual, doubled))


def _effect_integral_residual(cfg: MeasurementConfig, nodes: int, span: float) -> float:
    lo = X_DIAG.min() - span * cfg.sigma_true
    hi = X_DIAG.max() + span * cfg.sigma_true
    x, w = np.polynomial.legendre.leggauss(nodes)
    v = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    w = 0.5 * (hi - lo) * w
    g2 = gaussian_amplitudes(v, cfg) ** 2
    integrals = w @ g2
    return float(np.max(np.abs(integrals - 1.0)))


def composition_residual(cfg: MeasurementConfig, span: float = 2.0, n: int = 9) -> float:
    """Worst relative non-proportionality of two composed rounds.

    Omega(v2) Omega(v1) must equal a state-independent constant times the
    doubled-duration operator at the mean voltage; the residual is the
    relative spread of their diagonal ratio, maximized over an n x n grid
    of voltage pairs in [-span, span].
    """
    grid = np.linspace(-span, span, n)
    worst = 0.0
    doubled = cfg.with_dt(2.0 * cfg.dt)
    for v1 in grid:
        for v2 in grid:
            product = gaussian_amplitudes(v1, cfg) * gaussian_amplitudes(v2, cfg)
            combined = gaussian_amplitudes(0.5 * (v1 + v2), doubled)
            ratio = product / combined
            worst = max(worst, (ratio.max() - ratio.min()) / ratio.max())
    return float(worst)
