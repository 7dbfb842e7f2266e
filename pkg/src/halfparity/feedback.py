"""Feedback rules and the closed forms that calibrate them.

All feedback acts through the symmetric local rotation exp(-i theta (sy1 +
sy2)/2), so a rule is just a map from measurement information to an angle
theta (discrete protocols) or a gain P multiplying the raw voltage increment
(continuous proportional feedback).

Discrete rules
  * theta_opt: the angle maximizing the post-rotation target fidelity of a
    given (possibly posterior) state, in closed form.
  * semiclassical threshold: rotate by sign(DV) pi/2 when |DV| exceeds V_T,
    with V_T either fixed or recomputed each round from the current fidelity
    via v_threshold_opt.

Continuous rules
  * proportional feedback H = P (sy1 + sy2)/2 applied via the Wiseman-Milburn
    feedback master equation (wiseman_milburn_step / wm_drift / wm_noise).
  * p_opt_from_avg_state gives the gain that is locally optimal for the
    ensemble average state; analytic_eta1 is its closed-form solution at
    perfect efficiency, where the average fidelity obeys dF = 2k(1-F)dt.

Steady-state fidelities of the threshold rule and of fixed-gain proportional
feedback are available in closed form for cross-checking simulations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .measurement import MeasurementConfig
from .states import (
    ROT_GEN,
    SQRT8,
    X_DIFF_SQ,
    X_SUM,
    StateError,
    expect_x,
    symmetrize,
    trace,
)

_A2 = ROT_GEN @ ROT_GEN


# ---------------------------------------------------------------------------
# protocol tags consumed by the average-evolution and trajectory drivers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoFeedback:
    """Measure, never rotate."""


@dataclass(frozen=True)
class ThresholdFeedback:
    """Semiclassical rule: rotate by sign(DV) pi/2 when |DV| > v_t.

    v_t=None means the threshold is recomputed every round from the current
    average fidelity via v_threshold_opt.
    """

    v_t: float | None = None


@dataclass(frozen=True)
class ProportionalFeedback:
    """Continuous gain P on the voltage increment; p=None tracks the
    locally optimal gain of the average state."""

    p: float | None = None


@dataclass(frozen=True)
class AsloFeedback:
    """Average-state locally optimal rotation: theta_opt of the posterior
    for each voltage outcome."""


@dataclass(frozen=True)
class TableFeedback:
    """Precomputed theta(V, step) lookup table (see averaging.FeedbackTable)."""

    table: object


ProtocolSpec = NoFeedback | ThresholdFeedback | ProportionalFeedback | AsloFeedback | TableFeedback


# ---------------------------------------------------------------------------
# optimal rotation angle
# ---------------------------------------------------------------------------

def theta_components(rho: np.ndarray):
    """The pair (y, x) with theta_opt = arctan2(y, x) / 2.

    y = sqrt(8) (rho_01 - rho_12) and x = 3 rho_11 + rho_33 + 2 rho_02 - tr,
    written against the trace so unnormalized posteriors can be fed in.
    """
    y = SQRT8 * (rho[..., 0, 1] - rho[..., 1, 2])
    x = 3.0 * rho[..., 1, 1] + rho[..., 3, 3] + 2.0 * rho[..., 0, 2] - trace(rho)
    return y, x


def theta_opt(rho: np.ndarray):
    """Rotation angle maximizing the post-rotation fidelity, in [-pi/2, pi/2]
    with the boundary convention arctan2(0, x<0) = pi, i.e. theta = +pi/2."""
    y, x = theta_components(rho)
    return 0.5 * np.arctan2(y, x)


def fidelity_max(rho: np.ndarray):
    """The fidelity attained at theta_opt, in closed form."""
    y, x = theta_components(rho)
    f = rho[..., 1, 1]
    return f + 0.25 * (np.hypot(y, x) - x)


# ---------------------------------------------------------------------------
# semiclassical threshold rule
# ---------------------------------------------------------------------------

def semiclassical_rule(dv, v_t: float):
    """theta = sign(dv) pi/2 where |dv| > v_t, else 0.  Broadcasts."""
    dv = np.asarray(dv, dtype=float)
    return np.where(np.abs(dv) > v_t, np.sign(dv) * (np.pi / 2.0), 0.0)


def posterior_fidelity(f, dv, cfg: MeasurementConfig):
    """Bayesian update of a scalar fidelity estimate after outcome dv.

    Models the state as f |t0> + (1-f)/2 (|t-> + |t+>) populations; the
    posterior weight of t0 after the Gaussian likelihoods is

        f' = f / (f + (1-f) exp(-4 b) cosh(8 b dv)),   b = eta k dt.
    """
    f = np.asarray(f, dtype=float)
    dv = np.asarray(dv, dtype=float)
    b = cfg.ekt
    # log of exp(-4b) cosh(8b dv), overflow-safe
    log_c = np.logaddexp(8.0 * b * dv, -8.0 * b * dv) - np.log(2.0) - 4.0 * b
    with np.errstate(over="ignore"):
        return f / (f + (1.0 - f) * np.exp(log_c))


def v_threshold_opt(f, cfg: MeasurementConfig):
    """Threshold above which rotating beats waiting, for current fidelity f.

        V_T = arccosh(2f/(1-f) exp(4 b)) / (8 b),   b = eta k dt.

    Arguments below 1 clamp to the always-rotate threshold 0; f = 1 gives
    +inf (never rotate).  Evaluated in log form so large b never overflows.
    """
    f = np.asarray(f, dtype=float)
    b = cfg.ekt
    out = np.zeros(f.shape)
    one = f >= 1.0
    out[one] = np.inf
    ok = (f > 0.0) & ~one
    ff = f[ok]
    log_arg = np.log(2.0 * ff / (1.0 - ff)) + 4.0 * b
    vals = np.zeros(ff.shape)
    pos = log_arg >= 0.0
    la = log_arg[pos]
    # arccosh(e^u) = u + log(1 + sqrt(1 - e^(-2u))), exact for all u >= 0
    with np.errstate(divide="ignore"):
        vals[pos] = la + np.log1p(np.sqrt(-np.expm1(-2.0 * la)))
    out[ok] = vals / (8.0 * b)
    return out if out.ndim else float(out)


def steady_state_fidelity_threshold(v_t, cfg: MeasurementConfig):
    """Closed-form steady-state fidelity of the fixed-threshold rule,

        F = 1 - 4 erfc(V_T/s) / [erfc((V_T+1)/s) + 4 erfc(V_T/s)
                                 + erfc((V_T-1)/s)],

    with s = 1/sqrt(4 eta k dt).  V_T = 0 gives exactly 1/3.
    """
    v_t = np.asarray(v_t, dtype=float)
    s = cfg.sigma_erfc
    r0 = erfc(v_t / s)
    denom = erfc((v_t + 1.0) / s) + 4.0 * r0 + erfc((v_t - 1.0) / s)
    out = 1.0 - 4.0 * r0 / denom
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# continuous proportional feedback
# ---------------------------------------------------------------------------

def p_opt_from_avg_state(rho: np.ndarray, k: float, eta: float):
    """Locally optimal feedback gain for the ensemble average state,

        P = 8 sqrt(2) k eta rho_01 / (3 rho_11 + rho_33 + 2 rho_02 - 1).

    The denominator is positive on the attraction basin of the target; it is
    <= 0 for states like |t-> that first need a pi/2 pre-rotation, and that
    case raises.
    """
    num = 8.0 * np.sqrt(2.0) * k * eta * rho[..., 0, 1]
    den = 3.0 * rho[..., 1, 1] + rho[..., 3, 3] + 2.0 * rho[..., 0, 2] - trace(rho)
    if np.any(den <= 0.0):
        raise ValueError(
            "average state outside the proportional-feedback basin "
            f"(denominator {np.min(den):.3e} <= 0); apply a pi/2 "
            "pre-rotation before engaging the gain"
        )
    out = num / den
    return out if out.ndim else float(out)


def analytic_eta1(t, f0: float, k: float):
    """Fidelity and optimal gain under ideal proportional feedback (eta = 1).

    The average fidelity obeys dF/dt = 2k(1-F), so

        F(t) = 1 - (1 - f0) exp(-2 k t),    P(t) = 4 k sqrt((1-F)/F).

    Returns (fidelity, gain); f0 = 1 yields (1, 0) for all t.
    """
    if not 0.0 < f0 <= 1.0:
        raise ValueError(f"initial fidelity must lie in (0, 1], got {f0}")
    t = np.asarray(t, dtype=float)
    fid = 1.0 - (1.0 - f0) * np.exp(-2.0 * k * t)
    gain = 4.0 * k * np.sqrt((1.0 - fid) / fid)
    if fid.ndim:
        return fid, gain
    return float(fid), float(gain)


def steady_state_fidelity_fixed_p(p: float, k: float, eta: float) -> float:
    """Steady-state fidelity of constant-gain proportional feedback,

        F = (P^2 + 16 k^2 eta (1 + 8 eta)) / (3 P^2 + 16 k^2 eta (3 + 8 eta)).

    Tends to (1+8 eta)/(3+8 eta) as P -> 0 and to 1/3 as P -> inf; the
    maximum over P sits in between.  P = 0 itself is no feedback, a different
    fixed point, and is rejected.
    """
    if p == 0.0:
        raise ValueError("p = 0 is the no-feedback channel; the fixed-gain "
                         "steady state formula does not apply")
    p2 = p * p
    c = 16.0 * k * k * eta
    return (p2 + c * (1.0 + 8.0 * eta)) / (3.0 * p2 + c * (3.0 + 8.0 * eta))


def wm_drift(rho: np.ndarray, p, cfg: MeasurementConfig) -> np.ndarray:
    """Deterministic part of the feedback master equation time derivative.

    Three pieces: measurement dephasing D[M]rho, the measurement-feedback
    cross term (P/2)[A, S] with S_ij = (x_i + x_j) rho_ij, and the feedback
    diffusion P^2/(8 k eta) D[A]rho, where A generates the symmetric y
    rotation.  Averaging over noise drops the dW terms, so this is also the
    full right-hand side of the ensemble-average equation.
    """
    p = np.asarray(p, dtype=float)[..., None, None]
    out = -cfg.k * X_DIFF_SQ * rho
    if np.any(p != 0.0):
        if cfg.eta <= 0.0:
            raise ValueError("feedback on the record requires eta > 0")
        s = X_SUM * rho
        out = out + 0.5 * p * (ROT_GEN @ s - s @ ROT_GEN)
        ara = np.einsum("ab,...bc,cd->...ad", ROT_GEN, rho, ROT_GEN)
        anti = _A2 @ rho + rho @ _A2
        out = out + p * p / (8.0 * cfg.k * cfg.eta) * (0.5 * anti - ara)
    return out


def wm_noise(rho: np.ndarray, p, cfg: MeasurementConfig) -> np.ndarray:
    """Coefficient of dW in the feedback master equation: the innovation
    term sqrt(eta) H[M]rho plus the direct feedback kick P[A, rho] scaled by
    the voltage-to-Wiener conversion 1/sqrt(8 eta k)."""
    p = np.asarray(p, dtype=float)[..., None, None]
    ex = expect_x(rho)[..., None, None]
    out = np.sqrt(cfg.eta * 2.0 * cfg.k) * (X_SUM * rho - 2.0 * ex * rho)
    if np.any(p != 0.0):
        if cfg.eta <= 0.0:
            raise ValueError("feedback on the record requires eta > 0")
        comm = ROT_GEN @ rho - rho @ ROT_GEN
        out = out + p / np.sqrt(8.0 * cfg.eta * cfg.k) * comm
    return out


def wiseman_milburn_step(
    rho: np.ndarray,
    p,
    cfg: MeasurementConfig,
    dw,
    check: bool = True,
) -> np.ndarray:
    """One Euler-Maruyama step of measurement plus proportional feedback.

    p broadcasts against stacked states, dw is the Wiener increment.  With
    check=True positivity of the result is verified as in continuous_step.
    """
    dw = np.asarray(dw, dtype=float)[..., None, None]
    out = rho + wm_drift(rho, p, cfg) * cfg.dt + wm_noise(rho, p, cfg) * dw
    out = symmetrize(out / trace(out)[..., None, None])
    if check:
        min_eig = np.min(np.linalg.eigvalsh(out))
        if min_eig < -1e-6:
            raise StateError(
                f"positivity violated (min eigenvalue {min_eig:.3e}); dt too large"
            )
    return out
