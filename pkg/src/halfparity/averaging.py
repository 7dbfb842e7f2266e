"""Deterministic evolution of the ensemble-average state.

Averaging the conditioned state over all outcomes of one measurement round,
with the feedback rotation applied inside the integral, gives a linear map
on the average state:

    avg' = integral dV  U(theta(V)) rho_tilde(V) U(theta(V))^T,

where rho_tilde(V) is the unnormalized posterior.  Elementwise in the
coupled basis,

    rho_tilde_ij(V) = rho_ij exp[-k dt (1-eta) (x_i-x_j)^2] g_i(V) g_j(V),

and g_i g_j is itself a Gaussian in V centered on (x_i + x_j)/2.  Two rules
therefore integrate in closed form as erf segment sums: no feedback, and the
semiclassical threshold (piecewise-constant theta).  The locally optimal
rule and table-lookup rules vary theta smoothly with V and are integrated by
composite Simpson quadrature on a grid of ±(1 + 6 sigma) around the outcome
support, with a node-doubling convergence check.

For continuous proportional feedback the dW terms of the stochastic
equation average away and the remaining drift is integrated by the midpoint
rule (average_continuous_step).

run_threshold_mc is the stochastic counterpart used to validate the
steady-state closed form: a vectorized quantum Monte Carlo over discrete
measurement + threshold-rotation rounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import erf

from .feedback import (
    AsloFeedback,
    NoFeedback,
    ProportionalFeedback,
    ProtocolSpec,
    TableFeedback,
    ThresholdFeedback,
    p_opt_from_avg_state,
    semiclassical_rule,
    theta_components,
    v_threshold_opt,
    wm_drift,
)
from .measurement import MeasurementConfig, discrete_update, gaussian_amplitudes, unobserved_factor
from .states import (
    X_DIAG,
    X_DIFF_SQ,
    X_SUM,
    apply_symmetric_y_rotation,
    fidelity_t0,
    mixed_triplet,
    rotation_matrix,
    symmetrize,
    trace,
)

QUAD_NODES = 801
QUAD_TOL = 1e-7
DEGENERATE_Y_TOL = 1e-13


class QuadratureError(RuntimeError):
    """Voltage quadrature failed its node-doubling convergence check."""


def voltage_grid(cfg: MeasurementConfig, nodes: int = QUAD_NODES):
    """Simpson nodes and weights covering the outcome support.

    The density is a mixture of Gaussians centered on the eigenvalues
    (+1, 0, -1), so the grid spans ±(max|x| + 6 sigma_true).  nodes must be
    odd for composite Simpson.
    """
    if nodes < 3 or nodes % 2 == 0:
        raise ValueError(f"Simpson quadrature needs an odd node count >= 3, got {nodes}")
    r = np.max(np.abs(X_DIAG)) + 6.0 * cfg.sigma_true
    v = np.linspace(-r, r, nodes)
    h = v[1] - v[0]
    w = np.full(nodes, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    return v, w * (h / 3.0)


# ---------------------------------------------------------------------------
# feedback lookup tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeedbackTable:
    """Precomputed rotation angles theta[step, voltage node].

    Serializes to a plain text grid (one header line, then one row per step)
    so tables survive round trips without any binary format.
    """

    voltages: np.ndarray
    thetas: np.ndarray
    dt: float

    def __post_init__(self):
        if self.thetas.ndim != 2 or self.thetas.shape[1] != self.voltages.shape[0]:
            raise ValueError("thetas must have shape (n_steps, n_voltages)")

    @property
    def n_steps(self) -> int:
        return self.thetas.shape[0]

    def angles(self, v, step: int) -> np.ndarray:
        """Interpolated angle at voltages v for a given step; clamps to the
        table edges, where theta has saturated at ±pi/2 anyway."""
        step = min(step, self.n_steps - 1)
        return np.interp(v, self.voltages, self.thetas[step])

    def oddness_residual(self) -> float:
        """max |theta(V) + theta(-V)| over the grid; ~0 for symmetric input."""
        return float(np.max(np.abs(self.thetas + self.thetas[:, ::-1])))

    def save_text(self, path) -> None:
        header = "dt_us=%.17g n_steps=%d n_voltages=%d" % (
            self.dt, self.n_steps, self.voltages.shape[0])
        np.savetxt(path, np.vstack([self.voltages, self.thetas]), header=header)

    @classmethod
    def load_text(cls, path) -> "FeedbackTable":
        with open(path) as fh:
            header = fh.readline()
        fields = dict(item.split("=") for item in header.lstrip("# ").split())
        data = np.loadtxt(path)
        return cls(voltages=data[0], thetas=data[1:], dt=float(fields["dt_us"]))


# ---------------------------------------------------------------------------
# one averaged measurement + feedback round
# ---------------------------------------------------------------------------

def _posterior_stack(avg: np.ndarray, cfg: MeasurementConfig, v: np.ndarray) -> np.ndarray:
    """Unnormalized posterior states rho_tilde(V) for every grid node."""
    g = gaussian_amplitudes(v, cfg)
    kernel = g[:, :, None] * g[:, None, :] * unobserved_factor(cfg)
    return avg[None, :, :] * kernel


def _aslo_angles(post: np.ndarray, v: np.ndarray):
    """Locally optimal angles per node plus the degenerate-node bookkeeping.

    Where the angle objective is exactly degenerate (y = 0, x < 0) both
    ±pi/2 maximize; off-center nodes take sign(V) pi/2 and a V = 0 node is
    split into two half-weight conjugations, reported via the second return.
    """
    y, x = theta_components(post)
    theta = 0.5 * np.arctan2(y, x)
    degenerate = (np.abs(y) <= DEGENERATE_Y_TOL * trace(post)) & (x < 0.0)
    off_center = degenerate & (v != 0.0)
    theta[off_center] = np.sign(v[off_center]) * (np.pi / 2.0)
    split = np.flatnonzero(degenerate & (v == 0.0))
    return theta, split


def _simpson_nodes(lo: float, hi: float, nodes: int):
    nodes = max(11, nodes)
    if nodes % 2 == 0:
        nodes += 1
    v = np.linspace(lo, hi, nodes)
    h = v[1] - v[0]
    w = np.full(nodes, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    return v, w * (h / 3.0)


def _aslo_segment(avg, cfg, lo, hi, nodes, end_angles=(None, None)):
    """Unnormalized averaged contribution of [lo, hi] under the locally
    optimal rule.  end_angles pins the angle at the first/last node to its
    one-sided limit when the segment edge is a discontinuity of theta(V)."""
    v, w = _simpson_nodes(lo, hi, nodes)
    post = _posterior_stack(avg, cfg, v)
    theta, split = _aslo_angles(post, v)
    if end_angles[0] is not None:
        theta[0] = end_angles[0]
    if end_angles[1] is not None:
        theta[-1] = end_angles[1]
    if split.size:
        # degenerate V = 0 nodes: average the +pi/2 and -pi/2 conjugations
        # by keeping the node at +pi/2 with half weight and appending a
        # -pi/2 copy with the other half
        half = np.pi / 2.0
        post = np.concatenate([post, post[split]])
        theta = np.concatenate([theta, np.full(split.size, -half)])
        theta[split] = half
        w = np.concatenate([w, 0.5 * w[split]])
        w[split] *= 0.5
    u = rotation_matrix(theta)
    return np.einsum("n,nab,nbc,ndc->ad", w, u, post, u, optimize=True)


def _aslo_breakpoint(avg, cfg, lo, hi) -> float | None:
    """Voltage where the optimal angle jumps between -pi/2 and +pi/2, if any.

    The sine component of the angle objective is proportional to
    rho01 g0(V) - rho12 g2(V), which has at most one zero,
    V* = log(rho12/rho01)/(8 eta k dt); the angle is discontinuous there
    exactly when the cosine component is negative.
    """
    r01, r12 = avg[0, 1], avg[1, 2]
    if r01 * r12 <= 0.0:
        return None
    vstar = np.log(r12 / r01) / (8.0 * cfg.ekt)
    if not lo < vstar < hi:
        return None
    post = _posterior_stack(avg, cfg, np.array([vstar]))
    _, x = theta_components(post)
    return float(vstar) if x[0] < 0.0 else None


def _aslo_round(avg, cfg, nodes):
    """Locally optimal averaged round by adaptive Simpson panels.

    The integrand is smooth except where (y(V), x(V)) of the angle objective
    passes near the origin: through it with x < 0 the angle jumps by pi and
    the round is split there exactly (one-sided limits at the edge nodes);
    near misses leave theta(V) continuous but steep, which the panel
    bisection resolves.
    """
    r = np.max(np.abs(X_DIAG)) + 6.0 * cfg.sigma_true
    half = np.pi / 2.0
    vstar = _aslo_breakpoint(avg, cfg, -r, r)
    if vstar is None:
        panels = [(-r, r, (None, None), 0)]
    else:
        sign = np.sign(avg[0, 1])
        # approaching V* the angle tends to -sign(rho01) pi/2 from the left
        # and +sign(rho01) pi/2 from the right
        panels = [
            (-r, vstar, (None, -sign * half), 0),
            (vstar, r, (sign * half, None), 0),
        ]
    out = np.zeros((4, 4))
    while panels:
        lo, hi, ends, depth = panels.pop()
        n = max(33, int(round(nodes * (hi - lo) / (2.0 * r))))
        coarse = _aslo_segment(avg, cfg, lo, hi, n, ends)
        fine = _aslo_segment(avg, cfg, lo, hi, 2 * n - 1, ends)
        err = np.max(np.abs(fine - coarse))
        if err <= 1e-11 * max(1.0, (hi - lo) / (2.0 * r) * 20.0) or depth >= 12:
            out = out + fine
        else:
            mid = 0.5 * (lo + hi)
            panels.append((lo, mid, (ends[0], None), depth + 1))
            panels.append((mid, hi, (None, ends[1]), depth + 1))
    return symmetrize(out / np.trace(out))


def _table_round(avg, cfg, table, step, nodes):
    v, w = _simpson_nodes(-np.max(np.abs(X_DIAG)) - 6.0 * cfg.sigma_true,
                          np.max(np.abs(X_DIAG)) + 6.0 * cfg.sigma_true, nodes)
    post = _posterior_stack(avg, cfg, v)
    u = rotation_matrix(table.angles(v, step))
    out = np.einsum("n,nab,nbc,ndc->ad", w, u, post, u, optimize=True)
    return symmetrize(out / np.trace(out))


def _t0_coherence_free(avg: np.ndarray) -> bool:
    """True when both t0-row coherences vanish, i.e. the optimal angle is
    degenerate (a pure-cosine objective) for every outcome."""
    scale = float(trace(avg))
    return max(abs(avg[0, 1]), abs(avg[1, 2])) <= 1e-14 * scale


def _segment_round(avg, cfg, segments) -> np.ndarray:
    """Exact averaged round for a rule that is piecewise constant in V.

    segments is a list of (a, b, theta) with a < b covering the real line
    (±inf allowed).  Each element picks up the erf mass of the Gaussian
    g_i g_j, centered on (x_i + x_j)/2, inside [a, b], times the full
    measurement dephasing factor exp(-k dt (x_i - x_j)^2).
    """
    d = np.exp(-cfg.k * cfg.dt * X_DIFF_SQ)
    q = 2.0 * np.sqrt(cfg.ekt)
    m = 0.5 * X_SUM
    out = np.zeros((4, 4))
    for a, b, theta in segments:
        weight = 0.5 * (erf(q * (b - m)) - erf(q * (a - m)))
        u = rotation_matrix(theta)
        out = out + u @ (avg * d * weight) @ u.T
    return symmetrize(out / np.trace(out))


def _threshold_round(avg: np.ndarray, cfg: MeasurementConfig, v_t: float) -> np.ndarray:
    if np.isinf(v_t):
        return avg * np.exp(-cfg.k * cfg.dt * X_DIFF_SQ)
    half = np.pi / 2.0
    segments = [(-np.inf, -v_t, -half), (-v_t, v_t, 0.0), (v_t, np.inf, half)]
    return _segment_round(avg, cfg, segments)


def _degenerate_aslo_round(avg: np.ndarray, cfg: MeasurementConfig) -> np.ndarray:
    """Locally optimal round for a state with no t0-row coherences.

    With rho_t-t0 = rho_t0t+ = 0 the angle objective's sine component
    vanishes for every outcome, so theta(V) collapses to a piecewise
    constant rule: rotate by sign(V) pi/2 wherever the cosine component

        x(V) = 2 rho11 g1^2 + 2 rho02 u02 g0 g2 - rho00 g0^2 - rho22 g2^2

    is negative, do nothing where it is positive.  The switching points are
    located by bisection and the round then evaluates in closed form.
    """
    b2 = 2.0 * cfg.ekt
    u02 = np.exp(-4.0 * cfg.k * (1.0 - cfg.eta) * cfg.dt)
    r00, r11, r22 = avg[0, 0], avg[1, 1], avg[2, 2]
    r02 = avg[0, 2]

    def xfun(v):
        g0 = np.exp(-b2 * (v - 1.0) ** 2)
        g1 = np.exp(-b2 * v**2)
        g2 = np.exp(-b2 * (v + 1.0) ** 2)
        return 2.0 * r11 * g1**2 + 2.0 * r02 * u02 * g0 * g2 - r00 * g0**2 - r22 * g2**2

    r = 1.0 + 8.0 * cfg.sigma_true
    grid = np.linspace(-r, r, 4001)
    xv = xfun(grid)
    roots = []
    for i in np.flatnonzero(np.sign(xv[:-1]) * np.sign(xv[1:]) < 0):
        roots.append(brentq(xfun, grid[i], grid[i + 1]))
    edges = [-np.inf] + sorted(set(roots) | ({0.0} if xfun(0.0) < 0.0 else set())) + [np.inf]
    half = np.pi / 2.0
    segments = []
    for a, b in zip(edges[:-1], edges[1:]):
        probe = _finite_midpoint(a, b, r)
        if xfun(probe) < 0.0:
            segments.append((a, b, np.sign(probe) * half))
        else:
            segments.append((a, b, 0.0))
    return _segment_round(avg, cfg, segments)


def _finite_midpoint(a: float, b: float, r: float) -> float:
    """Interior probe point of a segment whose ends may be infinite."""
    if np.isinf(a) and np.isinf(b):
        return 0.0
    if np.isinf(a):
        return b - r
    if np.isinf(b):
        return a + r
    return 0.5 * (a + b)


def average_discrete_step(
    avg: np.ndarray,
    rule: ProtocolSpec,
    cfg: MeasurementConfig,
    nodes: int = QUAD_NODES,
    check: bool = True,
    step: int = 0,
) -> np.ndarray:
    """Average state after one measurement round with feedback rule applied.

    No-feedback and fixed-threshold rules evaluate in closed form (erf
    segment sums); locally optimal and table rules integrate by Simpson
    quadrature.  With check=True the quadrature is repeated on a doubled
    grid and a discrepancy above 1e-7 raises QuadratureError.
    """
    if isinstance(rule, NoFeedback):
        return avg * np.exp(-cfg.k * cfg.dt * X_DIFF_SQ)
    if isinstance(rule, ThresholdFeedback):
        v_t = rule.v_t
        if v_t is None:
            v_t = float(v_threshold_opt(fidelity_t0(avg), cfg))
        return _threshold_round(avg, cfg, v_t)
    if isinstance(rule, (AsloFeedback, TableFeedback)):
        if isinstance(rule, AsloFeedback):
            if _t0_coherence_free(avg):
                # theta(V) is then a step function; quadrature cannot
                # converge but the round evaluates exactly as erf segments
                return _degenerate_aslo_round(avg, cfg)
            compute = lambda n: _aslo_round(avg, cfg, n)
        else:
            compute = lambda n: _table_round(avg, cfg, rule.table, step, n)
        out = compute(nodes)
        if check:
            refined = compute(2 * nodes - 1)
            err = float(np.max(np.abs(refined - out)))
            if err > QUAD_TOL:
                raise QuadratureError(
                    f"voltage quadrature not converged: doubling {nodes} nodes "
                    f"moved the result by {err:.3e} (> {QUAD_TOL:g})"
                )
        return out
    raise TypeError(f"no average-evolution rule for protocol {rule!r}")


def average_continuous_step(
    avg: np.ndarray,
    p: float | None,
    cfg: MeasurementConfig,
) -> tuple[np.ndarray, float]:
    """Midpoint step of the noise-averaged feedback master equation.

    p=None recomputes the locally optimal gain at both stage evaluations.
    Returns (new average state, gain used at the midpoint).
    """
    dt = cfg.dt
    p0 = p_opt_from_avg_state(avg, cfg.k, cfg.eta) if p is None else p
    mid = avg + 0.5 * dt * wm_drift(avg, p0, cfg)
    mid = mid / np.trace(mid)
    pm = p_opt_from_avg_state(mid, cfg.k, cfg.eta) if p is None else p
    out = avg + dt * wm_drift(mid, pm, cfg)
    return symmetrize(out / np.trace(out)), float(pm)


def build_feedback_table(
    initial: np.ndarray,
    cfg: MeasurementConfig,
    n_steps: int,
    nodes: int = QUAD_NODES,
) -> FeedbackTable:
    """Tabulate the locally optimal angle theta(V) for each round along the
    average trajectory started from `initial`."""
    v, _ = voltage_grid(cfg, nodes)
    avg = initial.copy()
    thetas = np.empty((n_steps, nodes))
    for i in range(n_steps):
        post = _posterior_stack(avg, cfg, v)
        theta, split = _aslo_angles(post, v)
        theta[split] = 0.0
        thetas[i] = theta
        avg = average_discrete_step(avg, AsloFeedback(), cfg, nodes=nodes, check=False)
    return FeedbackTable(voltages=v, thetas=thetas, dt=cfg.dt)


# ---------------------------------------------------------------------------
# protocol drivers
# ---------------------------------------------------------------------------

@dataclass
class AverageRun:
    """Time series produced by run_average_protocol."""

    times: np.ndarray
    fidelity: np.ndarray
    states: np.ndarray
    thresholds: np.ndarray | None = None
    gains: np.ndarray | None = None

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def run_average_protocol(
    initial: np.ndarray,
    protocol: ProtocolSpec,
    cfg: MeasurementConfig,
    n_steps: int,
    nodes: int = QUAD_NODES,
    check: bool = True,
) -> AverageRun:
    """Propagate the average state for n_steps rounds (or Euler steps for a
    continuous proportional protocol) and record the fidelity curve."""
    times = cfg.dt * np.arange(n_steps + 1)
    states = np.empty((n_steps + 1, 4, 4))
    states[0] = initial
    thresholds = None
    gains = None
    avg = initial
    if isinstance(protocol, ProportionalFeedback):
        gains = np.empty(n_steps)
        for i in range(n_steps):
            avg, gains[i] = average_continuous_step(avg, protocol.p, cfg)
            states[i + 1] = avg
    else:
        if isinstance(protocol, ThresholdFeedback) and protocol.v_t is None:
            thresholds = np.empty(n_steps)
        for i in range(n_steps):
            rule = protocol
            if thresholds is not None:
                v_t = float(v_threshold_opt(fidelity_t0(avg), cfg))
                thresholds[i] = v_t
                rule = ThresholdFeedback(v_t)
            avg = average_discrete_step(avg, rule, cfg, nodes=nodes, check=check, step=i)
            states[i + 1] = avg
    return AverageRun(
        times=times,
        fidelity=fidelity_t0(states),
        states=states,
        thresholds=thresholds,
        gains=gains,
    )


def run_threshold_mc(
    v_t: float,
    cfg: MeasurementConfig,
    n_chains: int,
    n_rounds: int,
    burn_in: int,
    seed: int,
    initial: np.ndarray | None = None,
):
    """Quantum Monte Carlo of the fixed-threshold protocol.

    Simulates n_chains independent round chains, each sampling an outcome,
    conditioning the state, and applying the threshold rotation.  Returns
    (mean fidelity, standard error, per-chain means); the standard error
    comes from the scatter of independent chain means after burn_in rounds
    are dropped.
    """
    rng = np.random.default_rng(np.random.Philox(key=[seed, 0]))
    if initial is None:
        initial = mixed_triplet()
    rho = np.broadcast_to(initial, (n_chains, 4, 4)).copy()
    chain_sums = np.zeros(n_chains)
    kept = 0
    for r in range(n_rounds):
        pops = np.clip(np.diagonal(rho, axis1=-2, axis2=-1), 0.0, None)
        cdf = np.cumsum(pops / pops.sum(axis=-1, keepdims=True), axis=-1)
        branch = (rng.random((n_chains, 1)) > cdf).sum(axis=-1)
        dv = X_DIAG[branch] + cfg.sigma_true * rng.standard_normal(n_chains)
        rho = discrete_update(rho, dv, cfg)
        theta = semiclassical_rule(dv, v_t)
        rho = apply_symmetric_y_rotation(rho, theta)
        if r >= burn_in:
            chain_sums += fidelity_t0(rho)
            kept += 1
    chain_means = chain_sums / kept
    mean = float(chain_means.mean())
    se = float(chain_means.std(ddof=1) / np.sqrt(n_chains))
    return mean, se, chain_means
