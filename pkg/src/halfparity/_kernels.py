"""Fixed-node fast paths for the schedule optimizer.

The adaptive quadrature in averaging.py is accurate but too slow inside a
finite-difference gradient loop, which needs n^2/2 averaged rounds per
gradient at n = 200.  The kernels here evaluate the locally optimal
averaged round on a fixed Simpson layout instead: one panel over the
outcome support, split exactly at the angle discontinuity V* when present,
with a constant node count per panel.  Node positions move smoothly with
the step duration, so the approximate cost is a smooth function of the
durations and central differences of it track the true gradient; the
absolute quadrature error only steers the line search.  Optimizer results
are re-evaluated through the adaptive path before being reported.

With numba available the round kernel is compiled once (cache=True);
otherwise a vectorized numpy fallback with the identical node layout keeps
the optimizer usable for small problems.  The kernel does not implement
the split-node bookkeeping of the exactly coherence-free case (both
t0-row coherences zero); states reached from the standard initial product
state keep those coherences nonzero, and the adaptive re-evaluation guards
the reported numbers either way.
"""

from __future__ import annotations

import numpy as np

from .feedback import theta_components
from .measurement import MeasurementConfig, gaussian_amplitudes, unobserved_factor
from .states import SQRT8, rotation_matrix, symmetrize

try:
    from numba import njit

    HAVE_NUMBA = True
except Exception:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap

HALF_PI = np.pi / 2.0
X_VALS = np.array([1.0, 0.0, -1.0, 0.0])


@njit(cache=True)
def _x_component_at(rho, dep, ekt, v):
    """Cosine component of the angle objective at a single voltage."""
    g = np.empty(4)
    for i in range(4):
        d = v - X_VALS[i]
        g[i] = np.exp(-2.0 * ekt * d * d)
    p11 = rho[1, 1] * dep[1, 1] * g[1] * g[1]
    p33 = rho[3, 3] * dep[3, 3] * g[3] * g[3]
    p02 = rho[0, 2] * dep[0, 2] * g[0] * g[2]
    tr = 0.0
    for i in range(4):
        tr += rho[i, i] * dep[i, i] * g[i] * g[i]
    return 3.0 * p11 + p33 + 2.0 * p02 - tr


@njit(cache=True)
def _panel(rho, dep, ekt, lo, hi, m, pin_lo, lo_angle, pin_hi, hi_angle, out):
    """Accumulate the unnormalized averaged round over [lo, hi].

    Composite Simpson with m nodes; pin_lo/pin_hi replace the edge angles
    with their one-sided limits at a split point.
    """
    step = (hi - lo) / (m - 1)
    h3 = step / 3.0
    g = np.empty(4)
    p = np.empty((4, 4))
    q = np.empty((4, 4))
    for node in range(m):
        v = lo + step * node
        if node == 0 or node == m - 1:
            w = h3
        elif node % 2 == 1:
            w = 4.0 * h3
        else:
            w = 2.0 * h3
        for i in range(4):
            d = v - X_VALS[i]
            g[i] = np.exp(-2.0 * ekt * d * d)
        for i in range(4):
            for j in range(4):
                p[i, j] = rho[i, j] * dep[i, j] * g[i] * g[j]
        y = SQRT8 * (p[0, 1] - p[1, 2])
        x = 3.0 * p[1, 1] + p[3, 3] + 2.0 * p[0, 2] - (
            p[0, 0] + p[1, 1] + p[2, 2] + p[3, 3]
        )
        if node == 0 and pin_lo:
            theta = lo_angle
        elif node == m - 1 and pin_hi:
            theta = hi_angle
        elif y == 0.0 and x < 0.0:
            # degenerate objective: both half-turns tie, take the odd choice
            theta = HALF_PI if v > 0.0 else -HALF_PI
        else:
            theta = 0.5 * np.arctan2(y, x)
        c = np.cos(theta)
        s = np.sin(theta)
        sq = s / np.sqrt(2.0)
        hp = 0.5 * (1.0 + c)
        hm = 0.5 * (1.0 - c)
        # q = R @ p with R the symmetric y rotation (singlet row untouched)
        for j in range(4):
            a0 = p[0, j]
            a1 = p[1, j]
            a2 = p[2, j]
            q[0, j] = hp * a0 - sq * a1 + hm * a2
            q[1, j] = sq * a0 + c * a1 - sq * a2
            q[2, j] = hm * a0 + sq * a1 + hp * a2
            q[3, j] = p[3, j]
        # out += w * q @ R^T
        for i in range(4):
            b0 = q[i, 0]
            b1 = q[i, 1]
            b2 = q[i, 2]
            out[i, 0] += w * (hp * b0 - sq * b1 + hm * b2)
            out[i, 1] += w * (sq * b0 + c * b1 - sq * b2)
            out[i, 2] += w * (hm * b0 + sq * b1 + hp * b2)
            out[i, 3] += w * q[i, 3]


@njit(cache=True)
def _round_fixed(rho, k, eta, dt, m):
    """One locally-optimal averaged round on the fixed node layout."""
    ekt = eta * k * dt
    kdu = k * (1.0 - eta) * dt
    dep = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            d = X_VALS[i] - X_VALS[j]
            dep[i, j] = np.exp(-kdu * d * d)
    r = 1.0 + 6.0 / np.sqrt(8.0 * ekt)
    r01 = rho[0, 1]
    r12 = rho[1, 2]
    vstar = 0.0
    split = False
    if r01 * r12 > 0.0:
        v = np.log(r12 / r01) / (8.0 * ekt)
        if -r < v < r and _x_component_at(rho, dep, ekt, v) < 0.0:
            vstar = v
            split = True
    out = np.zeros((4, 4))
    if split:
        sgn = 1.0 if r01 > 0.0 else -1.0
        _panel(rho, dep, ekt, -r, vstar, m, False, 0.0, True, -sgn * HALF_PI, out)
        _panel(rho, dep, ekt, vstar, r, m, True, sgn * HALF_PI, False, 0.0, out)
    else:
        _panel(rho, dep, ekt, -r, r, m, False, 0.0, False, 0.0, out)
    tr = out[0, 0] + out[1, 1] + out[2, 2] + out[3, 3]
    res = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            res[i, j] = 0.5 * (out[i, j] + out[j, i]) / tr
    return res


@njit(cache=True)
def _apply_channel(rho, basis, inv, lam, t):
    """exp(L t) rho through the eigendecomposition L = basis diag(lam) inv."""
    vec = np.zeros(16, dtype=np.complex128)
    for i in range(4):
        for j in range(4):
            vec[4 * i + j] = rho[i, j]
    tmp = inv @ vec
    for i in range(16):
        tmp[i] *= np.exp(lam[i] * t)
    vec = basis @ tmp
    res = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            res[i, j] = vec[4 * i + j].real
    return res


@njit(cache=True)
def _propagate(rho0, durations, k, eta, m, use_dec, basis, inv, lam):
    """All intermediate states plus the final infidelity.

    Decoherence enters as Strang halves, exp(L dt/2) either side of the
    measurement round, so the splitting error is second order in each step.
    """
    n = durations.shape[0]
    states = np.empty((n + 1, 4, 4))
    states[0] = rho0
    rho = rho0.copy()
    for i in range(n):
        dt = durations[i]
        if use_dec:
            rho = _apply_channel(rho, basis, inv, lam, 0.5 * dt)
        rho = _round_fixed(rho, k, eta, dt, m)
        if use_dec:
            rho = _apply_channel(rho, basis, inv, lam, 0.5 * dt)
        states[i + 1] = rho
    return states, 1.0 - states[n, 1, 1]


@njit(cache=True)
def _tail_cost(start, durations, i0, dt_i, k, eta, m, use_dec, basis, inv, lam):
    """Final infidelity from states[i0], with step i0 forced to dt_i."""
    n = durations.shape[0]
    rho = start.copy()
    for i in range(i0, n):
        dt = dt_i if i == i0 else durations[i]
        if use_dec:
            rho = _apply_channel(rho, basis, inv, lam, 0.5 * dt)
        rho = _round_fixed(rho, k, eta, dt, m)
        if use_dec:
            rho = _apply_channel(rho, basis, inv, lam, 0.5 * dt)
    return 1.0 - rho[1, 1]


@njit(cache=True)
def _fd_gradient(states, durations, h, k, eta, m, use_dec, basis, inv, lam):
    """Central-difference gradient of the final infidelity.

    Steps before i are untouched by a change of dt_i, so each component
    reuses the stored prefix state and re-propagates only the tail.
    """
    n = durations.shape[0]
    grad = np.empty(n)
    for i in range(n):
        cp = _tail_cost(
            states[i], durations, i, durations[i] + h, k, eta, m, use_dec, basis, inv, lam
        )
        cm = _tail_cost(
            states[i], durations, i, durations[i] - h, k, eta, m, use_dec, basis, inv, lam
        )
        grad[i] = (cp - cm) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# numpy fallback with the identical node layout
# ---------------------------------------------------------------------------

def _round_fixed_np(rho, k, eta, dt, m):
    cfg = MeasurementConfig(k=k, eta=eta, dt=dt)
    ekt = eta * k * dt
    r = 1.0 + 6.0 / np.sqrt(8.0 * ekt)
    r01, r12 = rho[0, 1], rho[1, 2]
    dep = unobserved_factor(cfg)

    def x_at(v):
        g = gaussian_amplitudes(np.array([v]), cfg)[0]
        post = rho * dep * np.outer(g, g)
        _, x = theta_components(post)
        return float(x)

    panels = [(-r, r, None, None)]
    if r01 * r12 > 0.0:
        vs = np.log(r12 / r01) / (8.0 * ekt)
        if -r < vs < r and x_at(vs) < 0.0:
            sgn = 1.0 if r01 > 0.0 else -1.0
            panels = [
                (-r, vs, None, -sgn * HALF_PI),
                (vs, r, sgn * HALF_PI, None),
            ]
    out = np.zeros((4, 4))
    for lo, hi, lo_angle, hi_angle in panels:
        v = np.linspace(lo, hi, m)
        w = np.full(m, 2.0)
        w[1::2] = 4.0
        w[0] = w[-1] = 1.0
        w *= (v[1] - v[0]) / 3.0
        g = gaussian_amplitudes(v, cfg)
        # gaussian_amplitudes includes the normalization prefactor the
        # compiled kernel drops; it cancels in the final normalization
        post = rho[None] * dep[None] * (g[:, :, None] * g[:, None, :])
        y, x = theta_components(post)
        theta = 0.5 * np.arctan2(y, x)
        degenerate = (y == 0.0) & (x < 0.0)
        theta[degenerate] = np.where(v[degenerate] > 0.0, HALF_PI, -HALF_PI)
        if lo_angle is not None:
            theta[0] = lo_angle
        if hi_angle is not None:
            theta[-1] = hi_angle
        u = rotation_matrix(theta)
        out += np.einsum("n,nab,nbc,ndc->ad", w, u, post, u, optimize=True)
    return symmetrize(out / np.trace(out))


def _channel_np(rho, basis, inv, lam, t):
    vec = inv @ rho.reshape(16).astype(complex)
    vec = basis @ (np.exp(lam * t) * vec)
    return vec.real.reshape(4, 4)


def _propagate_np(rho0, durations, k, eta, m, use_dec, basis, inv, lam):
    n = durations.shape[0]
    states = np.empty((n + 1, 4, 4))
    states[0] = rho0
    rho = rho0.copy()
    for i in range(n):
        dt = durations[i]
        if use_dec:
            rho = _channel_np(rho, basis, inv, lam, 0.5 * dt)
        rho = _round_fixed_np(rho, k, eta, dt, m)
        if use_dec:
            rho = _channel_np(rho, basis, inv, lam, 0.5 * dt)
        states[i + 1] = rho
    return states, 1.0 - states[n, 1, 1]


def _tail_cost_np(start, durations, i0, dt_i, k, eta, m, use_dec, basis, inv, lam):
    n = durations.shape[0]
    rho = start.copy()
    for i in range(i0, n):
        dt = dt_i if i == i0 else durations[i]
        if use_dec:
            rho = _channel_np(rho, basis, inv, lam, 0.5 * dt)
        rho = _round_fixed_np(rho, k, eta, dt, m)
        if use_dec:
            rho = _channel_np(rho, basis, inv, lam, 0.5 * dt)
    return 1.0 - rho[1, 1]


def _fd_gradient_np(states, durations, h, k, eta, m, use_dec, basis, inv, lam):
    n = durations.shape[0]
    grad = np.empty(n)
    for i in range(n):
        cp = _tail_cost_np(
            states[i], durations, i, durations[i] + h, k, eta, m, use_dec, basis, inv, lam
        )
        cm = _tail_cost_np(
            states[i], durations, i, durations[i] - h, k, eta, m, use_dec, basis, inv, lam
        )
        grad[i] = (cp - cm) / (2.0 * h)
    return grad


if HAVE_NUMBA:
    round_fixed = _round_fixed
    propagate = _propagate
    tail_cost = _tail_cost
    fd_gradient = _fd_gradient
else:  # pragma: no cover - exercised only without numba
    round_fixed = _round_fixed_np
    propagate = _propagate_np
    tail_cost = _tail_cost_np
    fd_gradient = _fd_gradient_np

_NO_DEC = (
    np.eye(16, dtype=complex),
    np.eye(16, dtype=complex),
    np.zeros(16, dtype=complex),
)
