"""Stochastic trajectory ensembles under realistic conditions.

This module adds the ingredients a real device brings on top of the ideal
continuous measurement: qubit relaxation and dephasing, a feedback loop with
a propagation delay, and a finite feedback bandwidth modeled as a one-pole
low-pass filter on the voltage record.  It also provides the average-state
gain schedule extraction, median post-selection on the integrated signal,
and the state-estimation benchmark where each trajectory applies the locally
optimal rotation to its own conditional state.

Coherence times follow the angular convention used for k throughout: a time
quoted as "X us / 2pi" enters as t = X / (2pi) us, so the corresponding rate
is 1/t rad/us-compatible.  Use DecoherenceParams.from_2pi_microseconds to
convert quoted numbers.
"""

from dataclasses import dataclass

import numpy as np

from . import states
from .states import (
    SIGMA_MINUS1,
    SIGMA_MINUS2,
    SIGMA_Z1,
    SIGMA_Z2,
    StateError,
    apply_symmetric_y_rotation,
    fidelity_t0,
    psi0,
    symmetrize,
)
from .measurement import MeasurementConfig, continuous_step
from .feedback import (
    NoFeedback,
    ProportionalFeedback,
    ProtocolSpec,
    p_opt_from_avg_state,
    theta_opt,
)
from .averaging import average_continuous_step

TWO_PI = 2.0 * np.pi

_IDENT4 = np.eye(4)


def _as_pair(value) -> tuple:
    if np.isscalar(value):
        return (float(value), float(value))
    a, b = value
    return (float(a), float(b))


@dataclass(frozen=True)
class DecoherenceParams:
    """Per-qubit relaxation and pure-dephasing times in angular microseconds.

    The stored times are the quoted "/2pi" values divided by 2pi, so rates
    are simply 1/t1 and 1/tphi.  Infinite entries switch a channel off.
    """

    t1: tuple = (np.inf, np.inf)
    tphi: tuple = (np.inf, np.inf)

    def __post_init__(self):
        object.__setattr__(self, "t1", _as_pair(self.t1))
        object.__setattr__(self, "tphi", _as_pair(self.tphi))
        for t in (*self.t1, *self.tphi):
            if not (t > 0.0):
                raise ValueError("coherence times must be positive (or inf)")

    @classmethod
    def from_2pi_microseconds(cls, t1, tphi) -> "DecoherenceParams":
        """Build from times quoted in 'us / 2pi' units (scalar or per-qubit pair)."""
        t1p = tuple(t / TWO_PI for t in _as_pair(t1))
        tphip = tuple(t / TWO_PI for t in _as_pair(tphi))
        return cls(t1=t1p, tphi=tphip)

    def rates(self) -> np.ndarray:
        """(gamma_phi1, gamma_phi2, gamma_1a, gamma_1b) with the 1/2 dephasing
        prefactor folded in."""
        gphi = [0.0 if np.isinf(t) else 0.5 / t for t in self.tphi]
        g1 = [0.0 if np.isinf(t) else 1.0 / t for t in self.t1]
        return np.array([gphi[0], gphi[1], g1[0], g1[1]])

    @property
    def trivial(self) -> bool:
        return not np.any(self.rates())


_LINDBLAD_OPS = (SIGMA_Z1, SIGMA_Z2, SIGMA_MINUS1, SIGMA_MINUS2)
_LINDBLAD_MM = tuple(op.T @ op for op in _LINDBLAD_OPS)


def lindblad_rhs(rho: np.ndarray, params: DecoherenceParams) -> np.ndarray:
    """d rho / dt from relaxation and dephasing alone (no measurement)."""
    rates = params.rates()
    out = np.zeros_like(rho)
    for rate, op, mm in zip(rates, _LINDBLAD_OPS, _LINDBLAD_MM):
        if rate == 0.0:
            continue
        out = out + rate * (op @ rho @ op.T - 0.5 * (mm @ rho + rho @ mm))
    return out


def lindblad_step(state: np.ndarray, params: DecoherenceParams, dt: float) -> np.ndarray:
    """One Euler step of the decoherence channels; requires dt << min(T1, Tphi)."""
    return state + dt * lindblad_rhs(state, params)


def decoherence_superoperator(params: DecoherenceParams) -> np.ndarray:
    """The 16x16 generator L with vec(d rho) = L vec(rho), row-major vec.

    Used where the exact channel exp(L dt) is wanted (variable-duration
    schedules) instead of the Euler step.
    """
    sup = np.zeros((16, 16))
    for rate, op, mm in zip(params.rates(), _LINDBLAD_OPS, _LINDBLAD_MM):
        if rate == 0.0:
            continue
        sup += rate * (
            np.kron(op, op) - 0.5 * (np.kron(mm, _IDENT4) + np.kron(_IDENT4, mm))
        )
    return sup


@dataclass
class FeedbackChain:
    """Delay line plus one-pole low-pass filter on the voltage rate.

    The buffer holds the last delay/dt voltage rates (dV/dt); what the
    controller sees at time t is the filtered version of the rate emitted at
    t - delay.  The delay is rounded to the nearest whole number of steps
    (error at most dt/2).  filtered starts at 0 with a zero-filled buffer.
    """

    delay: float
    tau: float
    buffer: np.ndarray
    filtered: np.ndarray
    pos: int = 0

    def __post_init__(self):
        if self.delay < 0.0:
            raise ValueError("delay must be nonnegative")
        if not (self.tau > 0.0):
            raise ValueError("filter time constant must be positive")

    @classmethod
    def fresh(cls, delay: float, tau: float, dt: float, batch=()) -> "FeedbackChain":
        n = int(round(delay / dt)) if delay > 0.0 else 0
        shape = (n, *batch) if n else (0, *batch)
        return cls(
            delay=delay,
            tau=tau,
            buffer=np.zeros(shape),
            filtered=np.zeros(batch) if batch else np.float64(0.0),
        )

    def push(self, rate):
        """Insert the newest voltage rate, return the delayed one, advance."""
        if self.buffer.shape[0] == 0:
            return rate
        delayed = self.buffer[self.pos].copy()
        self.buffer[self.pos] = rate
        self.pos = (self.pos + 1) % self.buffer.shape[0]
        return delayed

    def advance_filter(self, delayed_rate, dt: float):
        self.filtered = self.filtered + (delayed_rate - self.filtered) * (dt / self.tau)
        return self.filtered


def trajectory_step_nonmarkovian(
    state: np.ndarray,
    chain: FeedbackChain,
    p: float,
    cfg: MeasurementConfig,
    decoherence,
    dt: float,
    dw,
    check: bool = True,
):
    """One full trajectory step with delay and bandwidth in the loop.

    Order: measurement (Euler, as continuous_step), decoherence channels,
    push dV/dt into the delay line, low-pass the delayed rate, then rotate
    by p * filtered * dt.  In the limit delay -> 0, tau -> 0 the rotation
    angle becomes p * dV, the Markovian proportional rule.

    Returns (state, chain); the chain is advanced in place.
    """
    if dt > chain.tau / 10.0:
        raise ValueError("dt must be at most tau/10 to resolve the filter")
    if chain.delay > 0.0 and dt > chain.delay:
        raise ValueError("dt must not exceed the feedback delay")
    step_cfg = cfg if cfg.dt == dt else cfg.with_dt(dt)
    rho, dv = continuous_step(state, step_cfg, dw, check=False)
    if decoherence is not None and not decoherence.trivial:
        rho = rho + dt * lindblad_rhs(rho, decoherence)
    delayed = chain.push(dv / dt)
    y = chain.advance_filter(delayed, dt)
    rho = apply_symmetric_y_rotation(rho, p * y * dt)
    if check:
        low = np.min(np.linalg.eigvalsh(rho))
        if low < -1e-6:
            raise StateError(
                f"minimum eigenvalue {low:.3e} < -1e-06; integration step too large"
            )
    return rho, chain


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one ensemble run needs besides the protocol itself.

    tau=None means an ideal Markovian loop (no filter, no delay allowed);
    p_schedule supplies the per-step proportional gain when the protocol is
    ProportionalFeedback(None).  signal_window is the integration window for
    the post-selection signal (defaults to the full horizon).
    """

    cfg: MeasurementConfig
    t_final: float
    decoherence: DecoherenceParams | None = None
    delay: float = 0.0
    tau: float | None = None
    p_schedule: np.ndarray | None = None
    seed: int = 0
    record_stride: int = 1
    signal_window: float | None = None

    def __post_init__(self):
        if not (self.t_final > 0.0):
            raise ValueError("t_final must be positive")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")
        if self.delay < 0.0:
            raise ValueError("delay must be nonnegative")
        dt = self.cfg.dt
        if self.tau is None:
            if self.delay > 0.0:
                raise ValueError("a delayed loop needs a finite bandwidth (set tau)")
        else:
            if dt > self.tau / 10.0:
                raise ValueError("dt must be at most tau/10 to resolve the filter")
            if self.delay > 0.0 and dt > self.delay:
                raise ValueError("dt must not exceed the feedback delay")
        if self.n_steps % self.record_stride:
            raise ValueError("record_stride must divide the step count")
        if self.signal_window is not None:
            w = self.signal_window
            if not (0.0 < w <= self.t_final + 1e-12):
                raise ValueError("signal_window must lie inside the horizon")

    @property
    def n_steps(self) -> int:
        n = int(round(self.t_final / self.cfg.dt))
        if abs(n * self.cfg.dt - self.t_final) > 1e-9:
            raise ValueError("t_final must be a whole number of steps")
        return n


@dataclass
class TrajectoryRecords:
    """Per-trajectory series on the recording grid.

    increments[i, j] is the voltage accumulated by trajectory i between
    record points j-1 and j (zero in column 0), so partial integrated
    signals can be recomputed for any window on the grid.  states is kept
    in float32; means are accumulated in float64 elsewhere.
    """

    times: np.ndarray
    fidelity: np.ndarray
    states: np.ndarray
    increments: np.ndarray
    signal: np.ndarray
    window_end: float

    def __post_init__(self):
        n_t = self.times.shape[0]
        if self.fidelity.shape[1] != n_t or self.increments.shape[1] != n_t:
            raise ValueError("record series must share the time grid")
        if self.states.shape[:2] != self.fidelity.shape:
            raise ValueError("record series must share the time grid")

    @property
    def n_traj(self) -> int:
        return self.fidelity.shape[0]

    def concurrence(self) -> np.ndarray:
        """Per-trajectory concurrence series, computed on demand."""
        return states.concurrence(self.states.astype(float))

    def integrated_signal(self, window_end: float) -> np.ndarray:
        """|sum of dV| over [0, window_end], window_end on the record grid."""
        idx = np.searchsorted(self.times, window_end - 1e-9)
        if idx >= self.times.size or abs(self.times[idx] - window_end) > 1e-9:
            raise ValueError("window_end is not on the record grid")
        return np.abs(np.sum(self.increments[:, : idx + 1], axis=1))


@dataclass
class EnsembleResult:
    times: np.ndarray
    mean_fidelity: np.ndarray
    sem_fidelity: np.ndarray
    concurrence: np.ndarray
    mean_states: np.ndarray
    n_traj: int
    records: TrajectoryRecords


def _trajectory_normals(seed: int, n_traj: int, n_steps: int) -> np.ndarray:
    """Raw standard normals, one counter-based stream per trajectory."""
    xi = np.empty((n_traj, n_steps))
    for i in range(n_traj):
        gen = np.random.Generator(np.random.Philox(key=[seed, i]))
        xi[i] = gen.standard_normal(n_steps)
    return xi


def _gain_vector(protocol: ProtocolSpec, config: ExperimentConfig) -> np.ndarray:
    n = config.n_steps
    if isinstance(protocol, NoFeedback):
        return np.zeros(n)
    if isinstance(protocol, ProportionalFeedback):
        if protocol.p is not None:
            return np.full(n, float(protocol.p))
        if config.p_schedule is None:
            raise ValueError(
                "ProportionalFeedback(None) needs config.p_schedule"
            )
        p = np.asarray(config.p_schedule, dtype=float)
        if p.shape != (n,):
            raise ValueError(f"p_schedule must have one entry per step ({n})")
        return p
    raise TypeError(f"unsupported protocol for trajectory ensembles: {protocol!r}")


def run_ensemble(
    config: ExperimentConfig, protocol: ProtocolSpec, n_traj: int
) -> EnsembleResult:
    """Propagate n_traj trajectories and reduce to mean curves.

    Deterministic given config.seed: every trajectory owns a counter-based
    stream, so the result does not depend on how the work is batched.  The
    ensemble concurrence is that of the mean state at each record point, not
    the mean of per-trajectory concurrences.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    cfg = config.cfg
    dt = cfg.dt
    n_steps = config.n_steps
    stride = config.record_stride
    n_rec = n_steps // stride + 1
    window = config.signal_window if config.signal_window is not None else config.t_final

    gains = _gain_vector(protocol, config)
    xi = _trajectory_normals(config.seed, n_traj, n_steps)
    dw = xi * np.sqrt(dt)

    rho = np.broadcast_to(psi0(), (n_traj, 4, 4)).copy()
    markovian = config.tau is None
    chain = None
    if not markovian:
        chain = FeedbackChain.fresh(config.delay, config.tau, dt, batch=(n_traj,))

    times = dt * stride * np.arange(n_rec)
    fid = np.empty((n_traj, n_rec))
    rec_states = np.empty((n_traj, n_rec, 4, 4), dtype=np.float32)
    increments = np.zeros((n_traj, n_rec))
    state_sum = np.zeros((n_rec, 4, 4))
    signal = np.zeros(n_traj)

    fid[:, 0] = fidelity_t0(rho)
    rec_states[:, 0] = rho.astype(np.float32)
    state_sum[0] = rho.sum(axis=0)

    accum = np.zeros(n_traj)
    dec = config.decoherence
    apply_dec = dec is not None and not dec.trivial
    for j in range(n_steps):
        rho, dv = continuous_step(rho, cfg, dw[:, j], check=False)
        if apply_dec:
            rho = rho + dt * lindblad_rhs(rho, dec)
        if markovian:
            angle = gains[j] * dv
        else:
            delayed = chain.push(dv / dt)
            angle = gains[j] * chain.advance_filter(delayed, dt) * dt
        if gains[j] != 0.0:
            rho = apply_symmetric_y_rotation(rho, angle)
        accum += dv
        t_now = (j + 1) * dt
        if t_now <= window + 1e-9:
            signal += dv
        if (j + 1) % stride == 0:
            r = (j + 1) // stride
            fid[:, r] = fidelity_t0(rho)
            rec_states[:, r] = rho.astype(np.float32)
            increments[:, r] = accum
            state_sum[r] = rho.sum(axis=0)
            accum = np.zeros(n_traj)

    mean_states = state_sum / n_traj
    records = TrajectoryRecords(
        times=times,
        fidelity=fid,
        states=rec_states,
        increments=increments,
        signal=np.abs(signal),
        window_end=window,
    )
    sem = (
        np.std(fid, axis=0, ddof=1) / np.sqrt(n_traj)
        if n_traj > 1
        else np.zeros(n_rec)
    )
    return EnsembleResult(
        times=times,
        mean_fidelity=fid.mean(axis=0),
        sem_fidelity=sem,
        concurrence=states.concurrence(mean_states),
        mean_states=mean_states,
        n_traj=n_traj,
        records=records,
    )


def extract_p_schedule(
    cfg: MeasurementConfig,
    t_final: float,
    decoherence: DecoherenceParams | None = None,
    initial: np.ndarray | None = None,
) -> np.ndarray:
    """Per-step proportional gains from the ideal average evolution.

    Runs the averaged continuous protocol (plus decoherence channels when
    given, no delay or bandwidth) and records the locally optimal gain at
    the start of every step.  The result feeds run_ensemble via
    ExperimentConfig.p_schedule.
    """
    n = int(round(t_final / cfg.dt))
    if abs(n * cfg.dt - t_final) > 1e-9:
        raise ValueError("t_final must be a whole number of steps")
    avg = psi0() if initial is None else np.array(initial, dtype=float)
    p = np.empty(n)
    apply_dec = decoherence is not None and not decoherence.trivial
    for j in range(n):
        p[j] = p_opt_from_avg_state(avg, cfg.k, cfg.eta)
        avg, _ = average_continuous_step(avg, float(p[j]), cfg)
        if apply_dec:
            avg = symmetrize(avg + cfg.dt * lindblad_rhs(avg, decoherence))
    return p


@dataclass
class PostSelection:
    times: np.ndarray
    mean_fidelity: np.ndarray
    sem_fidelity: np.ndarray
    concurrence: np.ndarray
    kept: np.ndarray
    n_kept: int


def post_select(
    records: TrajectoryRecords,
    window_end: float | None = None,
    keep_fraction: float = 0.5,
) -> PostSelection:
    """Keep the trajectories whose |integrated signal| is smallest.

    With the default keep_fraction 0.5 this retains exactly floor(n/2)
    records, the ones below the ensemble median.  Mean curves are then
    recomputed over the kept set only.
    """
    n = records.n_traj
    if n < 2:
        raise ValueError("post-selection needs at least 2 trajectory records")
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError("keep_fraction must be in (0, 1]")
    if window_end is None:
        sig = records.signal
    else:
        sig = records.integrated_signal(window_end)
    n_keep = max(1, int(np.floor(n * keep_fraction)))
    kept = np.sort(np.argsort(sig, kind="stable")[:n_keep])
    fid = records.fidelity[kept]
    mean_states = records.states[kept].astype(float).mean(axis=0)
    sem = (
        np.std(fid, axis=0, ddof=1) / np.sqrt(n_keep)
        if n_keep > 1
        else np.zeros(fid.shape[1])
    )
    return PostSelection(
        times=records.times,
        mean_fidelity=fid.mean(axis=0),
        sem_fidelity=sem,
        concurrence=states.concurrence(mean_states),
        kept=kept,
        n_kept=n_keep,
    )


def locally_optimal_trajectory(
    cfg: MeasurementConfig,
    t_final: float,
    n_traj: int = 300,
    seed: int = 0,
    record_stride: int = 1,
):
    """State-estimation benchmark: each trajectory tracks its own conditional
    state and applies the exactly optimal rotation after every step.

    Markovian measurement only (no decoherence, delay, or bandwidth); this
    is the upper envelope the precomputed protocols are compared against.
    Returns (times, mean_fidelity, sem_fidelity).
    """
    n_steps = int(round(t_final / cfg.dt))
    if abs(n_steps * cfg.dt - t_final) > 1e-9:
        raise ValueError("t_final must be a whole number of steps")
    if n_steps % record_stride:
        raise ValueError("record_stride must divide the step count")
    xi = _trajectory_normals(seed, n_traj, n_steps)
    dw = xi * np.sqrt(cfg.dt)
    rho = np.broadcast_to(psi0(), (n_traj, 4, 4)).copy()
    n_rec = n_steps // record_stride + 1
    fid = np.empty((n_traj, n_rec))
    fid[:, 0] = fidelity_t0(rho)
    for j in range(n_steps):
        rho, _ = continuous_step(rho, cfg, dw[:, j], check=False)
        rho = apply_symmetric_y_rotation(rho, theta_opt(rho))
        if (j + 1) % record_stride == 0:
            fid[:, (j + 1) // record_stride] = fidelity_t0(rho)
    times = cfg.dt * record_stride * np.arange(n_rec)
    sem = (
        np.std(fid, axis=0, ddof=1) / np.sqrt(n_traj)
        if n_traj > 1
        else np.zeros(n_rec)
    )
    return times, fid.mean(axis=0), sem
