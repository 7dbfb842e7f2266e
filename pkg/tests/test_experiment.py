import numpy as np
import pytest

import halfparity.states as hs
from halfparity.measurement import MeasurementConfig
from halfparity.feedback import NoFeedback, ProportionalFeedback, analytic_eta1
from halfparity.experiment import (
    DecoherenceParams,
    ExperimentConfig,
    FeedbackChain,
    decoherence_superoperator,
    extract_p_schedule,
    lindblad_rhs,
    lindblad_step,
    locally_optimal_trajectory,
    post_select,
    run_ensemble,
    trajectory_step_nonmarkovian,
)

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------- oracles

_SZ = np.diag([1.0, -1.0])
_SM = np.array([[0.0, 0.0], [1.0, 0.0]])
_I2 = np.eye(2)

_OPS_COMP = (
    np.kron(_SZ, _I2),
    np.kron(_I2, _SZ),
    np.kron(_SM, _I2),
    np.kron(_I2, _SM),
)


def lindblad_oracle(rho, params):
    """Dissipators built independently in the computational basis."""
    rc = hs.to_computational(rho)
    out = np.zeros((4, 4))
    for rate, op in zip(params.rates(), _OPS_COMP):
        mm = op.T @ op
        out += rate * (op @ rc @ op.T - 0.5 * (mm @ rc + rc @ mm))
    return hs.from_computational(out)


def random_state(rng, rank=4):
    a = rng.standard_normal((4, rank))
    rho = a @ a.T
    return rho / np.trace(rho)


# ------------------------------------------------------- decoherence maps


def test_lindblad_matches_computational_oracle():
    params = DecoherenceParams(t1=(3.0, 5.0), tphi=(1.1, 0.7))
    rng = np.random.default_rng(2)
    for _ in range(25):
        rho = random_state(rng)
        np.testing.assert_allclose(
            lindblad_rhs(rho, params), lindblad_oracle(rho, params), atol=1e-14
        )


def test_pure_dephasing_keeps_computational_populations():
    params = DecoherenceParams(tphi=(0.4, 0.9))
    rng = np.random.default_rng(3)
    rho = random_state(rng)
    stepped = lindblad_step(rho, params, 1e-3)
    before = np.diag(hs.to_computational(rho))
    after = np.diag(hs.to_computational(stepped))
    np.testing.assert_allclose(after, before, atol=1e-15)
    assert np.trace(stepped) == pytest.approx(1.0, abs=1e-14)


def test_dephasing_transfers_t0_to_singlet_at_half_rate():
    # sigma_z on one qubit swaps t0 and s, so |t0><t0| decays into the
    # singlet at 1/(2 T_phi,1)
    tphi = 0.8
    params = DecoherenceParams(tphi=(tphi, np.inf))
    rhs = lindblad_rhs(hs.t_zero(), params)
    rate = 0.5 / tphi
    assert rhs[hs.T0, hs.T0] == pytest.approx(-rate, abs=1e-14)
    assert rhs[hs.SINGLET, hs.SINGLET] == pytest.approx(rate, abs=1e-14)
    assert rhs[hs.TMINUS, hs.TMINUS] == pytest.approx(0.0, abs=1e-14)


def test_relaxation_drives_00_to_11():
    params = DecoherenceParams(t1=(0.5, 0.5))
    rho = hs.t_minus()  # |00>
    dt = 1e-3
    for _ in range(6000):
        rho = lindblad_step(rho, params, dt)
    assert rho[hs.TPLUS, hs.TPLUS] > 0.99
    assert np.trace(rho) == pytest.approx(1.0, abs=1e-10)


def test_superoperator_matches_rhs():
    params = DecoherenceParams(t1=(2.0, 7.0), tphi=(1.3, np.inf))
    sup = decoherence_superoperator(params)
    rng = np.random.default_rng(4)
    for _ in range(10):
        rho = random_state(rng)
        direct = lindblad_rhs(rho, params)
        via_sup = (sup @ rho.reshape(16)).reshape(4, 4)
        np.testing.assert_allclose(via_sup, direct, atol=1e-14)
    # exact channel preserves trace: columns of expm(L t) sum correctly
    from scipy.linalg import expm

    chan = expm(sup * 0.7)
    rho = random_state(rng)
    evolved = (chan @ rho.reshape(16)).reshape(4, 4)
    assert np.trace(evolved) == pytest.approx(1.0, abs=1e-12)
    assert np.min(np.linalg.eigvalsh(hs.symmetrize(evolved))) > -1e-12


def test_from_2pi_microseconds_convention():
    params = DecoherenceParams.from_2pi_microseconds(t1=20.0, tphi=6.9)
    assert params.t1[0] == pytest.approx(20.0 / TWO_PI)
    assert params.tphi[1] == pytest.approx(6.9 / TWO_PI)
    # rates() folds the 1/2 dephasing prefactor in
    assert params.rates()[0] == pytest.approx(0.5 * TWO_PI / 6.9)
    assert params.rates()[2] == pytest.approx(TWO_PI / 20.0)


def test_decoherence_params_validation():
    with pytest.raises(ValueError):
        DecoherenceParams(t1=(0.0, 1.0))
    with pytest.raises(ValueError):
        DecoherenceParams(tphi=-2.0)
    assert DecoherenceParams().trivial
    assert not DecoherenceParams(t1=(1.0, np.inf)).trivial


# ------------------------------------------------------- feedback chain


def test_filter_impulse_response():
    dt = 0.01
    delay = 0.1
    tau = 0.25
    chain = FeedbackChain.fresh(delay, tau, dt)
    n_delay = int(round(delay / dt))
    spike_rate = 1.0 / dt  # unit integrated voltage in one step
    ys = []
    for j in range(60):
        rate = spike_rate if j == 0 else 0.0
        delayed = chain.push(rate)
        ys.append(float(chain.advance_filter(delayed, dt)))
    ys = np.array(ys)
    # nothing comes out before the delay has elapsed
    assert np.all(ys[:n_delay] == 0.0)
    # first response sample: y jumps to spike * dt/tau, then decays
    assert ys[n_delay] == pytest.approx(spike_rate * dt / tau, rel=1e-12)
    decay = ys[n_delay + 1 :] / ys[n_delay:-1]
    np.testing.assert_allclose(decay, 1.0 - dt / tau, atol=1e-12)
    # discrete decay matches exp(-(t-t0)/tau) to O(dt)
    t_rel = dt * np.arange(ys.size - n_delay)
    analytic = ys[n_delay] * np.exp(-t_rel / tau)
    assert np.max(np.abs(ys[n_delay:] - analytic)) < 0.03 * ys[n_delay]


def test_chain_validation_and_zero_history():
    with pytest.raises(ValueError):
        FeedbackChain.fresh(-0.1, 1.0, 0.01)
    with pytest.raises(ValueError):
        FeedbackChain.fresh(0.1, 0.0, 0.01)
    chain = FeedbackChain.fresh(0.0, 1.0, 0.01)
    assert chain.buffer.shape[0] == 0
    assert chain.filtered == 0.0
    # zero delay passes the rate straight through
    assert chain.push(3.5) == 3.5


def test_trajectory_step_preconditions():
    cfg = MeasurementConfig(k=1.0, eta=0.5, dt=0.05)
    chain = FeedbackChain.fresh(0.2, 0.2, 0.05)
    with pytest.raises(ValueError, match="tau"):
        trajectory_step_nonmarkovian(hs.psi0(), chain, 1.0, cfg, None, 0.05, 0.0)
    chain = FeedbackChain.fresh(0.005, 1.0, 0.01)
    with pytest.raises(ValueError, match="delay"):
        trajectory_step_nonmarkovian(hs.psi0(), chain, 1.0, cfg, None, 0.01, 0.0)


def test_trajectory_step_markovian_limit_statistics():
    # shrinking the filter constant pulls the delayed loop toward the
    # ideal Markovian proportional ensemble
    k = 2.0 * np.pi
    dt = 1e-3 / k
    cfg = MeasurementConfig(k=k, eta=1.0, dt=dt)
    t_final = 300 * dt
    p = extract_p_schedule(cfg, t_final)

    base = ExperimentConfig(
        cfg=cfg, t_final=t_final, p_schedule=p, seed=5, record_stride=30
    )
    ideal = run_ensemble(base, ProportionalFeedback(None), 150)

    def delayed_run(tau_steps):
        ec = ExperimentConfig(
            cfg=cfg,
            t_final=t_final,
            p_schedule=p,
            seed=5,
            record_stride=30,
            delay=dt,
            tau=tau_steps * dt,
        )
        return run_ensemble(ec, ProportionalFeedback(None), 150)

    slow = delayed_run(40)
    fast = delayed_run(10)
    err_slow = np.max(np.abs(slow.mean_fidelity - ideal.mean_fidelity))
    err_fast = np.max(np.abs(fast.mean_fidelity - ideal.mean_fidelity))
    assert err_fast < err_slow
    assert err_fast < 0.06


# --------------------------------------------------------- ensembles


def test_ensemble_seed_reproducibility():
    cfg = MeasurementConfig(k=1.0, eta=0.4, dt=1e-3)
    ec = ExperimentConfig(cfg=cfg, t_final=0.1, seed=9, record_stride=20)
    a = run_ensemble(ec, NoFeedback(), 30)
    b = run_ensemble(ec, NoFeedback(), 30)
    assert np.array_equal(a.mean_fidelity, b.mean_fidelity)
    assert np.array_equal(a.records.states, b.records.states)
    c = run_ensemble(
        ExperimentConfig(cfg=cfg, t_final=0.1, seed=10, record_stride=20),
        NoFeedback(),
        30,
    )
    assert not np.array_equal(a.mean_fidelity, c.mean_fidelity)


def test_ensemble_sem_scales_with_trajectories():
    cfg = MeasurementConfig(k=1.0, eta=1.0, dt=1e-3)
    ec = ExperimentConfig(cfg=cfg, t_final=0.3, seed=21, record_stride=100)
    small = run_ensemble(ec, NoFeedback(), 60)
    large = run_ensemble(ec, NoFeedback(), 240)
    ratio = small.sem_fidelity[-1] / large.sem_fidelity[-1]
    assert ratio == pytest.approx(2.0, rel=0.2)


def test_ensemble_diagonal_means_constant_without_feedback():
    # QND: ensemble-averaged populations stay put
    cfg = MeasurementConfig(k=1.0, eta=0.7, dt=1e-3)
    ec = ExperimentConfig(cfg=cfg, t_final=0.2, seed=14, record_stride=50)
    res = run_ensemble(ec, NoFeedback(), 400)
    diag0 = np.diagonal(res.mean_states[0], axis1=-2, axis2=-1)
    diag = np.diagonal(res.mean_states, axis1=-2, axis2=-1)
    se = 1.0 / np.sqrt(res.n_traj)
    assert np.max(np.abs(diag - diag0)) < 4 * se * 0.5
    # mean states stay physical
    tr = np.trace(res.mean_states, axis1=-2, axis2=-1)
    np.testing.assert_allclose(tr, 1.0, atol=1e-9)
    assert np.min(np.linalg.eigvalsh(res.mean_states)) > -1e-6


def test_measurement_only_half_reach_t0():
    cfg = MeasurementConfig(k=1.0, eta=1.0, dt=1e-2)
    ec = ExperimentConfig(cfg=cfg, t_final=10.0, seed=33, record_stride=1000)
    res = run_ensemble(ec, NoFeedback(), 400)
    frac = float(np.mean(res.records.fidelity[:, -1] > 0.99))
    # binomial 3-sigma band around 1/2
    assert abs(frac - 0.5) < 3 * np.sqrt(0.25 / 400)


def test_scaling_invariance_of_full_nonmarkovian_run():
    k = 2.0 * np.pi
    dt = 2e-3 / k
    steps = 200
    delay = 10 * dt
    tau = 20 * dt
    dec = DecoherenceParams(t1=(3.0, 3.0), tphi=(1.1, 1.1))
    cfg1 = MeasurementConfig(k=k, eta=0.4, dt=dt)
    p1 = extract_p_schedule(cfg1, steps * dt, dec)
    ec1 = ExperimentConfig(
        cfg=cfg1,
        t_final=steps * dt,
        decoherence=dec,
        delay=delay,
        tau=tau,
        p_schedule=p1,
        seed=77,
        record_stride=20,
    )
    run1 = run_ensemble(ec1, ProportionalFeedback(None), 25)

    s = 2.0
    cfg2 = MeasurementConfig(k=k / s, eta=0.4, dt=dt * s)
    dec2 = DecoherenceParams(
        t1=(3.0 * s, 3.0 * s), tphi=(1.1 * s, 1.1 * s)
    )
    p2 = extract_p_schedule(cfg2, steps * dt * s, dec2)
    np.testing.assert_allclose(p2, p1 / s, rtol=1e-10)
    ec2 = ExperimentConfig(
        cfg=cfg2,
        t_final=steps * dt * s,
        decoherence=dec2,
        delay=delay * s,
        tau=tau * s,
        p_schedule=p2,
        seed=77,
        record_stride=20,
    )
    run2 = run_ensemble(ec2, ProportionalFeedback(None), 25)
    # same raw normals, so the state sequences must coincide step by step;
    # full-precision series agree far below 1e-8, the float32 snapshots only
    # to one ulp
    assert np.max(np.abs(run2.mean_states - run1.mean_states)) < 1e-8
    assert np.max(np.abs(run2.records.fidelity - run1.records.fidelity)) < 1e-8
    assert np.max(np.abs(run2.records.states - run1.records.states)) < 5e-7
    np.testing.assert_allclose(run2.records.increments, s * run1.records.increments, atol=1e-10)
    np.testing.assert_allclose(run2.times, s * run1.times, rtol=1e-12)


# ---------------------------------------------------- gain schedule


def test_extract_p_schedule_matches_analytic_eta1():
    k = 2.0 * np.pi
    cfg = MeasurementConfig(k=k, eta=1.0, dt=1e-3 / k)
    p = extract_p_schedule(cfg, 2.0 / k)
    t = cfg.dt * np.arange(p.size)
    _, gain = analytic_eta1(t, 0.5, k)
    assert np.max(np.abs(p - gain) / gain) < 1e-3


def test_extract_p_schedule_smooth_with_decoherence():
    k = 1.3 * TWO_PI
    cfg = MeasurementConfig(k=k, eta=0.4, dt=2e-3)
    dec = DecoherenceParams.from_2pi_microseconds(t1=20.0, tphi=(6.9, 30.0))
    p = extract_p_schedule(cfg, 1.0, dec)
    assert np.all(np.isfinite(p)) and np.all(p > 0)
    # smooth: consecutive relative changes stay small
    rel = np.abs(np.diff(p)) / p[:-1]
    assert np.max(rel) < 0.05


def test_extract_p_schedule_rejects_misaligned_horizon():
    cfg = MeasurementConfig(k=1.0, eta=1.0, dt=1e-3)
    with pytest.raises(ValueError, match="whole number"):
        extract_p_schedule(cfg, 0.0105)


# ---------------------------------------------------- post-selection


def _small_feedback_run(n_traj=24):
    k = 2.0 * np.pi
    cfg = MeasurementConfig(k=k, eta=0.4, dt=1e-3 / k)
    t_final = 200 * cfg.dt
    p = extract_p_schedule(cfg, t_final)
    ec = ExperimentConfig(
        cfg=cfg,
        t_final=t_final,
        p_schedule=p,
        seed=3,
        record_stride=20,
        signal_window=t_final,
    )
    return run_ensemble(ec, ProportionalFeedback(None), n_traj)


def test_post_select_keeps_floor_half():
    res = _small_feedback_run(25)
    ps = post_select(res.records)
    assert ps.n_kept == 12
    assert ps.kept.size == 12
    # kept set is exactly the smallest |signal| half
    order = np.argsort(res.records.signal)
    assert set(ps.kept.tolist()) == set(order[:12].tolist())


def test_post_select_window_recompute_matches_full_signal():
    res = _small_feedback_run(24)
    full = res.records.integrated_signal(float(res.times[-1]))
    np.testing.assert_allclose(full, res.records.signal, atol=1e-12)
    with pytest.raises(ValueError, match="record grid"):
        res.records.integrated_signal(float(res.times[-1]) * 0.517)


def test_post_select_needs_two_records():
    res = _small_feedback_run(24)
    import dataclasses

    lone = dataclasses.replace(
        res.records,
        fidelity=res.records.fidelity[:1],
        states=res.records.states[:1],
        increments=res.records.increments[:1],
        signal=res.records.signal[:1],
    )
    with pytest.raises(ValueError, match="at least 2"):
        post_select(lone)


# ------------------------------------------- state-estimation benchmark


def test_locally_optimal_trajectory_concentrates_at_eta1():
    # at perfect efficiency the optimally rotated conditional state follows
    # one deterministic curve in the continuous limit: the ensemble mean
    # tracks the closed form and the per-trajectory spread shrinks with dt
    k = 2.0 * np.pi

    def spread(dt_factor):
        cfg = MeasurementConfig(k=k, eta=1.0, dt=dt_factor / k)
        n_steps = int(round(0.4 / dt_factor))
        times, mean_f, sem = locally_optimal_trajectory(
            cfg, n_steps * cfg.dt, n_traj=120, seed=8, record_stride=n_steps
        )
        fid, _ = analytic_eta1(times, 0.5, k)
        assert np.max(np.abs(mean_f - fid)) < 3e-3
        return sem[-1] * np.sqrt(120)

    coarse = spread(1e-3)
    fine = spread(2.5e-4)
    assert coarse < 0.02
    assert fine < coarse / 1.3


def test_locally_optimal_dominates_proportional_schedule():
    # estimator feedback uses strictly more information than the
    # precomputed proportional rule, so at eta < 1 its mean curve must not
    # fall below the open-loop-scheduled ensemble
    k = 2.0 * np.pi
    cfg = MeasurementConfig(k=k, eta=0.4, dt=2e-3 / k)
    t_final = 300 * cfg.dt
    p = extract_p_schedule(cfg, t_final)
    ec = ExperimentConfig(
        cfg=cfg, t_final=t_final, p_schedule=p, seed=15, record_stride=50
    )
    prop = run_ensemble(ec, ProportionalFeedback(None), 150)
    times, mean_f, sem = locally_optimal_trajectory(
        cfg, t_final, n_traj=150, seed=15, record_stride=50
    )
    np.testing.assert_allclose(times, prop.times, atol=1e-12)
    band = 3.0 * np.hypot(sem, prop.sem_fidelity)
    assert np.all(mean_f >= prop.mean_fidelity - band)
    assert mean_f[-1] > prop.mean_fidelity[-1] - band[-1]
