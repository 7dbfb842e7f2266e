"""Command line driver: resolve a config, run the scenario, write artifacts.

Every subcommand writes one or more CSV files (a header row naming the
columns, preceded by ``#`` metadata lines carrying the resolved parameters
and any closed-form overlay) plus a JSON sidecar recording the resolved
config, the seed, and the output list.  Identical config and seed give
bitwise-identical files: floats print with round-trip %.17g, randomness is
counter-based, and nothing timestamps the output.

Exit codes: 0 success, 2 configuration error, 3 numerical tolerance failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .averaging import build_feedback_table, run_average_protocol, run_threshold_mc
from .config import TWO_PI, ConfigError
from .experiment import (
    DecoherenceParams,
    ExperimentConfig,
    extract_p_schedule,
    locally_optimal_trajectory,
    post_select,
    run_ensemble,
)
from .feedback import (
    AsloFeedback,
    NoFeedback,
    ProportionalFeedback,
    ThresholdFeedback,
    analytic_eta1,
    p_opt_from_avg_state,
    steady_state_fidelity_fixed_p,
    steady_state_fidelity_threshold,
    v_threshold_opt,
    wm_drift,
)
from .hybrid import Schedule, evaluate_schedule, optimize_schedule
from .measurement import (
    MeasurementConfig,
    completeness_residual,
    composition_residual,
)
from .states import T0, TMINUS, TPLUS, X_DIAG, fidelity_t0, mixed_triplet, psi0, symmetrize


class ToleranceError(RuntimeError):
    """A run's numerical check failed its configured tolerance."""


# ---------------------------------------------------------------------------
# deterministic formatting and file writers
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % value
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def write_csv(path: Path, names, rows, metadata: dict) -> Path:
    lines = [f"# {key} = {_fmt(value)}" for key, value in metadata.items()]
    lines.append(",".join(names))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def _jsonable(value):
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON-serializable: {value!r}")


def write_sidecar(path: Path, resolved: dict, derived: dict, files) -> Path:
    doc = {
        "scenario": resolved["scenario"],
        "seed": resolved["seed"],
        "config": {k: v for k, v in resolved.items() if k != "scenario"},
        "derived": derived,
        "outputs": [f.name for f in files],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _meta(resolved: dict) -> dict:
    return dict(resolved)


def _whole(value: float, unit: float, message: str) -> int:
    n = int(round(value / unit))
    if n < 1 or abs(n * unit - value) > 1e-9:
        raise ConfigError(message)
    return n


def _check_eta_entries(key: str, etas) -> None:
    for eta in etas:
        if not 0.0 < eta <= 1.0:
            raise ConfigError(f"key '{key}' entries must lie in (0, 1], got {eta}")


def _record_stride(n_steps: int, max_records: int) -> int:
    """Smallest divisor of n_steps keeping at most max_records intervals."""
    for stride in range(max(1, -(-n_steps // max_records)), n_steps + 1):
        if n_steps % stride == 0:
            return stride
    return n_steps


# ---------------------------------------------------------------------------
# scenario runners; each returns the list of files it wrote
# ---------------------------------------------------------------------------

def _run_histogram(resolved: dict, out_dir: Path) -> list:
    k = TWO_PI * resolved["k_2pi_mhz"]
    span = resolved["v_span"]
    edges = np.linspace(-span, span, resolved["n_bins"] + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    meta = _meta(resolved)
    columns = [("v", centers)]
    stream = 0
    for label, eta in (("thin", resolved["eta_thin"]), ("thick", resolved["eta_thick"])):
        cfg = MeasurementConfig(k=k, eta=eta, dt=resolved["dt_us"])
        meta[f"sigma_{label}"] = cfg.sigma_true
        for state, mean in (
            ("tminus", X_DIAG[TMINUS]),
            ("t0", X_DIAG[T0]),
            ("tplus", X_DIAG[TPLUS]),
        ):
            rng = np.random.Generator(np.random.Philox(key=[resolved["seed"], stream]))
            stream += 1
            v = mean + cfg.sigma_true * rng.standard_normal(resolved["n_traj"])
            hist, _ = np.histogram(v, bins=edges, density=True)
            norm = cfg.sigma_true * math.sqrt(2.0 * math.pi)
            pdf = np.exp(-0.5 * ((centers - mean) / cfg.sigma_true) ** 2) / norm
            columns.append((f"hist_{label}_{state}", hist))
            columns.append((f"pdf_{label}_{state}", pdf))
    names = [name for name, _ in columns]
    rows = zip(*[col for _, col in columns])
    return [write_csv(out_dir / "histogram.csv", names, rows, meta)]


def _run_semiclassical(resolved: dict, out_dir: Path) -> list:
    k = TWO_PI * resolved["k_2pi_mhz"]
    cfg = MeasurementConfig(k=k, eta=resolved["eta"], dt=resolved["dt_us"])
    n = resolved["n_rounds"]
    initial = mixed_triplet()
    small = run_average_protocol(initial, ThresholdFeedback(resolved["vt_small"]), cfg, n)
    large = run_average_protocol(initial, ThresholdFeedback(resolved["vt_large"]), cfg, n)
    opt = run_average_protocol(initial, ThresholdFeedback(None), cfg, n)
    vt_final = float(v_threshold_opt(float(opt.fidelity[-1]), cfg))
    vt_curve = np.append(opt.thresholds, vt_final)
    meta = _meta(resolved)
    meta["f_ss_small"] = steady_state_fidelity_threshold(resolved["vt_small"], cfg)
    meta["f_ss_large"] = steady_state_fidelity_threshold(resolved["vt_large"], cfg)
    names = ["round", "t_us", "f_small", "f_large", "f_opt", "vt_opt"]
    rows = [
        (r, small.times[r], small.fidelity[r], large.fidelity[r], opt.fidelity[r], vt_curve[r])
        for r in range(n + 1)
    ]
    return [write_csv(out_dir / "semiclassical.csv", names, rows, meta)]


def _run_quantum_discrete(resolved: dict, out_dir: Path) -> list:
    k = TWO_PI * resolved["k_2pi_mhz"]
    kt = resolved["kt_final"]
    arms = []
    for size in ("small", "large"):
        k_dt = resolved[f"k_dt_{size}"]
        rounds = _whole(
            kt, k_dt,
            f"kt_final must be a whole number of k_dt_{size} rounds",
        )
        arms.append((size, MeasurementConfig(k=k, eta=resolved["eta"], dt=k_dt / k), rounds))
    picks = resolved["theta_rounds"]
    for r in picks:
        if r >= arms[0][2]:
            raise ConfigError(
                f"key 'theta_rounds' asks for round {r} but the small-step arm "
                f"has only {arms[0][2]} rounds"
            )

    rows = []
    for size, cfg, rounds in arms:
        for label, protocol in (("aslo", AsloFeedback()), ("threshold", ThresholdFeedback(None))):
            run = run_average_protocol(psi0(), protocol, cfg, rounds)
            rows.extend(
                (f"{label}_{size}", r, run.times[r], k * run.times[r], run.fidelity[r])
                for r in range(rounds + 1)
            )
    meta = _meta(resolved)
    curves = write_csv(
        out_dir / "quantum_discrete_curves.csv",
        ["series", "round", "t_us", "kt", "fidelity"],
        rows,
        meta,
    )

    _, cfg_small, rounds_small = arms[0]
    table = build_feedback_table(psi0(), cfg_small, rounds_small)
    names = ["v"] + [f"theta_round{r}" for r in picks]
    theta_rows = zip(table.voltages, *[table.thetas[r] for r in picks])
    theta = write_csv(out_dir / "quantum_discrete_theta.csv", names, theta_rows, meta)
    return [curves, theta]


def _run_continuous(resolved: dict, out_dir: Path) -> list:
    k = TWO_PI * resolved["k_2pi_mhz"]
    n = _whole(resolved["kt_final"], resolved["k_dt"], "kt_final must be a whole number of k_dt steps")
    cfg = MeasurementConfig(k=k, eta=resolved["eta"], dt=resolved["k_dt"] / k)
    run = run_average_protocol(psi0(), ProportionalFeedback(None), cfg, n)
    p_final = p_opt_from_avg_state(run.states[-1], k, resolved["eta"])
    p_curve = np.append(run.gains, p_final)
    reference, _ = analytic_eta1(run.times, 0.5, k)

    meta = _meta(resolved)
    meta["overlay_fidelity"] = f"1 - 0.5*exp(-{_fmt(2.0 * k)}*t_us)"
    checked = resolved["eta"] == 1.0
    err = float(np.max(np.abs(run.fidelity - reference))) if checked else None
    if checked:
        meta["max_abs_err_eta1"] = err
    names = ["t_us", "kt", "fidelity", "p_opt", "fidelity_eta1_analytic"]
    rows = zip(run.times, k * run.times, run.fidelity, p_curve, reference)
    files = [write_csv(out_dir / "continuous.csv", names, rows, meta)]
    if checked and err > resolved["tolerance"]:
        raise ToleranceError(
            f"fidelity deviates from the eta=1 closed form by {err:.3e} "
            f"(tolerance {resolved['tolerance']:g})"
        )
    return files


def _run_hybrid_optimize(resolved: dict, out_dir: Path) -> list:
    k = TWO_PI * resolved["k_2pi_mhz"]
    n = resolved["n_steps"]
    t_final = resolved["t_final_us"]
    cfg = MeasurementConfig(k=k, eta=resolved["eta"], dt=t_final / n)
    result = optimize_schedule(
        n, t_final, cfg,
        seed=resolved["seed"],
        restarts=resolved["restarts"],
        max_iter=resolved["max_iter"],
    )
    f_small, curve_small = evaluate_schedule(Schedule.uniform(n, t_final), cfg)
    n_large = resolved["compare_large_n"]
    f_large, curve_large = evaluate_schedule(Schedule.uniform(n_large, t_final), cfg)

    meta = _meta(resolved)
    meta["final_fidelity"] = result.final_fidelity
    meta["f_uniform_small"] = f_small
    meta["f_uniform_large"] = f_large
    meta["winning_restart"] = result.restart
    meta["converged"] = result.converged
    meta["no_descent"] = result.no_descent

    d = result.schedule.durations
    ends = np.cumsum(d)
    schedule = write_csv(
        out_dir / "hybrid_schedule.csv",
        ["step", "dt_us", "t_end_us", "fidelity"],
        ((i, d[i], ends[i], result.curve[i + 1]) for i in range(n)),
        meta,
    )

    rows = [("optimized", 0.0, result.curve[0], 0.0)]
    rows += [("optimized", ends[i], result.curve[i + 1], 0.0) for i in range(n)]
    for label, m, curve in (("uniform_small", n, curve_small), ("uniform_large", n_large, curve_large)):
        rows += [(label, i * t_final / m, curve[i], 0.0) for i in range(m + 1)]
    if resolved["benchmark_traj"] > 0:
        dt_b = resolved["benchmark_dt_us"]
        n_b = _whole(t_final, dt_b, "t_final_us must be a whole number of benchmark_dt_us steps")
        stride = _record_stride(n_b, 200)
        times_b, mean_b, sem_b = locally_optimal_trajectory(
            cfg.with_dt(dt_b), t_final,
            n_traj=resolved["benchmark_traj"],
            seed=resolved["seed"],
            record_stride=stride,
        )
        rows += list(zip(["benchmark"] * times_b.size, times_b, mean_b, sem_b))
    curves = write_csv(
        out_dir / "hybrid_curves.csv",
        ["series", "t_us", "fidelity", "sem"],
        rows,
        meta,
    )

    trace = write_csv(
        out_dir / "hybrid_trace.csv",
        ["iteration", "cost"],
        enumerate(result.cost_trace),
        meta,
    )
    return [schedule, curves, trace]


def _ensemble_rows(times, mean_f, sem_f, conc, n_kept):
    return zip(times, mean_f, sem_f, conc, [n_kept] * times.size)


def _run_experiment(resolved: dict, out_dir: Path) -> list:
    k = TWO_PI * resolved["k_2pi_mhz"]
    derived = cfgmod.derived_values(resolved)
    dt = resolved["dt_us"]
    stride = resolved["record_stride"]
    tau = derived["tau_us"]
    n = _whole(resolved["t_final_us"], dt, "t_final_us must be a whole number of dt_us steps")
    if n % stride:
        raise ConfigError("record_stride must divide the step count t_final_us / dt_us")
    _whole(resolved["window_us"], dt * stride, "window_us must land on the record grid (dt_us * record_stride)")
    if dt > tau / 10.0:
        raise ConfigError(f"dt_us must be at most tau/10 to resolve the filter; tau = {tau:.6g} us")
    if resolved["delay_us"] > 0.0 and dt > resolved["delay_us"]:
        raise ConfigError("dt_us must not exceed delay_us")

    cfg = MeasurementConfig(k=k, eta=resolved["eta"], dt=dt)
    dec = DecoherenceParams(t1=derived["t1_us"], tphi=derived["tphi_us"])
    p_schedule = extract_p_schedule(cfg, resolved["t_final_us"], dec)
    exp_cfg = ExperimentConfig(
        cfg=cfg,
        t_final=resolved["t_final_us"],
        decoherence=dec,
        delay=resolved["delay_us"],
        tau=tau,
        p_schedule=p_schedule,
        seed=resolved["seed"],
        record_stride=stride,
        signal_window=resolved["window_us"],
    )
    n_traj = resolved["n_traj"]
    fb = run_ensemble(exp_cfg, ProportionalFeedback(None), n_traj)
    nofb = run_ensemble(exp_cfg, NoFeedback(), n_traj)
    ps_fb = post_select(fb.records, resolved["window_us"])
    ps_nofb = post_select(nofb.records, resolved["window_us"])

    meta = _meta(resolved)
    meta["tau_us"] = tau
    meta["peak_mean_fidelity"] = float(fb.mean_fidelity.max())
    meta["peak_concurrence"] = float(fb.concurrence.max())
    meta["peak_fidelity_ps"] = float(ps_fb.mean_fidelity.max())
    meta["peak_fidelity_nofb_ps"] = float(ps_nofb.mean_fidelity.max())

    names = ["t_us", "mean_fidelity", "sem_fidelity", "concurrence", "n_kept"]
    return [
        write_csv(
            out_dir / "experiment_feedback.csv", names,
            _ensemble_rows(fb.times, fb.mean_fidelity, fb.sem_fidelity, fb.concurrence, n_traj),
            meta,
        ),
        write_csv(
            out_dir / "experiment_feedback_ps.csv", names,
            _ensemble_rows(ps_fb.times, ps_fb.mean_fidelity, ps_fb.sem_fidelity, ps_fb.concurrence, ps_fb.n_kept),
            meta,
        ),
        write_csv(
            out_dir / "experiment_nofeedback_ps.csv", names,
            _ensemble_rows(ps_nofb.times, ps_nofb.mean_fidelity, ps_nofb.sem_fidelity, ps_nofb.concurrence, ps_nofb.n_kept),
            meta,
        ),
    ]


def _run_povm_check(resolved: dict, out_dir: Path) -> list:
    k = TWO_PI * resolved["k_2pi_mhz"]
    _check_eta_entries("etas", resolved["etas"])
    for k_dt in resolved["k_dts"]:
        if k_dt <= 0.0:
            raise ConfigError(f"key 'k_dts' entries must be positive, got {k_dt}")
    rows = []
    worst_complete = 0.0
    worst_compose = 0.0
    for eta in resolved["etas"]:
        for k_dt in resolved["k_dts"]:
            cfg = MeasurementConfig(k=k, eta=eta, dt=k_dt / k)
            complete = completeness_residual(cfg)
            compose = composition_residual(cfg)
            worst_complete = max(worst_complete, complete)
            worst_compose = max(worst_compose, compose)
            rows.append((eta, k_dt, complete, compose))
    meta = _meta(resolved)
    meta["max_completeness_residual"] = worst_complete
    meta["max_composition_residual"] = worst_compose
    files = [
        write_csv(
            out_dir / "povm_check.csv",
            ["eta", "k_dt", "completeness_residual", "composition_residual"],
            rows,
            meta,
        )
    ]
    print(f"max completeness residual = {worst_complete:.3e} (tolerance {resolved['completeness_tol']:g})")
    print(f"max composition residual  = {worst_compose:.3e} (tolerance {resolved['composition_tol']:g})")
    if worst_complete > resolved["completeness_tol"]:
        raise ToleranceError(
            f"completeness residual {worst_complete:.3e} exceeds {resolved['completeness_tol']:g}"
        )
    if worst_compose > resolved["composition_tol"]:
        raise ToleranceError(
            f"composition residual {worst_compose:.3e} exceeds {resolved['composition_tol']:g}"
        )
    return files


def _run_steady_state(resolved: dict, out_dir: Path) -> list:
    k = TWO_PI * resolved["k_2pi_mhz"]
    _check_eta_entries("etas", resolved["etas"])
    steps = _whole(resolved["kt_final"], resolved["k_dt"], "kt_final must be a whole number of k_dt steps")
    meta = _meta(resolved)

    rows = []
    worst_rel = 0.0
    for eta in resolved["etas"]:
        cfg = MeasurementConfig(k=k, eta=eta, dt=resolved["k_dt"] / k)
        for ratio in resolved["p_over_k"]:
            if ratio <= 0.0:
                raise ConfigError(f"key 'p_over_k' entries must be positive, got {ratio}")
            p = ratio * k
            rho = psi0()
            for _ in range(steps):
                rho = symmetrize(rho + cfg.dt * wm_drift(rho, p, cfg))
            fid = float(fidelity_t0(rho))
            formula = steady_state_fidelity_fixed_p(p, k, eta)
            rel = abs(fid - formula) / formula
            worst_rel = max(worst_rel, rel)
            rows.append((eta, ratio, fid, formula, rel))
    meta["max_rel_err_fixed_p"] = worst_rel
    fixed = write_csv(
        out_dir / "steady_state_fixed_p.csv",
        ["eta", "p_over_k", "fidelity_sim", "fidelity_formula", "rel_err"],
        rows,
        meta,
    )

    if resolved["thr_burn_in"] >= resolved["thr_rounds"]:
        raise ConfigError("thr_burn_in must be smaller than thr_rounds")
    cfg_thr = MeasurementConfig(k=k, eta=resolved["thr_eta"], dt=resolved["thr_dt_us"])
    kept = resolved["thr_chains"] * (resolved["thr_rounds"] - resolved["thr_burn_in"])
    thr_rows = []
    failures = []
    for v_t in resolved["thr_vts"]:
        if v_t < 0.0:
            raise ConfigError(f"key 'thr_vts' entries must be nonnegative, got {v_t}")
        mean, se, _ = run_threshold_mc(
            v_t, cfg_thr,
            resolved["thr_chains"], resolved["thr_rounds"], resolved["thr_burn_in"],
            resolved["seed"],
        )
        formula = steady_state_fidelity_threshold(v_t, cfg_thr)
        if se > 0.0:
            n_sigma = abs(mean - formula) / se
            ok = n_sigma <= 3.0
        else:
            # Zero scatter means no chain ever left the absorbing basin; that
            # is only consistent if the expected number of escape events over
            # every kept round is small enough that observing none is likely.
            n_sigma = math.nan
            expected = kept * math.erfc(v_t / (math.sqrt(2.0) * cfg_thr.sigma_true))
            ok = expected <= 9.0 and mean == 1.0
        if not ok:
            failures.append(f"V_T={v_t:g} (mc {mean:.7f} vs formula {formula:.7f})")
        thr_rows.append((v_t, mean, se, formula, n_sigma, int(ok)))
    meta_thr = dict(meta)
    meta_thr["kept_rounds"] = kept
    thr = write_csv(
        out_dir / "steady_state_threshold.csv",
        ["v_t", "mc_mean", "mc_se", "formula", "n_sigma", "consistent"],
        thr_rows,
        meta_thr,
    )

    files = [fixed, thr]
    if worst_rel > resolved["rel_tol"]:
        raise ToleranceError(
            f"fixed-P steady state off by {worst_rel:.3e} relative (tolerance {resolved['rel_tol']:g})"
        )
    if failures:
        raise ToleranceError("threshold Monte Carlo inconsistent with the closed form at " + ", ".join(failures))
    return files


_RUNNERS = {
    "histogram": _run_histogram,
    "semiclassical": _run_semiclassical,
    "quantum-discrete": _run_quantum_discrete,
    "continuous": _run_continuous,
    "hybrid-optimize": _run_hybrid_optimize,
    "experiment": _run_experiment,
    "povm-check": _run_povm_check,
    "steady-state": _run_steady_state,
}


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="halfparity",
        description="Half-parity measurement feedback scenarios; each run writes CSV plus a JSON sidecar.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _RUNNERS:
        schema = cfgmod.schema_for(name)
        sp = sub.add_parser(name, help=f"run the {name} scenario")
        sp.add_argument("--config", metavar="PATH", help="flat JSON config file")
        sp.add_argument("--seed", type=int, metavar="N", help="override the RNG seed")
        sp.add_argument("--out", default=".", metavar="DIR", help="output directory")
        sp.add_argument(
            "--set", action="append", metavar="KEY=VALUE", default=[],
            help="override one config key (repeatable)",
        )
        if "eta" in schema:
            sp.add_argument("--eta", type=float, metavar="ETA", help="override the measurement efficiency")
        if "n_traj" in schema:
            sp.add_argument("--traj", type=int, metavar="N", help="override the trajectory count")
    vp = sub.add_parser("validate-config", help="resolve a config and list its values without running")
    vp.add_argument("--config", metavar="PATH", required=True)
    vp.add_argument("--set", action="append", metavar="KEY=VALUE", default=[])
    return parser


def _overrides_from(args) -> dict:
    overrides = {}
    for item in args.set:
        key, value = cfgmod.parse_override(item)
        overrides[key] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "eta", None) is not None:
        overrides["eta"] = args.eta
    if getattr(args, "traj", None) is not None:
        overrides["n_traj"] = args.traj
    return overrides


def _cmd_validate(args) -> int:
    raw = cfgmod.parse_file(args.config)
    scenario = raw.get("scenario")
    if scenario is None:
        raise ConfigError(f"{args.config}: missing 'scenario' key")
    resolved = cfgmod.resolve(scenario, raw, _overrides_from(args))
    for key, value in resolved.items():
        print(f"{key} = {_fmt(value)}")
    print("# derived")
    for key, value in cfgmod.derived_values(resolved).items():
        print(f"{key} = {_fmt(value)}")
    return 0


def _cmd_run(args) -> int:
    scenario = args.command
    raw = cfgmod.parse_file(args.config) if args.config else cfgmod.default_config(scenario)
    resolved = cfgmod.resolve(scenario, raw, _overrides_from(args))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = _RUNNERS[scenario](resolved, out_dir)
    sidecar = out_dir / (scenario.replace("-", "_") + ".json")
    write_sidecar(sidecar, resolved, cfgmod.derived_values(resolved), files)
    for path in [*files, sidecar]:
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate-config":
            return _cmd_validate(args)
        return _cmd_run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ToleranceError as exc:
        print(f"tolerance failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
