import numpy as np
import pytest


def csv_text(meta: dict, names: list, rows: list) -> str:
    lines = [f"# {key} = {value}" for key, value in meta.items()]
    lines.append(",".join(names))
    lines.extend(",".join(str(cell) for cell in row) for row in rows)
    return "\n".join(lines) + "\n"


def write_csv(path, meta, names, rows):
    path.write_text(csv_text(meta, names, rows))
    return path


def _histogram_inputs(tmp_path):
    v = np.linspace(-2.0, 2.0, 9)
    names = ["v"]
    columns = [v]
    meta = {"eta_thin": 1.0, "eta_thick": 0.2,
            "sigma_thin": 0.3, "sigma_thick": 0.6}
    for label, sigma in (("thin", 0.3), ("thick", 0.6)):
        for state, mean in (("tminus", 1.0), ("t0", 0.0), ("tplus", -1.0)):
            pdf = np.exp(-0.5 * ((v - mean) / sigma) ** 2)
            pdf = pdf / (sigma * np.sqrt(2.0 * np.pi))
            names += [f"hist_{label}_{state}", f"pdf_{label}_{state}"]
            columns += [np.round(pdf, 6), pdf]
    rows = list(zip(*columns))
    return [write_csv(tmp_path / "histogram.csv", meta, names, rows)]


def _semiclassical_inputs(tmp_path):
    rounds = np.arange(6)
    meta = {"vt_small": 0.2, "vt_large": 0.6,
            "f_ss_small": 0.83, "f_ss_large": 0.97}
    names = ["round", "t_us", "f_small", "f_large", "f_opt", "vt_opt"]
    rows = [
        (r, 20.0 * r, 0.4 + 0.07 * r, 0.4 + 0.09 * r, 0.4 + 0.1 * r,
         0.1 + 0.05 * r)
        for r in rounds
    ]
    return [write_csv(tmp_path / "semiclassical.csv", meta, names, rows)]


def _discrete_inputs(tmp_path):
    curve_rows = []
    for i, series in enumerate(("aslo_small", "threshold_small",
                                "aslo_large", "threshold_large")):
        for r in range(4):
            kt = 0.5 * r
            curve_rows.append((series, r, kt / 6.28, kt, 0.5 + 0.1 * r - 0.01 * i))
    curves = write_csv(tmp_path / "quantum_discrete_curves.csv", {},
                       ["series", "round", "t_us", "kt", "fidelity"],
                       curve_rows)
    v = np.linspace(-2.0, 2.0, 11)
    theta_rows = list(zip(v, np.arctan(v), 0.5 * np.arctan(2.0 * v)))
    theta = write_csv(tmp_path / "quantum_discrete_theta.csv", {},
                      ["v", "theta_round0", "theta_round2"], theta_rows)
    return [curves, theta]


def _schedule_inputs(tmp_path):
    n = 20
    durations = [0.01] * (n - 2) + [0.2, 0.6]
    ends = np.cumsum(durations)
    schedule = write_csv(
        tmp_path / "hybrid_schedule.csv", {"final_fidelity": 0.95},
        ["step", "dt_us", "t_end_us", "fidelity"],
        [(i, durations[i], ends[i], 0.5 + 0.02 * i) for i in range(n)])
    curve_rows = []
    for series, sem in (("optimized", 0.0), ("uniform_small", 0.0),
                        ("uniform_large", 0.0), ("benchmark", 0.01)):
        curve_rows += [(series, 0.1 * j, 0.5 + 0.04 * j, sem)
                       for j in range(10)]
    curves = write_csv(tmp_path / "hybrid_curves.csv", {},
                       ["series", "t_us", "fidelity", "sem"], curve_rows)
    trace = write_csv(tmp_path / "hybrid_trace.csv", {},
                      ["iteration", "cost"],
                      [(i, 0.4 / (1.0 + i)) for i in range(8)])
    return [schedule, curves, trace]


def _experiment_inputs(tmp_path):
    names = ["t_us", "mean_fidelity", "sem_fidelity", "concurrence", "n_kept"]
    files = []
    for stem, kept, lift in (("experiment_feedback", 40, 0.0),
                             ("experiment_feedback_ps", 20, 0.08),
                             ("experiment_nofeedback_ps", 20, 0.04)):
        rows = [(0.25 * j, 0.5 + 0.05 * j + lift, 0.01, 0.02 * j, kept)
                for j in range(5)]
        files.append(write_csv(tmp_path / f"{stem}.csv", {"seed": 7},
                               names, rows))
    return files


_BUILDERS = {
    1: _histogram_inputs,
    2: _semiclassical_inputs,
    3: _discrete_inputs,
    4: _schedule_inputs,
    5: _experiment_inputs,
}


@pytest.fixture
def make_inputs(tmp_path):
    """Builds minimal contract-shaped CSV inputs for a figure id."""

    def build(fig_id):
        return [str(p) for p in _BUILDERS[fig_id](tmp_path)]

    return build
