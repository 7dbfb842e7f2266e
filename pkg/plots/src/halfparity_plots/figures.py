"""The five figure renderers.

Each renderer consumes already-parsed tables in the documented order and
draws a matplotlib figure; `render` ties parsing, drawing, and the atomic
file write together.  Style is pinned through an explicit rc context and
the PNG metadata is fixed, so identical inputs give identical bytes.
"""

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .overlays import draw_overlays
from .tables import Table, TableError, read_table

_RC = {
    "figure.dpi": 120,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "legend.framealpha": 0.9,
    "legend.fontsize": 8,
}

_BRANCHES = (("tminus", "C0"), ("t0", "C1"), ("tplus", "C2"))


@dataclass(frozen=True)
class FigureSpec:
    """One render request: which figure, from which files, to where."""

    fig_id: int
    csv_paths: tuple
    out_path: Path


def _histogram(tables) -> plt.Figure:
    (t,) = tables
    v = t.floats("v")
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    for label, width, alpha in (("thin", 1.0, 1.0), ("thick", 2.6, 0.6)):
        for state, color in _BRANCHES:
            ax.plot(v, t.floats(f"hist_{label}_{state}"), color=color,
                    linewidth=width, alpha=alpha, drawstyle="steps-mid")
            ax.plot(v, t.floats(f"pdf_{label}_{state}"), color=color,
                    linewidth=0.8 * width, alpha=alpha, linestyle="--")
    handles = [plt.Line2D([], [], color=c, label=s) for s, c in _BRANCHES]
    for label in ("thin", "thick"):
        eta = t.meta.get(f"eta_{label}", "?")
        width = 1.0 if label == "thin" else 2.6
        handles.append(plt.Line2D([], [], color="gray", linewidth=width,
                                  label=f"eta = {eta} ({label})"))
    ax.legend(handles=handles, loc="upper right")
    ax.set_xlabel("integrated signal V")
    ax.set_ylabel("probability density")
    ax.set_title("single-round signal histograms with Gaussian densities")
    fig.tight_layout()
    return fig


def _semiclassical(tables) -> plt.Figure:
    (t,) = tables
    rounds = t.floats("round")
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.plot(rounds, t.floats("f_small"), color="C0",
            label=f"V_T = {t.meta.get('vt_small', '?')}")
    ax.plot(rounds, t.floats("f_large"), color="C1",
            label=f"V_T = {t.meta.get('vt_large', '?')}")
    ax.plot(rounds, t.floats("f_opt"), color="C2", label="adaptive V_T")
    for key, color in (("f_ss_small", "C0"), ("f_ss_large", "C1")):
        if key in t.meta:
            ax.axhline(t.meta_float(key), color=color, linestyle=":",
                       linewidth=1.0)
    draw_overlays(ax, t)
    ax.set_xlabel("measurement round")
    ax.set_ylabel("average fidelity")
    ax.set_title("threshold feedback, fixed and adaptive")
    ax.legend(loc="lower right")
    inset = ax.inset_axes([0.56, 0.16, 0.38, 0.3])
    inset.plot(rounds, t.floats("vt_opt"), color="C2")
    inset.set_title("optimal V_T", fontsize=7)
    inset.tick_params(labelsize=6)
    fig.tight_layout()
    return fig


def _discrete_rules(tables) -> plt.Figure:
    curves, theta = tables
    fig, (ax_a, ax_b) = plt.subplots(1, 2, figsize=(8.6, 3.4))
    series = curves.strings("series")
    kt = curves.floats("kt")
    fidelity = curves.floats("fidelity")
    styles = {
        "aslo_small": ("C0", "-"),
        "threshold_small": ("C0", "--"),
        "aslo_large": ("C1", "-"),
        "threshold_large": ("C1", "--"),
    }
    for name in dict.fromkeys(series):
        mask = series == name
        color, linestyle = styles.get(name, ("C3", "-"))
        ax_a.plot(kt[mask], fidelity[mask], color=color, linestyle=linestyle,
                  marker=".", markersize=3, label=name.replace("_", ", "))
    ax_a.set_xlabel("kt")
    ax_a.set_ylabel("average fidelity")
    ax_a.set_title("(a) locally optimal vs threshold rounds")
    ax_a.legend(loc="lower right")

    v = theta.floats("v")
    angle_columns = [name for name in theta.names if name != "v"]
    if not angle_columns:
        raise TableError(
            f"{theta.path.name}: no theta_round columns next to 'v'"
        )
    for i, name in enumerate(angle_columns):
        ax_b.plot(v, theta.floats(name), color=f"C{i % 10}",
                  label=name.replace("theta_round", "round "))
    ax_b.set_xlabel("integrated signal V")
    ax_b.set_ylabel("feedback angle theta")
    ax_b.set_title("(b) feedback angle slices")
    ax_b.legend(loc="upper right")
    fig.tight_layout()
    return fig


def _schedule(tables) -> plt.Figure:
    schedule, curves, trace = tables
    fig, (ax_steps, ax_curves, ax_trace) = plt.subplots(
        1, 3, figsize=(10.8, 3.3))

    steps = schedule.floats("step")
    durations = schedule.floats("dt_us")
    ax_steps.scatter(steps, durations, s=9, color="C0")
    ax_steps.axhline(float(np.median(durations)), color="gray",
                     linestyle=":", linewidth=1.0, label="median")
    ax_steps.set_xlabel("step index")
    ax_steps.set_ylabel("step duration (us)")
    ax_steps.set_title("optimized schedule")
    ax_steps.legend(loc="upper left")

    series = curves.strings("series")
    t_us = curves.floats("t_us")
    fidelity = curves.floats("fidelity")
    sem = curves.floats("sem")
    styles = {
        "optimized": ("C0", "-"),
        "uniform_small": ("C2", "--"),
        "uniform_large": ("C3", "-."),
        "benchmark": ("C1", "-"),
    }
    for name in dict.fromkeys(series):
        mask = series == name
        color, linestyle = styles.get(name, ("C4", "-"))
        ax_curves.plot(t_us[mask], fidelity[mask], color=color,
                       linestyle=linestyle, label=name.replace("_", " "))
        if np.any(sem[mask] > 0.0):
            ax_curves.fill_between(t_us[mask], fidelity[mask] - sem[mask],
                                   fidelity[mask] + sem[mask], color=color,
                                   alpha=0.25, linewidth=0)
    draw_overlays(ax_curves, curves)
    ax_curves.set_xlabel("t (us)")
    ax_curves.set_ylabel("fidelity")
    ax_curves.set_title("schedules compared")
    ax_curves.legend(loc="lower right")

    ax_trace.plot(trace.floats("iteration"), trace.floats("cost"), color="C0")
    ax_trace.set_xlabel("iteration")
    ax_trace.set_ylabel("cost")
    ax_trace.set_title("optimizer trace")
    fig.tight_layout()
    return fig


def _experiment(tables) -> plt.Figure:
    labeled = zip(tables, (("feedback", "C0"),
                           ("feedback, post-selected", "C1"),
                           ("no feedback, post-selected", "C2")))
    fig, ax = plt.subplots(figsize=(5.6, 3.6))
    for t, (label, color) in labeled:
        t_us = t.floats("t_us")
        mean = t.floats("mean_fidelity")
        sem = t.floats("sem_fidelity")
        ax.plot(t_us, mean, color=color, label=label)
        ax.fill_between(t_us, mean - sem, mean + sem, color=color,
                        alpha=0.25, linewidth=0)
        draw_overlays(ax, t)
    ax.plot(tables[0].floats("t_us"), tables[0].floats("concurrence"),
            color="C0", linestyle="--", linewidth=1.0,
            label="concurrence (feedback)")
    ax.axhline(0.5, color="gray", linestyle=":", linewidth=1.0)
    ax.set_xlabel("t (us)")
    ax.set_ylabel("fidelity / concurrence")
    ax.set_title("realistic trajectories, with and without post-selection")
    ax.legend(loc="upper right")
    fig.tight_layout()
    return fig


RENDERERS = {
    1: (("histogram.csv",), _histogram),
    2: (("semiclassical.csv",), _semiclassical),
    3: (("quantum_discrete_curves.csv", "quantum_discrete_theta.csv"),
        _discrete_rules),
    4: (("hybrid_schedule.csv", "hybrid_curves.csv", "hybrid_trace.csv"),
        _schedule),
    5: (("experiment_feedback.csv", "experiment_feedback_ps.csv",
         "experiment_nofeedback_ps.csv"), _experiment),
}


def _atomic_save(fig: plt.Figure, out_path: Path) -> None:
    out_path.parent.mkdir(parents=True, exist_ok=True)
    handle, tmp = tempfile.mkstemp(dir=out_path.parent,
                                   prefix=out_path.name + ".", suffix=".tmp")
    os.close(handle)
    try:
        fig.savefig(tmp, format="png", metadata={"Software": "render_fig"})
        os.replace(tmp, out_path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def render(spec: FigureSpec) -> Path:
    """Parse the inputs, draw the figure, and write the PNG atomically.

    All input validation happens before the output path is touched, so a
    bad CSV never leaves a partial or truncated image behind.
    """
    if spec.fig_id not in RENDERERS:
        raise TableError(f"unknown figure id {spec.fig_id}; expected 1-5")
    expected, draw = RENDERERS[spec.fig_id]
    if len(spec.csv_paths) != len(expected):
        raise TableError(
            f"figure {spec.fig_id} takes {len(expected)} CSV inputs "
            f"({', '.join(expected)}); got {len(spec.csv_paths)}"
        )
    tables = [read_table(path) for path in spec.csv_paths]
    out_path = Path(spec.out_path)
    with plt.rc_context(_RC):
        fig = draw(tables)
        try:
            _atomic_save(fig, out_path)
        finally:
            plt.close(fig)
    return out_path
