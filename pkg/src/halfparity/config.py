"""Flat JSON run configs: parsing, per-scenario schemas, unit resolution.

A config file is a single JSON object whose values are scalars, for
example ``{"scenario": "continuous", "k_2pi_mhz": 1.0}``.  Rates quoted in
2pi-units resolve as k = 2*pi*k_2pi_mhz rad/us and the feedback loop
bandwidth as tau = 1/(2*pi*bw) us.  Coherence times are plain microseconds
unless angular_times is set, which divides them by 2*pi instead.  Lists
(voltage grids, round indices) travel as comma-separated strings so the
format stays flat.

ConfigError carries a human-readable location: the offending line for
parse errors, the offending key for schema errors.
"""

from __future__ import annotations

import json
import math

TWO_PI = 2.0 * math.pi

_REQUIRED = object()


class ConfigError(Exception):
    """Malformed, incomplete, or out-of-range run configuration."""


def _float(key, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"key '{key}' must be a number, got {value!r}")
    return float(value)


def _positive(key, value):
    v = _float(key, value)
    if not (v > 0.0):
        raise ConfigError(f"key '{key}' must be positive, got {value!r}")
    return v


def _nonnegative(key, value):
    v = _float(key, value)
    if v < 0.0:
        raise ConfigError(f"key '{key}' must be nonnegative, got {value!r}")
    return v


def _efficiency(key, value):
    v = _float(key, value)
    if not (0.0 < v <= 1.0):
        raise ConfigError(f"key '{key}' must lie in (0, 1], got {value!r}")
    return v


def _bool(key, value):
    if not isinstance(value, bool):
        raise ConfigError(f"key '{key}' must be true or false, got {value!r}")
    return value


def _int(key, value, minimum=0):
    v = _float(key, value)
    if v != int(v):
        raise ConfigError(f"key '{key}' must be an integer, got {value!r}")
    if int(v) < minimum:
        raise ConfigError(f"key '{key}' must be >= {minimum}, got {value!r}")
    return int(v)


def _index(key, value):
    return _int(key, value, minimum=0)


def _count(key, value):
    return _int(key, value, minimum=1)


def _float_list(key, value):
    if not isinstance(value, str):
        raise ConfigError(f"key '{key}' must be a comma-separated string")
    try:
        items = [float(tok) for tok in value.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"key '{key}' has a non-numeric entry: {value!r}")
    if not items:
        raise ConfigError(f"key '{key}' must list at least one value")
    return items


def _index_list(key, value):
    items = _float_list(key, value)
    out = []
    for v in items:
        if v != int(v) or v < 0:
            raise ConfigError(f"key '{key}' must list nonnegative integers")
        out.append(int(v))
    return out


_COMMON = {
    "k_2pi_mhz": (_positive, _REQUIRED),
    "seed": (_index, 0),
}

SCENARIOS = {
    "histogram": {
        "eta_thin": (_efficiency, 1.0),
        "eta_thick": (_efficiency, 0.2),
        "dt_us": (_positive, 3.0),
        "n_traj": (_count, 20000),
        "n_bins": (lambda k, v: _int(k, v, minimum=5), 61),
        "v_span": (_positive, 2.5),
    },
    "semiclassical": {
        "eta": (_efficiency, 0.1),
        "dt_us": (_positive, 20.0),
        "n_rounds": (_count, 15),
        "vt_small": (_nonnegative, 0.2),
        "vt_large": (_nonnegative, 0.6),
    },
    "quantum-discrete": {
        "eta": (_efficiency, 1.0),
        "k_dt_small": (_positive, 0.2),
        "k_dt_large": (_positive, 1.0),
        "kt_final": (_positive, 3.0),
        "theta_rounds": (_index_list, "0,2,5,14"),
    },
    "continuous": {
        "eta": (_efficiency, 1.0),
        "k_dt": (_positive, 1e-3),
        "kt_final": (_positive, 3.0),
        "tolerance": (_positive, 1e-3),
    },
    "hybrid-optimize": {
        "eta": (_efficiency, 0.4),
        "n_steps": (lambda k, v: _int(k, v, minimum=2), 200),
        "t_final_us": (_positive, 3.0),
        "compare_large_n": (_count, 6),
        "benchmark_traj": (_index, 300),
        "benchmark_dt_us": (_positive, 0.00125),
        "restarts": (_count, 5),
        "max_iter": (_index, 120),
    },
    "experiment": {
        "eta": (_efficiency, 0.4),
        "dt_us": (_positive, 0.0025),
        "t_final_us": (_positive, 4.0),
        "t1a_2pi_us": (_positive, 20.0),
        "t1b_2pi_us": (_positive, 20.0),
        "tphi1_2pi_us": (_positive, 6.9),
        "tphi2_2pi_us": (_positive, 30.0),
        "angular_times": (_bool, False),
        "delay_us": (_nonnegative, 0.1),
        "bandwidth_2pi_mhz": (_positive, 1.6),
        "window_us": (_positive, 2.7),
        "n_traj": (_count, 1500),
        "record_stride": (_count, 8),
    },
    "povm-check": {
        "etas": (_float_list, "0.2,1.0"),
        "k_dts": (_float_list, "0.1,1,10"),
        "completeness_tol": (_positive, 1e-8),
        "composition_tol": (_positive, 1e-10),
    },
    "steady-state": {
        "etas": (_float_list, "0.2,0.5,1.0"),
        "p_over_k": (_float_list, "0.5,4,20"),
        "k_dt": (_positive, 1e-3),
        "kt_final": (_positive, 40.0),
        "rel_tol": (_positive, 0.005),
        "thr_vts": (_float_list, "0,0.3,0.5"),
        "thr_eta": (_efficiency, 0.1),
        "thr_dt_us": (_positive, 20.0),
        "thr_chains": (_count, 64),
        "thr_rounds": (_count, 120),
        "thr_burn_in": (_index, 40),
    },
}


def schema_for(scenario: str) -> dict:
    if scenario not in SCENARIOS:
        raise ConfigError(
            f"unknown scenario '{scenario}'; expected one of {sorted(SCENARIOS)}"
        )
    return {**_COMMON, **SCENARIOS[scenario]}


def parse_file(path) -> dict:
    """Raw key-value pairs from a flat JSON config file."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    for key, value in data.items():
        if value is not None and not isinstance(value, (str, int, float, bool)):
            raise ConfigError(f"{path}: key '{key}' must be a scalar (flat format)")
    return data


def parse_override(item: str):
    """One --set KEY=VALUE item; VALUE parses as JSON, else stays a string."""
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override '{item}' is not of the form key=value")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def resolve(scenario: str, raw: dict | None = None, overrides: dict | None = None):
    """Validated scenario parameters: defaults, then file, then overrides.

    The returned dict holds parsed values only (floats, ints, lists); unit
    conversion lives in derived_values so both the runner and the
    validate-config report share it.
    """
    schema = schema_for(scenario)
    merged = {}
    for source in (raw or {}), (overrides or {}):
        for key, value in source.items():
            if key == "scenario":
                if value != scenario:
                    raise ConfigError(
                        f"config is for scenario '{value}', not '{scenario}'"
                    )
                continue
            if key not in schema:
                raise ConfigError(f"unknown key '{key}' for scenario '{scenario}'")
            merged[key] = value

    resolved = {"scenario": scenario}
    for key, (parse, default) in schema.items():
        if key in merged:
            resolved[key] = parse(key, merged[key])
        elif default is _REQUIRED:
            raise ConfigError(f"missing required key '{key}' for scenario '{scenario}'")
        else:
            resolved[key] = parse(key, default)
    return resolved


def default_config(scenario: str) -> dict:
    """Self-contained raw config used when no file is given.

    Config files must state k_2pi_mhz themselves so they remain complete
    records of the physics they encode; bare subcommand runs fall back to
    the desk-scale defaults here.
    """
    schema_for(scenario)
    k = 1.3 if scenario == "experiment" else 1.0
    return {"scenario": scenario, "k_2pi_mhz": k}


def derived_values(resolved: dict) -> dict:
    """Unit conversions and step counts implied by a resolved config."""
    k = TWO_PI * resolved["k_2pi_mhz"]
    out = {"k_rad_per_us": k}
    scenario = resolved["scenario"]
    if scenario == "experiment":
        out["tau_us"] = 1.0 / (TWO_PI * resolved["bandwidth_2pi_mhz"])
        scale = TWO_PI if resolved["angular_times"] else 1.0
        out["t1_us"] = (
            resolved["t1a_2pi_us"] / scale,
            resolved["t1b_2pi_us"] / scale,
        )
        out["tphi_us"] = (
            resolved["tphi1_2pi_us"] / scale,
            resolved["tphi2_2pi_us"] / scale,
        )
        out["n_steps"] = int(round(resolved["t_final_us"] / resolved["dt_us"]))
    elif scenario == "continuous":
        out["dt_us"] = resolved["k_dt"] / k
        out["n_steps"] = int(round(resolved["kt_final"] / resolved["k_dt"]))
    elif scenario == "quantum-discrete":
        out["dt_small_us"] = resolved["k_dt_small"] / k
        out["dt_large_us"] = resolved["k_dt_large"] / k
        out["rounds_small"] = int(round(resolved["kt_final"] / resolved["k_dt_small"]))
        out["rounds_large"] = int(round(resolved["kt_final"] / resolved["k_dt_large"]))
    elif scenario == "steady-state":
        out["wm_dt_us"] = resolved["k_dt"] / k
        out["wm_steps"] = int(round(resolved["kt_final"] / resolved["k_dt"]))
    elif scenario == "hybrid-optimize":
        out["dt_min_us"] = 1e-4 / k
        out["uniform_dt_us"] = resolved["t_final_us"] / resolved["n_steps"]
    return out
