"""Scenario configuration files.

Flat, line-oriented ``key = value`` text grouped by ``[section]`` headers.
Unknown sections or keys are rejected with the offending line number, as
are missing required keys, so a configuration diff is always meaningful.

Sections:

* ``[scenario]``   run setup (mode, duration, dt required)
* ``[params]``     any stack-parameter field
* ``[energy]``     quadratic energy weights
* ``[gains]``      shaping and output-damping gains (products or factors)
* ``[observer]``   estimator tuning
* ``[initial]``    initial state and estimate placement
* ``[current_profile]``, ``[setpoint_profile]``  keys ``t_<time>``
* ``[verify]``     structure-check batch options
* ``[sweep]``      parameter axis for sweep runs
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import controller, sim
from .errors import ConfigError
from .params import StackParams
from .ph_core import EnergyCoeffs

__all__ = ["load_config", "apply_overrides", "build_scenario",
           "default_config_text"]

_PARAM_FIELDS = {f.name: f for f in dataclasses.fields(StackParams)}
_TUPLE_LEN = {"blower_a": 5, "blower_b": 3, "blower_c": 6, "t_frac": None}

_SCENARIO_KEYS = {
    "name": str, "mode": str, "duration": float, "dt": float,
    "integrator": str, "record_every": int, "control_every": int,
    "gain_every": int, "seed": int, "u_bl": float, "u_ht": float,
    "settle_band": float,
}
_ENERGY_KEYS = {"k_seg_h2": float, "k_seg": float, "k_sm_h2": float,
                "k_sm": float}
_GAINS_KEYS = {"beta1": float, "beta2": float, "k_n1_g_sm_ht": float,
               "k_sm1_g_sm_ht": float, "k_n1": float, "k_sm1": float}
_OBSERVER_KEYS = {"alpha1": float, "alpha2": float, "lip1": float,
                  "lip2": float, "cond_cap": float,
                  "estimate_offset_rel": float}
_INITIAL_KEYS = {"offset": float, "explicit": "floats"}
_VERIFY_KEYS = {"n_states": int, "traj_seconds": float, "traj_dt": float,
                "inject_skew_error": bool}
_SWEEP_KEYS = {"parameter": str, "values": "floats"}

_SECTIONS = ("scenario", "params", "energy", "gains", "observer", "initial",
             "current_profile", "setpoint_profile", "verify", "sweep")


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Parse into {section: {key: (raw_value, line_no)}}, validating names."""
    cfg: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"{origin}:{lineno}: unknown section [{section}]")
            cfg.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"{origin}:{lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        _check_key(section, key, origin, lineno)
        if key in cfg[section]:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        cfg[section][key] = (value, lineno)
    return cfg


def _check_key(section: str, key: str, origin: str, lineno: int) -> None:
    known = {
        "scenario": _SCENARIO_KEYS, "params": _PARAM_FIELDS,
        "energy": _ENERGY_KEYS, "gains": _GAINS_KEYS,
        "observer": _OBSERVER_KEYS, "initial": _INITIAL_KEYS,
        "verify": _VERIFY_KEYS, "sweep": _SWEEP_KEYS,
    }
    if section in ("current_profile", "setpoint_profile"):
        if not key.startswith("t_"):
            raise ConfigError(
                f"{origin}:{lineno}: profile keys look like t_<time>, got {key!r}")
        try:
            float(key[2:])
        except ValueError:
            raise ConfigError(f"{origin}:{lineno}: bad profile time in {key!r}") from None
        return
    if key not in known[section]:
        raise ConfigError(f"{origin}:{lineno}: unknown key {key!r} in [{section}]")


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc}") from exc
    return parse_config_text(text, origin=str(path))


def apply_overrides(cfg: dict, sets: list[str]) -> dict:
    """Apply repeatable --set section.key=value entries."""
    for item in sets:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        section = section.strip()
        key = key.strip()
        if section not in _SECTIONS:
            raise ConfigError(f"--set: unknown section {section!r}")
        _check_key(section, key, "--set", 0)
        cfg.setdefault(section, {})[key] = (value.strip(), 0)
    return cfg


def _convert(raw: str, typ, origin: str, lineno: int, key: str):
    try:
        if typ is float:
            return float(raw)
        if typ is int:
            return int(raw)
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ == "floats":
            return tuple(float(tok) for tok in raw.split())
        return raw
    except ValueError:
        raise ConfigError(
            f"{origin}:{lineno}: cannot parse {key} = {raw!r} as {typ}") from None


def _section_values(cfg: dict, section: str, schema: dict) -> dict:
    out = {}
    for key, (raw, lineno) in cfg.get(section, {}).items():
        out[key] = _convert(raw, schema[key], section, lineno, key)
    return out


def _build_params(cfg: dict) -> StackParams:
    kwargs = {}
    for key, (raw, lineno) in cfg.get("params", {}).items():
        f = _PARAM_FIELDS[key]
        if key in _TUPLE_LEN:
            val = tuple(float(tok) for tok in raw.split())
            want = _TUPLE_LEN[key]
            if want is not None and len(val) != want:
                raise ConfigError(
                    f"params:{lineno}: {key} needs {want} values, got {len(val)}")
        elif f.type in ("int", int):
            val = _convert(raw, int, "params", lineno, key)
        else:
            val = _convert(raw, float, "params", lineno, key)
        kwargs[key] = val
    try:
        return StackParams(**kwargs)
    except Exception as exc:
        raise ConfigError(f"invalid stack parameters: {exc}") from exc


def _build_profile(cfg: dict, section: str, n_values: int, default):
    entries = []
    for key, (raw, lineno) in cfg.get(section, {}).items():
        t0 = float(key[2:])
        vals = tuple(float(tok) for tok in raw.split())
        if len(vals) != n_values:
            raise ConfigError(
                f"{section}:{lineno}: expected {n_values} value(s), got {len(vals)}")
        entries.append((t0, *vals))
    if not entries:
        return default
    entries.sort(key=lambda e: e[0])
    if entries[0][0] != 0.0:
        raise ConfigError(f"[{section}] must define a value at t_0")
    return tuple(entries)


# paper-flavored defaults: stack current stepping between 150 A and 250 A
# at the published epochs, placeholder setpoints
_DEFAULT_CURRENT = ((0.0, 150.0), (100.0, 250.0), (320.0, 150.0),
                    (470.0, 250.0), (700.0, 150.0), (900.0, 250.0))
_DEFAULT_SETPOINTS = ((0.0, 1.2e5, 1.5e5),)


def build_scenario(cfg: dict) -> tuple[sim.Scenario, dict]:
    """Materialize a scenario plus the verify/sweep extras."""
    scn_vals = _section_values(cfg, "scenario", _SCENARIO_KEYS)
    for req in ("mode", "duration", "dt"):
        if req not in scn_vals:
            raise ConfigError(f"missing required key scenario.{req}")

    params = _build_params(cfg)
    energy_vals = _section_values(cfg, "energy", _ENERGY_KEYS)
    energy = EnergyCoeffs(**energy_vals)

    g = _section_values(cfg, "gains", _GAINS_KEYS)
    beta1 = g.get("beta1", 1.0)
    beta2 = g.get("beta2", beta1 + energy.k_seg_h2)
    kn1 = g.get("k_n1")
    ksm1 = g.get("k_sm1")
    if kn1 is None:
        kn1 = g.get("k_n1_g_sm_ht", -1e-3) / params.g_sm_ht
    if ksm1 is None:
        ksm1 = g.get("k_sm1_g_sm_ht", -1e4) / params.g_sm_ht
    gains = controller.ControllerGains(beta1=beta1, beta2=beta2, k_n1=kn1,
                                       k_sm1=ksm1, energy=energy)

    obs_vals = _section_values(cfg, "observer", _OBSERVER_KEYS)
    init_vals = _section_values(cfg, "initial", _INITIAL_KEYS)

    duration = scn_vals["duration"]
    current_profile = _build_profile(cfg, "current_profile", 1,
                                     _DEFAULT_CURRENT)
    current_profile = tuple((t0, v) for t0, v in current_profile
                            if t0 <= duration) or ((0.0, _DEFAULT_CURRENT[0][1]),)
    setpoint_profile = _build_profile(cfg, "setpoint_profile", 2,
                                      _DEFAULT_SETPOINTS)
    setpoint_profile = tuple(e for e in setpoint_profile if e[0] <= duration)

    scenario = sim.Scenario(
        name=scn_vals.get("name", "scenario"),
        mode=scn_vals["mode"],
        duration=duration,
        dt=scn_vals["dt"],
        integrator=scn_vals.get("integrator", "rk4"),
        record_every=scn_vals.get("record_every", 20),
        control_every=scn_vals.get("control_every", 10),
        gain_every=scn_vals.get("gain_every", 2000),
        seed=scn_vals.get("seed", 1234),
        params=params,
        gains=gains,
        current_profile=current_profile,
        setpoint_profile=setpoint_profile,
        initial_offset=init_vals.get("offset", 20.0),
        initial_explicit=init_vals.get("explicit"),
        estimate_offset_rel=obs_vals.get("estimate_offset_rel", 0.02),
        observer_alpha=(obs_vals.get("alpha1", 0.1),
                        obs_vals.get("alpha2", 1.0)),
        observer_lip=(obs_vals.get("lip1", 1e4), obs_vals.get("lip2", 1e4)),
        cond_cap=obs_vals.get("cond_cap", 1e12),
        u_const=(scn_vals.get("u_bl", 0.0), scn_vals.get("u_ht", 0.0)),
        settle_band=scn_vals.get("settle_band", 50.0),
    )

    extras = {
        "verify": _section_values(cfg, "verify", _VERIFY_KEYS),
        "sweep": _section_values(cfg, "sweep", _SWEEP_KEYS),
    }
    return scenario, extras


def default_config_text() -> str:
    """A fully commented template with every key at its default."""
    p = StackParams()
    lines = [
        "# fdsim scenario file", "",
        "[scenario]",
        "name = template",
        "mode = state_feedback      # state_feedback | output_feedback | open_loop",
        "duration = 60.0",
        "dt = 5e-5",
        "integrator = rk4           # rk4 | euler",
        "record_every = 20",
        "control_every = 10",
        "gain_every = 2000",
        "seed = 1234",
        "settle_band = 50.0", "",
        "[params]",
    ]
    for f in dataclasses.fields(StackParams):
        v = getattr(p, f.name)
        if isinstance(v, tuple):
            lines.append(f"{f.name} = {' '.join(repr(x) for x in v)}")
        else:
            lines.append(f"{f.name} = {v!r}")
    lines += [
        "", "[energy]",
        "k_seg_h2 = 1.0", "k_seg = 1.0", "k_sm_h2 = 1.0", "k_sm = 1.0",
        "", "[gains]",
        "beta1 = 1.0", "beta2 = 2.0",
        "k_n1_g_sm_ht = -1e-3", "k_sm1_g_sm_ht = -1e4",
        "", "[observer]",
        "alpha1 = 0.1", "alpha2 = 1.0", "lip1 = 1e4", "lip2 = 1e4",
        "cond_cap = 1e12", "estimate_offset_rel = 0.02",
        "", "[initial]",
        "offset = 20.0",
        "", "[current_profile]",
    ]
    for t0, amps in _DEFAULT_CURRENT:
        lines.append(f"t_{t0:g} = {amps:g}")
    lines += ["", "[setpoint_profile]"]
    for t0, *y in _DEFAULT_SETPOINTS:
        lines.append(f"t_{t0:g} = {y[0]:g} {y[1]:g}")
    lines += ["", "[verify]", "n_states = 1000", "traj_seconds = 4.0",
              "traj_dt = 5e-5", ""]
    return "\n".join(lines)
