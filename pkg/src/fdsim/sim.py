"""Deterministic fixed-step scenario runner.

A scenario couples the plant with one of three loop modes (open loop,
state feedback, output feedback), schedules piecewise-constant stack
current and output setpoints, and records a fixed-schema trace.  Every
run is bitwise reproducible for a given configuration: the loop holds
the applied inputs over each step, refreshes the controller and observer
gain at configured cadences, and never draws random numbers.

Recorded rows are the artifact's observable contract: metrics are
computed from trace columns alone so that a re-read CSV reproduces them
exactly.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, controller, model, observer, ph_core, state
from .errors import ConfigError, DomainError, IntegrationFault, TraceFormatError
from .params import CurrentSplit, StackParams

__all__ = ["Scenario", "Trace", "integrate_step", "run_scenario", "metrics",
           "build_trajectory"]

TRACE_FORMAT = "fdsim-trace-v1"


def integrate_step(x: np.ndarray, derivative_fn, dt: float,
                   scheme: str = "rk4") -> np.ndarray:
    """One explicit step of a generic ODE right-hand side."""
    if dt <= 0.0:
        raise DomainError(f"integrate_step: dt must be > 0, got {dt}")
    x = np.asarray(x, dtype=float)
    if scheme == "rk4":
        k1 = derivative_fn(x)
        k2 = derivative_fn(x + 0.5 * dt * k1)
        k3 = derivative_fn(x + 0.5 * dt * k2)
        k4 = derivative_fn(x + dt * k3)
        x_new = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    elif scheme == "euler":
        x_new = x + dt * derivative_fn(x)
    else:
        raise DomainError(f"integrate_step: unknown scheme {scheme!r}")
    if not np.all(np.isfinite(x_new)):
        raise IntegrationFault("integrate_step produced a non-finite state",
                               state=x_new)
    return x_new


@dataclass
class Scenario:
    """Everything a run needs; built from a config file or directly."""

    name: str = "scenario"
    mode: str = "state_feedback"     # state_feedback | output_feedback | open_loop
    duration: float = 1000.0
    dt: float = 1e-3
    integrator: str = "rk4"
    record_every: int = 20
    control_every: int = 10
    gain_every: int = 2000
    seed: int = 1234
    params: StackParams = field(default_factory=StackParams)
    gains: controller.ControllerGains = field(
        default_factory=controller.ControllerGains)
    current_profile: tuple = ((0.0, 150.0),)
    setpoint_profile: tuple = ((0.0, 1.2e5, 1.5e5),)
    initial_offset: float = 20.0         # Pa added to every pressure entry
    initial_explicit: tuple | None = None
    estimate_offset_rel: float = 0.02
    observer_alpha: tuple = (0.1, 1.0)
    observer_lip: tuple = (1e4, 1e4)
    cond_cap: float = 1e12
    u_const: tuple = (0.0, 0.0)          # open-loop inputs
    settle_band: float = 50.0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ConfigError(f"dt must be > 0, got {self.dt}")
        if self.duration < self.dt:
            raise ConfigError("duration must be at least one step")
        if self.mode not in ("state_feedback", "output_feedback", "open_loop"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.integrator not in ("rk4", "euler"):
            raise ConfigError(f"unknown integrator {self.integrator!r}")
        if self.record_every < 1 or self.control_every < 1 or self.gain_every < 1:
            raise ConfigError("record_every, control_every, gain_every must be >= 1")
        for t0, *_ in self.current_profile + self.setpoint_profile:
            if t0 < 0.0 or t0 > self.duration:
                raise ConfigError(f"profile time {t0} outside [0, duration]")


def trace_columns(n_seg: int) -> list[str]:
    cols = ["t", "phase", "i_stack"]
    cols += state.column_names(n_seg)
    cols += ["est_" + c for c in state.column_names(n_seg)]
    cols += ["u_raw_bl", "u_raw_ht", "u_bl", "u_ht"]
    cols += ["zeta_" + c for c in state.column_names(n_seg)]
    cols += ["H", "H_a", "H_d", "V_d", "V_ob", "dH", "dH_d",
             "e_n", "e_sm", "nu_1", "nu_2"]
    cols += [f"s_seg{k + 1}" for k in range(n_seg)] + ["s_sm"]
    cols += [f"react_p{k + 1}" for k in range(n_seg)]
    cols += ["moles", "rd_min_eig", "rd_min_eig_rel", "guard_mask", "fault_mask"]
    return cols


class Trace:
    """Fixed-schema record of one run; column access by name."""

    def __init__(self, columns: list[str], data: np.ndarray, n_seg: int,
                 meta: dict | None = None):
        if data.ndim != 2 or data.shape[1] != len(columns):
            raise TraceFormatError("trace data does not match its schema")
        self.columns = list(columns)
        self.data = data
        self.n_seg = n_seg
        self.meta = dict(meta or {})
        self._index = {c: i for i, c in enumerate(self.columns)}

    def col(self, name: str) -> np.ndarray:
        if name not in self._index:
            raise TraceFormatError(f"trace is missing required column {name!r}")
        return self.data[:, self._index[name]]

    def __len__(self) -> int:
        return self.data.shape[0]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# {TRACE_FORMAT} n_seg={self.n_seg} "
                     f"name={self.meta.get('name', '')} "
                     f"mode={self.meta.get('mode', '')}\n")
            fh.write(",".join(self.columns) + "\n")
            buf = io.StringIO()
            np.savetxt(buf, self.data, delimiter=",", fmt="%.17g")
            fh.write(buf.getvalue())

    @classmethod
    def from_csv(cls, path) -> "Trace":
        with open(path) as fh:
            header = fh.readline()
            if not header.startswith(f"# {TRACE_FORMAT}"):
                raise TraceFormatError(f"{path}: not a recognized trace file")
            fields = dict(kv.split("=", 1) for kv in header[2:].split()
                          if "=" in kv)
            n_seg = int(fields.get("n_seg", 3))
            columns = fh.readline().strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        if data.size == 0:
            raise TraceFormatError(f"{path}: trace has no rows")
        meta = {"name": fields.get("name", ""), "mode": fields.get("mode", "")}
        return cls(columns, data, n_seg, meta)


def build_trajectory(scn: Scenario) -> controller.DesiredTrajectory:
    """Solve the per-phase target equilibria for a closed-loop scenario."""
    times = sorted({t for t, *_ in scn.current_profile}
                   | {t for t, *_ in scn.setpoint_profile})
    if not times or times[0] != 0.0:
        raise ConfigError("profiles must define values at t = 0")

    def current_at(t):
        val = scn.current_profile[0][1]
        for t0, amps in scn.current_profile:
            if t >= t0:
                val = amps
        return val

    def setpoint_at(t):
        val = scn.setpoint_profile[0][1:]
        for t0, *y in scn.setpoint_profile:
            if t >= t0:
                val = y
        return np.asarray(val, dtype=float)

    phases = []
    guess = None
    for t0 in times:
        split = CurrentSplit.proportional(current_at(t0), scn.params)
        y_d = setpoint_at(t0)
        try:
            ph = controller.build_phase(t0, scn.params, scn.gains, split, y_d,
                                        x_guess=guess)
        except ConfigError as exc:
            raise ConfigError(f"phase at t={t0}: {exc}") from exc
        phases.append(ph)
        guess = ph.x_d
    return controller.DesiredTrajectory(phases)


def _initial_state(scn: Scenario, traj) -> np.ndarray:
    if scn.initial_explicit is not None:
        x0 = np.asarray(scn.initial_explicit, dtype=float)
        state.validate_state(x0, scn.params.n_seg)
        return x0
    if traj is None:
        raise ConfigError("open_loop scenarios need an explicit initial state")
    # offset every pressure equally: totals and partials move together, so
    # the perturbation sits in the fast flow modes, not the slow composition
    return traj.phases[0].x_d + scn.initial_offset


def run_scenario(scn: Scenario) -> Trace:
    """Execute the configured loop and return the recorded trace.

    Raises :class:`IntegrationFault` (with the partial trace attached)
    if the state leaves the finite domain.
    """
    p = scn.params
    n = p.n_seg
    dim = 2 * n + 2
    c_mat = state.output_matrix(n)
    kvec = scn.gains.energy.vector(n)
    n_steps = int(round(scn.duration / scn.dt))
    use_rk4 = scn.integrator == "rk4"

    traj = None
    if scn.mode != "open_loop":
        traj = build_trajectory(scn)
    x = _initial_state(scn, traj)

    obs = None
    if scn.mode == "output_feedback":
        obs = observer.ObserverState.initial(
            x * (1.0 + scn.estimate_offset_rel),
            alpha=scn.observer_alpha, lip=scn.observer_lip)

    cols = trace_columns(n)
    n_rows = n_steps // scn.record_every + 1
    data = np.full((n_rows, len(cols)), np.nan)
    row = 0

    phase_idx = 0
    if traj is not None:
        phase = traj.phases[0]
        split = phase.split
        u_applied = phase.u_d.copy()
    else:
        phase = None
        split = CurrentSplit.proportional(scn.current_profile[0][1], p)
        u_applied = np.clip(np.asarray(scn.u_const, dtype=float), 0.0, 1.0)
    consts = model.pack_plant(split, p)
    zeta = model.disturbance(x, split, p)
    u_raw = u_applied.copy()
    nu = np.zeros(2)
    gain = None
    fault_bits = 0
    step_kernel = _kernels.rk4_step if use_rk4 else _kernels.euler_step

    def record(step_t, ctrl_out):
        nonlocal row
        vals = np.full(len(cols), np.nan)
        i = 0
        vals[0] = step_t
        vals[1] = phase_idx
        vals[2] = split.i_total
        i = 3
        vals[i:i + dim] = x
        i += dim
        if obs is not None:
            vals[i:i + dim] = obs.x_hat
        i += dim
        vals[i:i + 2] = u_raw
        vals[i + 2:i + 4] = u_applied
        i += 4
        vals[i:i + dim] = zeta
        i += dim
        dx = np.empty(dim)
        _kernels.dynamics_core(x, u_applied[0], u_applied[1], *consts, dx)
        h = ph_core.hamiltonian(x, kvec)
        if phase is not None:
            try:
                h_a, om = controller.shaped_energy(x, phase, scn.gains, p)
            except Exception:
                h_a, om = float("nan"), None
            e = c_mat @ x - phase.y_d
        else:
            h_a, om = 0.0, np.zeros(dim)
            e = np.array([np.nan, np.nan])
        h_d = h + h_a
        v_d = 0.5 * float(e @ e) + h_d if np.all(np.isfinite(e)) else np.nan
        v_ob = 0.5 * float(np.dot(x - obs.x_hat, x - obs.x_hat)) if obs is not None else np.nan
        dh = float(np.dot(kvec * x, dx))
        dh_d = float(np.dot(kvec * x + om, dx)) if om is not None else np.nan
        vals[i:i + 7] = [h, h_a, h_d, v_d, v_ob, dh, dh_d]
        i += 7
        vals[i:i + 2] = e
        vals[i + 2:i + 4] = nu
        i += 4
        sup = np.empty(n + 1)
        en = scn.gains.energy
        _kernels.boundary_supply(x, u_applied[0], u_applied[1], *consts,
                                 en.k_seg_h2, en.k_seg, en.k_sm_h2, en.k_sm,
                                 sup)
        vals[i:i + n + 1] = sup
        i += n + 1
        for k in range(n):
            r = p.n_fc * split.i_seg[k] / (2.0 * p.faraday)
            vals[i + k] = -((en.k_seg_h2 * x[state.idx_h2(k)]
                             + en.k_seg * x[state.idx_total(k)])
                            * p.mu_seg[k] * r)
        i += n
        vals[i] = _kernels.moles_total(x, p.mu_seg, p.mu_sm)
        if phase is not None:
            try:
                aux = model.aux_coefficients(x, p)
                st = ph_core.build_structure(aux, scn.gains, x, phase.x_d, p)
                min_eig = float(np.min(np.linalg.eigvalsh(
                    0.5 * (st.r_d + st.r_d.T))))
                vals[i + 1] = min_eig
                vals[i + 2] = min_eig / max(1.0, float(np.max(np.abs(st.r_d))))
            except Exception:
                pass
        guard_mask = 0.0
        if ctrl_out is not None:
            guard_mask = float(ctrl_out.guards.bitmask())
        vals[i + 3] = guard_mask
        vals[i + 4] = float(fault_bits)
        data[row] = vals
        row += 1

    current_times = [t0 for t0, _ in scn.current_profile]
    last_out = None
    for step in range(n_steps + 1):
        t = step * scn.dt
        if traj is not None:
            idx = traj.phase_index(t)
            if idx != phase_idx or step == 0:
                phase_idx = idx
                phase = traj.phases[idx]
                split = phase.split
                consts = model.pack_plant(split, p)
                zeta = phase.zeta
        else:
            idx = 0
            for i_, t0 in enumerate(current_times):
                if t >= t0:
                    idx = i_
            if idx != phase_idx or step == 0:
                phase_idx = idx
                split = CurrentSplit.proportional(
                    scn.current_profile[idx][1], p)
                consts = model.pack_plant(split, p)
                zeta = model.disturbance(x, split, p)
        fault_bits = 0
        y = c_mat @ x

        if scn.mode == "output_feedback" and step % scn.gain_every == 0:
            g2 = observer.observer_gain(obs.x_hat, u_applied, split, p,
                                        cond_cap=scn.cond_cap)
            if g2.ok:
                gain = g2
            else:
                fault_bits |= 2

        if phase is not None and step % scn.control_every == 0:
            if scn.mode == "state_feedback":
                out = controller.state_feedback_control(x, phase, y, scn.gains, p)
            else:
                out = observer.output_feedback_control(obs, y, phase, scn.gains, p)
            last_out = out
            if out.fault:
                fault_bits |= 1
                u_raw = np.array([np.nan, np.nan])
            else:
                u_raw = out.u_raw
                u_applied = out.u_clamped

        if step % scn.record_every == 0:
            record(t, last_out)
        if step == n_steps:
            break

        if scn.mode == "output_feedback":
            if gain is not None and gain.ok:
                forcing = gain.l_ob @ _advance_observer_nu(obs, y, c_mat, scn.dt)
            else:
                forcing = np.zeros(dim)
                _advance_observer_nu(obs, y, c_mat, scn.dt)
            xh = _kernels.rk4_step_forced(obs.x_hat, u_applied[0], u_applied[1],
                                          *consts, forcing, scn.dt) \
                if use_rk4 else \
                _kernels.euler_step_forced(obs.x_hat, u_applied[0], u_applied[1],
                                           *consts, forcing, scn.dt)
            projected = _project_estimate(xh, n)
            if projected:
                fault_bits |= 4
            obs.x_hat = xh

        x = step_kernel(x, u_applied[0], u_applied[1], *consts, scn.dt)
        if not np.all(np.isfinite(x)):
            fault = IntegrationFault(
                f"non-finite state at t = {t + scn.dt:.6f} s", t=t + scn.dt,
                state=x)
            fault.partial_trace = Trace(cols, data[:row], n,
                                        {"name": scn.name, "mode": scn.mode})
            raise fault

    trace = Trace(cols, data[:row], n, {
        "name": scn.name, "mode": scn.mode, "dt": scn.dt,
        "duration": scn.duration, "integrator": scn.integrator,
        "record_every": scn.record_every,
    })
    return trace


def _advance_observer_nu(obs, y, c_mat, dt) -> np.ndarray:
    """Step the output-error differentiators in place; return the correction."""
    y_err = y - c_mat @ obs.x_hat
    for i in range(2):
        obs.diff[i] = observer._red_channel(obs.diff[i], float(y_err[i]),
                                            float(obs.lip[i]), dt)
    return observer.sliding_correction(obs.diff, obs.alpha)


def _project_estimate(xh: np.ndarray, n_seg: int) -> bool:
    projected = False
    for k in range(n_seg + 1):
        ih = 2 * k
        it = 2 * k + 1
        if xh[ih] < 0.0:
            xh[ih] = 0.0
            projected = True
        if xh[ih] > xh[it]:
            xh[ih] = xh[it]
            projected = True
    return projected


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def metrics(trace: Trace, settle_band: float = 50.0,
            exclusion_window: float = 5.0) -> dict:
    """Summary statistics computed from trace columns only."""
    if len(trace) == 0:
        raise TraceFormatError("metrics: trace has no rows")
    t = trace.col("t")
    out: dict = {"n_samples": len(trace)}

    e_n = trace.col("e_n")
    e_sm = trace.col("e_sm")
    if np.all(np.isfinite(e_n)):
        out["rmse_e_n"] = float(np.sqrt(np.mean(e_n ** 2)))
        out["rmse_e_sm"] = float(np.sqrt(np.mean(e_sm ** 2)))
        out["max_abs_e_n"] = float(np.max(np.abs(e_n)))
        out["max_abs_e_sm"] = float(np.max(np.abs(e_sm)))

    n = trace.n_seg
    i_n, i_sm = state.output_indices(n)
    names = state.column_names(n)
    est_n = trace.col("est_" + names[i_n])
    if np.any(np.isfinite(est_n)):
        err_n = np.abs(trace.col(names[i_n]) - est_n)
        err_sm = np.abs(trace.col(names[i_sm]) - trace.col("est_" + names[i_sm]))
        out["max_est_err_n"] = float(np.max(err_n))
        out["max_est_err_sm"] = float(np.max(err_sm))
        late = t >= 10.0
        if np.any(late):
            out["max_est_err_n_after_10s"] = float(np.max(err_n[late]))
            out["max_est_err_sm_after_10s"] = float(np.max(err_sm[late]))

    dhd = trace.col("dH_d")
    if np.any(np.isfinite(dhd)):
        phase = trace.col("phase")
        steps = [t[0]] + [t[i] for i in range(1, len(t))
                          if phase[i] != phase[i - 1]]
        excluded = np.zeros(len(t), dtype=bool)
        for ts in steps:
            excluded |= (t >= ts) & (t < ts + exclusion_window)
        tol = 1e-9 * np.maximum(1.0, np.abs(trace.col("H_d")))
        sel = ~excluded & np.isfinite(dhd)
        if np.any(sel):
            out["frac_dhd_nonpos"] = float(np.mean(dhd[sel] <= tol[sel]))
        vd = trace.col("V_d")
        out["v_d_initial"] = float(vd[0])
        out["v_d_final"] = float(vd[-1])
        if np.any(np.isfinite(e_n)):
            last_step = steps[-1]
            after = np.where(t >= last_step)[0]
            for label, err in (("n", e_n), ("sm", e_sm)):
                settled = math.nan
                tail_max = np.maximum.accumulate(np.abs(err[after])[::-1])[::-1]
                hit = np.where(tail_max < settle_band)[0]
                if hit.size:
                    settled = float(t[after[hit[0]]] - last_step)
                out[f"settle_time_{label}"] = settled

    rd = trace.col("rd_min_eig")
    if np.any(np.isfinite(rd)):
        out["min_rd_eig"] = float(np.nanmin(rd))

    guard = trace.col("guard_mask")
    fault = trace.col("fault_mask")
    out["guard_violation_samples"] = int(np.count_nonzero(guard > 0))
    out["controller_fault_samples"] = int(
        np.count_nonzero((fault.astype(int) & 1) > 0))
    out["observer_fault_samples"] = int(
        np.count_nonzero((fault.astype(int) & 2) > 0))
    out["estimate_projected_samples"] = int(
        np.count_nonzero((fault.astype(int) & 4) > 0))

    moles = trace.col("moles")
    out["moles_initial"] = float(moles[0])
    out["conservation_rel_drift"] = float(
        (np.max(moles) - np.min(moles)) / moles[0])
    return out


def metrics_text(m: dict) -> str:
    lines = [f"{key} = {m[key]!r}" for key in sorted(m)]
    return "\n".join(lines) + "\n"
