"""Randomized and trajectory-based structure checks.

These drive the `verify` CLI subcommand and the acceptance suite: matrix
symmetry properties on seeded random feasible states, consistency of the
factorized form with the flow-balance dynamics, gradient checks, the
design conditions at the target equilibrium, and the dissipation
spectrum along a short nominal trajectory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import controller, model, ph_core, sim, state
from .params import CurrentSplit, StackParams

SKEW_TOL = 1e-12
SYM_TOL = 1e-12
FACT_TOL = 1e-9
GRAD_TOL = 1e-6
COND_ASYM_TOL = 1e-6
COND_EQ_TOL = 1e-6
RD_EIG_TOL_REL = 1e-9


@dataclass
class CheckResult:
    name: str
    value: float
    bound: float
    ok: bool

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"{status} {self.name} = {self.value:.6e} (bound {self.bound:.6e})"


def structure_batch(params: StackParams, gains, x_d: np.ndarray,
                    split: CurrentSplit, n_states: int, seed: int,
                    inject_skew_error: bool = False) -> list[CheckResult]:
    """Skew/symmetry residuals and factorization error on random states."""
    rng = np.random.default_rng(seed)
    xs = state.sample_feasible(rng, params, n_states)
    skew_j = skew_jd = sym_r = sym_rd = 0.0
    for i, x in enumerate(xs):
        aux = model.aux_coefficients(x, params)
        st = ph_core.build_structure(aux, gains, x, x_d, params)
        j = st.j.copy()
        if inject_skew_error and i == 0:
            j[0, -2] = -j[0, -2]
        skew_j = max(skew_j, ph_core.skew_residual(j))
        skew_jd = max(skew_jd, ph_core.skew_residual(st.j_d if not
                                                     (inject_skew_error and i == 0)
                                                     else j + st.j_a))
        sym_r = max(sym_r, ph_core.sym_residual(st.r))
        sym_rd = max(sym_rd, ph_core.sym_residual(st.r_d))

    n_fact = min(n_states, max(100, n_states // 10))
    zeta = model.disturbance(xs[0], split, params)   # state independent
    kvec = gains.energy.vector(params.n_seg)
    fact = 0.0
    for x in xs[:n_fact]:
        u = rng.uniform(0.0, 1.0, 2)
        aux = model.aux_coefficients(x, params)
        st = ph_core.build_structure(aux, gains, x, x_d, params)
        lhs = (st.j - st.r) @ (kvec * x) + st.g @ u + zeta
        rhs = model.dynamics(x, u, split, params)
        rel = float(np.max(np.abs(lhs - rhs))) / max(1.0, float(np.max(np.abs(rhs))))
        fact = max(fact, rel)

    return [
        CheckResult("skew_residual_j_max", skew_j, SKEW_TOL, skew_j <= SKEW_TOL),
        CheckResult("skew_residual_jd_max", skew_jd, SKEW_TOL, skew_jd <= SKEW_TOL),
        CheckResult("sym_residual_r_max", sym_r, SYM_TOL, sym_r <= SYM_TOL),
        CheckResult("sym_residual_rd_max", sym_rd, SYM_TOL, sym_rd <= SYM_TOL),
        CheckResult("factorization_rel_max", fact, FACT_TOL, fact <= FACT_TOL),
    ]


def gradient_checks(params: StackParams, gains, phase, n_states: int,
                    seed: int) -> list[CheckResult]:
    """Central-difference agreement of grad H and the shaped gradient."""
    rng = np.random.default_rng(seed)
    kvec = gains.energy.vector(params.n_seg)
    worst_h = 0.0
    worst_a = 0.0
    for _ in range(n_states):
        x = phase.x_d * (1.0 + rng.uniform(-0.002, 0.002, phase.x_d.shape[0]))
        gh = ph_core.grad_hamiltonian(x, kvec)
        _, om = controller.shaped_energy(x, phase, gains, params)
        for j in range(x.shape[0]):
            h = max(1.0, 1e-6 * abs(x[j]))
            xp = x.copy()
            xm = x.copy()
            xp[j] += h
            xm[j] -= h
            fd_h = (ph_core.hamiltonian(xp, kvec)
                    - ph_core.hamiltonian(xm, kvec)) / (2.0 * h)
            fd_a = (controller.shaped_energy(xp, phase, gains, params)[0]
                    - controller.shaped_energy(xm, phase, gains, params)[0]) / (2.0 * h)
            worst_h = max(worst_h, abs(fd_h - gh[j]) / max(1.0, abs(gh[j])))
            worst_a = max(worst_a, abs(fd_a - om[j]) / max(1.0, abs(om[j])))
    return [
        CheckResult("grad_h_fd_rel_max", worst_h, GRAD_TOL, worst_h <= GRAD_TOL),
        CheckResult("grad_shaped_fd_rel_max", worst_a, GRAD_TOL, worst_a <= GRAD_TOL),
    ]


def condition_checks(params: StackParams, gains, phase) -> list[CheckResult]:
    def om_fn(xx):
        return controller.shaped_energy(xx, phase, gains, params)[1]

    rep = ph_core.check_conditions(phase.x_d, om_fn, gains.energy, params.n_seg)
    return [
        CheckResult("integrability_asym", rep.integrability_asym,
                    COND_ASYM_TOL, rep.integrability_asym <= COND_ASYM_TOL),
        CheckResult("equilibrium_residual", rep.equilibrium_residual,
                    COND_EQ_TOL, rep.equilibrium_residual <= COND_EQ_TOL),
        CheckResult("hessian_min_eig", rep.hessian_min_eig, 0.0,
                    rep.hessian_min_eig > 0.0),
    ]


def trajectory_rd_check(scn: sim.Scenario, gains, traj_seconds: float,
                        traj_dt: float) -> tuple[CheckResult, sim.Trace]:
    """Dissipation spectrum along a short closed-loop run."""
    short = dataclasses.replace(
        scn, duration=traj_seconds, dt=traj_dt, mode="state_feedback",
        record_every=max(1, int(round(0.02 / traj_dt))),
        current_profile=tuple((t0, v) for t0, v in scn.current_profile
                              if t0 <= traj_seconds) or scn.current_profile[:1],
        setpoint_profile=tuple(e for e in scn.setpoint_profile
                               if e[0] <= traj_seconds) or scn.setpoint_profile[:1])
    trace = sim.run_scenario(short)
    return rd_check_from_trace(trace), trace


def rd_check_from_trace(trace: sim.Trace) -> CheckResult:
    """min eig of R_d relative to its magnitude, over the recorded states."""
    rd = trace.col("rd_min_eig_rel")
    rd = rd[np.isfinite(rd)]
    min_rel = float(np.min(rd)) if rd.size else float("nan")
    ok = bool(rd.size) and min_rel >= -RD_EIG_TOL_REL
    return CheckResult("rd_min_eig_rel_on_trajectory", min_rel,
                       -RD_EIG_TOL_REL, ok)


def run_verify(scn: sim.Scenario, options: dict) -> tuple[list[CheckResult], bool]:
    """Full verification battery; returns the results and overall pass."""
    n_states = options.get("n_states", 1000)
    traj_seconds = options.get("traj_seconds", 4.0)
    traj_dt = options.get("traj_dt", 5e-5)
    inject = options.get("inject_skew_error", False)

    traj = sim.build_trajectory(scn)
    phase = traj.phases[0]
    results = structure_batch(scn.params, scn.gains, phase.x_d, phase.split,
                              n_states, scn.seed, inject_skew_error=inject)
    results += gradient_checks(scn.params, scn.gains, phase,
                               n_states=50, seed=scn.seed + 1)
    results += condition_checks(scn.params, scn.gains, phase)
    rd_res, _ = trajectory_rd_check(scn, scn.gains, traj_seconds, traj_dt)
    results.append(rd_res)
    return results, all(r.ok for r in results)
