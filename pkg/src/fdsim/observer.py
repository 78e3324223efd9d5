"""High-order sliding-mode state observer and output-feedback control.

Only the outlet-segment and manifold total pressures are measured.  The
observer integrates a full model copy driven by the applied inputs and
the known disturbance, plus a correction ``l_ob(x_hat) nu`` where

* ``nu`` comes from a third-order robust exact differentiator tracking
  each output innovation and its first three time derivatives, and
* ``l_ob`` is obtained by inverting the stacked gradients of the output
  derivative chain (orders 0..3) so the correction acts through the
  highest-derivative rows.

The differentiator slew is bounded by a per-channel Lipschitz budget L;
with a modest budget the correction stays gentle and the model copy's
contraction does the bulk of the convergence, which is the intended
operating style at fixed-step integration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels, controller, model, ph_core, state
from .errors import DomainError
from .params import CurrentSplit, StackParams

__all__ = [
    "ObserverState", "ObserverGainReport", "output_derivatives",
    "observer_gain", "differentiator_step", "observer_step",
    "output_feedback_control", "lipschitz_probe", "LipschitzReport",
    "gain_nonsingular_fraction", "RED_LAMBDAS",
]

# slope coefficients of the arbitrary-order exact differentiator, innermost
# (highest derivative) first
RED_LAMBDAS = (1.1, 1.5, 2.0, 3.0)


@dataclass
class ObserverState:
    """Full-state estimate plus per-channel differentiator internals."""

    x_hat: np.ndarray
    diff: np.ndarray                    # (2, 4): e0..e3 per output channel
    alpha: np.ndarray                   # correction scale per channel
    lip: np.ndarray                     # differentiator slew budget per channel
    projected: bool = False             # estimate was pulled back to feasibility
    gain_fault: bool = False

    @classmethod
    def initial(cls, x_hat: np.ndarray, alpha=(0.1, 1.0), lip=(1e4, 1e4)):
        return cls(x_hat=np.array(x_hat, dtype=float), diff=np.zeros((2, 4)),
                   alpha=np.asarray(alpha, dtype=float),
                   lip=np.asarray(lip, dtype=float))


def output_derivatives(x: np.ndarray, u: np.ndarray, split: CurrentSplit,
                       params: StackParams, order: int = 3) -> np.ndarray:
    """Measured outputs and their time derivatives along the frozen-input flow.

    Returns an (order+1, 2) array; row k holds the k-th derivative of
    (outlet pressure, manifold pressure).
    """
    if not (0 <= order <= 3):
        raise DomainError(f"output_derivatives: order must be in 0..3, got {order}")
    consts = model.pack_plant(split, params)
    x = np.ascontiguousarray(x, dtype=float)
    full = _kernels.lie_derivs(x, float(u[0]), float(u[1]), *consts)
    return full[:order + 1]


@dataclass
class ObserverGainReport:
    """Stacked output-derivative gradients and the correction gain."""

    jacobian_stack: np.ndarray
    condition_number: float
    l_ob: np.ndarray | None
    ok: bool
    reason: str = ""


def observer_gain(x_hat: np.ndarray, u: np.ndarray, split: CurrentSplit,
                  params: StackParams, cond_cap: float = 1e12) -> ObserverGainReport:
    """Correction gain: the stack inverse applied to the highest-order rows.

    The stack rows span ten orders of magnitude, so the condition number is
    reported for the row-equilibrated stack; the solve is followed by
    iterative refinement so the multiply-back residual stays near machine
    precision.
    """
    consts = model.pack_plant(split, params)
    x_hat = np.ascontiguousarray(x_hat, dtype=float)
    stack = _kernels.gain_stack(x_hat, float(u[0]), float(u[1]), *consts)
    dim = stack.shape[1]

    row_norms = np.linalg.norm(stack, axis=1)
    if np.any(row_norms == 0.0) or not np.all(np.isfinite(stack)):
        return ObserverGainReport(stack, float("inf"), None, False,
                                  "degenerate derivative stack")
    eq = stack / row_norms[:, None]
    cond = float(np.linalg.cond(eq))
    if not math.isfinite(cond) or cond > cond_cap:
        return ObserverGainReport(stack, cond, None, False,
                                  f"stack condition number {cond:.3e} exceeds cap")

    sel = np.zeros((8, 2))
    sel[6, 0] = 1.0
    sel[7, 1] = 1.0
    if dim == 8:
        rhs = sel / row_norms[:, None]
        l_ob = np.linalg.solve(eq, rhs)
        for _ in range(2):
            resid = sel - stack @ l_ob
            l_ob += np.linalg.solve(eq, resid / row_norms[:, None])
    else:
        l_ob, *_ = np.linalg.lstsq(stack, sel, rcond=None)
    if not np.all(np.isfinite(l_ob)):
        return ObserverGainReport(stack, cond, None, False, "non-finite gain")
    return ObserverGainReport(stack, cond, l_ob, True)


def _red_channel(z: np.ndarray, f: float, lip: float, dt: float,
                 lam=RED_LAMBDAS) -> np.ndarray:
    """One Euler step of the third-order robust exact differentiator."""
    l0, l1, l2, l3 = lam
    d0 = z[0] - f
    v0 = -l3 * lip ** 0.25 * abs(d0) ** 0.75 * np.sign(d0) + z[1]
    d1 = z[1] - v0
    v1 = -l2 * lip ** (1.0 / 3.0) * abs(d1) ** (2.0 / 3.0) * np.sign(d1) + z[2]
    d2 = z[2] - v1
    v2 = -l1 * math.sqrt(lip) * math.sqrt(abs(d2)) * np.sign(d2) + z[3]
    d3 = z[3] - v2
    v3 = -l0 * lip * np.sign(d3)
    return z + dt * np.array([v0, v1, v2, v3])


def sliding_correction(diff: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Correction pair from the differentiator estimates.

    The nested homogeneous form keeps the correction continuous in the
    estimates; sign(0) is taken as 0.
    """
    nu = np.empty(2)
    for i in range(2):
        e0, e1, e2, e3 = diff[i]
        inner = np.sign(e1 + 0.5 * abs(e0) ** 0.75 * np.sign(e0))
        mid = np.sign(e2 + (e1 ** 4 + abs(e0) ** 3) ** (1.0 / 6.0) * inner)
        nu[i] = -alpha[i] * (e3 + 3.0 * (e2 ** 6 + e1 ** 4 + abs(e0) ** 3)
                             ** (1.0 / 12.0) * mid)
    return nu


def differentiator_step(y_err: np.ndarray, obs: ObserverState,
                        dt: float) -> tuple[np.ndarray, ObserverState]:
    """Advance the output-error differentiators and emit the correction."""
    if dt <= 0.0:
        raise DomainError(f"differentiator_step: dt must be > 0, got {dt}")
    if np.any(obs.alpha <= 0.0) or np.any(obs.lip <= 0.0):
        raise DomainError("differentiator_step: alpha and lip must be > 0")
    diff = np.empty_like(obs.diff)
    for i in range(2):
        diff[i] = _red_channel(obs.diff[i], float(y_err[i]), float(obs.lip[i]), dt)
    nu = sliding_correction(diff, obs.alpha)
    return nu, replace(obs, diff=diff)


def observer_step(obs: ObserverState, u: np.ndarray, y: np.ndarray,
                  split: CurrentSplit, params: StackParams, dt: float,
                  gain: ObserverGainReport | None = None,
                  use_rk4: bool = True) -> ObserverState:
    """One estimate update: model copy plus held sliding correction.

    The model copy already contains the known disturbance, so the step
    reduces to the plant step when the correction is zero.
    """
    if dt <= 0.0:
        raise DomainError(f"observer_step: dt must be > 0, got {dt}")
    n = params.n_seg
    c = state.output_matrix(n)
    y_err = np.asarray(y, dtype=float) - c @ obs.x_hat
    nu, obs2 = differentiator_step(y_err, obs, dt)

    if gain is None:
        gain = observer_gain(obs.x_hat, u, split, params)
    if gain.ok:
        forcing = gain.l_ob @ nu
        gain_fault = False
    else:
        forcing = np.zeros(2 * n + 2)
        gain_fault = True

    consts = model.pack_plant(split, params)
    step = _kernels.rk4_step_forced if use_rk4 else _kernels.euler_step_forced
    x_new = step(np.ascontiguousarray(obs2.x_hat), float(u[0]), float(u[1]),
                 *consts, np.ascontiguousarray(forcing), dt)

    projected = False
    for k in range(n):
        ih, it = state.idx_h2(k), state.idx_total(k)
        if x_new[ih] < 0.0:
            x_new[ih] = 0.0
            projected = True
        if x_new[ih] > x_new[it]:
            x_new[ih] = x_new[it]
            projected = True
    ih, it = state.idx_sm_h2(n), state.idx_sm(n)
    if x_new[ih] < 0.0:
        x_new[ih] = 0.0
        projected = True
    if x_new[ih] > x_new[it]:
        x_new[ih] = x_new[it]
        projected = True

    return replace(obs2, x_hat=x_new, projected=projected, gain_fault=gain_fault)


def output_feedback_control(obs: ObserverState, y: np.ndarray,
                            phase: controller.TrajectoryPhase,
                            gains: controller.ControllerGains,
                            params: StackParams) -> controller.ControlOutput:
    """State-feedback law evaluated on the estimate, damped by measured y."""
    return controller.state_feedback_control(obs.x_hat, phase, np.asarray(y),
                                             gains, params)


@dataclass
class LipschitzReport:
    rho1: float        # drift Lipschitz estimate
    delta_a: float     # assigned-part output-projected estimate
    delta_d: float     # shaped-part output-projected estimate
    k_l: float | None = None   # measured correction bound, if a trace was given
    tuning_ok: bool | None = None

    def as_lines(self) -> list[str]:
        out = [f"lipschitz_rho1 = {self.rho1:.6e}",
               f"lipschitz_delta_a = {self.delta_a:.6e}",
               f"lipschitz_delta_d = {self.delta_d:.6e}"]
        if self.k_l is not None:
            out.append(f"lipschitz_k_l = {self.k_l:.6e}")
            out.append(f"lipschitz_tuning_ok = {self.tuning_ok}")
        return out


def lipschitz_probe(params: StackParams, gains, phase, lo: np.ndarray,
                    hi: np.ndarray, samples: int = 200, seed: int = 0,
                    pi_fn=None, correction_samples=None) -> LipschitzReport:
    """Empirical Lipschitz constants of the drift and the shaped terms.

    Pairs are drawn uniformly in the box [lo, hi]; the estimates are the
    largest observed difference ratios.  ``correction_samples`` may supply
    (||l nu||, ||x_err||) pairs from a run to bound the correction gain
    k_l, which is flagged when it does not dominate rho1.
    """
    rng = np.random.default_rng(seed)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = params.n_seg
    c = state.output_matrix(n)

    if pi_fn is None:
        def pi_fn(xx):
            return model.aux_coefficients(xx, params).coeff_matrix @ xx

    def pi_a(xx):
        aux = model.aux_coefficients(xx, params)
        s = ph_core.build_structure(aux, gains, xx, phase.x_d, params)
        k = gains.energy.vector(n)
        return (s.j_a - s.r_a) @ (k * xx)

    def pi_d(xx):
        aux = model.aux_coefficients(xx, params)
        s = ph_core.build_structure(aux, gains, xx, phase.x_d, params)
        _, om = controller.shaped_energy(xx, phase, gains, params)
        return (s.j_d - s.r_d) @ om

    rho1 = 0.0
    d_a = 0.0
    d_d = 0.0
    for _ in range(samples):
        xa = rng.uniform(lo, hi)
        xb = rng.uniform(lo, hi)
        dn = float(np.linalg.norm(xa - xb))
        if dn < 1e-9:
            continue
        rho1 = max(rho1, float(np.linalg.norm(pi_fn(xa) - pi_fn(xb))) / dn)
        if gains is not None and phase is not None:
            d_a = max(d_a, float(np.linalg.norm(c @ (pi_a(xa) - pi_a(xb)))) / dn)
            try:
                d_d = max(d_d, float(np.linalg.norm(c @ (pi_d(xa) - pi_d(xb)))) / dn)
            except Exception:
                pass

    k_l = None
    ok = None
    if correction_samples is not None and len(correction_samples):
        ratios = [cn / max(1e-12, en) for cn, en in correction_samples]
        k_l = float(np.max(ratios))
        ok = k_l > rho1
    return LipschitzReport(rho1=rho1, delta_a=d_a, delta_d=d_d,
                           k_l=k_l, tuning_ok=ok)


def gain_nonsingular_fraction(params: StackParams, split: CurrentSplit,
                              u: np.ndarray, n_draws: int = 1000,
                              seed: int = 0, cond_cap: float = 1e12,
                              box_hi: float = 2e7) -> float:
    """Fraction of random states whose derivative stack is invertible.

    States are drawn in [0, box_hi] with the measured pressures kept small
    relative to the box, mirroring the randomized well-posedness check of
    the gain construction.
    """
    rng = np.random.default_rng(seed)
    n = params.n_seg
    ok = 0
    for _ in range(n_draws):
        x = np.empty(2 * n + 2)
        for k in range(n - 1):
            tot = rng.uniform(1e3, box_hi)
            x[state.idx_total(k)] = tot
            x[state.idx_h2(k)] = rng.uniform(0.05, 0.98) * tot
        tot_n = rng.uniform(1e3, 2e6)
        x[state.idx_total(n - 1)] = tot_n
        x[state.idx_h2(n - 1)] = rng.uniform(0.05, 0.98) * tot_n
        tot_sm = rng.uniform(1e3, 2e6)
        x[state.idx_sm(n)] = tot_sm
        x[state.idx_sm_h2(n)] = rng.uniform(0.05, 0.98) * tot_sm
        rep = observer_gain(x, u, split, params, cond_cap=cond_cap)
        ok += int(rep.ok)
    return ok / n_draws
