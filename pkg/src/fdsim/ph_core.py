"""Structured energy form of the pressure dynamics.

With quadratic stored energy H(x) = 1/2 sum k_i x_i^2, the coefficient
matrix A of the dynamics splits into an antisymmetric interconnection part
J and a symmetric dissipation part R so that

    xdot = (J - R) grad H + G u + zeta.

Control design augments the pair with an assigned interconnection J_a and
assigned damping R_a; J_d = J + J_a and R_d = R + R_a describe the target
closed loop.  This module builds all six matrices and provides the
numerical checks used to audit the construction along trajectories:
skew-symmetry, dissipation eigenvalues, the matching residual, the
design conditions at the target equilibrium, and per-segment passivity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model, state
from .errors import SingularityError, TraceFormatError
from .params import StackParams

__all__ = [
    "EnergyCoeffs", "PHStructure", "hamiltonian", "grad_hamiltonian",
    "build_structure", "matching_residual", "check_conditions",
    "ConditionReport", "segment_passivity", "PassivityReport",
    "skew_residual", "sym_residual",
]


@dataclass(frozen=True)
class EnergyCoeffs:
    """Quadratic energy weights; per-segment weights are shared."""

    k_seg_h2: float = 1.0
    k_seg: float = 1.0
    k_sm_h2: float = 1.0
    k_sm: float = 1.0

    def __post_init__(self):
        if min(self.k_seg_h2, self.k_seg, self.k_sm_h2, self.k_sm) <= 0.0:
            raise ValueError("energy weights must be strictly positive")

    def vector(self, n_seg: int) -> np.ndarray:
        k = np.empty(2 * n_seg + 2)
        for j in range(n_seg):
            k[state.idx_h2(j)] = self.k_seg_h2
            k[state.idx_total(j)] = self.k_seg
        k[state.idx_sm_h2(n_seg)] = self.k_sm_h2
        k[state.idx_sm(n_seg)] = self.k_sm
        return k


def hamiltonian(x: np.ndarray, k: np.ndarray) -> float:
    """Stored energy 1/2 sum k_i x_i^2 (>= 0, zero only at the origin)."""
    x = np.asarray(x, dtype=float)
    return 0.5 * float(np.dot(k * x, x))


def grad_hamiltonian(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    return k * np.asarray(x, dtype=float)


@dataclass(frozen=True)
class PHStructure:
    """Interconnection/dissipation matrices, input map and output selector."""

    j: np.ndarray
    r: np.ndarray
    j_a: np.ndarray
    r_a: np.ndarray
    j_d: np.ndarray
    r_d: np.ndarray
    g: np.ndarray
    c: np.ndarray


def skew_residual(m: np.ndarray) -> float:
    """max |M + M^T| relative to max(1, ||M||_inf)."""
    num = float(np.max(np.abs(m + m.T)))
    den = max(1.0, float(np.max(np.abs(m))))
    return num / den


def sym_residual(m: np.ndarray) -> float:
    num = float(np.max(np.abs(m - m.T)))
    den = max(1.0, float(np.max(np.abs(m))))
    return num / den


def build_structure(aux: model.AuxCoeffs, gains, x: np.ndarray,
                    x_d: np.ndarray, params: StackParams) -> PHStructure:
    """Split the coefficient matrix and attach the assigned matrices.

    ``gains`` provides the damping-injection factors (k_n1, k_sm1) and the
    energy weights.  The assigned damping entries use the target outputs
    from ``x_d`` and the current measured outputs from ``x``.
    """
    n = params.n_seg
    k = gains.energy.vector(n)
    a_scaled = aux.coeff_matrix / k[np.newaxis, :]
    j = 0.5 * (a_scaled - a_scaled.T)
    r = -0.5 * (a_scaled + a_scaled.T)

    dim = 2 * n + 2
    itn = state.idx_total(n - 1)
    i_smh, i_sm = state.idx_sm_h2(n), state.idx_sm(n)

    j_a = np.zeros((dim, dim))
    a76 = 0.5 * aux.a31 if aux.a31 is not None else 0.0
    a87 = 0.5 * aux.a21
    j_a[itn, i_smh] = -a76
    j_a[i_smh, itn] = a76
    j_a[i_smh, i_sm] = -a87
    j_a[i_sm, i_smh] = a87

    g = model.input_map(x, params)

    den_n = gains.energy.k_seg * x[itn]
    den_sm = gains.energy.k_sm * x[i_sm]
    if abs(den_n) < 1e-300 or abs(den_sm) < 1e-300:
        raise SingularityError("build_structure: assigned-damping denominator is zero")
    k66 = -g[itn, 0] * gains.k_n1 * x_d[itn] / den_n
    k88 = params.g_sm_ht * gains.k_sm1 * x_d[i_sm] / den_sm
    r_a = np.zeros((dim, dim))
    r_a[itn, itn] = k66
    r_a[i_sm, i_sm] = k88

    return PHStructure(j=j, r=r, j_a=j_a, r_a=r_a, j_d=j + j_a, r_d=r + r_a,
                       g=g, c=state.output_matrix(n))


def matching_residual(x: np.ndarray, omega: np.ndarray, structure: PHStructure,
                      zeta: np.ndarray, sigma: np.ndarray,
                      energy: EnergyCoeffs | None = None,
                      n_seg: int | None = None) -> np.ndarray:
    """(J_d - R_d) Omega + (J_a - R_a) grad H - G sigma - zeta.

    Vanishes at a target equilibrium when the shaped-energy gradient and
    the control are mutually consistent.
    """
    if n_seg is None:
        n_seg = (structure.j.shape[0] - 2) // 2
    k = (energy or EnergyCoeffs()).vector(n_seg)
    grad_h = grad_hamiltonian(x, k)
    return ((structure.j_d - structure.r_d) @ omega
            + (structure.j_a - structure.r_a) @ grad_h
            - structure.g @ sigma - zeta)


@dataclass
class ConditionReport:
    """Numerical audit of the design conditions at the target equilibrium."""

    integrability_asym: float      # relative asymmetry of the gradient Jacobian
    equilibrium_residual: float    # ||Omega(x_d) + grad H(x_d)|| / ||grad H(x_d)||
    hessian_min_eig: float         # min eig of (grad Omega + Hess H)(x_d)
    strict: bool = True            # hessian_min_eig strictly positive

    def as_lines(self) -> list[str]:
        return [
            f"integrability_asym = {self.integrability_asym:.6e}",
            f"equilibrium_residual = {self.equilibrium_residual:.6e}",
            f"hessian_min_eig = {self.hessian_min_eig:.6e}",
            f"hessian_condition_strict = {self.strict}",
        ]


def check_conditions(x_d: np.ndarray, omega_fn, energy: EnergyCoeffs,
                     n_seg: int) -> ConditionReport:
    """Check integrability, equilibrium assignment and the curvature condition.

    ``omega_fn`` maps a state vector to the shaped-energy gradient.  The
    Jacobian is formed by central differences around ``x_d``.
    """
    x_d = np.asarray(x_d, dtype=float)
    dim = x_d.shape[0]
    jac = np.empty((dim, dim))
    for jcol in range(dim):
        h = max(1.0, 1e-6 * abs(x_d[jcol]))
        xp = x_d.copy()
        xm = x_d.copy()
        xp[jcol] += h
        xm[jcol] -= h
        jac[:, jcol] = (omega_fn(xp) - omega_fn(xm)) / (2.0 * h)

    scale = max(1.0, float(np.max(np.abs(jac))))
    asym = float(np.max(np.abs(jac - jac.T))) / scale

    k = energy.vector(n_seg)
    grad_h = grad_hamiltonian(x_d, k)
    num = float(np.linalg.norm(omega_fn(x_d) + grad_h))
    den = max(1e-300, float(np.linalg.norm(grad_h)))
    eq_res = num / den

    hess = 0.5 * (jac + jac.T) + np.diag(k)
    min_eig = float(np.min(np.linalg.eigvalsh(hess)))
    return ConditionReport(integrability_asym=asym, equilibrium_residual=eq_res,
                           hessian_min_eig=min_eig, strict=min_eig > 0.0)


@dataclass
class PassivityReport:
    """Per-segment port-power audit over a trace."""

    n_samples: int
    n_ordered: int                 # samples with strictly decreasing totals
    ordering_fraction: float       # of ordered samples with decreasing port power
    storage_violation_max: float   # max of dH_si - s_i over segments/samples
    total_violation_max: float     # max of dH - (sum s_i + s_sm)
    ok: bool = field(default=False)

    def as_lines(self) -> list[str]:
        return [
            f"passivity_samples = {self.n_samples}",
            f"passivity_ordered_samples = {self.n_ordered}",
            f"passivity_ordering_fraction = {self.ordering_fraction:.6f}",
            f"passivity_storage_violation_max = {self.storage_violation_max:.6e}",
            f"passivity_total_violation_max = {self.total_violation_max:.6e}",
        ]


def segment_passivity(trace, ordering_threshold: float = 0.99) -> PassivityReport:
    """Evaluate the per-segment supply-rate inequalities on a recorded run.

    Works from trace columns alone: per-segment port power (s_seg*),
    reaction power (react_p*), total stored-energy rate (dH) and the
    pressure columns for the decreasing-pressure ordering filter.
    """
    names = trace.columns
    n_seg = trace.n_seg
    needed = ([f"s_seg{k + 1}" for k in range(n_seg)]
              + [f"react_p{k + 1}" for k in range(n_seg)] + ["s_sm", "dH"])
    for col in needed:
        if col not in names:
            raise TraceFormatError(f"trace is missing required column {col!r}")

    supplies = np.stack([trace.col(f"s_seg{k + 1}") for k in range(n_seg)], axis=1)
    react_power = np.stack([trace.col(f"react_p{k + 1}") for k in range(n_seg)], axis=1)
    s_sm = trace.col("s_sm")
    dh = trace.col("dH")
    totals = np.stack([trace.col(f"x_a{k + 1}") for k in range(n_seg)], axis=1)

    n_samples = supplies.shape[0]
    ordered = np.all(totals[:, :-1] > totals[:, 1:], axis=1)
    n_ordered = int(np.count_nonzero(ordered))
    if n_ordered:
        dec = np.all(supplies[ordered][:, :-1] > supplies[ordered][:, 1:], axis=1)
        ordering_fraction = float(np.count_nonzero(dec)) / n_ordered
    else:
        ordering_fraction = float("nan")

    # each segment's stored-energy rate is its port power plus the
    # (non-positive) reaction power, so dH_si <= s_i holds sample-wise
    dh_seg = supplies + react_power
    tol = 1e-9 * np.maximum(1.0, np.abs(supplies))
    storage_violation = float(np.max(dh_seg - supplies - tol)) if n_samples else float("nan")

    total_supply = supplies.sum(axis=1) + s_sm
    tol_total = 1e-9 * np.maximum(1.0, np.abs(dh))
    total_violation = float(np.max(dh - total_supply - tol_total)) if n_samples else float("nan")

    rep = PassivityReport(
        n_samples=n_samples, n_ordered=n_ordered,
        ordering_fraction=ordering_fraction,
        storage_violation_max=storage_violation,
        total_violation_max=total_violation)
    rep.ok = (ordering_fraction >= ordering_threshold
              and storage_violation <= 0.0 and total_violation <= 0.0)
    return rep
