"""Plant model of the hydrogen delivery loop.

Gas moves from the tank into the supply manifold, through a chain of
lumped anode segments, and out through a bleed orifice; a blower returns
outlet gas to the manifold.  Each volume obeys the ideal-gas pressure
balance dP/dt = (RT/V) * (net molar flow), resolved per species (H2, N2),
with the electrochemical reaction consuming hydrogen and the membrane
exchanging hydrogen (out) and nitrogen (in) with the cathode.

Two equivalent formulations coexist on purpose:

* :func:`dynamics` assembles the balances directly from the flow
  primitives (the route the simulator integrates), and
* :func:`aux_coefficients` produces the state-dependent coefficient
  matrix whose symmetric/antisymmetric parts are the structured form
  used by control design.

Their agreement is a regression guard on the whole derivation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels, state
from .errors import DomainError, SingularityError
from .params import CurrentSplit, StackParams

__all__ = [
    "orifice_flow", "reaction_rate", "crossover_rate", "cathode_n2_fraction",
    "blower_flow", "blower_mass_flow", "AuxCoeffs", "aux_coefficients",
    "disturbance", "input_map", "dynamics", "mass_balance_residual",
    "pack_plant",
]


def orifice_flow(p_up, p_down, p_species_up, p_total_up, area, molar_mass,
                 alpha) -> float:
    """Molar flow of one species through a linear orifice (mol/s).

    The species fraction is always taken on the nominal upstream side;
    the sign of the flow follows the pressure differential.
    """
    vals = (p_up, p_down, p_species_up, p_total_up, area, molar_mass, alpha)
    if not all(math.isfinite(v) for v in vals):
        raise DomainError("orifice_flow: non-finite input")
    if p_total_up <= 0.0:
        raise DomainError(f"orifice_flow: upstream total pressure must be > 0, got {p_total_up}")
    return alpha * area / molar_mass * (p_up - p_down) * (p_species_up / p_total_up)


def reaction_rate(i_k: float, n_fc: int, faraday: float) -> float:
    """Hydrogen consumption of one segment by proton balance (mol/s)."""
    if i_k < 0.0:
        raise DomainError(f"reaction_rate: current must be >= 0, got {i_k}")
    return n_fc * i_k / (2.0 * faraday)


def crossover_rate(t_k: float, n_fc: int, k_cr: float, p_high: float,
                   p_low: float) -> float:
    """Membrane permeation rate driven by a partial-pressure differential."""
    if not (0.0 < t_k <= 1.0):
        raise DomainError(f"crossover_rate: volume proportion must be in (0,1], got {t_k}")
    return t_k * n_fc * k_cr * (p_high - p_low)


def cathode_n2_fraction(i_total: float, params: StackParams) -> float:
    """Nitrogen fraction of the (dry) cathode gas at the given stack current.

    The current term carries no Faraday factor: the fraction balances the
    orifice through-flow mass rate alpha*A_or*(P_c - P_0) against the
    reaction-bound mass rate N_fc*I*M/(4F), both scaled by 4F.
    """
    f = params.faraday
    base = 4.0 * f * params.alpha * params.a_or * (params.p_c - params.p_0)
    den = base - 0.79 * params.n_fc * i_total * (params.m_n2 - params.m_o2)
    if abs(den) < 1e-12 * max(1.0, abs(base)):
        raise SingularityError("cathode_n2_fraction: denominator crossed zero")
    num = (3.16 * f * params.alpha * params.a_or * (params.p_c - params.p_0)
           * (1.0 - params.x_c_h2o)
           + 0.79 * params.n_fc * i_total
           * (params.m_o2 + (params.m_h2o - params.m_o2) * params.x_c_h2o))
    frac = num / den
    if not math.isfinite(frac):
        raise SingularityError("cathode_n2_fraction: non-finite result")
    return frac


def cathode_n2_pressure(i_total: float, params: StackParams) -> float:
    """Nitrogen partial pressure on the cathode side (Pa)."""
    return cathode_n2_fraction(i_total, params) * (params.p_c - params.p_v)


def blower_mass_flow(p_ratio: float, params: StackParams,
                     t_bl_in: float | None = None,
                     u_tip: float | None = None) -> float:
    """Blower mass flow at full command (kg/s) for the given pressure ratio."""
    t_in = params.t_bl_in if t_bl_in is None else t_bl_in
    tip = params.u_tip if u_tip is None else u_tip
    if t_in <= 0.0 or tip <= 0.0:
        raise DomainError("blower_mass_flow: inlet temperature and tip speed must be > 0")
    mach = tip / math.sqrt(params.gamma * params.r_gas * t_in)
    phi_max = float(np.polynomial.polynomial.polyval(mach, params.blower_a))
    beta_shape = float(np.polynomial.polynomial.polyval(mach, params.blower_b))
    psi_max = float(np.polynomial.polynomial.polyval(mach, params.blower_c))
    if psi_max == 0.0:
        raise SingularityError("blower_mass_flow: maximum head coefficient is zero")
    head = (params.cp_gas * t_in
            * (p_ratio ** ((params.gamma - 1.0) / params.gamma) - 1.0)
            / (0.5 * tip * tip))
    phi = phi_max * (1.0 - math.exp(beta_shape * (head / psi_max - 1.0)))
    return phi * params.rho_bl * (math.pi / 4.0) * params.d_bl ** 2 * tip


def blower_flow(u_bl: float, t_bl_in: float, p_ratio: float, u_tip: float,
                params: StackParams) -> float:
    """Recirculated molar flow commanded by the blower (mol/s)."""
    if not (0.0 <= u_bl <= 1.0):
        raise DomainError(f"blower_flow: command must be in [0,1], got {u_bl}")
    w = blower_mass_flow(p_ratio, params, t_bl_in=t_bl_in, u_tip=u_tip)
    return u_bl * w / params.m_h2


@dataclass(frozen=True)
class AuxCoeffs:
    """State-dependent coefficients of the pressure dynamics.

    ``coeff_matrix`` is the full (2n+2)x(2n+2) matrix A with
    xdot = A x + G u + zeta.  The named entries follow the canonical
    three-segment layout; middle-segment names (a31..a46) refer to the
    first interior segment and are None when n_seg == 2.
    """

    coeff_matrix: np.ndarray
    mu: np.ndarray          # per-segment RT/V (Pa/mol)
    mu_sm: float
    m_io: np.ndarray        # orifice coefficients, m_io[0] = manifold inlet
    m_bd: float
    rho: np.ndarray         # H2 permeation coefficients
    xi: np.ndarray          # N2 permeation coefficients
    a11: float = 0.0
    a17: float = 0.0
    a21: float = 0.0
    a22: float = 0.0
    a24: float = 0.0
    a28: float = 0.0
    a31: float | None = None
    a33: float | None = None
    a42: float | None = None
    a43: float | None = None
    a44: float | None = None
    a46: float | None = None
    a53: float = 0.0
    a55: float = 0.0
    a64: float = 0.0
    a65: float = 0.0
    a66: float = 0.0
    a77: float = 0.0
    a82: float = 0.0
    a88: float = 0.0


def aux_coefficients(x: np.ndarray, params: StackParams) -> AuxCoeffs:
    """Coefficient matrix of the pressure dynamics at state x.

    Raises :class:`SingularityError` if any total pressure is zero, naming
    the offending node.
    """
    n = params.n_seg
    x = np.asarray(x, dtype=float)
    names = state.column_names(n)
    for k in range(n):
        if x[state.idx_total(k)] == 0.0:
            raise SingularityError(f"aux_coefficients: total pressure {names[state.idx_total(k)]} is zero")
    if x[state.idx_sm(n)] == 0.0:
        raise SingularityError("aux_coefficients: total pressure x_sm is zero")

    mu = params.mu_seg
    mu_sm = params.mu_sm
    m_io = np.full(n, params.m_supply)
    m_bd = params.m_bleed
    rho = params.rho_cr
    xi = params.xi_cr
    dim = 2 * n + 2
    a = np.zeros((dim, dim))
    i_smh, i_sm = state.idx_sm_h2(n), state.idx_sm(n)
    x_sm = x[i_sm]

    for k in range(n):
        ih, it = state.idx_h2(k), state.idx_total(k)
        xk = x[it]
        m_up = m_io[k]                     # orifice feeding this segment
        if k < n - 1:
            m_dn = m_io[k + 1]
            x_next = x[state.idx_total(k + 1)]
            dn_h2 = m_dn * (1.0 - x_next / xk)       # downstream orifice, H2 share
            dn_tot = m_dn
        else:
            dn_h2 = m_bd * (1.0 - params.p_0 / xk)   # bleed with ambient backpressure
            dn_tot = m_bd * (1.0 - params.p_0 / xk)

        # hydrogen partial pressure row
        a[ih, ih] = -(mu[k] * rho[k] + mu[k] * dn_h2)
        if k == 0:
            a[ih, i_smh] = mu[k] * m_up * (1.0 - x[it] / x_sm)
        else:
            x_prev = x[state.idx_total(k - 1)]
            a[ih, state.idx_h2(k - 1)] = mu[k] * m_up * (1.0 - xk / x_prev)

        # total pressure row
        a[it, ih] = mu[k] * (xi[k] - rho[k])
        a[it, it] = -mu[k] * (m_up + xi[k] + dn_tot)
        if k == 0:
            a[it, i_sm] = mu[k] * m_up
        else:
            a[it, state.idx_total(k - 1)] = mu[k] * m_up
        if k < n - 1:
            a[it, state.idx_total(k + 1)] = mu[k] * m_io[k + 1]

    a[i_smh, i_smh] = -mu_sm * m_io[0] * (1.0 - x[1] / x_sm)
    a[i_sm, 1] = mu_sm * m_io[0]
    a[i_sm, i_sm] = -mu_sm * m_io[0]

    named = {}
    named["a11"] = a[0, 0]
    named["a17"] = a[0, i_smh]
    named["a21"] = a[1, 0]
    named["a22"] = a[1, 1]
    named["a24"] = a[1, 3]
    named["a28"] = a[1, i_sm]
    if n >= 3:
        named["a31"] = a[2, 0]
        named["a33"] = a[2, 2]
        named["a42"] = a[3, 1]
        named["a43"] = a[3, 2]
        named["a44"] = a[3, 3]
        named["a46"] = a[3, 5]
    ihn, itn = state.idx_h2(n - 1), state.idx_total(n - 1)
    named["a53"] = a[ihn, state.idx_h2(n - 2)]
    named["a55"] = a[ihn, ihn]
    named["a64"] = a[itn, state.idx_total(n - 2)]
    named["a65"] = a[itn, ihn]
    named["a66"] = a[itn, itn]
    named["a77"] = a[i_smh, i_smh]
    named["a82"] = a[i_sm, 1]
    named["a88"] = a[i_sm, i_sm]

    return AuxCoeffs(coeff_matrix=a, mu=mu, mu_sm=mu_sm, m_io=m_io, m_bd=m_bd,
                     rho=rho, xi=xi, **named)


def disturbance(x: np.ndarray, split: CurrentSplit, params: StackParams) -> np.ndarray:
    """Exogenous pressure-rate vector: reaction sinks plus permeation sources.

    The last two (manifold) entries are always zero.
    """
    n = params.n_seg
    mu = params.mu_seg
    xi = params.xi_cr
    pcn2pv = cathode_n2_pressure(split.i_total, params) + params.p_v
    zeta = np.zeros(2 * n + 2)
    for k in range(n):
        r = reaction_rate(split.i_seg[k], params.n_fc, params.faraday)
        zeta[state.idx_h2(k)] = -mu[k] * r
        zeta[state.idx_total(k)] = -mu[k] * r + mu[k] * xi[k] * pcn2pv
    return zeta


def input_map(x: np.ndarray, params: StackParams) -> np.ndarray:
    """Input matrix G: column 0 is the blower command, column 1 the tank valve.

    The blower removes gas from the outlet segment and delivers it to the
    manifold, so its outlet-segment entries are negative.
    """
    n = params.n_seg
    dim = 2 * n + 2
    ihn, itn = state.idx_h2(n - 1), state.idx_total(n - 1)
    i_smh, i_sm = state.idx_sm_h2(n), state.idx_sm(n)
    x_n = x[itn]
    if x_n <= 0.0:
        raise SingularityError("input_map: outlet segment total pressure must be > 0")
    w_molar = blower_mass_flow(x[i_sm] / x_n, params) / params.m_h2
    frac_h2 = x[ihn] / x_n
    mu_n = params.mu_seg[n - 1]
    g = np.zeros((dim, 2))
    g[ihn, 0] = -mu_n * w_molar * frac_h2
    g[itn, 0] = -mu_n * w_molar
    g[i_smh, 0] = params.mu_sm * w_molar * frac_h2
    g[i_sm, 0] = params.mu_sm * w_molar
    g[i_smh, 1] = params.g_sm_ht
    g[i_sm, 1] = params.g_sm_ht
    return g


def pack_plant(split: CurrentSplit, params: StackParams) -> tuple:
    """Constant tuple consumed by the JIT kernels (fixed current phase)."""
    n = params.n_seg
    react = np.array([reaction_rate(i, params.n_fc, params.faraday)
                      for i in split.i_seg])
    pcn2pv = cathode_n2_pressure(split.i_total, params) + params.p_v
    phi_max, beta_shape, psi_max = params.blower_map()
    head_coef = params.cp_gas * params.t_bl_in / (0.5 * params.u_tip ** 2)
    g_exp = (params.gamma - 1.0) / params.gamma
    w_coef = (params.rho_bl * (math.pi / 4.0) * params.d_bl ** 2
              * params.u_tip / params.m_h2)
    return (params.mu_seg, params.mu_sm, np.full(n, params.m_supply),
            params.m_bleed, params.rho_cr, params.xi_cr, react,
            params.eta_ht_m, params.p_0, pcn2pv, phi_max, beta_shape,
            psi_max, head_coef, g_exp, w_coef)


def dynamics(x: np.ndarray, u: np.ndarray, split: CurrentSplit,
             params: StackParams) -> np.ndarray:
    """Pressure-rate vector from the species-resolved flow balances.

    ``u`` is applied as given; the simulator clamps commands to [0,1]
    before calling the plant.
    """
    x = np.ascontiguousarray(x, dtype=float)
    n = params.n_seg
    names = state.column_names(n)
    for k in range(n):
        if x[state.idx_total(k)] <= 0.0:
            raise SingularityError(f"dynamics: {names[state.idx_total(k)]} must be > 0")
    if x[state.idx_sm(n)] <= 0.0:
        raise SingularityError("dynamics: x_sm must be > 0")
    consts = pack_plant(split, params)
    out = np.empty(2 * n + 2)
    _kernels.dynamics_core(x, float(u[0]), float(u[1]), *consts, out)
    return out


def mass_balance_residual(x: np.ndarray, params: StackParams) -> np.ndarray:
    """Node-wise |outflow of the upstream side - inflow of the downstream side|.

    Every internal node is fed by a single orifice whose flow expression is
    shared by both adjacent balances, so the residuals are zero up to
    floating-point noise; the function recomputes both sides independently
    as an audit.
    """
    n = params.n_seg
    res = np.empty(n)
    alpha = params.alpha
    # manifold -> segment 1
    up_t, up_h = x[state.idx_sm(n)], x[state.idx_sm_h2(n)]
    dn_t = x[state.idx_total(0)]
    f_h2 = orifice_flow(up_t, dn_t, up_h, up_t, params.a_ai, params.m_h2, alpha)
    f_n2 = orifice_flow(up_t, dn_t, up_t - up_h, up_t, params.a_ai, params.m_h2, alpha)
    g_h2 = orifice_flow(up_t, dn_t, up_h, up_t, params.a_ai, params.m_h2, alpha)
    g_n2 = orifice_flow(up_t, dn_t, up_t - up_h, up_t, params.a_ai, params.m_h2, alpha)
    res[0] = abs((f_h2 + f_n2) - (g_h2 + g_n2))
    for k in range(n - 1):
        up_t, up_h = x[state.idx_total(k)], x[state.idx_h2(k)]
        dn_t = x[state.idx_total(k + 1)]
        f_h2 = orifice_flow(up_t, dn_t, up_h, up_t, params.a_ai, params.m_h2, alpha)
        f_n2 = orifice_flow(up_t, dn_t, up_t - up_h, up_t, params.a_ai, params.m_h2, alpha)
        g_h2 = orifice_flow(up_t, dn_t, up_h, up_t, params.a_ai, params.m_h2, alpha)
        g_n2 = orifice_flow(up_t, dn_t, up_t - up_h, up_t, params.a_ai, params.m_h2, alpha)
        res[k + 1] = abs((f_h2 + f_n2) - (g_h2 + g_n2))
    return res
