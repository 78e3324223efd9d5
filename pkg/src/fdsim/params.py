"""Physical constants and operating-point data for the hydrogen delivery loop.

The plant is a supply manifold feeding a chain of lumped anode segments,
with a recirculation blower returning outlet gas to the manifold and a
bleed orifice venting the last segment.  All orifice, volume, membrane and
blower-map constants live in :class:`StackParams`; everything downstream
(model, controller, observer, simulator) treats an instance as immutable.

Units are SI throughout: pressures Pa, volumes m^3, temperatures K,
molar flows mol/s, currents A.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import DomainError

# Molar masses (kg/mol)
M_H2 = 2.016e-3
M_N2 = 28.014e-3
M_O2 = 31.998e-3
M_H2O = 18.015e-3


@dataclass(frozen=True)
class StackParams:
    """Stack, manifold and blower constants.

    Defaults describe a 25-cell stack with a three-segment anode channel.
    The blower regression polynomials (``blower_a/b/c``) give the
    normalized maximum flow, the head shape factor and the maximum head
    coefficient as functions of blade Mach number; the blower operating
    gas is treated as air-like for the map (``gamma``, ``cp_gas``,
    ``r_gas``, ``rho_bl``) while molar conversion of the pumped stream
    uses the anode gas basis ``m_h2``.
    """

    # orifices
    alpha: float = 0.01          # lumped orifice coefficient
    a_ai: float = 8.04e-6        # manifold/segment inlet orifice area (m^2)
    a_bd: float = 7.24e-5        # bleed orifice area (m^2)
    a_or: float = 7.24e-6        # cathode outlet orifice area (m^2)

    # volumes (m^3)
    v_a: float = 1.1e-4          # total anode channel volume
    v_c: float = 1.9e-4          # cathode volume
    v_sm: float = 1.608e-5       # supply manifold volume

    # temperatures (K)
    t_a: float = 298.0
    t_sm: float = 298.0

    # physical constants
    faraday: float = 96485.0     # C/mol
    r_gas_molar: float = 8.314   # J/(mol K)

    # membrane permeation (mol/(Pa s) per cell per unit volume fraction)
    k_cr_h2: float = 7.455e-12
    # Nitrogen permeates slower than hydrogen; the data sheet gives a single
    # rate, so the nitrogen value defaults to half the hydrogen one.
    k_cr_n2: float = 3.7275e-12

    # hydrogen tank
    eta_ht_m: float = 2.5e-3     # max tank molar flow (mol/s)

    n_fc: int = 25               # cell count

    # pressures (Pa)
    p_sat: float = 1.762e4       # saturation (vapor) pressure
    p_0: float = 1.01e5          # ambient
    p_c: float = 1.2e5           # nominal cathode pressure

    # blower geometry and regression coefficients
    d_bl: float = 0.2286         # blade diameter (m)
    blower_a: tuple = (2.21e-3, -4.64e-5, -5.36e-4, 2.70e-4, -3.70e-4)
    blower_b: tuple = (2.44, -1.31, 1.77)
    blower_c: tuple = (0.43, -0.68, 0.80, -0.43, 0.11, -9.79e-3)

    # blower operating point (map gas is air-like)
    t_bl_in: float = 298.0       # inlet temperature (K)
    gamma: float = 1.4           # heat capacity ratio
    rho_bl: float = 1.2          # inlet density (kg/m^3)
    cp_gas: float = 1004.0       # specific heat (J/(kg K))
    r_gas: float = 287.0         # specific gas constant (J/(kg K))
    shaft_speed_rpm: float = 20000.0

    # segment volume proportions (must sum to 1)
    t_frac: tuple = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)

    # molar masses (kg/mol)
    m_h2: float = M_H2
    m_n2: float = M_N2
    m_o2: float = M_O2
    m_h2o: float = M_H2O

    # cathode water mole fraction
    x_c_h2o: float = 0.1

    n_seg: int = 3

    def __post_init__(self):
        pos = [
            ("alpha", self.alpha), ("a_ai", self.a_ai),
            ("v_a", self.v_a), ("v_c", self.v_c),
            ("v_sm", self.v_sm), ("t_a", self.t_a), ("t_sm", self.t_sm),
            ("faraday", self.faraday), ("r_gas_molar", self.r_gas_molar),
            ("n_fc", self.n_fc),
            ("d_bl", self.d_bl), ("m_h2", self.m_h2), ("m_n2", self.m_n2),
            ("m_o2", self.m_o2), ("m_h2o", self.m_h2o),
            ("p_sat", self.p_sat), ("p_0", self.p_0), ("p_c", self.p_c),
        ]
        for name, value in pos:
            if not (value > 0.0) or not math.isfinite(value):
                raise DomainError(f"StackParams.{name} must be strictly positive, got {value}")
        # zero seals the port (used by exchange-free scenarios)
        nonneg = [
            ("a_bd", self.a_bd), ("a_or", self.a_or),
            ("eta_ht_m", self.eta_ht_m),
            ("k_cr_h2", self.k_cr_h2), ("k_cr_n2", self.k_cr_n2),
        ]
        for name, value in nonneg:
            if value < 0.0 or not math.isfinite(value):
                raise DomainError(f"StackParams.{name} must be non-negative, got {value}")
        if self.n_seg < 2:
            raise DomainError(f"n_seg must be >= 2, got {self.n_seg}")
        if len(self.t_frac) != self.n_seg:
            raise DomainError(
                f"t_frac has {len(self.t_frac)} entries, expected n_seg={self.n_seg}")
        if any(t <= 0.0 for t in self.t_frac):
            raise DomainError("all segment volume proportions must be > 0")
        if abs(sum(self.t_frac) - 1.0) > 1e-9:
            raise DomainError(f"segment volume proportions must sum to 1, got {sum(self.t_frac)}")
        if not (0.0 <= self.x_c_h2o < 1.0):
            raise DomainError(f"x_c_h2o must be in [0, 1), got {self.x_c_h2o}")

    # -- derived quantities ------------------------------------------------

    @property
    def n_states(self) -> int:
        return 2 * self.n_seg + 2

    @property
    def p_v(self) -> float:
        """Vapor pressure, held at saturation (high-humidity operation)."""
        return self.p_sat

    @property
    def v_seg(self) -> np.ndarray:
        """Per-segment anode volumes (m^3)."""
        return self.v_a * np.asarray(self.t_frac)

    @property
    def mu_seg(self) -> np.ndarray:
        """RT/V pressure-per-mole factors for the anode segments (Pa/mol)."""
        return self.r_gas_molar * self.t_a / self.v_seg

    @property
    def mu_sm(self) -> float:
        """RT/V factor for the supply manifold (Pa/mol)."""
        return self.r_gas_molar * self.t_sm / self.v_sm

    @property
    def m_supply(self) -> float:
        """Flow coefficient of the manifold and inter-segment orifices (mol/(s Pa))."""
        return self.alpha * self.a_ai / self.m_h2

    @property
    def m_bleed(self) -> float:
        """Flow coefficient of the bleed orifice (mol/(s Pa))."""
        return self.alpha * self.a_bd / self.m_h2

    @property
    def rho_cr(self) -> np.ndarray:
        """Per-segment hydrogen permeation coefficients (mol/(s Pa))."""
        return np.asarray(self.t_frac) * self.n_fc * self.k_cr_h2

    @property
    def xi_cr(self) -> np.ndarray:
        """Per-segment nitrogen permeation coefficients (mol/(s Pa))."""
        return np.asarray(self.t_frac) * self.n_fc * self.k_cr_n2

    @property
    def g_sm_ht(self) -> float:
        """Manifold pressure-rate authority of the tank valve at full opening (Pa/s)."""
        return self.mu_sm * self.eta_ht_m

    @property
    def u_tip(self) -> float:
        """Blower blade tip speed (m/s)."""
        return math.pi * self.d_bl * self.shaft_speed_rpm / 60.0

    @property
    def blower_mach(self) -> float:
        return self.u_tip / math.sqrt(self.gamma * self.r_gas * self.t_bl_in)

    def blower_map(self) -> tuple:
        """Evaluate the regression polynomials at the operating Mach number.

        Returns (phi_max, beta_shape, psi_max).
        """
        m = self.blower_mach
        phi_max = float(np.polynomial.polynomial.polyval(m, self.blower_a))
        beta_shape = float(np.polynomial.polynomial.polyval(m, self.blower_b))
        psi_max = float(np.polynomial.polynomial.polyval(m, self.blower_c))
        return phi_max, beta_shape, psi_max

    def replace(self, **kw) -> "StackParams":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return StackParams(**d)

    def dump(self) -> str:
        """All fields plus derived quantities as key = value lines."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                lines.append(f"{f.name} = {' '.join(repr(x) for x in v)}")
            else:
                lines.append(f"{f.name} = {v!r}")
        phi_max, beta_shape, psi_max = self.blower_map()
        lines += [
            f"derived.n_states = {self.n_states}",
            f"derived.p_v = {self.p_v!r}",
            f"derived.mu_seg = {' '.join(repr(x) for x in self.mu_seg)}",
            f"derived.mu_sm = {self.mu_sm!r}",
            f"derived.m_supply = {self.m_supply!r}",
            f"derived.m_bleed = {self.m_bleed!r}",
            f"derived.g_sm_ht = {self.g_sm_ht!r}",
            f"derived.u_tip = {self.u_tip!r}",
            f"derived.blower_mach = {self.blower_mach!r}",
            f"derived.blower_phi_max = {phi_max!r}",
            f"derived.blower_beta_shape = {beta_shape!r}",
            f"derived.blower_psi_max = {psi_max!r}",
        ]
        return "\n".join(lines)


@dataclass(frozen=True)
class CurrentSplit:
    """Total stack current and its allocation across anode segments."""

    i_total: float
    i_seg: tuple

    def __post_init__(self):
        if self.i_total < 0.0 or any(i < 0.0 for i in self.i_seg):
            raise DomainError("segment currents must be non-negative")
        if abs(sum(self.i_seg) - self.i_total) > 1e-9 * max(1.0, self.i_total):
            raise DomainError(
                f"segment currents sum to {sum(self.i_seg)}, expected {self.i_total}")

    @classmethod
    def proportional(cls, i_total: float, params: StackParams) -> "CurrentSplit":
        """Split the stack current by segment volume fraction."""
        return cls(i_total, tuple(t * i_total for t in params.t_frac))
