"""Physical model layer: parameters, characteristic scales, dimensionless groups,
open-circuit potential curves, Butler-Volmer interface kinetics and operating modes.

Everything downstream (grid assembly, time integration, coupling) works on the
dimensionless form produced here. Conventions:

* potentials are scaled by the thermal voltage R*T/F,
* lengths by the total cell thickness, time by the electrolyte diffusion time,
* electrolyte / solid concentrations by their own reference values,
* interface (Butler-Volmer) current densities by 1 A/m^2, so their
  dimensionless values coincide numerically with A/m^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DomainError, OcpRangeError

# sinh argument guard: beyond this the exponential overflows any sane model state
SINH_GUARD = 50.0

# default OCP curve shipped with the package; monotone decreasing on (0, 1),
# anchored at U0(0.5) = 0.103 V
DEFAULT_OCP_EXPRESSION = "0.103 + 0.0257*log((1 - c)/c)"


# ---------------------------------------------------------------------------
# open-circuit potential
# ---------------------------------------------------------------------------


class OpenCircuitPotential:
    """Equilibrium potential U0 as a function of solid stoichiometry c in (0, 1).

    Two representations:

    * analytic expression in the variable ``c`` (parsed and differentiated
      symbolically, so Jacobians stay exact),
    * sampled table with monotone cubic interpolation (PCHIP); evaluation
      outside the sampled range raises, it never extrapolates.
    """

    def __init__(self, value_fn, slope_fn, lo, hi, label):
        self._value_fn = value_fn
        self._slope_fn = slope_fn
        self.stoichiometry_range = (lo, hi)
        self.label = label

    @classmethod
    def from_expression(cls, expression: str = DEFAULT_OCP_EXPRESSION):
        import sympy

        c = sympy.Symbol("c", positive=True)
        try:
            expr = sympy.sympify(expression, locals={"c": c})
        except (sympy.SympifyError, SyntaxError, TypeError) as exc:
            raise ValueError(f"cannot parse OCP expression {expression!r}: {exc}") from None
        extra = expr.free_symbols - {c}
        if extra:
            raise ValueError(f"OCP expression uses unknown symbols {sorted(map(str, extra))}")
        slope = sympy.diff(expr, c)
        value_fn = sympy.lambdify(c, expr, modules="numpy")
        slope_fn = sympy.lambdify(c, slope, modules="numpy")
        return cls(value_fn, slope_fn, 0.0, 1.0, f"expr:{expression}")

    @classmethod
    def from_table(cls, stoichiometry: Sequence[float], potential_volts: Sequence[float]):
        from scipy.interpolate import PchipInterpolator

        x = np.asarray(stoichiometry, dtype=float)
        u = np.asarray(potential_volts, dtype=float)
        if x.ndim != 1 or x.size < 3:
            raise ValueError("OCP table needs at least 3 points")
        if np.any(np.diff(x) <= 0):
            raise ValueError("OCP table stoichiometry must be strictly increasing")
        interp = PchipInterpolator(x, u, extrapolate=False)
        deriv = interp.derivative()
        return cls(interp, deriv, float(x[0]), float(x[-1]), f"table[{x.size}]")

    def _check(self, c):
        arr = np.asarray(c, dtype=float)
        lo, hi = self.stoichiometry_range
        if np.any(arr <= lo) or np.any(arr >= hi) or not np.all(np.isfinite(arr)):
            raise OcpRangeError(
                f"stoichiometry {arr!r} outside the OCP range ({lo}, {hi})"
            )
        return arr

    def __call__(self, c):
        """U0 in volts at stoichiometry c."""
        out = self._value_fn(self._check(c))
        if not np.all(np.isfinite(out)):
            raise OcpRangeError(f"OCP not finite at stoichiometry {c!r}")
        return out if np.ndim(c) else float(out)

    def slope(self, c):
        """dU0/dc in volts per unit stoichiometry."""
        out = self._slope_fn(self._check(c))
        if not np.all(np.isfinite(out)):
            raise OcpRangeError(f"OCP slope not finite at stoichiometry {c!r}")
        return out if np.ndim(c) else float(out)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhysicalParameters:
    """Dimensional cell parameters. Defaults are the baseline parameter set used
    throughout the studies; `conc_s_max` has no physical default and must be set.
    """

    conc_s_max: float  # saturation concentration of the active material [mol/m^3]

    faraday: float = 96487.0  # [C/mol]
    gas_constant: float = 8.314  # [J/(mol K)]
    temperature: float = 298.15  # [K]

    # electrolyte
    len_e: float = 20e-6  # [m]
    conc_e_init: float = 1000.0  # [mol/m^3]
    diff_e: float = 1e-10  # [m^2/s]
    conductivity_e: float = 1.0  # [S/m]
    transference: float = 0.4  # cation transference number [-]
    activity_coeff: float = 0.0  # electrolyte activity correction delta [-]

    # active material
    len_am: float = 10e-6  # [m]
    conc_s_init: float = 13000.0  # [mol/m^3]
    diff_s: float = 3e-14  # [m^2/s]
    conductivity_s: float = 100.0  # [S/m]
    reaction_rate_f: float = 8.9e-7  # F*k0 [C s^-1 m^(5/2) mol^(-3/2)]

    # metal anode kinetics
    exchange_current_li: float = 10.0  # [A/m^2]

    # current collector
    len_cc: float = 10e-6  # [m]
    conductivity_cc: float = 3700.0  # [S/m]

    # cell-level conventions
    ocp: OpenCircuitPotential = field(default_factory=OpenCircuitPotential.from_expression)
    i_1c_override: Optional[float] = None  # [A/m^2]; None derives it from capacity

    def __post_init__(self):
        positive = {
            "conc_s_max": self.conc_s_max,
            "faraday": self.faraday,
            "gas_constant": self.gas_constant,
            "temperature": self.temperature,
            "len_e": self.len_e,
            "conc_e_init": self.conc_e_init,
            "diff_e": self.diff_e,
            "conductivity_e": self.conductivity_e,
            "len_am": self.len_am,
            "conc_s_init": self.conc_s_init,
            "diff_s": self.diff_s,
            "conductivity_s": self.conductivity_s,
            "reaction_rate_f": self.reaction_rate_f,
            "exchange_current_li": self.exchange_current_li,
            "len_cc": self.len_cc,
            "conductivity_cc": self.conductivity_cc,
        }
        bad = [k for k, v in positive.items() if not (v > 0 and math.isfinite(v))]
        if bad:
            raise ValueError(f"parameters must be positive and finite: {bad}")
        if not 0.0 < self.transference < 1.0:
            raise ValueError("transference number must lie in (0, 1)")
        if self.conc_s_init >= self.conc_s_max:
            raise ValueError("conc_s_init must be below conc_s_max")

    @property
    def len_total(self) -> float:
        return self.len_e + self.len_am + self.len_cc

    @property
    def thermal_voltage(self) -> float:
        return self.gas_constant * self.temperature / self.faraday


def reference_current(params: PhysicalParameters) -> float:
    """1C current density in A/m^2: the charge to (de)lithiate the active layer in
    one hour, unless an explicit override is configured."""
    if params.i_1c_override is not None:
        return params.i_1c_override
    return params.faraday * params.len_am * params.conc_s_max / 3600.0


# ---------------------------------------------------------------------------
# scales
# ---------------------------------------------------------------------------


_SCALE_KINDS = (
    "potential",
    "length",
    "time",
    "conc_e",
    "conc_s",
    "molar_flux_e",
    "molar_flux_s",
    "current_e",
    "current_s",
    "bv_current",
)


@dataclass(frozen=True)
class CharacteristicScales:
    """Reference magnitudes used to strip units off the governing equations."""

    potential: float  # [V]
    length: float  # [m]
    time: float  # [s]
    conc_e: float  # [mol/m^3]
    conc_s: float  # [mol/m^3]
    molar_flux_e: float  # [mol/(m^2 s)]
    molar_flux_s: float  # [mol/(m^2 s)]
    current_e: float  # [A/m^2]
    current_s: float  # [A/m^2]
    bv_current: float  # [A/m^2]

    def scale_for(self, kind: str) -> float:
        if kind not in _SCALE_KINDS:
            raise KeyError(f"unknown scale kind {kind!r}; expected one of {_SCALE_KINDS}")
        return getattr(self, kind)

    def nondim(self, value, kind: str):
        return value / self.scale_for(kind)

    def redim(self, value, kind: str):
        return value * self.scale_for(kind)


def compute_scales(params: PhysicalParameters) -> CharacteristicScales:
    length = params.len_total
    potential = params.thermal_voltage
    return CharacteristicScales(
        potential=potential,
        length=length,
        time=length**2 / params.diff_e,
        conc_e=params.conc_e_init,
        conc_s=params.conc_s_max,
        molar_flux_e=params.diff_e * params.conc_e_init / length,
        molar_flux_s=params.diff_s * params.conc_s_max / length,
        current_e=params.conductivity_e * potential / length,
        current_s=params.conductivity_s * potential / length,
        bv_current=1.0,
    )


# ---------------------------------------------------------------------------
# dimensionless groups
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DimensionlessGroups:
    """Coefficient pack for the dimensionless equations and interface conditions.

    ``bv_to_*`` factors convert a dimensionless interface current (numerically
    A/m^2) into the matching dimensionless molar flux / current density of each
    phase; the ``zeta_*`` coefficients are the half-cell gradient prefactors of
    the auxiliary interface equations.
    """

    kappa_d: float  # migration/diffusion coupling 2(1-t+)(1+delta)
    eps_diff: float  # solid-to-electrolyte diffusivity ratio
    eps_cond: float  # active-material-to-collector conductivity ratio
    peclet: float  # electric Peclet number of the electrolyte
    bv_to_molar_flux_e: float
    bv_to_current_e: float
    bv_to_molar_flux_s: float
    bv_to_current_s: float
    zeta_e_c: float
    zeta_s_c: float
    zeta_s_phi: float
    transference: float

    def zeta_e_phi(self, c_e: float) -> float:
        """Potential-equation interface coefficient; depends on the local
        electrolyte concentration through the activity term."""
        return self.bv_to_current_e + self.kappa_d * self.zeta_e_c / c_e

    def zeta_e_phi_slope(self, c_e: float) -> float:
        return -self.kappa_d * self.zeta_e_c / c_e**2


def compute_groups(params: PhysicalParameters, scales: CharacteristicScales) -> DimensionlessGroups:
    f = params.faraday
    bv = scales.bv_current
    bv_to_molar_flux_e = bv / (f * scales.molar_flux_e)
    return DimensionlessGroups(
        kappa_d=2.0 * (1.0 - params.transference) * (1.0 + params.activity_coeff),
        eps_diff=params.diff_s / params.diff_e,
        eps_cond=params.conductivity_s / params.conductivity_cc,
        peclet=scales.current_e * params.transference / (f * scales.molar_flux_e),
        bv_to_molar_flux_e=bv_to_molar_flux_e,
        bv_to_current_e=bv / scales.current_e,
        bv_to_molar_flux_s=bv / (f * scales.molar_flux_s),
        bv_to_current_s=bv / scales.current_s,
        zeta_e_c=(1.0 - params.transference) * bv_to_molar_flux_e,
        zeta_s_c=bv / (f * scales.molar_flux_s),
        zeta_s_phi=bv / scales.current_s,
        transference=params.transference,
    )


# ---------------------------------------------------------------------------
# Butler-Volmer kinetics (symmetric, charge-transfer coefficient 1/2)
# ---------------------------------------------------------------------------


def _guarded_sinh(arg: float) -> float:
    if abs(arg) > SINH_GUARD:
        raise DomainError(
            f"reaction overpotential argument {arg:.3g} beyond guard {SINH_GUARD}"
        )
    return math.sinh(arg)


def bv_anode(phi_e: float, params: PhysicalParameters, scales: CharacteristicScales) -> float:
    """Dimensionless metal-anode exchange current at the electrolyte boundary.

    `phi_e` is the dimensionless electrolyte potential at the interface (the metal
    is grounded). Negative potential drives dissolution, so the current is odd and
    decreasing in `phi_e`.
    """
    return 2.0 * params.exchange_current_li * _guarded_sinh(-0.5 * phi_e) / scales.bv_current


def bv_anode_with_grad(phi_e, params, scales):
    i = bv_anode(phi_e, params, scales)
    d_phi = -params.exchange_current_li * math.cosh(0.5 * phi_e) / scales.bv_current
    return i, d_phi


def bv_cathode(
    c_e: float,
    c_s: float,
    phi_s: float,
    phi_e: float,
    params: PhysicalParameters,
    scales: CharacteristicScales,
) -> float:
    """Dimensionless intercalation current at the separator/active-material interface.

    Inputs are dimensionless interface values; concentrations are rescaled
    internally because the exchange-current prefactor is genuinely dimensional.
    """
    return _bv_cathode_impl(c_e, c_s, phi_s, phi_e, params, scales)[0]


def bv_cathode_with_grad(c_e, c_s, phi_s, phi_e, params, scales):
    """Current plus its partial derivatives w.r.t. (c_e, c_s, phi_s, phi_e)."""
    return _bv_cathode_impl(c_e, c_s, phi_s, phi_e, params, scales)


def _bv_cathode_impl(c_e, c_s, phi_s, phi_e, params, scales):
    ce_dim = c_e * scales.conc_e
    cs_dim = c_s * scales.conc_s
    headroom = params.conc_s_max - cs_dim
    if ce_dim <= 0.0 or cs_dim <= 0.0 or headroom <= 0.0:
        raise DomainError(
            "interface concentrations outside the admissible range: "
            f"c_e={ce_dim:.6g} mol/m^3, c_s={cs_dim:.6g} mol/m^3 "
            f"(max {params.conc_s_max:.6g})"
        )
    u0 = params.ocp(c_s) / scales.potential
    du0 = params.ocp.slope(c_s) / scales.potential
    eta_half = 0.5 * (phi_s - phi_e - u0)
    if abs(eta_half) > SINH_GUARD:
        raise DomainError(
            f"cathode overpotential argument {eta_half:.3g} beyond guard {SINH_GUARD}"
        )
    radicand = ce_dim * cs_dim * headroom
    amp = params.reaction_rate_f * math.sqrt(radicand)  # F*k0*sqrt(...) [A/m^2]
    sh = math.sinh(eta_half)
    ch = math.cosh(eta_half)
    i = 2.0 * amp * sh / scales.bv_current

    # d(amp)/d(c) via d(sqrt)/d(radicand); stoichiometry derivative folds the
    # concentration scale back in
    d_amp_dce = amp / (2.0 * ce_dim) * scales.conc_e
    d_amp_dcs = (
        params.reaction_rate_f
        * ce_dim
        * (params.conc_s_max - 2.0 * cs_dim)
        / (2.0 * math.sqrt(radicand))
        * scales.conc_s
    )
    d_ce = 2.0 * d_amp_dce * sh / scales.bv_current
    d_cs = (2.0 * d_amp_dcs * sh + 2.0 * amp * ch * (-0.5 * du0)) / scales.bv_current
    d_phis = amp * ch / scales.bv_current
    d_phie = -amp * ch / scales.bv_current
    return i, d_ce, d_cs, d_phis, d_phie


# ---------------------------------------------------------------------------
# operating modes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantCurrent:
    """Galvanostatic drive at the collector boundary; positive rate charges."""

    c_rate: float

    def imposed_current(self, params: PhysicalParameters) -> float:
        # external current density [A/m^2]; charging draws current out
        return -self.c_rate * reference_current(params)


@dataclass(frozen=True)
class ConstantVoltage:
    """Potentiostatic drive. ``applied_volts=None`` means "hold whatever the cell
    voltage is when the phase starts" (resolved by the runner)."""

    applied_volts: Optional[float] = None

    def applied(self, t_s: float) -> float:
        if self.applied_volts is None:
            raise ValueError("unresolved hold-voltage phase; runner must pin the value")
        return self.applied_volts


@dataclass(frozen=True)
class SineVoltage:
    """Sinusoidal applied voltage around a mean, amplitude given relative to it."""

    mean_volts: float
    rel_amplitude: float
    n_oscillations: float
    duration_s: float

    def applied(self, t_s: float) -> float:
        omega = 2.0 * math.pi * self.n_oscillations / self.duration_s
        return self.mean_volts * (1.0 + self.rel_amplitude * math.sin(omega * t_s))


@dataclass(frozen=True)
class Phase:
    duration_s: float
    mode: Union[ConstantCurrent, ConstantVoltage, SineVoltage]


@dataclass(frozen=True)
class Sequence:
    phases: tuple

    def __post_init__(self):
        if not self.phases:
            raise ValueError("sequence needs at least one phase")


OperatingMode = Union[ConstantCurrent, ConstantVoltage, SineVoltage, Sequence]
