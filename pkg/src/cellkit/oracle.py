"""Closed-form reference solution for galvanostatic operation.

Under a constant external current density the electrolyte and the active
material each reduce to a 1D diffusion problem with constant-flux boundaries,
solvable by cosine series; the potentials follow algebraically. These formulas
are the primary accuracy oracle for the numerical solver: they are implemented
here straight from the separation-of-variables solution, sharing no code with
the finite-volume path.

All inputs and outputs of this module are dimensional (m, s, mol/m^3, V).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .model import PhysicalParameters, reference_current

# series control: stop when the envelope of the next term is below this fraction
# of the phase's concentration scale, hard cap on the term count otherwise
SERIES_REL_TOL = 1e-14
SERIES_MAX_TERMS = 200


@dataclass(frozen=True)
class AnalyticalConfig:
    """Constant-current scenario: positive `c_rate` charges (current is drawn
    out of the collector, the active material delithiates)."""

    params: PhysicalParameters
    c_rate: float

    @property
    def i_ext(self) -> float:
        # external current density [A/m^2]
        return -self.c_rate * reference_current(self.params)


def beta_coefficients(cfg: AnalyticalConfig) -> tuple[float, float]:
    """Boundary-flux gradient coefficients (beta_e, beta_s) in mol/m^4."""
    p = cfg.params
    beta_e = (1.0 - p.transference) * cfg.i_ext / (p.faraday * p.diff_e)
    beta_s = cfg.i_ext / (p.faraday * p.diff_s)
    return beta_e, beta_s


def _check_time(t: float):
    if not (t >= 0.0 and math.isfinite(t)):
        raise ValueError(f"time must be finite and nonnegative, got {t!r}")


def ce_analytic(cfg: AnalyticalConfig, x, t: float):
    """Electrolyte concentration [mol/m^3] at positions x in [0, len_e] and time t.

    t = 0 returns the initial value exactly (the series converges only like
    1/k^2 there, so it is short-circuited rather than summed).
    """
    _check_time(t)
    p = cfg.params
    x = np.asarray(x, dtype=float)
    if np.any(x < -1e-15) or np.any(x > p.len_e * (1 + 1e-12)):
        raise ValueError("x outside the electrolyte domain")
    if t == 0.0:
        return np.full_like(x, p.conc_e_init)
    beta_e, _ = beta_coefficients(cfg)
    le = p.len_e
    out = p.conc_e_init + beta_e * (0.5 * le - x)
    tol = SERIES_REL_TOL * p.conc_e_init
    for k in range(SERIES_MAX_TERMS):
        m = (2 * k + 1) * math.pi / le
        envelope = 4.0 * abs(beta_e) * le / ((2 * k + 1) ** 2 * math.pi**2)
        decay = math.exp(-(m**2) * p.diff_e * t)
        if envelope * decay < tol:
            break
        out -= 4.0 * beta_e * le / ((2 * k + 1) ** 2 * math.pi**2) * np.cos(m * x) * decay
    return out


def phie_analytic(cfg: AnalyticalConfig, x, t: float):
    """Electrolyte potential [V] relative to the grounded metal electrode.

    Composition: interface kinetics at x=0, concentration-activity term, ohmic drop.
    """
    _check_time(t)
    p = cfg.params
    x = np.asarray(x, dtype=float)
    c = ce_analytic(cfg, x, t)
    c0 = ce_analytic(cfg, np.array(0.0), t)
    if np.any(c <= 0.0) or c0 <= 0.0:
        raise DomainError("analytic electrolyte concentration went nonpositive")
    thermal = p.thermal_voltage
    phi0 = 2.0 * thermal * math.asinh(-cfg.i_ext / (2.0 * p.exchange_current_li))
    activity = (
        2.0 * thermal * (1.0 - p.transference) * (1.0 + p.activity_coeff) * np.log(c / c0)
    )
    return phi0 + activity - cfg.i_ext / p.conductivity_e * x


def cs_analytic(cfg: AnalyticalConfig, x_bar, t: float):
    """Active-material concentration [mol/m^3]; x_bar in [0, len_am] measured from
    the electrolyte interface."""
    _check_time(t)
    p = cfg.params
    xb = np.asarray(x_bar, dtype=float)
    if np.any(xb < -1e-15) or np.any(xb > p.len_am * (1 + 1e-12)):
        raise ValueError("x_bar outside the active layer")
    if t == 0.0:
        return np.full_like(xb, p.conc_s_init)
    _, beta_s = beta_coefficients(cfg)
    la = p.len_am
    out = (
        p.conc_s_init
        - beta_s * xb * (1.0 - xb / (2.0 * la))
        + beta_s * p.diff_s * t / la
        + 2.0 * beta_s * la / 6.0
    )
    tol = SERIES_REL_TOL * p.conc_s_max
    for n in range(1, SERIES_MAX_TERMS + 1):
        m = n * math.pi / la
        envelope = 2.0 * abs(beta_s) * la / (n**2 * math.pi**2)
        decay = math.exp(-(m**2) * p.diff_s * t)
        if envelope * decay < tol:
            break
        out -= 2.0 * beta_s * la / (n**2 * math.pi**2) * np.cos(m * xb) * decay
    return out


def cell_voltage_analytic(cfg: AnalyticalConfig, t: float) -> float:
    """Terminal voltage [V]: solid potential at the collector boundary."""
    _check_time(t)
    p = cfg.params
    ce_if = float(ce_analytic(cfg, np.array(p.len_e), t))
    cs_if = float(cs_analytic(cfg, np.array(0.0), t))
    if not 0.0 < cs_if < p.conc_s_max:
        raise DomainError(
            f"interface solid concentration {cs_if:.6g} outside (0, {p.conc_s_max:.6g})"
        )
    if ce_if <= 0.0:
        raise DomainError("interface electrolyte concentration went nonpositive")
    phie_if = float(phie_analytic(cfg, np.array(p.len_e), t))
    exchange = p.reaction_rate_f * math.sqrt(
        ce_if * cs_if * (p.conc_s_max - cs_if)
    )  # [A/m^2]
    eta = 2.0 * p.thermal_voltage * math.asinh(-cfg.i_ext / (2.0 * exchange))
    phis_if = phie_if + p.ocp(cs_if / p.conc_s_max) + eta
    ohmic = (p.len_am / p.conductivity_s + p.len_cc / p.conductivity_cc) * cfg.i_ext
    return phis_if - ohmic
