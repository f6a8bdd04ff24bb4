"""Finite-volume semi-discretization of the half cell on a uniform 1D grid.

Layout (dimensionless throughout):

* differential unknowns  W = [c_e (n_e cells) | c_s (n_am + n_cc cells)]
* algebraic unknowns     Z = [phi_e | phi_s | 6 interface auxiliaries]
* auxiliaries, in order: c_e and phi_e at the metal boundary face, c_e and
  phi_e at the electrolyte side of the intercalation interface, c_s and phi_s
  at its solid side.

Concentrations and potentials live at cell centers; fluxes at faces. Interface
exchange currents close the boundary faces, and each interface contributes
half-cell gradient equations tying the auxiliary face values to the adjacent
cell averages. Collector cells keep concentration placeholders with zero
right-hand side so the differential block has one entry per cell everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .errors import DomainError
from .model import (
    CharacteristicScales,
    ConstantCurrent,
    ConstantVoltage,
    DimensionlessGroups,
    PhysicalParameters,
    SineVoltage,
    bv_anode_with_grad,
    bv_cathode_with_grad,
    compute_groups,
    compute_scales,
)

UNIFORMITY_RTOL = 1e-12

# auxiliary ordering inside Z (offsets past the phi block)
AUX_CE_ANODE, AUX_PE_ANODE, AUX_CE_CATHODE, AUX_PE_CATHODE, AUX_CS, AUX_PS = range(6)
AUX_NAMES = ("ce_gamma0", "phie_gamma0", "ce_gamma_se", "phie_gamma_se",
             "cs_gamma_se", "phis_gamma_se")


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered grid spanning electrolyte, active layer, collector."""

    n_e: int
    n_am: int
    n_cc: int
    len_e: float  # dimensionless subdomain lengths, summing to 1
    len_am: float
    len_cc: float
    dx: float

    @classmethod
    def build(cls, params: PhysicalParameters, n_e: int, n_am: int, n_cc: int) -> "Grid":
        if n_e < 2 or n_am < 2 or n_cc < 1:
            raise ValueError("need at least 2 electrolyte, 2 active, 1 collector cells")
        total = params.len_total
        le, la, lc = params.len_e / total, params.len_am / total, params.len_cc / total
        dxs = (le / n_e, la / n_am, lc / n_cc)
        dx = dxs[0]
        for other in dxs[1:]:
            if abs(other - dx) > UNIFORMITY_RTOL * dx:
                raise ValueError(
                    f"cell counts {n_e}/{n_am}/{n_cc} do not give one uniform spacing "
                    f"for subdomain lengths {le:.6g}/{la:.6g}/{lc:.6g}"
                )
        return cls(n_e=n_e, n_am=n_am, n_cc=n_cc, len_e=le, len_am=la, len_cc=lc, dx=dx)

    @property
    def n_s(self) -> int:
        return self.n_am + self.n_cc

    @property
    def n_total(self) -> int:
        return self.n_e + self.n_s

    @property
    def n_alg(self) -> int:
        return self.n_total + 6

    # --- coordinates -------------------------------------------------------

    @property
    def centers_e(self) -> np.ndarray:
        return (np.arange(self.n_e) + 0.5) * self.dx

    @property
    def centers_s(self) -> np.ndarray:
        return self.len_e + (np.arange(self.n_s) + 0.5) * self.dx

    @property
    def centers_am(self) -> np.ndarray:
        return self.centers_s[: self.n_am]

    @property
    def interface_se(self) -> float:
        """Electrolyte / active-material interface position."""
        return self.len_e

    @property
    def interface_sc(self) -> float:
        """Active-material / collector interface position."""
        return self.len_e + self.len_am

    # --- state views -------------------------------------------------------

    def ce_of(self, w: np.ndarray) -> np.ndarray:
        return w[: self.n_e]

    def cs_of(self, w: np.ndarray) -> np.ndarray:
        return w[self.n_e : self.n_total]

    def cs_am_of(self, w: np.ndarray) -> np.ndarray:
        return w[self.n_e : self.n_e + self.n_am]

    def phie_of(self, z: np.ndarray) -> np.ndarray:
        return z[: self.n_e]

    def phis_of(self, z: np.ndarray) -> np.ndarray:
        return z[self.n_e : self.n_total]

    def aux_of(self, z: np.ndarray) -> np.ndarray:
        return z[self.n_total :]


@dataclass(frozen=True)
class State:
    """Solution snapshot at dimensionless time t."""

    t: float
    w: np.ndarray
    z: np.ndarray

    def copy(self) -> "State":
        return State(t=self.t, w=self.w.copy(), z=self.z.copy())


@dataclass(frozen=True)
class BoundaryContext:
    """Resolved collector-boundary drive at one instant: an imposed dimensionless
    current density or an imposed dimensionless potential."""

    kind: str  # "current" | "potential"
    value: float

    def __post_init__(self):
        if self.kind not in ("current", "potential"):
            raise ValueError(f"unknown boundary kind {self.kind!r}")


def make_context_provider(
    mode, params: PhysicalParameters, scales: CharacteristicScales
) -> Callable[[float], BoundaryContext]:
    """Map an operating mode to a function of dimensionless time.

    Phase sequences are resolved by the runner (one provider per phase), not here.
    """
    if isinstance(mode, ConstantCurrent):
        value = mode.imposed_current(params) / scales.current_s
        ctx = BoundaryContext("current", value)
        return lambda t: ctx
    if isinstance(mode, ConstantVoltage):
        value = mode.applied(0.0) / scales.potential
        ctx = BoundaryContext("potential", value)
        return lambda t: ctx
    if isinstance(mode, SineVoltage):
        def provider(t: float) -> BoundaryContext:
            return BoundaryContext("potential", mode.applied(t * scales.time) / scales.potential)

        return provider
    raise TypeError(f"no boundary context for mode {mode!r}")


# ---------------------------------------------------------------------------
# assembly helpers shared by the monolithic system and the split subproblems
# ---------------------------------------------------------------------------


class _Coo:
    """Triplet accumulator for one sparse block."""

    __slots__ = ("rows", "cols", "vals", "shape")

    def __init__(self, shape):
        self.rows = []
        self.cols = []
        self.vals = []
        self.shape = shape

    def add(self, rows, cols, vals):
        self.rows.append(np.atleast_1d(np.asarray(rows, dtype=np.int64)))
        self.cols.append(np.atleast_1d(np.asarray(cols, dtype=np.int64)))
        self.vals.append(np.atleast_1d(np.asarray(vals, dtype=float)))

    def build(self) -> sp.csr_matrix:
        if not self.rows:
            return sp.csr_matrix(self.shape)
        m = sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=self.shape,
        )
        return m.tocsr()


def electrolyte_interior_faces(ce, pe, dx, kappa_d, peclet, want_grad):
    """Fluxes and stencil derivatives on the n_e - 1 interior electrolyte faces.

    Face concentration is the arithmetic mean of the neighbours; the activity
    (migration) term makes both fluxes depend on concentration nonlinearly.
    """
    dc = ce[1:] - ce[:-1]
    cf = 0.5 * (ce[1:] + ce[:-1])
    if np.any(cf <= 0.0):
        raise DomainError("nonpositive face concentration in the electrolyte")
    i_face = -(pe[1:] - pe[:-1]) / dx + kappa_d * dc / (dx * cf)
    n_face = -dc / dx + peclet * i_face
    if not want_grad:
        return i_face, n_face, None
    di_dcl = kappa_d / dx * (-1.0 / cf - dc / (2.0 * cf**2))
    di_dcr = kappa_d / dx * (1.0 / cf - dc / (2.0 * cf**2))
    grads = {
        "di_dcl": di_dcl,
        "di_dcr": di_dcr,
        "dn_dcl": 1.0 / dx + peclet * di_dcl,
        "dn_dcr": -1.0 / dx + peclet * di_dcr,
        "di_dpl": 1.0 / dx,  # scalar: same on every face
        "di_dpr": -1.0 / dx,
        "dn_dpl": peclet / dx,
        "dn_dpr": -peclet / dx,
    }
    return i_face, n_face, grads


def solid_face_conductivity(grid: Grid, eps_cond: float) -> np.ndarray:
    """Dimensionless conductivity on the n_s - 1 interior solid faces: active
    material carries 1, the collector 1/eps_cond, their interface the harmonic
    mean of the two."""
    sig = np.empty(grid.n_s - 1)
    sig[: grid.n_am - 1] = 1.0
    sig[grid.n_am - 1] = 2.0 / (1.0 + eps_cond)
    sig[grid.n_am :] = 1.0 / eps_cond
    return sig


def add_electrolyte_interior_blocks(f_w, f_z, g_w, g_z, egr, ne, dx):
    """Triplet contributions of the interior electrolyte faces. Rows and
    columns start at 0 in both the w and z orderings (the electrolyte owns the
    leading block everywhere it appears)."""
    k = np.arange(1, ne)
    f_w.add(k, k - 1, egr["dn_dcl"] / dx)
    f_w.add(k, k, egr["dn_dcr"] / dx)
    f_w.add(k - 1, k - 1, -egr["dn_dcl"] / dx)
    f_w.add(k - 1, k, -egr["dn_dcr"] / dx)
    f_z.add(k, k - 1, np.full(ne - 1, egr["dn_dpl"] / dx))
    f_z.add(k, k, np.full(ne - 1, egr["dn_dpr"] / dx))
    f_z.add(k - 1, k - 1, np.full(ne - 1, -egr["dn_dpl"] / dx))
    f_z.add(k - 1, k, np.full(ne - 1, -egr["dn_dpr"] / dx))
    g_w.add(k, k - 1, egr["di_dcl"] / dx)
    g_w.add(k, k, egr["di_dcr"] / dx)
    g_w.add(k - 1, k - 1, -egr["di_dcl"] / dx)
    g_w.add(k - 1, k, -egr["di_dcr"] / dx)
    g_z.add(k, k - 1, np.full(ne - 1, egr["di_dpl"] / dx))
    g_z.add(k, k, np.full(ne - 1, egr["di_dpr"] / dx))
    g_z.add(k - 1, k - 1, np.full(ne - 1, -egr["di_dpl"] / dx))
    g_z.add(k - 1, k, np.full(ne - 1, -egr["di_dpr"] / dx))


def add_solid_interior_blocks(f_w, g_z, sig, nam, ns, eps_diff, dx, row_w, row_z):
    """Triplet contributions of the interior solid faces. ``row_w``/``row_z``
    shift rows and columns to wherever the solid block sits in the orderings."""
    if nam > 1:
        ks = np.arange(1, nam)
        coeff = eps_diff / dx**2
        f_w.add(row_w + ks, row_w + ks - 1, np.full(nam - 1, coeff))
        f_w.add(row_w + ks, row_w + ks, np.full(nam - 1, -coeff))
        f_w.add(row_w + ks - 1, row_w + ks - 1, np.full(nam - 1, -coeff))
        f_w.add(row_w + ks - 1, row_w + ks, np.full(nam - 1, coeff))
    ks = np.arange(1, ns)
    sig_dx2 = sig / dx**2
    g_z.add(row_z + ks, row_z + ks - 1, sig_dx2)
    g_z.add(row_z + ks, row_z + ks, -sig_dx2)
    g_z.add(row_z + ks - 1, row_z + ks - 1, -sig_dx2)
    g_z.add(row_z + ks - 1, row_z + ks, sig_dx2)


def scatter_interface_row(g_w, g_z, row, deriv, acol, own):
    """Distribute one interface residual's partials. Keys in ``acol`` are
    algebraic auxiliaries, keys in ``own`` are owned cell unknowns, anything
    else is foreign data with no column."""
    for key, val in deriv.items():
        if key in acol:
            g_z.add(row, acol[key], val)
        elif key in own:
            space, col = own[key]
            (g_w if space == "w" else g_z).add(row, col, val)


@dataclass
class AnodeClosure:
    """Metal-boundary exchange current with the two auxiliary residuals."""

    i_bv: float
    di_dpa0: float
    r1: float
    r1_d: dict
    r2: float
    r2_d: dict


def anode_closure(ca0, pa0, ce0, pe0, params, scales, groups, dx) -> AnodeClosure:
    if ca0 <= 0.0:
        raise DomainError("nonpositive auxiliary concentration at the metal boundary")
    i_bv, di = bv_anode_with_grad(pa0, params, scales)
    half = 0.5 * dx
    zec = groups.zeta_e_c
    zep = groups.zeta_e_phi(ca0)
    return AnodeClosure(
        i_bv=i_bv,
        di_dpa0=di,
        r1=(ce0 - ca0) / half + zec * i_bv,
        r1_d={"ce0": 1.0 / half, "ca0": -1.0 / half, "pa0": zec * di},
        r2=(pe0 - pa0) / half + zep * i_bv,
        r2_d={
            "pe0": 1.0 / half,
            "pa0": -1.0 / half + zep * di,
            "ca0": groups.zeta_e_phi_slope(ca0) * i_bv,
        },
    )


@dataclass
class CathodeClosure:
    """Intercalation-interface exchange current with its four aux residuals.

    ``d`` holds the current's partials keyed by the auxiliary unknowns."""

    i_bv: float
    d: dict
    r3: float
    r3_d: dict
    r4: float
    r4_d: dict
    r5: float
    r5_d: dict
    r6: float
    r6_d: dict


def cathode_closure(cm1, pm1, cs0, ps0, ce_n, pe_n, cs_1, ps_1,
                    params, scales, groups, dx) -> CathodeClosure:
    if cm1 <= 0.0:
        raise DomainError("nonpositive auxiliary electrolyte concentration at the interface")
    i_bv, d_ce, d_cs, d_ps, d_pe = bv_cathode_with_grad(cm1, cs0, ps0, pm1, params, scales)
    d = {"cm1": d_ce, "cs0": d_cs, "ps0": d_ps, "pm1": d_pe}
    half = 0.5 * dx
    zec = groups.zeta_e_c
    zep = groups.zeta_e_phi(cm1)
    zep_slope = groups.zeta_e_phi_slope(cm1)
    zsc = groups.zeta_s_c
    zsp = groups.zeta_s_phi
    # each residual picks up -coeff * d(i_bv)/d(aux) on all four aux unknowns,
    # plus its own half-cell gradient stencil
    r3_d = {key: -zec * val for key, val in d.items()}
    r3_d["cm1"] += 1.0 / half
    r3_d["ce_n"] = -1.0 / half
    r4_d = {key: -zep * val for key, val in d.items()}
    r4_d["pm1"] += 1.0 / half
    r4_d["pe_n"] = -1.0 / half
    r4_d["cm1"] += -zep_slope * i_bv  # face coefficient itself varies with cm1
    r5_d = {key: -zsc * val for key, val in d.items()}
    r5_d["cs0"] += -1.0 / half
    r5_d["cs_1"] = 1.0 / half
    r6_d = {key: -zsp * val for key, val in d.items()}
    r6_d["ps0"] += -1.0 / half
    r6_d["ps_1"] = 1.0 / half
    return CathodeClosure(
        i_bv=i_bv,
        d=d,
        r3=(cm1 - ce_n) / half - zec * i_bv,
        r3_d=r3_d,
        r4=(pm1 - pe_n) / half - zep * i_bv,
        r4_d=r4_d,
        r5=(cs_1 - cs0) / half - zsc * i_bv,
        r5_d=r5_d,
        r6=(ps_1 - ps0) / half - zsp * i_bv,
        r6_d=r6_d,
    )


# ---------------------------------------------------------------------------
# monolithic system
# ---------------------------------------------------------------------------


class CellSystem:
    """Full-cell semi-discrete DAE: w' = F(t, w, z), 0 = G(t, w, z)."""

    def __init__(
        self,
        params: PhysicalParameters,
        grid: Grid,
        ctx_provider: Callable[[float], BoundaryContext],
        scales: Optional[CharacteristicScales] = None,
        groups: Optional[DimensionlessGroups] = None,
    ):
        self.params = params
        self.grid = grid
        self.ctx_provider = ctx_provider
        self.scales = scales or compute_scales(params)
        self.groups = groups or compute_groups(params, self.scales)
        self.n_diff = grid.n_total
        self.n_alg = grid.n_alg
        self._sig = solid_face_conductivity(grid, self.groups.eps_cond)

    # --- initial data ------------------------------------------------------

    def initial_w(self) -> np.ndarray:
        g = self.grid
        w = np.empty(g.n_total)
        w[: g.n_e] = self.params.conc_e_init / self.scales.conc_e
        # collector placeholder cells inherit the active-material value; they
        # have zero RHS and never enter the physics
        w[g.n_e :] = self.params.conc_s_init / self.scales.conc_s
        return w

    # --- main assembly -----------------------------------------------------

    def rhs(self, t, w, z):
        return self._assemble(t, w, z, want_blocks=False)[:2]

    def rhs_and_blocks(self, t, w, z):
        return self._assemble(t, w, z, want_blocks=True)

    def _assemble(self, t, w, z, want_blocks):
        g = self.grid
        gr = self.groups
        dx = g.dx
        ne, nam, ns, n = g.n_e, g.n_am, g.n_s, g.n_total
        ce, cs = w[:ne], w[ne:]
        pe, ps = z[:ne], z[ne:n]
        ca0, pa0, cm1, pm1, cs0, ps0 = z[n:]
        ctx = self.ctx_provider(t)

        if np.any(ce <= 0.0):
            raise DomainError("nonpositive electrolyte concentration")

        i_int, n_int, egr = electrolyte_interior_faces(
            ce, pe, dx, gr.kappa_d, gr.peclet, want_blocks
        )
        an = anode_closure(ca0, pa0, ce[0], pe[0], self.params, self.scales, gr, dx)
        ca = cathode_closure(
            cm1, pm1, cs0, ps0, ce[-1], pe[-1], cs[0], ps[0],
            self.params, self.scales, gr, dx,
        )

        # electrolyte face arrays (ne+1 faces)
        i_face = np.empty(ne + 1)
        n_face = np.empty(ne + 1)
        i_face[0] = an.i_bv * gr.bv_to_current_e
        n_face[0] = an.i_bv * gr.bv_to_molar_flux_e
        i_face[1:ne] = i_int
        n_face[1:ne] = n_int
        i_face[ne] = -ca.i_bv * gr.bv_to_current_e
        n_face[ne] = -ca.i_bv * gr.bv_to_molar_flux_e

        # solid: molar-flux faces only exist in the active layer (nam+1 faces,
        # the last one is the sealed collector interface)
        ns_face = np.zeros(nam + 1)
        ns_face[0] = -ca.i_bv * gr.bv_to_molar_flux_s
        ns_face[1:nam] = -(cs[1:nam] - cs[: nam - 1]) / dx
        is_face = np.empty(ns + 1)
        is_face[0] = -ca.i_bv * gr.bv_to_current_s
        is_face[1:ns] = -self._sig * (ps[1:] - ps[:-1]) / dx
        if ctx.kind == "current":
            is_face[ns] = ctx.value
        else:
            is_face[ns] = -(ctx.value - ps[-1]) / (gr.eps_cond * 0.5 * dx)

        f = np.zeros(n)
        f[:ne] = -(n_face[1:] - n_face[:-1]) / dx
        f[ne : ne + nam] = -gr.eps_diff * (ns_face[1:] - ns_face[:-1]) / dx

        gvec = np.empty(n + 6)
        gvec[:ne] = -(i_face[1:] - i_face[:-1]) / dx
        gvec[ne:n] = -(is_face[1:] - is_face[:-1]) / dx
        gvec[n : n + 6] = (an.r1, an.r2, ca.r3, ca.r4, ca.r5, ca.r6)

        if not want_blocks:
            return f, gvec, None

        blocks = self._blocks(t, ctx, egr, an, ca)
        return f, gvec, blocks

    def _blocks(self, t, ctx, egr, an: AnodeClosure, ca: CathodeClosure):
        g = self.grid
        gr = self.groups
        dx = g.dx
        ne, nam, ns, n = g.n_e, g.n_am, g.n_s, g.n_total
        acol = {  # aux columns in Z
            "ca0": n + AUX_CE_ANODE, "pa0": n + AUX_PE_ANODE,
            "cm1": n + AUX_CE_CATHODE, "pm1": n + AUX_PE_CATHODE,
            "cs0": n + AUX_CS, "ps0": n + AUX_PS,
        }
        cath_cols = ("cm1", "pm1", "cs0", "ps0")

        f_w = _Coo((n, n))
        f_z = _Coo((n, n + 6))
        g_w = _Coo((n + 6, n))
        g_z = _Coo((n + 6, n + 6))

        # --- electrolyte rows ------------------------------------------------
        add_electrolyte_interior_blocks(f_w, f_z, g_w, g_z, egr, ne, dx)

        # metal boundary face enters row 0 with a + sign
        f_z.add(0, acol["pa0"], an.di_dpa0 * gr.bv_to_molar_flux_e / dx)
        g_z.add(0, acol["pa0"], an.di_dpa0 * gr.bv_to_current_e / dx)
        # intercalation face enters row ne-1 with flux -i_bv*coeff and - sign
        for key in cath_cols:
            f_z.add(ne - 1, acol[key], ca.d[key] * gr.bv_to_molar_flux_e / dx)
            g_z.add(ne - 1, acol[key], ca.d[key] * gr.bv_to_current_e / dx)

        # --- solid rows -------------------------------------------------------
        add_solid_interior_blocks(f_w, g_z, self._sig, nam, ns, gr.eps_diff, dx,
                                  row_w=ne, row_z=ne)
        for key in cath_cols:
            f_z.add(ne, acol[key], -ca.d[key] * gr.bv_to_molar_flux_s * gr.eps_diff / dx)
        for key in cath_cols:
            g_z.add(ne, acol[key], -ca.d[key] * gr.bv_to_current_s / dx)
        if ctx.kind == "potential":
            # imposed potential acts through the half-cell ghost gradient
            g_z.add(n - 1, n - 1, -2.0 / (gr.eps_cond * dx**2))

        # --- auxiliary rows ---------------------------------------------------
        own = {"ce0": ("w", 0), "pe0": ("z", 0),
               "ce_n": ("w", ne - 1), "pe_n": ("z", ne - 1),
               "cs_1": ("w", ne), "ps_1": ("z", ne)}
        for offset, deriv in (
            (AUX_CE_ANODE, an.r1_d),
            (AUX_PE_ANODE, an.r2_d),
            (AUX_CE_CATHODE, ca.r3_d),
            (AUX_PE_CATHODE, ca.r4_d),
            (AUX_CS, ca.r5_d),
            (AUX_PS, ca.r6_d),
        ):
            scatter_interface_row(g_w, g_z, n + offset, deriv, acol, own)

        return f_w.build(), f_z.build(), g_w.build(), g_z.build()

    # --- consistency and diagnostics ---------------------------------------

    def consistent_init(self, w: np.ndarray, t: float = 0.0,
                        z_guess: Optional[np.ndarray] = None) -> np.ndarray:
        """Solve 0 = G(t, w, z) for the algebraic unknowns at fixed w."""
        from .daecore import NewtonOptions, newton_solve

        g = self.grid
        if z_guess is None:
            z = np.zeros(g.n_alg)
            # solid potentials start near the open-circuit value of the first
            # active cell; electrolyte potentials near the metal reference
            cs_surf = min(max(w[g.n_e], 1e-6), 1.0 - 1e-6)
            u0 = self.params.ocp(cs_surf) / self.scales.potential
            ctx = self.ctx_provider(t)
            phis0 = ctx.value if ctx.kind == "potential" else u0
            z[g.n_e : g.n_total] = phis0
            z[g.n_total + AUX_CE_ANODE] = w[0]
            z[g.n_total + AUX_CE_CATHODE] = w[g.n_e - 1]
            z[g.n_total + AUX_CS] = w[g.n_e]
            z[g.n_total + AUX_PS] = phis0
        else:
            z = z_guess.copy()

        def residual(zz):
            return self.rhs(t, w, zz)[1]

        def jacobian(zz):
            return self.rhs_and_blocks(t, w, zz)[2][3]

        opts = NewtonOptions(abs_tol=1e-11, rel_tol=0.0, step_tol=1e-13, max_iter=50)
        sol, _info = newton_solve(residual, jacobian, z, opts)
        return sol

    def lithium_totals(self, w: np.ndarray) -> tuple[float, float]:
        """dx-weighted dimensionless lithium content (electrolyte, active layer).

        Collector placeholder cells are excluded: they carry no lithium.
        """
        g = self.grid
        return (
            float(np.sum(g.ce_of(w)) * g.dx),
            float(np.sum(g.cs_am_of(w)) * g.dx),
        )

    def boundary_exchange(self, t, w, z) -> dict:
        """Interface currents and the matching phase-total growth rates."""
        g = self.grid
        n = g.n_total
        ca0, pa0, cm1, pm1, cs0, ps0 = z[n:]
        an = anode_closure(ca0, pa0, w[0], z[0], self.params, self.scales, self.groups, g.dx)
        cat = cathode_closure(
            cm1, pm1, cs0, ps0, w[g.n_e - 1], z[g.n_e - 1], w[g.n_e], z[g.n_e],
            self.params, self.scales, self.groups, g.dx,
        )
        gr = self.groups
        return {
            "i_bv_anode": an.i_bv,
            "i_bv_cathode": cat.i_bv,
            "elec_rate": (an.i_bv + cat.i_bv) * gr.bv_to_molar_flux_e,
            "solid_rate": -gr.eps_diff * cat.i_bv * gr.bv_to_molar_flux_s,
        }

    def cell_voltage(self, t, z) -> float:
        """Dimensionless solid potential at the collector boundary face."""
        ctx = self.ctx_provider(t)
        if ctx.kind == "potential":
            return ctx.value
        # constant-current: extend the last cell value with the local gradient
        g = self.grid
        return z[g.n_total - 1] - 0.5 * g.dx * self.groups.eps_cond * ctx.value
