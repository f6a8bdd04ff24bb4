"""Split-cell time integration with polynomial exchange of interface data.

The cell is cut at the intercalation interface. The electrolyte keeps its
four interface auxiliaries (both ends), the solid keeps its two; whatever a
subproblem cannot see arrives as a known function of time, built by fitting
a polynomial through recent interface history. Each macro interval advances
both subproblems independently, then re-solves the four interface residuals
for a mutually consistent interface vector

    u = (ce_gamma_se, phie_gamma_se, cs_gamma_se, phis_gamma_se).

Exchange data of polynomial degree q makes the interface error of one
interval O(dt^(q+2)), so sweeping intervals at fixed degree converges at
order q+1. "explicit" mode takes one pass per interval with extrapolated
data; "implicit" mode relaxes the interval to a fixed point, re-running it
with the data polynomial re-anchored at the freshly computed endpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    DomainError,
    MaxWrIterations,
    NonConvergence,
    SingularMatrixError,
    StepSizeUnderflow,
)
from .daecore import (
    IntegrateOptions,
    NewtonOptions,
    _barycentric_weights,
    consistent_project,
    integrate,
    newton_solve,
)
from .fvgrid import (
    AUX_CE_ANODE,
    AUX_CE_CATHODE,
    AUX_CS,
    AUX_PE_ANODE,
    AUX_PE_CATHODE,
    AUX_PS,
    BoundaryContext,
    CellSystem,
    Grid,
    _Coo,
    add_electrolyte_interior_blocks,
    add_solid_interior_blocks,
    anode_closure,
    cathode_closure,
    electrolyte_interior_faces,
    make_context_provider,
    scatter_interface_row,
    solid_face_conductivity,
)
from .model import (
    CharacteristicScales,
    DimensionlessGroups,
    PhysicalParameters,
    compute_groups,
    compute_scales,
)

__all__ = [
    "CouplingConfig",
    "CoupledDriver",
    "CoupledResult",
    "ElectrolyteSystem",
    "IntervalReport",
    "Predictor",
    "SolidSystem",
    "adapt_dt",
    "merge_states",
    "run_coupled",
    "split_state",
    "sync_solve",
]

# components of the interface vector u
U_CE, U_PE, U_CS, U_PS = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# subproblems
# ---------------------------------------------------------------------------


class ElectrolyteSystem:
    """Electrolyte half of the split cell.

    w = ce (n_e), z = [phi_e (n_e), ca0, pa0, cm1, pm1]. The solid-side
    interface pair (cs0, ps0) is foreign data: a callable of time.
    """

    def __init__(
        self,
        params: PhysicalParameters,
        grid: Grid,
        scales: Optional[CharacteristicScales] = None,
        groups: Optional[DimensionlessGroups] = None,
        foreign: Optional[Callable[[float], np.ndarray]] = None,
    ):
        self.params = params
        self.grid = grid
        self.scales = scales or compute_scales(params)
        self.groups = groups or compute_groups(params, self.scales)
        self.n_diff = grid.n_e
        self.n_alg = grid.n_e + 4
        self.foreign = foreign

    def initial_w(self) -> np.ndarray:
        return np.full(self.grid.n_e, self.params.conc_e_init / self.scales.conc_e)

    def rhs(self, t, w, z):
        return self._assemble(t, w, z, want_blocks=False)[:2]

    def rhs_and_blocks(self, t, w, z):
        return self._assemble(t, w, z, want_blocks=True)

    def _assemble(self, t, w, z, want_blocks):
        g = self.grid
        gr = self.groups
        dx = g.dx
        ne = g.n_e
        ce, pe = w, z[:ne]
        ca0, pa0, cm1, pm1 = z[ne], z[ne + 1], z[ne + 2], z[ne + 3]
        cs0, ps0 = self.foreign(t)

        if np.any(ce <= 0.0):
            raise DomainError("nonpositive electrolyte concentration")

        i_int, n_int, egr = electrolyte_interior_faces(
            ce, pe, dx, gr.kappa_d, gr.peclet, want_blocks
        )
        an = anode_closure(ca0, pa0, ce[0], pe[0], self.params, self.scales, gr, dx)
        # the closure's solid-side rows (r5, r6) are not assembled here; the
        # stand-in neighbour values only feed those
        ca = cathode_closure(
            cm1, pm1, cs0, ps0, ce[-1], pe[-1], cs0, ps0,
            self.params, self.scales, gr, dx,
        )

        i_face = np.empty(ne + 1)
        n_face = np.empty(ne + 1)
        i_face[0] = an.i_bv * gr.bv_to_current_e
        n_face[0] = an.i_bv * gr.bv_to_molar_flux_e
        i_face[1:ne] = i_int
        n_face[1:ne] = n_int
        i_face[ne] = -ca.i_bv * gr.bv_to_current_e
        n_face[ne] = -ca.i_bv * gr.bv_to_molar_flux_e

        f = -(n_face[1:] - n_face[:-1]) / dx
        gvec = np.empty(ne + 4)
        gvec[:ne] = -(i_face[1:] - i_face[:-1]) / dx
        gvec[ne:] = (an.r1, an.r2, ca.r3, ca.r4)

        if not want_blocks:
            return f, gvec, None

        acol = {"ca0": ne, "pa0": ne + 1, "cm1": ne + 2, "pm1": ne + 3}
        f_w = _Coo((ne, ne))
        f_z = _Coo((ne, ne + 4))
        g_w = _Coo((ne + 4, ne))
        g_z = _Coo((ne + 4, ne + 4))

        add_electrolyte_interior_blocks(f_w, f_z, g_w, g_z, egr, ne, dx)
        f_z.add(0, acol["pa0"], an.di_dpa0 * gr.bv_to_molar_flux_e / dx)
        g_z.add(0, acol["pa0"], an.di_dpa0 * gr.bv_to_current_e / dx)
        for key in ("cm1", "pm1"):  # cs0/ps0 are data: no columns
            f_z.add(ne - 1, acol[key], ca.d[key] * gr.bv_to_molar_flux_e / dx)
            g_z.add(ne - 1, acol[key], ca.d[key] * gr.bv_to_current_e / dx)

        own = {"ce0": ("w", 0), "pe0": ("z", 0),
               "ce_n": ("w", ne - 1), "pe_n": ("z", ne - 1)}
        for off, deriv in ((0, an.r1_d), (1, an.r2_d), (2, ca.r3_d), (3, ca.r4_d)):
            scatter_interface_row(g_w, g_z, ne + off, deriv, acol, own)

        return f, gvec, (f_w.build(), f_z.build(), g_w.build(), g_z.build())

    def consistent_init(self, w, t: float = 0.0, z_guess=None) -> np.ndarray:
        ne = self.grid.n_e
        if z_guess is None:
            z = np.zeros(self.n_alg)
            z[ne] = w[0]
            z[ne + 2] = w[-1]
        else:
            z = np.array(z_guess, dtype=float)
        return consistent_project(self, t, w, z)


class SolidSystem:
    """Solid half of the split cell, collector included.

    w = cs (n_s), z = [phi_s (n_s), cs0, ps0]. The electrolyte-side interface
    pair (cm1, pm1) is foreign data; the collector boundary condition stays
    with this subproblem.
    """

    def __init__(
        self,
        params: PhysicalParameters,
        grid: Grid,
        ctx_provider: Callable[[float], BoundaryContext],
        scales: Optional[CharacteristicScales] = None,
        groups: Optional[DimensionlessGroups] = None,
        foreign: Optional[Callable[[float], np.ndarray]] = None,
    ):
        self.params = params
        self.grid = grid
        self.ctx_provider = ctx_provider
        self.scales = scales or compute_scales(params)
        self.groups = groups or compute_groups(params, self.scales)
        self.n_diff = grid.n_s
        self.n_alg = grid.n_s + 2
        self.foreign = foreign
        self._sig = solid_face_conductivity(grid, self.groups.eps_cond)

    def initial_w(self) -> np.ndarray:
        return np.full(self.grid.n_s, self.params.conc_s_init / self.scales.conc_s)

    def rhs(self, t, w, z):
        return self._assemble(t, w, z, want_blocks=False)[:2]

    def rhs_and_blocks(self, t, w, z):
        return self._assemble(t, w, z, want_blocks=True)

    def _assemble(self, t, w, z, want_blocks):
        g = self.grid
        gr = self.groups
        dx = g.dx
        nam, ns = g.n_am, g.n_s
        cs, ps = w, z[:ns]
        cs0, ps0 = z[ns], z[ns + 1]
        cm1, pm1 = self.foreign(t)
        ctx = self.ctx_provider(t)

        # electrolyte cells are data here; their stand-ins only feed the
        # unassembled rows r3/r4
        ca = cathode_closure(
            cm1, pm1, cs0, ps0, cm1, pm1, cs[0], ps[0],
            self.params, self.scales, gr, dx,
        )

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

        f = np.zeros(ns)
        f[:nam] = -gr.eps_diff * (ns_face[1:] - ns_face[:-1]) / dx
        gvec = np.empty(ns + 2)
        gvec[:ns] = -(is_face[1:] - is_face[:-1]) / dx
        gvec[ns:] = (ca.r5, ca.r6)

        if not want_blocks:
            return f, gvec, None

        acol = {"cs0": ns, "ps0": ns + 1}
        f_w = _Coo((ns, ns))
        f_z = _Coo((ns, ns + 2))
        g_w = _Coo((ns + 2, ns))
        g_z = _Coo((ns + 2, ns + 2))

        add_solid_interior_blocks(f_w, g_z, self._sig, nam, ns, gr.eps_diff, dx,
                                  row_w=0, row_z=0)
        for key in ("cs0", "ps0"):  # cm1/pm1 are data: no columns
            f_z.add(0, acol[key], -ca.d[key] * gr.bv_to_molar_flux_s * gr.eps_diff / dx)
            g_z.add(0, acol[key], -ca.d[key] * gr.bv_to_current_s / dx)
        if ctx.kind == "potential":
            g_z.add(ns - 1, ns - 1, -2.0 / (gr.eps_cond * dx**2))

        own = {"cs_1": ("w", 0), "ps_1": ("z", 0)}
        scatter_interface_row(g_w, g_z, ns, ca.r5_d, acol, own)
        scatter_interface_row(g_w, g_z, ns + 1, ca.r6_d, acol, own)

        return f, gvec, (f_w.build(), f_z.build(), g_w.build(), g_z.build())

    def consistent_init(self, w, t: float = 0.0, z_guess=None) -> np.ndarray:
        ns = self.grid.n_s
        if z_guess is None:
            z = np.zeros(self.n_alg)
            cs_surf = min(max(w[0], 1e-6), 1.0 - 1e-6)
            ctx = self.ctx_provider(t)
            phis0 = ctx.value if ctx.kind == "potential" else (
                self.params.ocp(cs_surf) / self.scales.potential
            )
            z[:ns] = phis0
            z[ns] = w[0]
            z[ns + 1] = phis0
        else:
            z = np.array(z_guess, dtype=float)
        return consistent_project(self, t, w, z)

    def cell_voltage(self, t, z) -> float:
        ctx = self.ctx_provider(t)
        if ctx.kind == "potential":
            return ctx.value
        g = self.grid
        return z[g.n_s - 1] - 0.5 * g.dx * self.groups.eps_cond * ctx.value


# ---------------------------------------------------------------------------
# state bookkeeping
# ---------------------------------------------------------------------------


def split_state(grid: Grid, w: np.ndarray, z: np.ndarray):
    """Monolithic (w, z) -> (w_e, z_e, w_s, z_s, u)."""
    ne, n = grid.n_e, grid.n_total
    aux = z[n:]
    w_e = w[:ne].copy()
    w_s = w[ne:].copy()
    z_e = np.concatenate([z[:ne], aux[:4]])
    z_s = np.concatenate([z[ne:n], aux[4:6]])
    u = aux[2:6].copy()
    return w_e, z_e, w_s, z_s, u


def merge_states(grid: Grid, w_e, z_e, w_s, z_s, u):
    """Subdomain states plus the synced interface vector -> monolithic (w, z).

    The four shared auxiliaries come from u; the per-subproblem copies satisfy
    each side's residuals against its own (lagged) view of the other side.
    """
    ne, ns = grid.n_e, grid.n_s
    w = np.concatenate([w_e, w_s])
    aux = np.empty(6)
    aux[AUX_CE_ANODE] = z_e[ne]
    aux[AUX_PE_ANODE] = z_e[ne + 1]
    aux[AUX_CE_CATHODE] = u[U_CE]
    aux[AUX_PE_CATHODE] = u[U_PE]
    aux[AUX_CS] = u[U_CS]
    aux[AUX_PS] = u[U_PS]
    z = np.concatenate([z_e[:ne], z_s[:ns], aux])
    return w, z


def sync_solve(
    u0,
    ce_n: float,
    pe_n: float,
    cs_1: float,
    ps_1: float,
    params: PhysicalParameters,
    scales: CharacteristicScales,
    groups: DimensionlessGroups,
    dx: float,
) -> np.ndarray:
    """Re-solve the four intercalation-interface residuals for u with both
    neighbouring cell values frozen. 4x4 Newton; u0 is the starting guess."""
    keys = ("cm1", "pm1", "cs0", "ps0")

    def closure(u):
        return cathode_closure(u[0], u[1], u[2], u[3], ce_n, pe_n, cs_1, ps_1,
                               params, scales, groups, dx)

    def residual(u):
        cl = closure(u)
        return np.array([cl.r3, cl.r4, cl.r5, cl.r6])

    def jacobian(u):
        cl = closure(u)
        return np.array([
            [cl.r3_d.get(k, 0.0) for k in keys],
            [cl.r4_d.get(k, 0.0) for k in keys],
            [cl.r5_d.get(k, 0.0) for k in keys],
            [cl.r6_d.get(k, 0.0) for k in keys],
        ])

    u, _ = newton_solve(residual, jacobian, np.array(u0, dtype=float),
                        NewtonOptions(abs_tol=1e-12, step_tol=1e-14, max_iter=30))
    return u


# ---------------------------------------------------------------------------
# interface history polynomials
# ---------------------------------------------------------------------------


class Predictor:
    """Vector polynomial through (t_i, u_i) samples, barycentric form.

    With nodes up to the current time it extrapolates forward; handed a
    candidate endpoint it interpolates across the interval instead.
    """

    def __init__(self, ts, values):
        self.ts = np.asarray(ts, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.ts.size != self.values.shape[0]:
            raise ValueError("node/value count mismatch")
        self.weights = _barycentric_weights(self.ts)

    @property
    def degree(self) -> int:
        return self.ts.size - 1

    def __call__(self, t: float) -> np.ndarray:
        d = t - self.ts
        hit = np.abs(d) < 1e-14 * max(1.0, abs(t))
        if np.any(hit):
            return self.values[int(np.argmax(hit))].copy()
        q = self.weights / d
        return (q @ self.values) / np.sum(q)


def adapt_dt(
    dt: float,
    epsilon: float,
    tol: float,
    order: int,
    dt_min: float = 0.0,
    dt_max: Optional[float] = None,
) -> float:
    """Next macro interval from the pair estimate epsilon = O(dt^order).

    Deliberately no safety factor: epsilon == tol keeps dt exactly, and the
    growth is capped at doubling (which also handles epsilon == 0). Shrink is
    capped at a tenth per attempt: a low-order estimate far above target says
    little about how far down to go, and overshooting clusters the interface
    history so tightly that later fits amplify subproblem noise.
    """
    if epsilon == 0.0:
        factor = 2.0
    else:
        factor = min(2.0, max(0.1, (tol / epsilon) ** (1.0 / order)))
    dt_next = dt * factor
    if dt_max is not None:
        dt_next = min(dt_next, dt_max)
    return max(dt_next, dt_min)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass
class CouplingConfig:
    """Macro-interval exchange settings.

    ``order`` is the convergence order of the exchange, i.e. extrapolation
    degree + 1. In adaptive mode each interval runs a (order-1, order) degree
    pair; their endpoint difference estimates the lower cycle's interface
    error and the higher cycle is the one kept.
    """

    order: int = 2
    mode: str = "explicit"  # "explicit" | "implicit"
    tol: float = 1e-6
    dt_init: Optional[float] = None
    dt_min: float = 1e-10
    dt_max: Optional[float] = None
    max_intervals: int = 100_000
    fixed_intervals: Optional[int] = None
    wr_tol: float = 1e-10
    max_wr_iterations: int = 25
    subproblem_rtol: Optional[float] = None
    history_cap: int = 8

    def __post_init__(self):
        if not 1 <= self.order <= 4:
            raise ValueError("coupling order must be in 1..4")
        if self.mode not in ("explicit", "implicit"):
            raise ValueError(f"unknown coupling mode {self.mode!r}")

    def resolved_subproblem_rtol(self) -> float:
        if self.subproblem_rtol is not None:
            return self.subproblem_rtol
        if self.fixed_intervals is not None:
            return 1e-10
        # one order below the interface target, with a floor
        return max(1e-13, 0.1 * self.tol)


@dataclass
class IntervalReport:
    """One attempted macro interval."""

    t: float
    dt: float
    epsilon: float
    wr_iterations: int
    accepted: bool


@dataclass
class CoupledResult:
    grid: Grid
    t: np.ndarray       # accepted interval endpoints, t[0] = start
    u: np.ndarray       # (len(t), 4) synced interface vector
    w_e: np.ndarray
    z_e: np.ndarray
    w_s: np.ndarray
    z_s: np.ndarray
    voltage: np.ndarray  # dimensionless collector potential
    reports: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def merged(self, i: int = -1):
        """Monolithic (w, z) at endpoint i."""
        return merge_states(self.grid, self.w_e[i], self.z_e[i],
                            self.w_s[i], self.z_s[i], self.u[i])

    def final_state(self):
        """(w_e, z_e, w_s, z_s, u) tuple for chaining into another run."""
        return (self.w_e[-1].copy(), self.z_e[-1].copy(),
                self.w_s[-1].copy(), self.z_s[-1].copy(), self.u[-1].copy())


_INTERVAL_FAILURES = (NonConvergence, SingularMatrixError, DomainError,
                      StepSizeUnderflow, MaxWrIterations)


class CoupledDriver:
    """Advance the split cell over macro intervals."""

    def __init__(
        self,
        params: PhysicalParameters,
        grid: Grid,
        mode,
        coupling: Optional[CouplingConfig] = None,
        scales: Optional[CharacteristicScales] = None,
        groups: Optional[DimensionlessGroups] = None,
    ):
        self.params = params
        self.grid = grid
        self.mode = mode
        self.coupling = coupling or CouplingConfig()
        self.scales = scales or compute_scales(params)
        self.groups = groups or compute_groups(params, self.scales)
        ctx_provider = make_context_provider(mode, params, self.scales)
        self.elec = ElectrolyteSystem(params, grid, self.scales, self.groups)
        self.solid = SolidSystem(params, grid, ctx_provider, self.scales, self.groups)
        self._sub_rtol = self.coupling.resolved_subproblem_rtol()
        self._dt_hint_e: Optional[float] = None
        self._dt_hint_s: Optional[float] = None
        self.stats = {
            "n_intervals": 0, "n_rejected": 0, "n_cycles": 0, "n_wr_sweeps": 0,
            "sub_n_steps": 0, "sub_n_rhs": 0, "sub_n_jac": 0, "sub_n_lu": 0,
        }

    # --- initial data -------------------------------------------------------

    def initial_state(self, t0: float = 0.0):
        """Consistent split start state, obtained from the assembled cell so
        both half-problems begin from the same algebraic picture."""
        full = CellSystem(self.params, self.grid,
                          make_context_provider(self.mode, self.params, self.scales),
                          self.scales, self.groups)
        w0 = full.initial_w()
        z0 = full.consistent_init(w0, t0)
        return split_state(self.grid, w0, z0)

    # --- one macro interval -------------------------------------------------

    def _advance(self, t, dt, data: Predictor, state):
        """Integrate both subproblems over [t, t+dt] against the given
        exchange polynomial. Returns the endpoint states."""
        w_e, z_e, w_s, z_s = state
        self.elec.foreign = lambda tt: data(tt)[U_CS:U_PS + 1]
        self.solid.foreign = lambda tt: data(tt)[U_CE:U_PE + 1]

        # fresh exchange data shifts each side's algebraic picture at the
        # interval start: re-project before stepping
        z_e0 = consistent_project(self.elec, t, w_e, z_e)
        z_s0 = consistent_project(self.solid, t, w_s, z_s)

        rtol = self._sub_rtol
        opts_e = IntegrateOptions(
            rtol=rtol, atol_w=1e-2 * rtol, atol_z=rtol, jac_policy="lagged",
            dt_init=None if self._dt_hint_e is None else min(self._dt_hint_e, dt),
        )
        opts_s = IntegrateOptions(
            rtol=rtol, atol_w=1e-2 * rtol, atol_z=rtol, jac_policy="lagged",
            dt_init=None if self._dt_hint_s is None else min(self._dt_hint_s, dt),
        )
        sol_e = integrate(self.elec, (t, t + dt), w_e, z_e0, opts_e)
        sol_s = integrate(self.solid, (t, t + dt), w_s, z_s0, opts_s)
        self._dt_hint_e = sol_e.stats.get("dt_last")
        self._dt_hint_s = sol_s.stats.get("dt_last")
        for sol in (sol_e, sol_s):
            self.stats["sub_n_steps"] += sol.stats["n_steps"]
            self.stats["sub_n_rhs"] += sol.stats["n_rhs"]
            self.stats["sub_n_jac"] += sol.stats["n_jac"]
            self.stats["sub_n_lu"] += sol.stats["n_lu"]
        return sol_e.w[-1], sol_e.z[-1], sol_s.w[-1], sol_s.z[-1]

    def _sync(self, state) -> np.ndarray:
        w_e, z_e, w_s, z_s = state
        ne, ns = self.grid.n_e, self.grid.n_s
        # each side's own interface copies make an excellent guess
        guess = np.array([z_e[ne + 2], z_e[ne + 3], z_s[ns], z_s[ns + 1]])
        return sync_solve(guess, w_e[-1], z_e[ne - 1], w_s[0], z_s[0],
                          self.params, self.scales, self.groups, self.grid.dx)

    def _cycle(self, degree, t, dt, hist_t, hist_u, state):
        """One coupling cycle at the given exchange degree. Returns the
        endpoint states, the synced interface vector, and the sweep count."""
        cfg = self.coupling
        self.stats["n_cycles"] += 1
        if len(hist_t) < degree + 1:
            raise ValueError(
                f"degree-{degree} exchange needs {degree + 1} history samples, "
                f"have {len(hist_t)}"
            )
        data = Predictor(hist_t[-(degree + 1):], hist_u[-(degree + 1):])
        if cfg.mode == "explicit":
            new_state = self._advance(t, dt, data, state)
            return new_state, self._sync(new_state), 0

        # waveform relaxation: the first sweep extrapolates, later sweeps
        # interpolate through the newest endpoint candidate
        u_prev = hist_u[-1].copy()
        for sweep in range(cfg.max_wr_iterations):
            self.stats["n_wr_sweeps"] += 1
            new_state = self._advance(t, dt, data, state)
            u_cand = self._sync(new_state)
            scale = cfg.wr_tol * float(np.linalg.norm(u_prev)) + 0.1 * cfg.wr_tol
            if float(np.linalg.norm(u_cand - u_prev)) / scale < 1.0:
                return new_state, u_cand, sweep + 1
            u_prev = u_cand
            if degree == 0:
                data = Predictor([t + dt], [u_cand])
            else:
                data = Predictor(
                    list(hist_t[-degree:]) + [t + dt],
                    list(hist_u[-degree:]) + [u_cand],
                )
        raise MaxWrIterations(
            f"interface relaxation not converged in {cfg.max_wr_iterations} sweeps "
            f"on [{t}, {t + dt}]"
        )

    # --- whole runs ----------------------------------------------------------

    def run(self, t_span, start=None) -> CoupledResult:
        cfg = self.coupling
        t0, t1 = float(t_span[0]), float(t_span[1])
        if not t1 > t0:
            raise ValueError("need t1 > t0")
        if start is None:
            w_e, z_e, w_s, z_s, u = self.initial_state(t0)
        else:
            w_e, z_e, w_s, z_s, u = (np.array(a, dtype=float) for a in start)
        state = (w_e, z_e, w_s, z_s)

        hist_t = [t0]
        hist_u = [u.copy()]
        out_t = [t0]
        out_u = [u.copy()]
        out_states = [state]
        reports: list[IntervalReport] = []
        d = cfg.order - 1

        def commit(t_new, new_state, u_new):
            hist_t.append(t_new)
            hist_u.append(u_new.copy())
            if len(hist_t) > cfg.history_cap:
                del hist_t[0], hist_u[0]
            out_t.append(t_new)
            out_u.append(u_new.copy())
            out_states.append(new_state)
            self.stats["n_intervals"] += 1

        if cfg.fixed_intervals is not None:
            n = int(cfg.fixed_intervals)
            if n < 1:
                raise ValueError("fixed_intervals must be positive")
            t = t0
            for k in range(n):
                t_target = t0 + (k + 1) * (t1 - t0) / n
                dt = t_target - t
                degree = min(d, len(hist_t) - 1)  # ramp up as history builds
                state, u_new, sweeps = self._cycle(degree, t, dt, hist_t, hist_u, state)
                commit(t_target, state, u_new)
                reports.append(IntervalReport(t, dt, math.nan, sweeps, True))
                t = t_target
            return self._package(out_t, out_u, out_states, reports)

        dt = cfg.dt_init if cfg.dt_init is not None else (t1 - t0) / 100.0
        if cfg.dt_max is not None:
            dt = min(dt, cfg.dt_max)
        t = t0
        attempts = 0
        while t < t1 - 1e-12 * max(1.0, abs(t1)):
            if attempts >= cfg.max_intervals:
                raise NonConvergence(f"exceeded {cfg.max_intervals} intervals at t={t}")
            attempts += 1
            dt = min(dt, t1 - t)
            if dt < cfg.dt_min:
                raise StepSizeUnderflow(
                    f"macro interval {dt} fell below {cfg.dt_min} at t={t}"
                )

            if len(hist_t) == 1:
                # no history to estimate with: take one constant-exchange
                # interval on trust to seed the ramp
                state, u_new, sweeps = self._cycle(0, t, dt, hist_t, hist_u, state)
                commit(t + dt, state, u_new)
                reports.append(IntervalReport(t, dt, math.nan, sweeps, True))
                t += dt
                continue

            q = min(d, len(hist_t) - 2)
            try:
                state_lo, u_lo, sweeps_lo = self._cycle(q, t, dt, hist_t, hist_u, state)
                state_hi, u_hi, sweeps_hi = self._cycle(q + 1, t, dt, hist_t, hist_u, state)
            except _INTERVAL_FAILURES:
                self.stats["n_rejected"] += 1
                reports.append(IntervalReport(t, dt, math.inf, 0, False))
                self._dt_hint_e = self._dt_hint_s = None
                dt *= 0.5
                continue

            epsilon = float(np.linalg.norm(u_lo - u_hi))
            accepted = epsilon <= cfg.tol
            reports.append(IntervalReport(t, dt, epsilon, sweeps_lo + sweeps_hi, accepted))
            if accepted:
                state = state_hi
                commit(t + dt, state, u_hi)
                t += dt
            else:
                self.stats["n_rejected"] += 1
            dt = adapt_dt(dt, epsilon, cfg.tol, q + 1, cfg.dt_min, cfg.dt_max)
        return self._package(out_t, out_u, out_states, reports)

    def _package(self, out_t, out_u, out_states, reports) -> CoupledResult:
        volts = np.array([
            self.solid.cell_voltage(tt, zs)
            for tt, (_, _, _, zs) in zip(out_t, out_states)
        ])
        return CoupledResult(
            grid=self.grid,
            t=np.array(out_t),
            u=np.array(out_u),
            w_e=np.array([s[0] for s in out_states]),
            z_e=np.array([s[1] for s in out_states]),
            w_s=np.array([s[2] for s in out_states]),
            z_s=np.array([s[3] for s in out_states]),
            voltage=volts,
            reports=reports,
            stats=dict(self.stats),
        )


def run_coupled(
    params: PhysicalParameters,
    grid: Grid,
    mode,
    t_span,
    coupling: Optional[CouplingConfig] = None,
    scales: Optional[CharacteristicScales] = None,
    groups: Optional[DimensionlessGroups] = None,
    start=None,
) -> CoupledResult:
    """Convenience wrapper: build a driver and advance it over t_span."""
    driver = CoupledDriver(params, grid, mode, coupling, scales, groups)
    return driver.run(t_span, start=start)
