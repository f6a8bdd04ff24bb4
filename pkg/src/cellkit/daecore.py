"""Implicit Runge-Kutta time integration for semi-explicit index-1 DAEs.

Systems expose ``n_diff``, ``n_alg``, ``rhs(t, w, z) -> (f, g)`` and
``rhs_and_blocks(t, w, z) -> (f, g, (F_w, F_z, G_w, G_z))`` with sparse
Jacobian blocks. The stage equations for one step of size dt are

    W_i = w_n + dt * sum_j a_ij F(t_j, W_j, Z_j),   0 = G(t_i, W_i, Z_i)

solved together by a damped Newton iteration; stiffly accurate tableaux make
the last stage the step solution, so the algebraic constraint holds at every
accepted point. The algebraic stage residual is scaled by dt so that both row
families converge at commensurate tolerances.

Schemes are generated from collocation conditions at construction time, and
the Radau error estimate is assembled from the embedded third-order weights;
nothing is hard-coded beyond the choice of collocation points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import (
    DomainError,
    NonConvergence,
    SingularMatrixError,
    StepSizeUnderflow,
)

# ---------------------------------------------------------------------------
# schemes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IRKScheme:
    """Stiffly accurate implicit Runge-Kutta tableau with optional embedded
    error weights (``err_weights`` applies to stage increments, ``gamma0`` to
    the step-start derivative)."""

    name: str
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    order: int
    err_exponent: float
    err_weights: Optional[np.ndarray] = None
    gamma0: Optional[float] = None
    mu_real: Optional[float] = None

    @property
    def n_stages(self) -> int:
        return len(self.b)

    @property
    def has_embedded_error(self) -> bool:
        return self.err_weights is not None


def _collocation_matrix(c: np.ndarray) -> np.ndarray:
    """a_ij = integral of the j-th Lagrange basis polynomial from 0 to c_i."""
    s = len(c)
    a = np.empty((s, s))
    for j in range(s):
        others = np.delete(c, j)
        basis = np.polynomial.Polynomial.fromroots(others) if s > 1 else np.polynomial.Polynomial([1.0])
        basis = basis / basis(c[j])
        anti = basis.integ()
        a[:, j] = anti(c) - anti(0.0)
    return a


def radau_iia3() -> IRKScheme:
    """Three-stage Radau IIA collocation (order 5) with an embedded
    third-order error estimator."""
    s = 3
    # right Radau points: roots of the (s-1)-th derivative of x^(s-1) (x-1)^s
    nodal = np.polynomial.Polynomial.fromroots([0.0] * (s - 1) + [1.0] * s)
    c = np.sort(nodal.deriv(s - 1).roots().real)
    a = _collocation_matrix(c)
    b = a[-1].copy()

    a_inv = np.linalg.inv(a)
    eigs = np.linalg.eigvals(a_inv)
    real_eigs = eigs[np.abs(eigs.imag) < 1e-9].real
    assert len(real_eigs) == 1
    mu = float(real_eigs[0])
    gamma0 = 1.0 / mu

    # embedded weights: first-same-as-last term gamma0 plus bhat matching the
    # order-3 quadrature conditions
    vander = np.vstack([np.ones(s), c, c**2])
    bhat = np.linalg.solve(vander, np.array([1.0 - gamma0, 0.5, 1.0 / 3.0]))
    # rewrite the defect bhat - b against stage increments: hf(Y) = A^-1 Z
    err_weights = mu * np.linalg.solve(a.T, bhat - b)

    return IRKScheme(
        name="radau_iia3",
        a=a,
        b=b,
        c=c,
        order=5,
        err_exponent=0.25,
        err_weights=err_weights,
        gamma0=gamma0,
        mu_real=mu,
    )


def implicit_euler() -> IRKScheme:
    """Backward Euler; step-doubling supplies the error estimate."""
    return IRKScheme(
        name="implicit_euler",
        a=np.array([[1.0]]),
        b=np.array([1.0]),
        c=np.array([1.0]),
        order=1,
        err_exponent=0.5,
    )


_SCHEMES = {"radau_iia3": radau_iia3, "implicit_euler": implicit_euler}


def get_scheme(name: str) -> IRKScheme:
    try:
        return _SCHEMES[name]()
    except KeyError:
        raise ValueError(f"unknown scheme {name!r}; have {sorted(_SCHEMES)}") from None


# ---------------------------------------------------------------------------
# generic Newton
# ---------------------------------------------------------------------------


@dataclass
class NewtonOptions:
    abs_tol: float = 1e-10
    rel_tol: float = 0.0  # applied to the initial residual magnitude
    step_tol: Optional[float] = None  # increment-based acceptance (noise-floor escape)
    max_iter: int = 25
    max_backtracks: int = 8


@dataclass
class NewtonInfo:
    iterations: int
    residual_scaled: float
    converged: bool


class _Factorization:
    """Uniform solve interface over dense and sparse Jacobians."""

    def __init__(self, matrix):
        if sp.issparse(matrix):
            try:
                self._lu = splu(matrix.tocsc())
            except RuntimeError as exc:
                raise SingularMatrixError(str(exc)) from exc
            self._dense = None
        else:
            mat = np.asarray(matrix, dtype=float)
            if not np.all(np.isfinite(mat)):
                raise SingularMatrixError("non-finite Jacobian")
            self._lu = None
            self._dense = mat

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._lu is not None:
            return self._lu.solve(rhs)
        try:
            return np.linalg.solve(self._dense, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError(str(exc)) from exc


def newton_solve(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], object],
    x0: np.ndarray,
    opts: NewtonOptions,
) -> tuple[np.ndarray, NewtonInfo]:
    """Damped Newton with componentwise residual tolerances.

    The Jacobian callable is invoked once per iteration. Damping uses the
    affine-invariant monotonicity test: a trial point is accepted when the
    Newton correction computed from it (with the current factorization) is
    shorter than the present one, which tolerates the transient residual
    growth a plain residual line search chokes on.
    """
    x = np.array(x0, dtype=float)
    r = residual(x)
    tol = opts.abs_tol + opts.rel_tol * np.abs(r)
    scaled = float(np.max(np.abs(r) / tol))
    if not math.isfinite(scaled):
        raise NonConvergence("non-finite residual at the initial point")
    iterations = 0
    while scaled > 1.0:
        if iterations >= opts.max_iter:
            raise NonConvergence(
                f"no convergence in {opts.max_iter} iterations",
                iterations=iterations,
                residual_norm=scaled,
            )
        factor = _Factorization(jacobian(x))
        dx = factor.solve(-r)
        weight = 1.0 + np.abs(x)
        inc_norm = float(np.linalg.norm(dx / weight))
        if not math.isfinite(inc_norm):
            raise NonConvergence("non-finite Newton correction",
                                 iterations=iterations, residual_norm=scaled)
        # increments far below the requested resolution mean the residual sits
        # at its floating-point floor: accept the full step and stop
        at_floor = opts.step_tol is not None and float(
            np.max(np.abs(dx) / weight)
        ) <= opts.step_tol
        lam = 1.0
        accepted = False
        for _ in range(opts.max_backtracks + 1):
            try:
                x_try = x + lam * dx
                r_try = residual(x_try)
                s_try = float(np.max(np.abs(r_try) / tol))
            except DomainError:
                lam *= 0.5
                continue
            if not math.isfinite(s_try):
                lam *= 0.5
                continue
            if at_floor or s_try <= 1.0:
                x, r, scaled = x_try, r_try, s_try
                accepted = True
                break
            dx_bar = factor.solve(-r_try)
            bar_norm = float(np.linalg.norm(dx_bar / weight))
            if math.isfinite(bar_norm) and bar_norm <= (1.0 - 0.5 * lam) * inc_norm + 1e-30:
                x, r, scaled = x_try, r_try, s_try
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            raise NonConvergence(
                "line search stalled",
                iterations=iterations,
                residual_norm=scaled,
            )
        iterations += 1
        if at_floor:
            break
    return x, NewtonInfo(iterations=iterations, residual_scaled=scaled, converged=True)


def jacobian_fd(
    fun: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    rel_step: Optional[float] = None,
) -> np.ndarray:
    """Dense central-difference Jacobian, for verification only."""
    x = np.asarray(x, dtype=float)
    h0 = rel_step if rel_step is not None else float(np.finfo(float).eps) ** (1.0 / 3.0)
    f0 = np.asarray(fun(x))
    jac = np.empty((f0.size, x.size))
    for i in range(x.size):
        h = h0 * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * h)
    return jac


# ---------------------------------------------------------------------------
# stage system
# ---------------------------------------------------------------------------


class _Workspace:
    """Per-integration cache of stage Jacobian blocks and factorizations.

    ``version`` increments whenever the blocks are re-evaluated; factorizations
    are keyed by (version, dt) so an unchanged Jacobian reused at an unchanged
    step size costs nothing.
    """

    def __init__(self):
        self.version = -1
        self.blocks = None  # list of (F_w, F_z, G_w, G_z), one per stage
        self.stage_lus: dict = {}
        self.err_lus: dict = {}

    def refresh(self, system, t, dt, scheme, stage_w, stage_z, stats):
        blocks = []
        for i in range(scheme.n_stages):
            _, _, blk = system.rhs_and_blocks(t + scheme.c[i] * dt, stage_w[i], stage_z[i])
            blocks.append(blk)
        self.blocks = blocks
        self.version += 1
        self.stage_lus.clear()
        self.err_lus.clear()
        stats["n_jac"] += 1

    def stage_lu(self, scheme, dt, n_diff, stats):
        key = dt
        if key not in self.stage_lus:
            self.stage_lus[key] = _Factorization(
                _stage_matrix(self.blocks, scheme.a, dt, n_diff)
            )
            stats["n_lu"] += 1
            if len(self.stage_lus) > 4:
                self.stage_lus.pop(next(iter(self.stage_lus)))
        return self.stage_lus[key]

    def error_lu(self, scheme, dt, n_diff, stats):
        key = dt
        if key not in self.err_lus:
            f_w, f_z, g_w, g_z = self.blocks[0]
            eye = sp.identity(n_diff, format="csr") * (scheme.mu_real / dt)
            matrix = sp.bmat([[eye - f_w, -f_z], [-g_w, -g_z]], format="csc")
            self.err_lus[key] = _Factorization(matrix)
            stats["n_lu"] += 1
            if len(self.err_lus) > 4:
                self.err_lus.pop(next(iter(self.err_lus)))
        return self.err_lus[key]


def _stage_matrix(blocks, a, dt, n_diff) -> sp.csc_matrix:
    """Newton matrix of the stacked stage equations, stage-major ordering."""
    s = a.shape[0]
    eye = sp.identity(n_diff, format="csr")
    grid = [[None] * (2 * s) for _ in range(2 * s)]
    for i in range(s):
        for j in range(s):
            f_w, f_z, _, _ = blocks[j]
            coeff = -dt * a[i, j]
            block_ww = coeff * f_w
            if i == j:
                block_ww = eye + block_ww
            grid[2 * i][2 * j] = block_ww
            grid[2 * i][2 * j + 1] = coeff * f_z
        _, _, g_w, g_z = blocks[i]
        grid[2 * i + 1][2 * i] = -dt * g_w
        grid[2 * i + 1][2 * i + 1] = -dt * g_z
    return sp.bmat(grid, format="csc")


@dataclass
class _StageResult:
    stage_w: np.ndarray  # (s, n_diff)
    stage_z: np.ndarray  # (s, n_alg)
    f_stages: np.ndarray  # (s, n_diff)
    iterations: int


def _solve_stages(
    system,
    scheme: IRKScheme,
    t: float,
    w_n: np.ndarray,
    z_n: np.ndarray,
    dt: float,
    guess_w: np.ndarray,
    guess_z: np.ndarray,
    work: _Workspace,
    cfg: "IntegrateOptions",
    stats: dict,
) -> _StageResult:
    s = scheme.n_stages
    nd, na = system.n_diff, system.n_alg
    stage_w = guess_w.copy()
    stage_z = guess_z.copy()

    ntol_w = min(cfg.newton_base_tol_w, 0.05 * cfg.rtol)
    ntol_z = min(cfg.newton_base_tol_z, 5.0 * cfg.rtol)
    tol = np.concatenate(
        [np.concatenate([np.full(nd, ntol_w), np.full(na, dt * ntol_z)]) for _ in range(s)]
    )
    # increment weights: much tighter than the solution tolerance so stopping
    # on stagnation never pollutes the error estimate
    inc_w = 0.01 * (cfg.atol_w + cfg.rtol * np.abs(w_n))
    inc_z = 0.01 * (cfg.atol_z + cfg.rtol * np.abs(z_n))

    def eval_residual(sw, sz):
        f_all = np.empty((s, nd))
        g_all = np.empty((s, na))
        for i in range(s):
            f_all[i], g_all[i] = system.rhs(t + scheme.c[i] * dt, sw[i], sz[i])
            stats["n_rhs"] += 1
        r_w = sw - w_n[None, :] - dt * (scheme.a @ f_all)
        r_z = -dt * g_all
        res = np.concatenate([np.concatenate([r_w[i], r_z[i]]) for i in range(s)])
        return res, f_all

    try:
        res, f_all = eval_residual(stage_w, stage_z)
    except DomainError:
        # extrapolated guess left the admissible set; restart from constant
        stage_w = np.tile(w_n, (s, 1))
        stage_z = np.tile(z_n, (s, 1))
        res, f_all = eval_residual(stage_w, stage_z)

    scaled = float(np.max(np.abs(res) / tol))
    if not math.isfinite(scaled):
        raise NonConvergence("non-finite stage residual")

    if work.blocks is None or cfg.jac_policy != "lagged":
        work.refresh(system, t, dt, scheme, stage_w, stage_z, stats)

    iterations = 0
    while scaled > 1.0:
        if iterations >= cfg.newton_max_iter:
            raise NonConvergence(
                "stage iteration did not converge",
                iterations=iterations,
                residual_norm=scaled,
            )
        if cfg.jac_policy == "iteration" and iterations > 0:
            work.refresh(system, t, dt, scheme, stage_w, stage_z, stats)
        lu = work.stage_lu(scheme, dt, nd, stats)
        dx = lu.solve(-res)
        stats["n_newton"] += 1

        inc = dx.reshape(s, nd + na)
        inc_scaled = max(
            float(np.max(np.abs(inc[:, :nd]) / inc_w[None, :])),
            float(np.max(np.abs(inc[:, nd:]) / inc_z[None, :])),
        )
        inc_norm = float(np.linalg.norm(dx))
        if not math.isfinite(inc_norm):
            raise NonConvergence("non-finite stage correction",
                                 iterations=iterations, residual_norm=scaled)
        at_floor = inc_scaled <= 1.0  # update far below the solution tolerance

        lam = 1.0
        accepted = False
        for _ in range(cfg.newton_backtracks + 1):
            try:
                trial = inc * lam
                sw = stage_w + trial[:, :nd]
                sz = stage_z + trial[:, nd:]
                res_try, f_try = eval_residual(sw, sz)
                s_try = float(np.max(np.abs(res_try) / tol))
            except DomainError:
                lam *= 0.5
                continue
            if not math.isfinite(s_try):
                lam *= 0.5
                continue
            if at_floor or s_try <= 1.0:
                stage_w, stage_z, res, f_all, scaled = sw, sz, res_try, f_try, s_try
                accepted = True
                break
            # affine-invariant monotonicity: the correction from the trial
            # point (same factorization) must shrink
            bar_norm = float(np.linalg.norm(lu.solve(-res_try)))
            if math.isfinite(bar_norm) and bar_norm <= (1.0 - 0.5 * lam) * inc_norm + 1e-300:
                stage_w, stage_z, res, f_all, scaled = sw, sz, res_try, f_try, s_try
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            raise NonConvergence(
                "stage line search stalled",
                iterations=iterations,
                residual_norm=scaled,
            )
        iterations += 1
        if at_floor:
            break

    return _StageResult(stage_w=stage_w, stage_z=stage_z, f_stages=f_all, iterations=iterations)


# ---------------------------------------------------------------------------
# dense output
# ---------------------------------------------------------------------------


class _Segment:
    """Interpolant over one accepted step, polynomial through the step start
    and the collocation stages (linear for the one-stage scheme)."""

    __slots__ = ("t_left", "dt", "nodes", "weights", "values")

    def __init__(self, t_left, dt, nodes, weights, values):
        self.t_left = t_left
        self.dt = dt
        self.nodes = nodes
        self.weights = weights
        self.values = values  # (len(nodes), n)

    def eval(self, t: float) -> np.ndarray:
        theta = (t - self.t_left) / self.dt
        diff = theta - self.nodes
        hit = np.abs(diff) < 1e-14
        if np.any(hit):
            return self.values[int(np.argmax(hit))].copy()
        coef = self.weights / diff
        return (coef @ self.values) / np.sum(coef)


def _barycentric_weights(nodes: np.ndarray) -> np.ndarray:
    w = np.ones(len(nodes))
    for j in range(len(nodes)):
        for m in range(len(nodes)):
            if m != j:
                w[j] /= nodes[j] - nodes[m]
    return w


class ContinuousSolution:
    """Piecewise collocation interpolant over the whole integration."""

    def __init__(self, segments):
        self._segments = segments
        self._rights = np.array([seg.t_left + seg.dt for seg in segments])

    @property
    def t_min(self) -> float:
        return self._segments[0].t_left

    @property
    def t_max(self) -> float:
        return float(self._rights[-1])

    def __call__(self, t):
        if np.ndim(t) == 0:
            return self._eval_one(float(t))
        return np.array([self._eval_one(float(ti)) for ti in np.asarray(t).ravel()])

    def _eval_one(self, t: float) -> np.ndarray:
        pad = 1e-12 * max(1.0, abs(self.t_max))
        if t < self.t_min - pad or t > self.t_max + pad:
            raise ValueError(f"time {t} outside solution range [{self.t_min}, {self.t_max}]")
        idx = int(np.searchsorted(self._rights, t - pad))
        idx = min(idx, len(self._segments) - 1)
        return self._segments[idx].eval(t)


# ---------------------------------------------------------------------------
# integrator driver
# ---------------------------------------------------------------------------


@dataclass
class IntegrateOptions:
    rtol: float = 1e-8
    atol_w: float = 1e-10
    atol_z: float = 1e-8
    scheme: str = "radau_iia3"
    dt_init: Optional[float] = None
    dt_min: float = 1e-14
    dt_max: Optional[float] = None
    max_steps: int = 500_000
    fixed_steps: Optional[int] = None  # uniform grid, no error control
    jac_policy: str = "step"  # "iteration" | "step" | "lagged"
    newton_max_iter: int = 10
    newton_backtracks: int = 8
    newton_base_tol_w: float = 1e-10
    newton_base_tol_z: float = 1e-8
    safety: float = 0.9
    factor_min: float = 0.2
    factor_max: float = 8.0
    dense_output: bool = False
    record_stages: bool = False

    def __post_init__(self):
        if self.jac_policy not in ("iteration", "step", "lagged"):
            raise ValueError(f"unknown jac_policy {self.jac_policy!r}")


@dataclass
class StageRecord:
    """Everything needed to replay one accepted solve's quadrature."""

    t: float
    dt: float
    b: np.ndarray
    stage_w: np.ndarray
    stage_z: np.ndarray
    f_stages: np.ndarray


@dataclass
class Solution:
    t: np.ndarray
    w: np.ndarray
    z: np.ndarray
    t_eval: Optional[np.ndarray]
    w_eval: Optional[np.ndarray]
    z_eval: Optional[np.ndarray]
    dense: Optional[ContinuousSolution]
    stats: dict
    stage_records: Optional[list]


def _error_norm(err, w_ref, z_ref, cfg) -> float:
    nd = w_ref.size
    weight = np.concatenate(
        [cfg.atol_w + cfg.rtol * np.abs(w_ref), cfg.atol_z + cfg.rtol * np.abs(z_ref)]
    )
    return float(np.sqrt(np.mean((err / weight) ** 2)))


def integrate(
    system,
    t_span: tuple[float, float],
    w0: np.ndarray,
    z0: Optional[np.ndarray] = None,
    options: Optional[IntegrateOptions] = None,
    t_eval: Optional[np.ndarray] = None,
) -> Solution:
    """Drive the stage solver from t0 to t1 with embedded error control
    (or on a fixed uniform grid when ``fixed_steps`` is set)."""
    cfg = options or IntegrateOptions()
    scheme = get_scheme(cfg.scheme)
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError("need t1 > t0")
    horizon = t1 - t0

    w = np.array(w0, dtype=float)
    if z0 is None:
        z = system.consistent_init(w, t0)
    else:
        z = np.array(z0, dtype=float)
    nd, na = system.n_diff, system.n_alg

    stats = {"n_steps": 0, "n_rejected_error": 0, "n_rejected_newton": 0,
             "n_rhs": 0, "n_jac": 0, "n_lu": 0, "n_newton": 0}
    work = _Workspace()

    if t_eval is not None:
        t_eval = np.asarray(t_eval, dtype=float)
        if np.any(t_eval < t0 - 1e-12) or np.any(t_eval > t1 + 1e-12 * max(1.0, abs(t1))):
            raise ValueError("t_eval outside integration span")
        eval_vals = np.empty((t_eval.size, nd + na))
        eval_idx = 0
        pad = 1e-12 * max(1.0, abs(t1))
        while eval_idx < t_eval.size and t_eval[eval_idx] <= t0 + pad:
            eval_vals[eval_idx] = np.concatenate([w, z])
            eval_idx += 1
    else:
        eval_vals = None
        eval_idx = 0

    interp_nodes = np.concatenate([[0.0], scheme.c])
    interp_weights = _barycentric_weights(interp_nodes)

    ts = [t0]
    ws = [w.copy()]
    zs = [z.copy()]
    segments = [] if (cfg.dense_output or t_eval is not None) else None
    keep_segments = cfg.dense_output
    records = [] if cfg.record_stages else None
    last_segment = None

    def make_segment(t_n, dt, w_n, z_n, result):
        vals = np.empty((scheme.n_stages + 1, nd + na))
        vals[0] = np.concatenate([w_n, z_n])
        for i in range(scheme.n_stages):
            vals[i + 1] = np.concatenate([result.stage_w[i], result.stage_z[i]])
        return _Segment(t_n, dt, interp_nodes, interp_weights, vals)

    def guess_from(segment, t_n, dt, w_n, z_n):
        if segment is None:
            return np.tile(w_n, (scheme.n_stages, 1)), np.tile(z_n, (scheme.n_stages, 1))
        gw = np.empty((scheme.n_stages, nd))
        gz = np.empty((scheme.n_stages, na))
        for i in range(scheme.n_stages):
            y = segment.eval(t_n + scheme.c[i] * dt)
            gw[i], gz[i] = y[:nd], y[nd:]
        return gw, gz

    if cfg.fixed_steps is not None:
        n_steps = int(cfg.fixed_steps)
        if n_steps < 1:
            raise ValueError("fixed_steps must be positive")
        dt = horizon / n_steps
        t = t0
        for k in range(n_steps):
            t_target = t0 + (k + 1) * horizon / n_steps
            dt = t_target - t
            gw, gz = guess_from(last_segment, t, dt, w, z)
            try:
                result = _solve_stages(system, scheme, t, w, z, dt, gw, gz, work, cfg, stats)
            except (NonConvergence, SingularMatrixError, DomainError):
                # no step-size fallback on a fixed grid: retry harder once
                work.blocks = None
                hard = replace(cfg, jac_policy="iteration",
                               newton_max_iter=3 * cfg.newton_max_iter)
                gw = np.tile(w, (scheme.n_stages, 1))
                gz = np.tile(z, (scheme.n_stages, 1))
                result = _solve_stages(system, scheme, t, w, z, dt, gw, gz, work, hard, stats)
            if cfg.jac_policy == "lagged":
                work.blocks = None  # fixed grids refresh per step: cheap and robust
            seg = make_segment(t, dt, w, z, result)
            last_segment = seg
            w = result.stage_w[-1].copy()
            z = result.stage_z[-1].copy()
            t = t_target
            stats["n_steps"] += 1
            if records is not None:
                records.append(StageRecord(t - dt, dt, scheme.b.copy(),
                                           result.stage_w.copy(), result.stage_z.copy(),
                                           result.f_stages.copy()))
            if segments is not None:
                if keep_segments:
                    segments.append(seg)
                if eval_vals is not None:
                    pad = 1e-12 * max(1.0, abs(t1))
                    while eval_idx < t_eval.size and t_eval[eval_idx] <= t + pad:
                        eval_vals[eval_idx] = seg.eval(min(t_eval[eval_idx], t))
                        eval_idx += 1
            ts.append(t)
            ws.append(w.copy())
            zs.append(z.copy())
        stats["dt_last"] = dt
        return _package(ts, ws, zs, t_eval, eval_vals, segments if keep_segments else None,
                        stats, records, nd)

    dt = cfg.dt_init if cfg.dt_init is not None else 1e-6 * horizon
    if cfg.dt_max is not None:
        dt = min(dt, cfg.dt_max)
    t = t0
    step_count = 0
    while t < t1 - 1e-12 * max(1.0, abs(t1)):
        if step_count >= cfg.max_steps:
            raise NonConvergence(f"exceeded {cfg.max_steps} steps at t={t}")
        step_count += 1
        dt = min(dt, t1 - t)
        if dt < cfg.dt_min:
            raise StepSizeUnderflow(f"step size {dt} fell below {cfg.dt_min} at t={t}")

        try:
            if scheme.has_embedded_error:
                accepted, dt, payload = _attempt_radau(
                    system, scheme, t, w, z, dt, last_segment, work, cfg, stats,
                    guess_from, make_segment,
                )
            else:
                accepted, dt, payload = _attempt_doubling(
                    system, scheme, t, w, z, dt, last_segment, work, cfg, stats,
                    guess_from, make_segment,
                )
        except (NonConvergence, SingularMatrixError, DomainError):
            stats["n_rejected_newton"] += 1
            if cfg.jac_policy == "lagged" and work.blocks is not None:
                work.blocks = None  # stale Jacobian: force a refresh first
            else:
                dt *= 0.5
            continue

        if not accepted:
            stats["n_rejected_error"] += 1
            continue

        w, z, t, new_segments, step_records = payload
        stats["n_steps"] += 1
        last_segment = new_segments[-1]
        if records is not None:
            records.extend(step_records)
        if segments is not None:
            if keep_segments:
                segments.extend(new_segments)
            if eval_vals is not None:
                pad = 1e-12 * max(1.0, abs(t1))
                for seg in new_segments:
                    right = seg.t_left + seg.dt
                    while eval_idx < t_eval.size and t_eval[eval_idx] <= right + pad:
                        eval_vals[eval_idx] = seg.eval(min(t_eval[eval_idx], right))
                        eval_idx += 1
        ts.append(t)
        ws.append(w.copy())
        zs.append(z.copy())
        if cfg.dt_max is not None:
            dt = min(dt, cfg.dt_max)

    stats["dt_last"] = dt
    return _package(ts, ws, zs, t_eval, eval_vals, segments if keep_segments else None,
                    stats, records, nd)


def _attempt_radau(system, scheme, t, w, z, dt, last_segment, work, cfg, stats,
                   guess_from, make_segment):
    gw, gz = guess_from(last_segment, t, dt, w, z)
    result = _solve_stages(system, scheme, t, w, z, dt, gw, gz, work, cfg, stats)

    # smoothed embedded estimate: solve (mu/dt M - J) err = f0 + M d with
    # d the weighted stage-increment sum
    f0, g0 = system.rhs(t, w, z)
    stats["n_rhs"] += 1
    d = np.zeros(system.n_diff)
    for i in range(scheme.n_stages):
        d += scheme.err_weights[i] * (result.stage_w[i] - w)
    d /= dt
    lu = work.error_lu(scheme, dt, system.n_diff, stats)
    err = lu.solve(np.concatenate([f0 + d, g0]))
    norm = _error_norm(err, np.maximum(np.abs(w), np.abs(result.stage_w[-1])),
                       np.maximum(np.abs(z), np.abs(result.stage_z[-1])), cfg)
    if not math.isfinite(norm):
        return False, dt * cfg.factor_min, None
    if norm > 1.0:
        # re-evaluate the smoothing at the corrected point once; this filters
        # transient rejections right after sharp drive changes
        try:
            f0b, g0b = system.rhs(t, w + err[: system.n_diff], z + err[system.n_diff :])
            stats["n_rhs"] += 1
            err = lu.solve(np.concatenate([f0b + d, g0b]))
            norm = min(norm, _error_norm(
                err, np.maximum(np.abs(w), np.abs(result.stage_w[-1])),
                np.maximum(np.abs(z), np.abs(result.stage_z[-1])), cfg))
        except DomainError:
            pass

    factor = cfg.safety * norm ** (-scheme.err_exponent) if norm > 0 else cfg.factor_max
    factor = min(cfg.factor_max, max(cfg.factor_min, factor))
    if norm > 1.0:
        return False, dt * min(1.0, factor), None
    if 1.0 <= factor < 1.2:
        factor = 1.0  # keep dt (and its factorization) over marginal growth

    seg = make_segment(t, dt, w, z, result)
    rec = [StageRecord(t, dt, scheme.b.copy(), result.stage_w.copy(),
                       result.stage_z.copy(), result.f_stages.copy())]
    return True, dt * factor, (result.stage_w[-1].copy(), result.stage_z[-1].copy(),
                               t + dt, [seg], rec)


def _attempt_doubling(system, scheme, t, w, z, dt, last_segment, work, cfg, stats,
                      guess_from, make_segment):
    """One-stage scheme with step-doubling error control: compare one full
    step against two half steps and keep the latter."""
    gw, gz = guess_from(last_segment, t, dt, w, z)
    full = _solve_stages(system, scheme, t, w, z, dt, gw, gz, work, cfg, stats)

    half = 0.5 * dt
    gw, gz = guess_from(last_segment, t, half, w, z)
    first = _solve_stages(system, scheme, t, w, z, half, gw, gz, work, cfg, stats)
    w_mid, z_mid = first.stage_w[-1], first.stage_z[-1]
    seg1 = make_segment(t, half, w, z, first)
    gw, gz = guess_from(seg1, t + half, half, w_mid, z_mid)
    second = _solve_stages(system, scheme, t + half, w_mid, z_mid, half, gw, gz, work, cfg, stats)

    w_fine = second.stage_w[-1]
    z_fine = second.stage_z[-1]
    err = np.concatenate([w_fine - full.stage_w[-1], z_fine - full.stage_z[-1]])
    norm = _error_norm(err, np.maximum(np.abs(w), np.abs(w_fine)),
                       np.maximum(np.abs(z), np.abs(z_fine)), cfg)
    if not math.isfinite(norm):
        return False, dt * cfg.factor_min, None

    factor = cfg.safety * norm ** (-scheme.err_exponent) if norm > 0 else cfg.factor_max
    factor = min(cfg.factor_max, max(cfg.factor_min, factor))
    if norm > 1.0:
        return False, dt * min(1.0, factor), None

    seg2 = make_segment(t + half, half, w_mid, z_mid, second)
    recs = [
        StageRecord(t, half, scheme.b.copy(), first.stage_w.copy(),
                    first.stage_z.copy(), first.f_stages.copy()),
        StageRecord(t + half, half, scheme.b.copy(), second.stage_w.copy(),
                    second.stage_z.copy(), second.f_stages.copy()),
    ]
    return True, dt * factor, (w_fine.copy(), z_fine.copy(), t + dt, [seg1, seg2], recs)


def _package(ts, ws, zs, t_eval, eval_vals, segments, stats, records, nd):
    dense = ContinuousSolution(segments) if segments else None
    if t_eval is not None:
        w_eval = eval_vals[:, :nd]
        z_eval = eval_vals[:, nd:]
    else:
        w_eval = z_eval = None
    return Solution(
        t=np.array(ts),
        w=np.array(ws),
        z=np.array(zs),
        t_eval=None if t_eval is None else np.array(t_eval),
        w_eval=w_eval,
        z_eval=z_eval,
        dense=dense,
        stats=stats,
        stage_records=records,
    )


def stage_jacobian(system, t, w, z, dt, scheme_name: str = "implicit_euler") -> sp.csc_matrix:
    """Newton matrix of one step's stage equations at the given point; the
    one-stage default is the object whose conditioning the analysis studies."""
    scheme = get_scheme(scheme_name)
    _, _, blocks = system.rhs_and_blocks(t, w, z)
    return _stage_matrix([blocks] * scheme.n_stages, scheme.a, dt, system.n_diff)


def consistent_project(system, t, w, z_guess, abs_tol: float = 1e-11,
                       max_iter: int = 50) -> np.ndarray:
    """Newton on the algebraic block at frozen w, starting from z_guess.

    The flux-difference rows amplify rounding by 1/dx^2, so the residual
    tolerance is backed by an increment floor rather than pushed to zero."""

    def residual(z):
        return system.rhs(t, w, z)[1]

    def jacobian(z):
        return system.rhs_and_blocks(t, w, z)[2][3]

    sol, _ = newton_solve(residual, jacobian, z_guess,
                          NewtonOptions(abs_tol=abs_tol, step_tol=1e-13,
                                        max_iter=max_iter))
    return sol
