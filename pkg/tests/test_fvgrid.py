"""Grid layout, assembled residuals, and analytic Jacobian blocks."""

import numpy as np
import pytest

from cellkit.daecore import jacobian_fd
from cellkit.errors import DomainError
from cellkit.fvgrid import (
    AUX_CE_ANODE,
    AUX_CE_CATHODE,
    AUX_CS,
    AUX_PE_ANODE,
    AUX_PE_CATHODE,
    AUX_PS,
    BoundaryContext,
    CellSystem,
    Grid,
    make_context_provider,
    solid_face_conductivity,
)
from cellkit.model import (
    ConstantCurrent,
    ConstantVoltage,
    PhysicalParameters,
    SineVoltage,
    compute_groups,
    compute_scales,
)


@pytest.fixture(scope="module")
def params():
    return PhysicalParameters(conc_s_max=26000.0)


@pytest.fixture(scope="module")
def scales(params):
    return compute_scales(params)


@pytest.fixture(scope="module")
def groups(params, scales):
    return compute_groups(params, scales)


@pytest.fixture(scope="module")
def grid(params):
    return Grid.build(params, n_e=10, n_am=5, n_cc=5)


def perturbed_state(system, seed=11):
    """A strictly admissible state away from any symmetry."""
    rng = np.random.default_rng(seed)
    g = system.grid
    n = g.n_total
    w = system.initial_w() * (1.0 + 0.05 * rng.standard_normal(n))
    z = np.empty(g.n_alg)
    z[: g.n_e] = -0.05 + 0.02 * rng.standard_normal(g.n_e)
    z[g.n_e : n] = 4.0 + 0.05 * rng.standard_normal(g.n_s)
    z[n + AUX_CE_ANODE] = w[0] * 1.01
    z[n + AUX_PE_ANODE] = -0.04
    z[n + AUX_CE_CATHODE] = w[g.n_e - 1] * 0.99
    z[n + AUX_PE_CATHODE] = -0.06
    z[n + AUX_CS] = w[g.n_e] * 1.02
    z[n + AUX_PS] = 4.1
    return w, z


class TestGrid:
    def test_uniform_spacing_accepted(self, params):
        g = Grid.build(params, n_e=100, n_am=50, n_cc=50)
        assert g.dx == pytest.approx(0.5 / 100, rel=1e-14)
        assert g.n_total == 200
        assert g.n_alg == 206

    def test_mismatched_spacing_rejected(self, params):
        with pytest.raises(ValueError, match="uniform"):
            Grid.build(params, n_e=50, n_am=10, n_cc=10)

    def test_minimum_cell_counts(self, params):
        with pytest.raises(ValueError, match="at least"):
            Grid.build(params, n_e=2, n_am=1, n_cc=1)

    def test_centers_and_interfaces(self, grid):
        assert grid.interface_se == pytest.approx(0.5)
        assert grid.interface_sc == pytest.approx(0.75)
        assert grid.centers_e[0] == pytest.approx(grid.dx / 2)
        assert grid.centers_s[0] == pytest.approx(0.5 + grid.dx / 2)
        assert grid.centers_am[-1] == pytest.approx(0.75 - grid.dx / 2)
        # equal-length geometry used by the conditioning analysis
        eq = PhysicalParameters(conc_s_max=26000.0, len_e=10e-6, len_am=10e-6, len_cc=10e-6)
        g = Grid.build(eq, n_e=2, n_am=2, n_cc=2)
        assert g.dx == pytest.approx(1.0 / 6.0, rel=1e-14)

    def test_state_views_partition(self, grid):
        w = np.arange(grid.n_total, dtype=float)
        z = np.arange(grid.n_alg, dtype=float)
        assert grid.ce_of(w).size == 10
        assert grid.cs_of(w).size == 10
        assert grid.cs_am_of(w).size == 5
        assert grid.aux_of(z).size == 6
        assert grid.phie_of(z)[0] == 0.0
        assert grid.phis_of(z)[0] == 10.0


class TestBoundaryContext:
    def test_constant_current_value(self, params, scales):
        provider = make_context_provider(ConstantCurrent(c_rate=1.0), params, scales)
        ctx = provider(0.37)
        assert ctx.kind == "current"
        ref = -6.968505555555557 / scales.current_s
        assert ctx.value == pytest.approx(ref, rel=1e-12)

    def test_constant_voltage_value(self, params, scales):
        provider = make_context_provider(ConstantVoltage(0.26), params, scales)
        ctx = provider(5.0)
        assert ctx.kind == "potential"
        assert ctx.value == pytest.approx(0.26 / scales.potential, rel=1e-12)

    def test_sine_voltage_tracks_time(self, params, scales):
        mode = SineVoltage(mean_volts=0.103, rel_amplitude=0.05, n_oscillations=1,
                           duration_s=16.0)
        provider = make_context_provider(mode, params, scales)
        # dimensionless t=0.25 is 4 s: a quarter period, the sine peak
        assert provider(0.25).value == pytest.approx(
            0.103 * 1.05 / scales.potential, rel=1e-12)

    def test_unknown_mode_rejected(self, params, scales):
        with pytest.raises(TypeError):
            make_context_provider(object(), params, scales)

    def test_bad_kind_rejected(self):
        with pytest.raises(ValueError):
            BoundaryContext("flux", 1.0)


class TestConductivityProfile:
    def test_face_values(self, params, grid, groups):
        sig = solid_face_conductivity(grid, groups.eps_cond)
        assert sig.size == grid.n_s - 1
        np.testing.assert_allclose(sig[: grid.n_am - 1], 1.0)
        assert sig[grid.n_am - 1] == pytest.approx(2.0 / (1.0 + groups.eps_cond), rel=1e-14)
        np.testing.assert_allclose(sig[grid.n_am:], 37.0, rtol=1e-12)


@pytest.mark.parametrize("mode", [ConstantCurrent(c_rate=1.0), ConstantVoltage(0.25)],
                         ids=["current", "potential"])
class TestJacobianBlocks:
    def test_analytic_matches_finite_difference(self, params, scales, grid, mode):
        system = CellSystem(params, grid, make_context_provider(mode, params, scales))
        w, z = perturbed_state(system)
        t = 0.3
        _, _, blocks = system.rhs_and_blocks(t, w, z)
        f_w, f_z, g_w, g_z = (b.toarray() for b in blocks)

        fd = {
            "f_w": jacobian_fd(lambda x: system.rhs(t, x, z)[0], w),
            "f_z": jacobian_fd(lambda x: system.rhs(t, w, x)[0], z),
            "g_w": jacobian_fd(lambda x: system.rhs(t, x, z)[1], w),
            "g_z": jacobian_fd(lambda x: system.rhs(t, w, x)[1], z),
        }
        for name, analytic in (("f_w", f_w), ("f_z", f_z), ("g_w", g_w), ("g_z", g_z)):
            scale = max(1.0, np.abs(fd[name]).max())
            rel = np.abs(analytic - fd[name]).max() / scale
            assert rel < 1e-6, f"{name} deviates from finite differences: {rel}"


class TestConservationStructure:
    def test_mass_rows_telescope_to_boundary_fluxes(self, params, scales, grid):
        system = CellSystem(params, grid,
                            make_context_provider(ConstantCurrent(1.0), params, scales))
        w, z = perturbed_state(system, seed=3)
        f, _ = system.rhs(0.0, w, z)
        bx = system.boundary_exchange(0.0, w, z)
        elec_change = np.sum(f[: grid.n_e]) * grid.dx
        solid_change = np.sum(f[grid.n_e : grid.n_e + grid.n_am]) * grid.dx
        assert elec_change == pytest.approx(bx["elec_rate"], rel=1e-12, abs=1e-16)
        assert solid_change == pytest.approx(bx["solid_rate"], rel=1e-12, abs=1e-18)

    def test_collector_cells_inert(self, params, scales, grid):
        system = CellSystem(params, grid,
                            make_context_provider(ConstantCurrent(1.0), params, scales))
        w, z = perturbed_state(system, seed=5)
        f, _ = system.rhs(0.0, w, z)
        np.testing.assert_array_equal(f[grid.n_e + grid.n_am :], 0.0)

    def test_cross_interface_rates_consistent(self, params, scales, grid):
        # the dimensional lithium leaving the electrolyte at the shared
        # interface equals the dimensional lithium entering the solid
        system = CellSystem(params, grid,
                            make_context_provider(ConstantCurrent(1.0), params, scales))
        w, z = perturbed_state(system, seed=8)
        bx = system.boundary_exchange(0.0, w, z)
        gr = system.groups
        # dimensionless boundary fluxes on either side, redimensionalized,
        # must be the same physical molar flux i_bv / F
        into_solid = bx["i_bv_cathode"] * gr.bv_to_molar_flux_s * scales.molar_flux_s
        out_of_elec = bx["i_bv_cathode"] * gr.bv_to_molar_flux_e * scales.molar_flux_e
        assert into_solid == pytest.approx(out_of_elec, rel=1e-12)
        assert into_solid == pytest.approx(bx["i_bv_cathode"] / params.faraday, rel=1e-12)


class TestConsistentInit:
    def test_algebraic_residual_small(self, params, scales, grid):
        system = CellSystem(params, grid,
                            make_context_provider(ConstantCurrent(0.5), params, scales))
        w = system.initial_w()
        z = system.consistent_init(w)
        _, g = system.rhs(0.0, w, z)
        assert np.abs(g).max() < 1e-9

    def test_aux_values_near_cell_values(self, params, scales, grid):
        system = CellSystem(params, grid,
                            make_context_provider(ConstantCurrent(0.5), params, scales))
        w = system.initial_w()
        z = system.consistent_init(w)
        n = grid.n_total
        assert z[n + AUX_CE_ANODE] == pytest.approx(w[0], rel=0.05)
        assert z[n + AUX_CE_CATHODE] == pytest.approx(w[grid.n_e - 1], rel=0.05)
        assert z[n + AUX_CS] == pytest.approx(w[grid.n_e], rel=0.1)

    def test_warm_guess_used(self, params, scales, grid):
        system = CellSystem(params, grid,
                            make_context_provider(ConstantVoltage(0.2), params, scales))
        w = system.initial_w()
        z = system.consistent_init(w)
        z2 = system.consistent_init(w, z_guess=z)
        np.testing.assert_allclose(z2, z, rtol=0, atol=1e-8)

    def test_potential_mode_boundary_value(self, params, scales, grid):
        applied = 0.24
        system = CellSystem(params, grid,
                            make_context_provider(ConstantVoltage(applied), params, scales))
        z = system.consistent_init(system.initial_w())
        assert system.cell_voltage(0.0, z) == pytest.approx(
            applied / scales.potential, rel=1e-12)


class TestDomainGuards:
    def test_nonpositive_concentration_rejected(self, params, scales, grid):
        system = CellSystem(params, grid,
                            make_context_provider(ConstantCurrent(1.0), params, scales))
        w, z = perturbed_state(system)
        w_bad = w.copy()
        w_bad[3] = -w_bad[3]
        with pytest.raises(DomainError):
            system.rhs(0.0, w_bad, z)

    def test_nonpositive_aux_concentration_rejected(self, params, scales, grid):
        system = CellSystem(params, grid,
                            make_context_provider(ConstantCurrent(1.0), params, scales))
        w, z = perturbed_state(system)
        z_bad = z.copy()
        z_bad[grid.n_total + AUX_CE_ANODE] = -0.5
        with pytest.raises(DomainError):
            system.rhs(0.0, w, z_bad)


class TestVoltageAndTotals:
    def test_current_mode_voltage_extrapolation(self, params, scales, grid):
        system = CellSystem(params, grid,
                            make_context_provider(ConstantCurrent(1.0), params, scales))
        w, z = perturbed_state(system)
        ctx = system.ctx_provider(0.0)
        expected = z[grid.n_total - 1] - 0.5 * grid.dx * system.groups.eps_cond * ctx.value
        assert system.cell_voltage(0.0, z) == pytest.approx(expected, rel=1e-14)

    def test_lithium_totals_measure_phase_content(self, params, scales, grid):
        system = CellSystem(params, grid,
                            make_context_provider(ConstantCurrent(1.0), params, scales))
        w = system.initial_w()
        tot_e, tot_s = system.lithium_totals(w)
        # uniform initial fields: total = value * subdomain length
        assert tot_e == pytest.approx(1.0 * grid.len_e, rel=1e-14)
        assert tot_s == pytest.approx(0.5 * grid.len_am, rel=1e-14)
