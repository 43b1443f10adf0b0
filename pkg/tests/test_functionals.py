import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from functionals import (
    C_LADDER,
    LandesParams,
    NotUniformlyIntegrableError,
    PhiFunction,
    PsiSpec,
    build_dlvp_phi,
    dual_time_derivative_surrogate,
    face_measure,
    grad_lambda_norm,
    gradient_energy,
    greens_constant,
    landes_apply,
    landes_blend_weight,
    lq_norm,
    sk_integral,
    tail_masses,
    truncate,
    truncated_gradient_energy,
    verify_landes,
    weighted_gradient_energy,
    young_constant,
)
from grid_core import FieldTrajectory, ScalarField, integrate, make_grid
from heat_solver import HeatProblem, SolverConfig, solve_heat
from weak_forms import TestFunctionSet, dual_dictionary


@pytest.fixture
def cosine_run():
    grid = make_grid(1, [1.0], [48])
    config = SolverConfig(dt=0.01)
    v0 = ScalarField.from_function(grid, lambda x: 2.0 + 1.5 * np.cos(np.pi * x))
    return solve_heat(HeatProblem.constant(grid, v0, 0.0, config.dt, 30), 0.3, config)


class TestTruncation:
    def test_truncate_clips(self, grid_1d):
        field = ScalarField.from_function(grid_1d, lambda x: 10.0 * (x - 0.5))
        assert truncate(field, 2.0).max() == 2.0
        assert truncate(field, 2.0).min() == -2.0

    def test_truncate_rejects_nonpositive_level(self, grid_1d):
        with pytest.raises(ValueError):
            truncate(ScalarField.constant(grid_1d, 1.0), 0.0)

    @given(st.floats(0.01, 50.0), st.floats(-20.0, 20.0))
    @settings(max_examples=60, deadline=None)
    def test_sk_is_primitive_of_tk(self, k, value):
        grid = make_grid(1, [1.0], [4])
        field = ScalarField.constant(grid, value)
        a = abs(value)
        expected = 0.5 * a * a if a <= k else k * a - 0.5 * k * k
        assert sk_integral(field, k) == pytest.approx(expected, rel=1e-12, abs=1e-14)


class TestGradientEnergies:
    def test_constant_has_no_energy(self, grid_2d):
        traj = FieldTrajectory(grid_2d, 0.1, (ScalarField.constant(grid_2d, 4.0),) * 3)
        assert gradient_energy(traj) == 0.0
        assert weighted_gradient_energy(traj, 1.0) == 0.0

    def test_truncation_removes_energy_above_level(self, cosine_run):
        # v stays above 0.5, so T_0.25 v is constant
        assert truncated_gradient_energy(cosine_run, 0.25) == 0.0
        assert truncated_gradient_energy(cosine_run, 10.0) == pytest.approx(gradient_energy(cosine_run))

    def test_weighted_energy_is_dominated(self, cosine_run):
        assert 0.0 < weighted_gradient_energy(cosine_run, 0.5) < gradient_energy(cosine_run)

    def test_right_rule_skips_initial_frame(self, cosine_run):
        left = gradient_energy(cosine_run, rule="left")
        right = gradient_energy(cosine_run, rule="right")
        assert left > right

    def test_lambda_outside_interval(self, cosine_run):
        with pytest.raises(ValueError, match=r"λ ∈ \[1, \(n\+2\)/\(n\+1\)\)"):
            grad_lambda_norm(cosine_run, 1.9)

    def test_lambda_one_is_l1_of_gradient(self, cosine_run):
        assert grad_lambda_norm(cosine_run, 1.0) > 0.0

    def test_lq_bounds(self, cosine_run):
        with pytest.raises(ValueError):
            lq_norm(cosine_run, 3.0)
        # L1 norm of a positive solution: mass times time
        assert lq_norm(cosine_run, 1.0) == pytest.approx(0.3 * 2.0, rel=1e-10)

    def test_face_measure(self, grid_2d):
        expected = (11 * 16 + 12 * 15) * grid_2d.cell_volume
        assert face_measure(grid_2d) == pytest.approx(expected)


class TestGreensConstant:
    def test_mass_quantity_is_one(self, grid_1d):
        value = greens_constant(grid_1d, 0.01, 5, lambda traj: integrate(traj.final))
        assert value == pytest.approx(1.0, rel=1e-10)


class TestPsi:
    def test_power_requires_superlinear(self):
        with pytest.raises(ValueError):
            PsiSpec.power(1.0)

    def test_power_derivatives(self):
        psi = PsiSpec.power(2.0)
        s = np.array([0.0, 1.0, 3.0])
        assert np.allclose(psi.psi(s), (s + 1.0) ** 2)
        assert np.allclose(psi.psi_prime(s), 2.0 * (s + 1.0))
        assert np.allclose(psi.psi_second(s), 2.0)

    def test_tabulated_convex(self):
        knots = np.linspace(0.0, 4.0, 9)
        psi = PsiSpec.tabulated(knots, (knots + 1.0) ** 2)
        assert psi.family == "custom-tabulated"
        assert psi.psi(2.0) == pytest.approx(9.0, rel=1e-6)

    def test_tabulated_rejects_concave(self):
        knots = np.linspace(0.0, 4.0, 9)
        with pytest.raises(ValueError, match="convex"):
            PsiSpec.tabulated(knots, np.sqrt(knots + 1.0))


class TestDualSurrogate:
    def test_static_trajectory_has_zero_surrogate(self, grid_1d):
        traj = FieldTrajectory(grid_1d, 0.1, (ScalarField.constant(grid_1d, 1.0),) * 4)
        assert dual_time_derivative_surrogate(traj, dual_dictionary(grid_1d)) == 0.0

    def test_empty_dictionary(self, cosine_run):
        empty = TestFunctionSet((), 1.0, 0.1)
        with pytest.raises(ValueError):
            dual_time_derivative_surrogate(cosine_run, empty)

    def test_positive_for_decaying_mode(self, cosine_run):
        assert dual_time_derivative_surrogate(cosine_run, dual_dictionary(cosine_run.grid)) > 0.0


class TestLandes:
    def test_blend_weight_limits(self):
        assert 0.0 < landes_blend_weight(4.0, 0.01) < 1.0
        assert landes_blend_weight(1e-6, 1e-3) == pytest.approx(0.5, abs=1e-3)

    def test_recursion_passes(self, cosine_run):
        params = LandesParams(2.5, 4.0, cosine_run.frames[0])
        report = verify_landes(cosine_run, params)
        assert report.step_residual <= 1e-10
        assert report.initial_exact
        assert report.linf_ok
        assert report.ladder_decreasing
        assert report.passed

    def test_eta_stays_within_level(self, cosine_run):
        eta = landes_apply(cosine_run, LandesParams(1.0, 16.0, cosine_run.frames[0]))
        assert all(f.max() <= 1.0 + 1e-12 for f in eta.frames)

    @pytest.mark.parametrize("k, sigma", [(0.0, 1.0), (1.0, -1.0)])
    def test_params_validated(self, grid_1d, k, sigma):
        with pytest.raises(ValueError):
            LandesParams(k, sigma, ScalarField.constant(grid_1d, 0.0))


class TestDlvpWeight:
    def test_knot_invariants(self):
        checks = PhiFunction(0.5).check_knots()
        assert all(checks.values())

    def test_superlinear(self):
        phi = PhiFunction(1.0)
        assert phi.superlinear_ratio(1.0, 1e6) > 10.0

    def test_bounded_family_gets_largest_c(self, grid_1d):
        fields = [ScalarField.constant(grid_1d, 1.0), ScalarField.constant(grid_1d, 2.0)]
        phi = build_dlvp_phi([fields], budget=10.0)
        assert phi.c == C_LADDER[0]
        assert phi.young_constant is not None and phi.young_constant >= 0.0

    def test_concentrating_family_is_refused(self):
        grid = make_grid(1, [1.0], [64])
        spikes = []
        for j in range(4):
            values = np.zeros(grid.shape)
            values[32] = 1e12 * 4.0**j
            spikes.append(ScalarField(grid, values))
        with pytest.raises(NotUniformlyIntegrableError) as info:
            build_dlvp_phi([spikes], budget=1.0 + 1e-9)
        assert len(info.value.tail_masses) == 7

    def test_unit_mass_bars_are_refused_at_any_budget(self):
        grid = make_grid(1, [1.0], [512])
        x = grid.centers(0)
        bars = [ScalarField(grid, np.where(x < 1.0 / m, float(m), 0.0)) for m in (2**k for k in range(1, 9))]
        assert all(integrate(bar) == pytest.approx(1.0) for bar in bars)
        for budget in (1.0 + 1e-6, 2.0, 100.0):
            with pytest.raises(NotUniformlyIntegrableError) as info:
                build_dlvp_phi([bars], budget=budget)
            assert info.value.concentrating
        masses = info.value.tail_masses
        assert len(masses) == 7
        assert masses[0][0] == pytest.approx(4.0) and masses[-1][0] == pytest.approx(256.0)
        assert all(mass == pytest.approx(1.0) for _, mass in masses[:-1])
        assert masses[-1][1] == 0.0

    def test_a_single_bar_is_not_refused(self):
        grid = make_grid(1, [1.0], [512])
        x = grid.centers(0)
        bar = ScalarField(grid, np.where(x < 1.0 / 256, 256.0, 0.0))
        assert build_dlvp_phi([[bar]], budget=2.0).c <= 2.0**-2

    def test_young_scan_over_full_range(self):
        phi = PhiFunction(1.0)
        c2 = young_constant(phi, 100.0, 400)
        s = np.linspace(0.0, 100.0, 400)
        a, b = np.meshgrid(s, s, indexing="ij")
        assert np.all(a * phi.phi_prime(b) <= phi.phi(a) + c2 * phi.phi(b) + 1e-9)
        assert c2 <= 1.0
        assert np.all(s * phi.phi_prime(s) - phi.phi(s) <= c2 * phi.phi(s) + 1e-12)

    def test_young_inequality_holds_on_grid(self):
        phi = PhiFunction(0.25)
        c2 = young_constant(phi, 50.0, 200)
        s = np.linspace(0.0, 50.0, 200)
        a, b = np.meshgrid(s, s, indexing="ij")
        assert np.all(a * phi.phi_prime(b) <= phi.phi(a) + c2 * phi.phi(b) + 1e-9)

    def test_tail_masses_decrease_with_level(self, grid_1d):
        field = ScalarField.from_function(grid_1d, lambda x: 1.0 / (x + 0.01))
        masses = [m for _, m in tail_masses([field], [1.0, 10.0, 50.0])]
        assert masses[0] >= masses[1] >= masses[2]

    def test_phi_integral_of_zero_is_measure(self, grid_2d):
        assert PhiFunction(1.0).integral(ScalarField.constant(grid_2d, 0.0)) == pytest.approx(math.prod(grid_2d.extents))
