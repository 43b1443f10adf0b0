import math

import numpy as np
import pytest
from pydantic import ValidationError

from chemotaxis import ChemoSystem
from convergence_lab import (
    ConvergenceReport,
    DataFamilySpec,
    DataMember,
    HypothesisRefusal,
    SweepTemplate,
    agreement_bound,
    cauchy_c0l1,
    cauchy_l1,
    cauchy_lambda_gradients,
    cauchy_psi_gradients,
    cauchy_truncated_gradients,
    cauchy_weighted_gradients,
    cross_sequence_agreement,
    data_l1_ladder,
    eps_ladder,
    fit_rate,
    make_data_family,
    run_eps_sweep,
    verdict,
)
from functionals import PsiSpec
from grid_core import FieldTrajectory, GridError, ScalarField, integrate, make_grid
from heat_solver import SolverConfig

T_END = 0.04
DT = 2e-3


@pytest.fixture(scope="module")
def fine_grid():
    return make_grid(1, [1.0], [256])


@pytest.fixture(scope="module")
def spike_sweep(fine_grid):
    spec = DataFamilySpec(kind="mollified-spike", mass=1.0, gamma=0.5)
    members = make_data_family(spec, fine_grid, T_END, DT, eps_ladder(7))
    return run_eps_sweep(members, SweepTemplate("heat"), SolverConfig(dt=DT), T_END, gamma=spec.gamma)


class TestLadderBasics:
    def test_eps_ladder(self):
        assert eps_ladder(3) == [1.0, 0.5, 0.25, 0.125]
        assert eps_ladder(3, start=2) == [0.25, 0.125]
        with pytest.raises(ValueError):
            eps_ladder(1, start=2)

    @pytest.mark.parametrize(
        "d, expected",
        [
            ([1.0, 0.5, 0.25, 0.1], "cauchy-decreasing"),
            ([0.0, 0.0, 0.0], "cauchy-decreasing"),
            ([1.0, 1.0, 1.0, 1.0], "stagnant"),
            ([1.0, 0.5, 0.6, 0.1], "stagnant"),
            ([1.0, 2.0, 3.0], "diverging"),
        ],
    )
    def test_verdict(self, d, expected):
        assert verdict(d) == expected

    def test_verdict_needs_rungs(self):
        with pytest.raises(ValueError):
            verdict([])

    def test_fit_rate_of_halving(self):
        assert fit_rate([2.0**-j for j in range(6)]) == pytest.approx(-math.log(2.0))
        assert fit_rate([0.0, 1.0]) == 0.0

    def test_report_rows(self):
        report = ConvergenceReport("l1", "anchor", [0.5, 0.25], -0.69, "cauchy-decreasing", 0.5)
        rows = report.to_rows()
        assert [r["j"] for r in rows] == [0, 1]
        assert rows[1]["d"] == 0.25


class TestDataFamilies:
    def test_spec_validation(self):
        spec = DataFamilySpec(kind="mollified-spike", gamma=0.5, width_scale=0.2)
        assert spec.width(0.25) == pytest.approx(0.1)
        with pytest.raises(ValidationError):
            DataFamilySpec(kind="mollified-spike", unknown=1.0)
        with pytest.raises(ValidationError):
            DataFamilySpec(kind="delta")
        with pytest.raises(ValidationError):
            DataFamilySpec(kind="mollified-spike", gamma=1.5)

    @pytest.mark.parametrize("kind", ["mollified-spike", "top-hat-spike", "truncated-power", "heavy-tail"])
    def test_members_carry_the_mass(self, fine_grid, kind):
        spec = DataFamilySpec(kind=kind, mass=1.0, gamma=0.5)
        for member in make_data_family(spec, fine_grid, 0.01, 0.01, eps_ladder(3)):
            assert integrate(member.v0) == pytest.approx(1.0, rel=1e-10)
            assert member.v0.min() >= 0.0

    def test_unresolved_width(self):
        grid = make_grid(1, [1.0], [32])
        spec = DataFamilySpec(kind="mollified-spike", gamma=0.5)
        with pytest.raises(ValueError, match="grid cannot resolve this ε; refine or shorten ladder"):
            make_data_family(spec, grid, 0.01, 0.01, eps_ladder(4))

    def test_truncated_power_needs_integrable_exponent(self, fine_grid):
        spec = DataFamilySpec(kind="truncated-power", power=1.5)
        with pytest.raises(ValueError, match="a < n"):
            make_data_family(spec, fine_grid, 0.01, 0.01, [1.0])

    def test_oscillating_source_alternates(self, fine_grid):
        spec = DataFamilySpec(kind="oscillating", source=2.0)
        members = make_data_family(spec, fine_grid, 0.02, 0.01, eps_ladder(2))
        signs = [np.sign(integrate(m.f.frames[0])) for m in members]
        assert signs == [1.0, -1.0, 1.0]
        assert len(members[0].f.frames) == 3

    def test_custom_family_is_degenerate(self, fine_grid):
        spec = DataFamilySpec(kind="custom", value=2.0)
        members = make_data_family(spec, fine_grid, 0.01, 0.01, eps_ladder(3))
        sweep = run_eps_sweep(members, SweepTemplate("heat"), SolverConfig(dt=0.01), 0.01)
        assert sweep.degenerate
        report = cauchy_l1(sweep)
        assert report.d == [0.0, 0.0, 0.0]
        assert report.verdict == "cauchy-decreasing"


class TestHeatSweep:
    def test_results_are_ordered_by_eps(self, spike_sweep):
        assert spike_sweep.eps == eps_ladder(7)
        assert len(spike_sweep.runs) == len(spike_sweep.tables) == 8
        assert spike_sweep.reference is spike_sweep.trajectories[-1]

    def test_threads_do_not_change_results(self, fine_grid, spike_sweep):
        spec = DataFamilySpec(kind="mollified-spike", mass=1.0, gamma=0.5)
        members = make_data_family(spec, fine_grid, T_END, DT, eps_ladder(7))
        threaded = run_eps_sweep(members, SweepTemplate("heat"), SolverConfig(dt=DT), T_END, threads=4)
        for a, b in zip(spike_sweep.trajectories, threaded.trajectories):
            assert np.array_equal(a.stack(), b.stack())

    def test_mass_table(self, spike_sweep):
        assert all(t["mass_end"] == pytest.approx(1.0, rel=1e-10) for t in spike_sweep.tables)

    def test_l1_ladders_converge(self, spike_sweep):
        assert data_l1_ladder(spike_sweep).verdict == "cauchy-decreasing"
        assert cauchy_l1(spike_sweep).verdict == "cauchy-decreasing"
        report = cauchy_c0l1(spike_sweep)
        assert report.verdict == "cauchy-decreasing"
        assert len(report.d) == 7

    @pytest.mark.parametrize("k", [1.0, 4.0])
    def test_truncated_gradients(self, spike_sweep, k):
        report = cauchy_truncated_gradients(spike_sweep, k)
        assert report.verdict == "cauchy-decreasing"
        assert report.rate < 0.0
        assert report.gamma == 0.5

    def test_weighted_gradients(self, spike_sweep):
        assert cauchy_weighted_gradients(spike_sweep, 1.0).verdict == "cauchy-decreasing"
        with pytest.raises(ValueError, match="r > 1/2"):
            cauchy_weighted_gradients(spike_sweep, 0.5)

    def test_lambda_gradients(self, spike_sweep):
        assert cauchy_lambda_gradients(spike_sweep, 1.2).verdict == "cauchy-decreasing"
        with pytest.raises(ValueError, match=r"λ ∈ \[1, \(n\+2\)/\(n\+1\)\)"):
            cauchy_lambda_gradients(spike_sweep, 1.6)

    def test_truncated_ladder_needs_four_rungs(self, spike_sweep):
        with pytest.raises(ValueError, match="at least 4 rungs"):
            cauchy_truncated_gradients(spike_sweep.shifted(5), 1.0)

    def test_psi_gradients(self, spike_sweep):
        report = cauchy_psi_gradients(spike_sweep, PsiSpec.power(2.0))
        assert report.verdict == "cauchy-decreasing"
        assert set(report.extras) == {"lemma43_bound", "phi_c", "psi_v0_l1", "psi_prime_f_l1"}
        assert len(report.extras["lemma43_bound"]) == 8
        assert "sampled range" in report.note

    def test_lemma43_bound_is_stable_once_widths_resolve_the_spike(self, spike_sweep):
        spec = DataFamilySpec(kind="mollified-spike", mass=1.0, gamma=0.5)
        bounds = cauchy_psi_gradients(spike_sweep, PsiSpec.power(2.0)).extras["lemma43_bound"]
        resolved = [b for b, eps in zip(bounds, spike_sweep.eps) if spec.width(eps) <= spec.spike_radius]
        assert len(resolved) == 6
        assert max(resolved) / min(resolved) <= 2.0

    def test_oscillating_source_stagnates(self, fine_grid):
        spec = DataFamilySpec(kind="oscillating", mass=1.0, gamma=0.5, source=2.0)
        members = make_data_family(spec, fine_grid, T_END, DT, eps_ladder(7))
        sweep = run_eps_sweep(members, SweepTemplate("heat"), SolverConfig(dt=DT), T_END, gamma=spec.gamma)
        report = cauchy_l1(sweep)
        assert report.verdict == "stagnant"


class TestRefusals:
    def test_heavy_tail_refuses_psi(self, fine_grid, errors):
        spec = DataFamilySpec(kind="heavy-tail", gamma=0.5)
        members = make_data_family(spec, fine_grid, 0.01, 0.005, eps_ladder(5))
        sweep = run_eps_sweep(members, SweepTemplate("heat"), SolverConfig(dt=0.005), 0.01)
        with pytest.raises(HypothesisRefusal) as info:
            cauchy_psi_gradients(sweep, PsiSpec.power(2.0), errors=errors)
        assert info.value.ladders["psi_v0_l1"].verdict == "stagnant"
        assert "Refusing psi-gradient" in str(errors.dump(0))

    def test_c0l1_refuses_without_l1_data_convergence(self, fine_grid):
        a = ScalarField.from_function(fine_grid, lambda x: 1.0 + np.cos(np.pi * x))
        b = ScalarField.from_function(fine_grid, lambda x: 1.0 - np.cos(np.pi * x))
        source = FieldTrajectory(fine_grid, 0.01, (ScalarField.constant(fine_grid, 0.0),) * 2)
        members = [DataMember(2.0**-j, a if j % 2 == 0 else b, source) for j in range(5)]
        sweep = run_eps_sweep(members, SweepTemplate("heat"), SolverConfig(dt=0.01), 0.01)
        with pytest.raises(HypothesisRefusal) as info:
            cauchy_c0l1(sweep)
        assert info.value.ladders["data_l1"].verdict == "stagnant"

    def test_failing_members_are_all_logged_under_threads(self, fine_grid, errors):
        coarse = make_grid(1, [1.0], [16])
        source = FieldTrajectory(coarse, 0.01, (ScalarField.constant(coarse, 0.0),) * 2)
        v0 = ScalarField.constant(fine_grid, 1.0)
        members = [DataMember(2.0**-j, v0, source) for j in range(4)]
        with pytest.raises(GridError):
            run_eps_sweep(members, SweepTemplate("heat"), SolverConfig(dt=0.01), 0.01, threads=4, errors=errors)
        logged = str(errors.dump(0))
        for j in range(4):
            assert f"eps={2.0**-j:g} failed" in logged


class TestCrossSequence:
    def test_different_limits_disagree(self, fine_grid):
        sweeps = []
        for mass in (1.0, 2.0):
            spec = DataFamilySpec(kind="mollified-spike", mass=mass, gamma=0.5)
            members = make_data_family(spec, fine_grid, 0.02, 0.002, eps_ladder(4))
            sweeps.append(run_eps_sweep(members, SweepTemplate("heat"), SolverConfig(dt=0.002), 0.02))
        agreement = cross_sequence_agreement(*sweeps)
        assert agreement == pytest.approx(0.02, rel=1e-8)
        assert agreement > agreement_bound(cauchy_l1(sweeps[0]), cauchy_l1(sweeps[1]))

    def test_gaussian_and_top_hat_share_a_limit(self, fine_grid, spike_sweep):
        spec = DataFamilySpec(kind="top-hat-spike", mass=1.0, gamma=0.5)
        members = make_data_family(spec, fine_grid, T_END, DT, eps_ladder(7))
        top_hat = run_eps_sweep(members, SweepTemplate("heat"), SolverConfig(dt=DT), T_END, gamma=spec.gamma)
        agreement = cross_sequence_agreement(spike_sweep, top_hat)
        assert 0.0 < agreement <= agreement_bound(cauchy_l1(spike_sweep), cauchy_l1(top_hat))


class TestChemoSweep:
    def test_eps_follows_the_ladder(self):
        grid = make_grid(1, [1.0], [64])
        spec = DataFamilySpec(kind="mollified-spike", gamma=0.5, width_scale=0.2)
        members = make_data_family(spec, grid, 0.01, 1e-3, eps_ladder(4, start=1))
        template = SweepTemplate("chemo", system=ChemoSystem("B"), v_init=1.0)
        sweep = run_eps_sweep(members, template, SolverConfig(dt=1e-3), 0.01, threads=2)
        assert [run.system.eps for run in sweep.runs] == eps_ladder(4, start=1)
        assert all(t["mass_u_drift"] < 1e-12 for t in sweep.tables)
        assert sweep.trajectories[0] is sweep.runs[0].u_traj
