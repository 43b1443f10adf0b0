import json
from pathlib import Path

import numpy as np
import pytest

from cli_io import (
    ConfigError,
    FieldSpec,
    emit_plot_data,
    format_summary_json,
    format_summary_text,
    load_archive,
    load_config,
    parse_config,
    read_snapshot,
    retarget,
    run_experiment,
    serialize_config,
    write_snapshot,
)
from grid_core import ScalarField, integrate, make_grid

HEAT_CONSTANT = """
kind: heat
grid: {dim: 1, extents: [1.0], cells: [16]}
solver: {dt: 0.05}
t_end: 0.2
heat:
  v0: {kind: constant, value: 1.0}
  source: 2.0
"""

HEAT_COSINE = """
kind: verify
grid: {dim: 1, extents: [1.0], cells: [32]}
solver: {dt: 0.01}
t_end: 0.1
heat:
  v0: {kind: cosine, value: 2.0, amplitude: 1.0}
"""

CHEMO_B = """
kind: chemo
grid: {dim: 1, extents: [1.0], cells: [32]}
solver: {dt: 0.001}
t_end: 0.02
chemo:
  variant: B
  u0: {kind: gaussian, width: 0.1}
"""

SMALL_SWEEP = """
kind: sweep
grid: {dim: 1, extents: [1.0], cells: [128]}
solver: {dt: 0.005}
t_end: 0.02
sweep:
  family: {kind: mollified-spike, gamma: 0.5}
  levels: 4
  psi_power: null
checkers:
  enabled: []
"""


class TestParseConfig:
    def test_defaults(self):
        config = parse_config(HEAT_CONSTANT)
        assert config.grid.cells == (16,)
        assert config.checkers.wants("weak")
        assert config.output == "gradflux_out"

    def test_json_is_accepted(self):
        data = {"kind": "heat", "solver": {"dt": 0.1}, "heat": {}}
        assert parse_config(json.dumps(data)).kind == "heat"

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            parse_config(HEAT_CONSTANT + "colour: blue\n")
        assert any(path == "colour" for path, _ in info.value.problems)

    def test_missing_section(self):
        with pytest.raises(ConfigError, match="requires a 'heat' section"):
            parse_config("kind: heat\nsolver: {dt: 0.1}\n")

    def test_missing_solver(self):
        with pytest.raises(ConfigError, match="'solver' section"):
            parse_config("kind: heat\nheat: {}\n")

    def test_lambda_interval(self):
        text = HEAT_CONSTANT + "checkers: {lambda_values: [1.0, 1.5]}\n"
        with pytest.raises(ConfigError, match=r"λ ∈ \[1, \(n\+2\)/\(n\+1\)\)"):
            parse_config(text)

    def test_q_interval(self):
        with pytest.raises(ConfigError, match="q ∈"):
            parse_config(HEAT_CONSTANT + "checkers: {q_values: [3.0]}\n")

    def test_chemo_sweep_needs_eps_below_one(self):
        text = (
            "kind: sweep\nsolver: {dt: 0.01}\nchemo: {variant: B}\n"
            "sweep: {family: {kind: mollified-spike}, template: chemo}\n"
        )
        with pytest.raises(ConfigError, match="start >= 1"):
            parse_config(text)

    def test_sweep_needs_three_levels(self):
        with pytest.raises(ConfigError) as info:
            parse_config(SMALL_SWEEP.replace("levels: 4", "levels: 2"))
        assert any(path == "sweep.levels" for path, _ in info.value.problems)

    def test_invalid_chemo_system(self):
        with pytest.raises(ConfigError):
            parse_config("kind: chemo\nsolver: {dt: 0.01}\nchemo: {variant: A}\n")

    @pytest.mark.parametrize("text", ["[1, 2]", "kind: [unclosed"])
    def test_not_a_mapping(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_serialization_is_stable(self):
        a = serialize_config(parse_config(HEAT_CONSTANT))
        b = serialize_config(parse_config(HEAT_CONSTANT))
        assert a == b
        assert parse_config(a) == parse_config(HEAT_CONSTANT)

    def test_retarget(self):
        config = parse_config(HEAT_CONSTANT)
        assert retarget(config, "verify").kind == "verify"
        with pytest.raises(ConfigError):
            retarget(config, "sweep")

    def test_examples_load(self):
        config = load_config(Path(__file__).parent.parent / "examples_config" / "heat_constant.yaml")
        assert config.heat.source == 2.0


class TestFieldSpec:
    def test_spike_carries_mass(self, grid_2d):
        field = FieldSpec(kind="spike", mass=3.0).build(grid_2d)
        assert integrate(field) == pytest.approx(3.0)
        assert np.count_nonzero(field.values) == 1

    def test_gaussian_is_normalised(self, grid_1d):
        assert integrate(FieldSpec(kind="gaussian", mass=2.0).build(grid_1d)) == pytest.approx(2.0)


class TestSnapshots:
    def test_round_trip_2d(self, tmp_path, grid_2d, rng):
        field = ScalarField(grid_2d, rng.normal(size=grid_2d.shape))
        write_snapshot(tmp_path / "f.gflx", field)
        loaded = read_snapshot(tmp_path / "f.gflx")
        assert loaded.grid == grid_2d
        assert np.array_equal(loaded.values, field.values)

    def test_header_layout(self, tmp_path):
        grid = make_grid(1, [2.0], [3])
        write_snapshot(tmp_path / "f.gflx", ScalarField.constant(grid, 1.0))
        data = (tmp_path / "f.gflx").read_bytes()
        assert data[:4] == b"GFLX"
        assert len(data) == 4 + 4 + 4 + 4 + 8 + 3 * 8

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.gflx").write_bytes(b"NOPE" + bytes(32))
        with pytest.raises(ValueError, match="not a GFLX snapshot"):
            read_snapshot(tmp_path / "bad.gflx")


class TestRunExperiment:
    def test_heat_archive(self, tmp_path, errors):
        archive = run_experiment(parse_config(HEAT_CONSTANT), tmp_path / "run", errors=errors)
        root = tmp_path / "run"
        for name in ("manifest.json", "reports.csv", "functionals.csv", "ladders.csv", "summary.txt", "plot_mass.dat"):
            assert (root / name).exists()
        assert archive.snapshots == ["v0.gflx", "v_final.gflx"]
        assert np.allclose(read_snapshot(root / "snapshots" / "v_final.gflx").values, 1.4)
        assert archive.reports and not archive.failed
        manifest = json.loads((root / "manifest.json").read_text())
        assert manifest["kind"] == "heat"
        assert set(manifest["versions"]) == {"numpy", "scipy", "pydantic"}

    def test_rerun_is_byte_identical(self, tmp_path):
        config = parse_config(HEAT_CONSTANT)
        run_experiment(config, tmp_path / "a")
        run_experiment(config, tmp_path / "b")
        for name in ("reports.csv", "functionals.csv", "ladders.csv", "plot_mass.dat"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_plot_header(self, tmp_path):
        run_experiment(parse_config(HEAT_CONSTANT), tmp_path)
        lines = (tmp_path / "plot_mass.dat").read_text().splitlines()
        assert lines[0] == "# quantity: mass"
        assert lines[1].startswith("# anchor: Lemma 2.1")
        assert len(lines) == 3 + 5
        x, value = map(float, lines[-1].split())
        assert x == pytest.approx(0.2)
        assert value == pytest.approx(1.4)

    def test_unknown_plot_quantity(self, tmp_path):
        archive = run_experiment(parse_config(HEAT_CONSTANT), tmp_path)
        with pytest.raises(KeyError):
            emit_plot_data(archive, "nothing")

    def test_reload_archive(self, tmp_path):
        archive = run_experiment(parse_config(HEAT_CONSTANT), tmp_path)
        loaded = load_archive(tmp_path)
        assert loaded.config == archive.config
        assert [r.lemma for r in loaded.reports] == [r.lemma for r in archive.reports]
        assert [r.passed for r in loaded.reports] == [r.passed for r in archive.reports]
        assert loaded.series("mass") == archive.series("mass")
        assert loaded.snapshots == sorted(archive.snapshots)

    def test_report_kind_reemits(self, tmp_path):
        run_experiment(parse_config(HEAT_CONSTANT), tmp_path / "run")
        before = (tmp_path / "run" / "reports.csv").read_bytes()
        config = parse_config(f"kind: report\narchive: {tmp_path / 'run'}\n")
        archive = run_experiment(config)
        assert archive.config.kind == "heat"
        assert (tmp_path / "run" / "reports.csv").read_bytes() == before

    def test_missing_archive(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_archive(tmp_path / "absent")

    def test_verify_adds_relaxation_and_weight(self, tmp_path):
        archive = run_experiment(parse_config(HEAT_COSINE), tmp_path)
        lemmas = {r.lemma for r in archive.reports}
        assert {"Lemma 3.6 step", "Lemma 3.6 initial", "Lemma 3.6 bound", "Lemma 4.1"} <= lemmas
        assert archive.series("landes_distance")

    def test_chemo_archive(self, tmp_path):
        archive = run_experiment(parse_config(CHEMO_B), tmp_path)
        assert "u_final.gflx" in archive.snapshots
        lemmas = [r.lemma for r in archive.reports]
        assert any("Definition 6.1" in r.anchor for r in archive.reports)
        assert len(lemmas) >= 3
        assert len(archive.series("mass_u")) == 21

    def test_sweep_archive(self, tmp_path):
        archive = run_experiment(parse_config(SMALL_SWEEP), tmp_path, threads=2)
        names = [ladder.name for ladder in archive.ladders]
        assert names[0] == "l1"
        assert "truncated_gradient_k1" in names
        assert len(archive.snapshots) == 6
        assert archive.series("member_mass_end")
        assert (tmp_path / "plot_l1.dat").read_text().startswith("# quantity: l1\n")


class TestSummaries:
    def test_text_summary(self, tmp_path):
        archive = run_experiment(parse_config(HEAT_CONSTANT), tmp_path)
        text = format_summary_text(archive)
        assert text.startswith("=" * 60)
        assert "[PASS]" in text
        assert (tmp_path / "summary.txt").read_text() == text

    def test_json_summary(self, tmp_path):
        archive = run_experiment(parse_config(SMALL_SWEEP), tmp_path)
        data = json.loads(format_summary_json(archive))
        assert data["kind"] == "sweep"
        assert data["ladders"][0]["name"] == "l1"
        assert len(data["ladders"][0]["d"]) == 5


@pytest.mark.slow
class TestSpikeSweepExample:
    def test_ladders_converge(self, tmp_path):
        config = load_config(Path(__file__).parent.parent / "examples_config" / "sweep_spike.yaml")
        archive = run_experiment(config, tmp_path, threads=2)
        verdicts = {ladder.name: ladder.verdict for ladder in archive.ladders}
        for name in ("l1", "grad_lambda1", "truncated_gradient_k1", "truncated_gradient_k4", "weighted_gradient_r1"):
            assert verdicts[name] == "cauchy-decreasing"
        assert verdicts["psi_gradient_power"] == "cauchy-decreasing"
        assert len(archive.snapshots) == 8
