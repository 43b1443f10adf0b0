import json

import pytest

import gradflux
from grid_core import GridError

HEAT = """
kind: heat
grid: {dim: 1, extents: [1.0], cells: [16]}
solver: {dt: 0.05}
t_end: 0.2
heat:
  v0: {kind: constant, value: 1.0}
  source: 2.0
"""

HEAVY_TAIL = """
kind: sweep
grid: {dim: 1, extents: [1.0], cells: [128]}
solver: {dt: 0.005}
t_end: 0.02
sweep:
  family: {kind: heavy-tail, gamma: 0.5}
  levels: 4
  psi_power: 2.0
checkers:
  enabled: []
"""

STEEP_SIGNAL = """
kind: chemo
grid: {dim: 1, extents: [1.0], cells: [32]}
solver: {dt: 0.1}
t_end: 0.2
chemo:
  variant: A
  g: {lam: 1.0, mu: 1.0, beta: 2.0}
  v0: {kind: cosine, value: 50.0, amplitude: 49.0}
"""


@pytest.fixture
def write_config(tmp_path):
    def write(text, name="config.yaml"):
        path = tmp_path / name
        path.write_text(text)
        return str(path)

    return write


class TestExitCodes:
    def test_heat_run(self, tmp_path, write_config, capsys):
        code = gradflux.main(["heat", "-c", write_config(HEAT), "-o", str(tmp_path / "run")])
        assert code == gradflux.EXIT_OK
        out = capsys.readouterr().out
        assert "gradflux Run Summary" in out
        assert "Done!" in out
        assert (tmp_path / "run" / "reports.csv").exists()

    def test_environment_supplies_output(self, tmp_path, write_config, monkeypatch):
        monkeypatch.setenv("GRADFLUX_OUT", str(tmp_path / "from_env"))
        assert gradflux.main(["heat", "-c", write_config(HEAT)]) == gradflux.EXIT_OK
        assert (tmp_path / "from_env" / "manifest.json").exists()

    @pytest.mark.parametrize("argv", [[], ["heat"], ["nonsense"], ["heat", "-c", "x.yaml", "-f", "xml"]])
    def test_usage_errors(self, argv, capsys):
        assert gradflux.main(argv) == gradflux.EXIT_USAGE

    def test_help(self, capsys):
        assert gradflux.main(["--help"]) == gradflux.EXIT_OK
        assert "Examples:" in capsys.readouterr().out

    def test_missing_config_file(self, tmp_path):
        assert gradflux.main(["heat", "-c", str(tmp_path / "absent.yaml")]) == gradflux.EXIT_CONFIG

    def test_invalid_config(self, write_config, capsys):
        path = write_config(HEAT + "checkers: {lambda_values: [2.0]}\n")
        assert gradflux.main(["heat", "-c", path]) == gradflux.EXIT_CONFIG
        assert "λ ∈ [1, (n+2)/(n+1))" in capsys.readouterr().err

    def test_wrong_command_for_config(self, write_config):
        assert gradflux.main(["sweep", "-c", write_config(HEAT)]) == gradflux.EXIT_CONFIG

    def test_bad_thread_count(self, tmp_path, write_config):
        argv = ["heat", "-c", write_config(HEAT), "-o", str(tmp_path), "-t", "0"]
        assert gradflux.main(argv) == gradflux.EXIT_CONFIG

    def test_solver_failure(self, tmp_path, write_config, capsys):
        argv = ["chemo", "-c", write_config(STEEP_SIGNAL), "-o", str(tmp_path)]
        assert gradflux.main(argv) == gradflux.EXIT_SOLVER
        assert "CFL" in capsys.readouterr().err

    def test_grid_failure_inside_a_solve(self, tmp_path, write_config, monkeypatch, capsys):
        def blow_up(*args, **kwargs):
            raise GridError("field shape (3,) does not match grid (16,)")

        monkeypatch.setattr(gradflux, "run_experiment", blow_up)
        argv = ["heat", "-c", write_config(HEAT), "-o", str(tmp_path)]
        assert gradflux.main(argv) == gradflux.EXIT_SOLVER
        assert "Solver failure" in capsys.readouterr().err

    def test_strict_refusal(self, tmp_path, write_config, capsys):
        argv = ["sweep", "-c", write_config(HEAVY_TAIL), "-o", str(tmp_path), "--strict"]
        assert gradflux.main(argv) == gradflux.EXIT_STRICT
        assert "Strict mode" in capsys.readouterr().err

    def test_refusal_is_not_fatal_without_strict(self, tmp_path, write_config, capsys):
        argv = ["sweep", "-c", write_config(HEAVY_TAIL), "-o", str(tmp_path)]
        assert gradflux.main(argv) == gradflux.EXIT_OK
        out = capsys.readouterr().out
        assert "[FAIL] Theorem 1.2 hypotheses" in out
        assert "not converging" in out


class TestReport:
    def test_report_as_json(self, tmp_path, write_config, capsys):
        gradflux.main(["heat", "-c", write_config(HEAT), "-o", str(tmp_path / "run")])
        capsys.readouterr()
        assert gradflux.main(["report", str(tmp_path / "run"), "-f", "json"]) == gradflux.EXIT_OK
        out = capsys.readouterr().out
        start, end = out.index("{"), out.rindex("}") + 1
        data = json.loads(out[start:end])
        assert data["kind"] == "heat"
        assert data["reports"]

    def test_missing_archive(self, tmp_path):
        assert gradflux.main(["report", str(tmp_path / "absent")]) == gradflux.EXIT_CONFIG
