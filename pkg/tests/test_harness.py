"""Fixed-point engine, configuration parsing, and artifact emission."""

import json

import numpy as np
import pytest

from paratorus.harness import (
    ConfigError,
    ExperimentConfig,
    NoConvergenceError,
    NonContractionError,
    SolveReport,
    emit_report,
    fixed_point_solve,
    parameter_lipschitz_probe,
    write_gnuplot_stub,
    write_plot_csv,
)
from paratorus.torus_spectral import GridSpec
from test_torus_spectral import random_field


class TestFixedPoint:
    def test_linear_contraction(self):
        x, report = fixed_point_solve(lambda x: 0.5 * x, 1.0, 1e-12)
        assert abs(x) <= 2e-12
        assert np.allclose(report.contraction_ratios, 0.5)
        assert report.residual_norms["increment"] <= 1e-12

    def test_cosine_fixed_point(self):
        x, report = fixed_point_solve(np.cos, 1.0, 1e-12, max_iter=200)
        assert abs(x - np.cos(x)) <= 1e-12
        assert abs(x - 0.7390851332151607) <= 1e-10
        assert report.iterations == len(report.contraction_ratios) + 1

    def test_expansion_aborts_quickly(self):
        with pytest.raises(NonContractionError) as err:
            fixed_point_solve(lambda x: 2.0 * x, 1.0, 1e-12)
        assert err.value.report.iterations <= 3

    def test_budget_exhaustion(self):
        with pytest.raises(NoConvergenceError) as err:
            fixed_point_solve(lambda x: 0.5 * x, 1.0, 1e-30, max_iter=5)
        assert err.value.report.iterations == 5

    def test_field_valued_iteration(self):
        spec = GridSpec(1, 8)
        u0 = random_field(spec, seed=0)
        u, report = fixed_point_solve(lambda u: 0.25 * u, u0, 1e-13)
        assert float(np.max(np.abs(u.coeffs))) <= 1e-12
        assert np.allclose(report.contraction_ratios, 0.25)

    def test_argument_validation(self):
        with pytest.raises(ValueError):
            fixed_point_solve(lambda x: x, 1.0, 1e-8, ratio_guard=1.2)
        with pytest.raises(ValueError):
            fixed_point_solve(lambda x: x, 1.0, -1e-8)
        with pytest.raises(ValueError):
            fixed_point_solve(lambda x: x, 1.0, 1e-8, max_iter=0)

    def test_report_rejects_negative_residual(self):
        with pytest.raises(ValueError):
            SolveReport().record("bad", -1.0)


class TestParameterLipschitz:
    def test_affine_family_attains_the_bound(self):
        # x = 0.5 x + mu has f(mu) = 2 mu, and L/(1-q) = 2 exactly
        probe = parameter_lipschitz_probe(
            lambda x, mu: 0.5 * x + mu, 0.0, 0.3, 0.7, 1e-13
        )
        assert probe["holds"]
        assert abs(probe["distance"] - 0.8) <= 1e-10
        # the measured q carries rounding noise from the final increments,
        # so the attained bound is tight only to about a percent
        assert abs(probe["bound"] - probe["distance"]) <= 0.01

    def test_cosine_family(self):
        probe = parameter_lipschitz_probe(
            lambda x, mu: mu * np.cos(x), 0.5, 0.3, 0.5, 1e-13
        )
        assert probe["holds"]
        assert probe["q"] < 1.0


class TestConfig:
    def good(self):
        return {
            "schema": "paratorus/config-v1",
            "family": "quasilinear-demo",
            "n": 2,
            "M": 16,
            "gamma": 0.2,
        }

    def test_roundtrip_and_defaults(self):
        cfg = ExperimentConfig.from_dict(self.good())
        assert cfg.tau == 1.5 and cfg.seed == 0
        again = ExperimentConfig.from_dict(cfg.to_dict())
        assert again == cfg
        assert cfg.grid_spec().M == 16
        assert cfg.dio_params().gamma == 0.2
        assert cfg.tau_steps() >= 128

    def test_missing_required_field(self):
        raw = self.good()
        del raw["family"]
        with pytest.raises(ConfigError, match="family"):
            ExperimentConfig.from_dict(raw)

    def test_unknown_field_named(self):
        raw = self.good()
        raw["gamm"] = 0.1
        with pytest.raises(ConfigError, match="gamm"):
            ExperimentConfig.from_dict(raw)

    def test_schema_version_enforced(self):
        raw = self.good()
        raw["schema"] = "paratorus/config-v0"
        with pytest.raises(ConfigError, match="schema"):
            ExperimentConfig.from_dict(raw)

    def test_ladder_must_decrease(self):
        raw = self.good()
        raw["epsilon_ladder"] = [1e-2, 1e-2, 1e-3]
        with pytest.raises(ConfigError, match="epsilon_ladder"):
            ExperimentConfig.from_dict(raw)

    def test_tolerances_positive(self):
        raw = self.good()
        raw["tol_abs"] = 0.0
        with pytest.raises(ConfigError, match="tol_abs"):
            ExperimentConfig.from_dict(raw)

    def test_parse_error_reports_line(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n "schema": "paratorus/config-v1",\n broken\n}')
        with pytest.raises(ConfigError, match="line 3"):
            ExperimentConfig.from_file(str(p))


class TestEmission:
    def report(self):
        r = SolveReport(
            iterations=3,
            contraction_ratios=[0.5, 0.25],
            residual_norms={"increment": 1e-13, "pde": 2e-9},
            wall_time=1.23,
            feasible=True,
            stage="demo",
        )
        return r

    def test_json_deterministic_and_time_free(self, tmp_path):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        emit_report(self.report(), str(a))
        emit_report(self.report(), str(b))
        assert a.read_bytes() == b.read_bytes()
        payload = json.loads(a.read_text())
        assert "wall_time" not in payload
        assert payload["residual_norms"]["pde"] == 2e-9

    def test_csv_layout(self, tmp_path):
        p = tmp_path / "r.csv"
        emit_report(self.report(), str(p), fmt="csv")
        lines = p.read_text().strip().splitlines()
        assert lines[0] == "key,value"
        assert any(line.startswith("residual.pde,") for line in lines)
        assert any(line.startswith("ratio.1,") for line in lines)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report(self.report(), str(tmp_path / "x"), fmt="yaml")

    def test_plot_csv_and_stub(self, tmp_path):
        p = tmp_path / "scan.csv"
        write_plot_csv(str(p), {"gamma": [0.1, 0.2], "excluded": [0.29, 0.52]})
        lines = p.read_text().strip().splitlines()
        assert lines[0] == "gamma,excluded"
        assert len(lines) == 3
        stub = tmp_path / "scan.gp"
        write_gnuplot_stub(str(stub), "scan.csv", "exclusion scan")
        text = stub.read_text()
        assert "scan.csv" in text and "plot" in text

    def test_ragged_columns_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_plot_csv(str(tmp_path / "x.csv"), {"a": [1], "b": [1, 2]})
