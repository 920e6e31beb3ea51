"""Fixed-point engine, experiment configuration, and report emission.

Every solver in this package is a Picard iteration of some contraction
built from the paradifferential calculus.  `fixed_point_solve` is the
shared driver: it measures the contraction ratio at every step, aborts
early when the map visibly fails to contract (rather than looping to
``max_iter`` on a diverging scheme), and returns a `SolveReport` whose
ratio series doubles as a diagnostic of how close the map is to its
theoretical contraction factor.

Artifacts (JSON reports, CSV plot data, gnuplot stubs) are written
deterministically: identical config and seed produce byte-identical
files.  Wall-clock time is therefore kept in the in-memory report but
never serialized.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "SolverError",
    "NonContractionError",
    "NoConvergenceError",
    "ConfigError",
    "SolveReport",
    "ExperimentConfig",
    "fixed_point_solve",
    "parameter_lipschitz_probe",
    "emit_report",
    "write_plot_csv",
    "write_gnuplot_stub",
]


class SolverError(RuntimeError):
    """Base for iteration failures; carries the partial report."""

    def __init__(self, message: str, report: "SolveReport"):
        super().__init__(message)
        self.report = report


class NonContractionError(SolverError):
    """The measured step ratio breached the guard twice in a row."""


class NoConvergenceError(SolverError):
    """The iteration budget ran out before the increment fell below tol."""


class ConfigError(ValueError):
    """Configuration file or field problem, with the offending field named."""


@dataclass
class SolveReport:
    """What one Picard run did: counts, ratio series, labeled residuals."""

    iterations: int = 0
    contraction_ratios: list = field(default_factory=list)
    residual_norms: dict = field(default_factory=dict)
    wall_time: float = 0.0
    feasible: bool | None = None
    stage: str = ""

    def record(self, label: str, value: float) -> None:
        value = float(value)
        if value < 0:
            raise ValueError(f"residual '{label}' must be non-negative")
        self.residual_norms[label] = value


def _default_norm(x) -> float:
    if hasattr(x, "coeffs"):
        return float(np.max(np.abs(x.coeffs)))
    return float(np.max(np.abs(np.asarray(x))))


def fixed_point_solve(
    step: Callable,
    x0,
    tol: float,
    max_iter: int = 100,
    ratio_guard: float = 0.995,
    norm: Callable | None = None,
    stage: str = "fixed-point",
):
    """Picard-iterate ``x <- step(x)`` until the increment drops below tol.

    The per-step ratio ``|x_{k+1}-x_k| / |x_k-x_{k-1}|`` is recorded for
    every iteration past the first; two consecutive ratios at or above
    ``ratio_guard`` abort the run with `NonContractionError` (a genuine
    contraction's ratios settle near its factor, so a persistent ratio
    near 1 means the hypotheses failed, not that more steps would help).
    On success the returned point satisfies ``|x - step(x)| <= tol`` up
    to the contraction factor, since the last increment already did.
    """
    if not (0.0 < ratio_guard < 1.0):
        raise ValueError("ratio_guard must lie strictly between 0 and 1")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    nrm = norm if norm is not None else _default_norm

    started = time.perf_counter()
    report = SolveReport(stage=stage)
    x = x0
    prev_inc: float | None = None
    breaches = 0
    for k in range(1, max_iter + 1):
        y = step(x)
        inc = nrm(y - x)
        report.iterations = k
        if prev_inc is not None and prev_inc > 0.0:
            ratio = inc / prev_inc
            report.contraction_ratios.append(ratio)
            if ratio >= ratio_guard:
                breaches += 1
                if breaches >= 2:
                    report.wall_time = time.perf_counter() - started
                    report.record("increment", inc)
                    raise NonContractionError(
                        f"{stage}: ratio {ratio:.3f} >= guard {ratio_guard} "
                        f"twice in a row at iteration {k}",
                        report,
                    )
            else:
                breaches = 0
        x = y
        if inc <= tol:
            report.wall_time = time.perf_counter() - started
            report.record("increment", inc)
            return x, report
        prev_inc = inc
    report.wall_time = time.perf_counter() - started
    report.record("increment", inc)
    raise NoConvergenceError(
        f"{stage}: increment {inc:.3e} still above tol {tol:.1e} "
        f"after {max_iter} iterations",
        report,
    )


def parameter_lipschitz_probe(
    family: Callable,
    x0,
    mu_1,
    mu_2,
    tol: float,
    max_iter: int = 200,
    ratio_guard: float = 0.995,
    norm: Callable | None = None,
) -> dict:
    """Check the parameter-Lipschitz bound of a uniform contraction family.

    Solves ``x = family(x, mu)`` at both parameters, measures the
    contraction factor ``q`` from the recorded ratios and the parameter
    sensitivity ``L`` from the map itself along the computed points, and
    reports whether ``|f(mu_1) - f(mu_2)| <= L/(1-q) |mu_1 - mu_2|``.
    """
    nrm = norm if norm is not None else _default_norm
    x1, r1 = fixed_point_solve(
        lambda x: family(x, mu_1), x0, tol, max_iter, ratio_guard, norm, "probe-1"
    )
    x2, r2 = fixed_point_solve(
        lambda x: family(x, mu_2), x0, tol, max_iter, ratio_guard, norm, "probe-2"
    )
    q = max(max(r1.contraction_ratios, default=0.0), max(r2.contraction_ratios, default=0.0))
    dmu = float(np.max(np.abs(np.asarray(mu_1) - np.asarray(mu_2))))
    L = max(
        nrm(family(p, mu_1) - family(p, mu_2)) / dmu for p in (x0, x1, x2)
    )
    distance = nrm(x1 - x2)
    bound = L / (1.0 - q) * dmu
    return {
        "fixed_points": (x1, x2),
        "q": q,
        "L": L,
        "distance": distance,
        "bound": bound,
        "holds": distance <= bound * (1.0 + 1e-9),
    }


# ---------------------------------------------------------------------------
# configuration


_SCHEMA = "paratorus/config-v1"

_REQUIRED = ("family", "n", "M")

_DEFAULTS = {
    "N": 1,
    "gamma": 0.1,
    "tau": 1.5,
    "M_dio": 200,
    "tol_abs": 1e-10,
    "tol_rel": 1e-8,
    "max_iter": 50,
    "neumann_cutoff": 1e-14,
    "n_tau": None,
    "epsilon_ladder": (1e-2, 3e-3, 1e-3),
    "out_dir": ".",
    "seed": 0,
}


@dataclass
class ExperimentConfig:
    """One experiment: problem family, sizes, exponents, tolerances."""

    family: str
    n: int
    M: int
    N: int = 1
    gamma: float = 0.1
    tau: float = 1.5
    M_dio: int = 200
    tol_abs: float = 1e-10
    tol_rel: float = 1e-8
    max_iter: int = 50
    neumann_cutoff: float = 1e-14
    n_tau: int | None = None
    epsilon_ladder: tuple = (1e-2, 3e-3, 1e-3)
    out_dir: str = "."
    seed: int = 0

    def __post_init__(self):
        for name in ("tol_abs", "tol_rel", "neumann_cutoff"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"field '{name}' must be positive")
        if self.max_iter < 1:
            raise ConfigError("field 'max_iter' must be at least 1")
        if self.n_tau is not None and self.n_tau < 1:
            raise ConfigError("field 'n_tau' must be at least 1 when given")
        ladder = tuple(float(e) for e in self.epsilon_ladder)
        if any(e <= 0 for e in ladder):
            raise ConfigError("field 'epsilon_ladder' must be positive")
        if any(a <= b for a, b in zip(ladder, ladder[1:])):
            raise ConfigError("field 'epsilon_ladder' must be strictly decreasing")
        self.epsilon_ladder = ladder

    @staticmethod
    def from_file(path: str) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config parse error at line {e.lineno}: {e.msg}") from e
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from e
        return ExperimentConfig.from_dict(raw)

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        schema = raw.get("schema")
        if schema != _SCHEMA:
            raise ConfigError(f"field 'schema' must be '{_SCHEMA}' (got {schema!r})")
        body = {k: v for k, v in raw.items() if k != "schema"}
        for name in _REQUIRED:
            if name not in body:
                raise ConfigError(f"field '{name}' is required")
        known = set(_REQUIRED) | set(_DEFAULTS)
        for name in body:
            if name not in known:
                raise ConfigError(f"field '{name}' is not recognized")
        try:
            return ExperimentConfig(**body)
        except TypeError as e:
            raise ConfigError(f"bad field value: {e}") from e

    def to_dict(self) -> dict:
        d = {"schema": _SCHEMA}
        d.update(asdict(self))
        d["epsilon_ladder"] = list(self.epsilon_ladder)
        return d

    def grid_spec(self):
        from .torus_spectral import GridSpec

        return GridSpec(self.n, self.M)

    def dio_params(self):
        from .small_divisor import DioParams

        return DioParams(self.gamma, self.tau, self.M_dio)

    def tau_steps(self) -> int:
        from .paraflow import default_tau_steps

        return default_tau_steps(self.grid_spec(), self.n_tau)


# ---------------------------------------------------------------------------
# artifact emission


def _report_payload(report: SolveReport) -> dict:
    for label, value in report.residual_norms.items():
        if value < 0:
            raise ValueError(f"residual '{label}' is negative")
    return {
        "stage": report.stage,
        "iterations": report.iterations,
        "contraction_ratios": [float(r) for r in report.contraction_ratios],
        "residual_norms": {k: float(v) for k, v in sorted(report.residual_norms.items())},
        "feasible": report.feasible,
    }


def emit_report(report: SolveReport, path: str, fmt: str = "json") -> str:
    """Serialize a report deterministically (wall time deliberately absent)."""
    payload = _report_payload(report)
    if fmt == "json":
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["key", "value"])
            w.writerow(["stage", payload["stage"]])
            w.writerow(["iterations", payload["iterations"]])
            w.writerow(["feasible", payload["feasible"]])
            for k, v in payload["residual_norms"].items():
                w.writerow([f"residual.{k}", repr(v)])
            for i, r in enumerate(payload["contraction_ratios"]):
                w.writerow([f"ratio.{i}", repr(r)])
    else:
        raise ValueError("fmt must be 'json' or 'csv'")
    return path


def write_plot_csv(path: str, columns: dict) -> str:
    """Plot data as CSV: one header row, then one row per measurement."""
    names = list(columns)
    if not names:
        raise ValueError("need at least one column")
    lengths = {len(columns[k]) for k in names}
    if len(lengths) != 1:
        raise ValueError("columns must have equal length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*(columns[k] for k in names)):
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def write_gnuplot_stub(path: str, csv_name: str, title: str, ycols: Sequence[int] = (2,)) -> str:
    """Companion script for a plot-data CSV; rendering stays optional."""
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set title '{title}'",
        "plot " + ", ".join(f"'{csv_name}' using 1:{c} with linespoints" for c in ycols),
        "",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
    return path
