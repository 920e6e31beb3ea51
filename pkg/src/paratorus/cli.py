"""Command-line front end for the solvers and diagnostic sweeps.

Every subcommand reads its sizes from an optional JSON experiment
config (``--config``), with explicit options taking precedence, and
writes deterministic artifacts (JSON reports, CSV plot data, gnuplot
stubs, field snapshots) into ``--out-dir``.  Problem right-hand sides
are chosen by registry key only; configs never embed code.

Exit codes: 0 on success, 2 for configuration problems (bad config
file, invalid option values, malformed inputs), 3 when a solver gave
up (non-contraction or iteration budget).
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from .harness import (
    ConfigError,
    ExperimentConfig,
    SolverError,
    emit_report,
    write_gnuplot_stub,
    write_plot_csv,
)

DEFAULT_GAMMAS = "0.02,0.05,0.1,0.2"


def _fail_config(message: str) -> None:
    click.echo(f"config error: {message}", err=True)
    sys.exit(2)


def _fail_solver(exc: SolverError) -> None:
    stage = getattr(exc.report, "stage", "") or "solver"
    click.echo(f"solver failed [{stage}]: {exc}", err=True)
    sys.exit(3)


def _guarded(body):
    """Run a command body under the exit-code contract."""
    try:
        body()
    except ConfigError as exc:
        _fail_config(str(exc))
    except SolverError as exc:
        _fail_solver(exc)
    except ValueError as exc:
        _fail_config(str(exc))


def _default_frequency(n: int) -> np.ndarray:
    """Rationally independent default: square roots of the first primes."""
    primes = [1, 2, 3, 5, 7, 11, 13]
    if n > len(primes):
        raise ConfigError(f"no default frequency for n = {n}; pass --omega")
    return np.sqrt(np.array(primes[:n], dtype=float))


def _parse_omega(text: str | None, n: int) -> np.ndarray:
    if text is None:
        return _default_frequency(n)
    try:
        vals = np.array([float(v) for v in text.split(",")], dtype=float)
    except ValueError:
        raise ConfigError(f"cannot parse frequency vector {text!r}")
    if vals.shape != (n,):
        raise ConfigError(f"frequency vector needs {n} components, got {vals.size}")
    return vals


def _seeded_scalar(spec, seed: int, parity: str | None = None):
    """Smooth random scalar field shared by the diagnostic commands."""
    from .torus_spectral import TorusField, parity_project

    rng = np.random.default_rng(seed)
    c = rng.standard_normal(spec.lattice_shape) + 1j * rng.standard_normal(
        spec.lattice_shape
    )
    c *= (1.0 + spec.basis().abs_xi**2) ** -2
    c = 0.5 * (c + np.conj(np.flip(c)))
    out = TorusField(spec, c)
    if parity is not None:
        out = parity_project(out, parity)
    return out


class Session:
    """Resolved global options plus the optional experiment config."""

    def __init__(self, config: ExperimentConfig | None, seed: int | None,
                 threads: int, out_dir: str | None):
        self.config = config
        self.seed = (
            seed
            if seed is not None
            else (config.seed if config is not None else 0)
        )
        self.out_dir = (
            out_dir
            if out_dir is not None
            else (config.out_dir if config is not None else ".")
        )
        self.threads = threads

    def path(self, name: str) -> str:
        os.makedirs(self.out_dir, exist_ok=True)
        return os.path.join(self.out_dir, name)

    def size(self, option_value, field: str, fallback):
        """Option wins, then the config field, then the builtin default."""
        if option_value is not None:
            return option_value
        if self.config is not None:
            return getattr(self.config, field)
        return fallback

    def dio_params(self, gamma=None, tau=None, M_dio=None):
        from .small_divisor import DioParams

        g = self.size(gamma, "gamma", 0.1)
        t = self.size(tau, "tau", 1.5)
        m = self.size(M_dio, "M_dio", 200)
        return DioParams(g, t, m)

    def write_json(self, name: str, payload: dict) -> str:
        path = self.path(name)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON experiment config supplying sizes and tolerances.")
@click.option("--seed", type=int, default=None,
              help="Random seed for sampled inputs (default: config or 0).")
@click.option("--threads", type=int, default=1, show_default=True,
              help="Worker count for sampling sweeps.")
@click.option("--out-dir", type=click.Path(), default=None,
              help="Artifact directory (default: config or '.').")
@click.pass_context
def main(ctx, config_path, seed, threads, out_dir):
    """Spectral paradifferential toolkit on the torus."""
    config = None
    if config_path is not None:
        try:
            config = ExperimentConfig.from_file(config_path)
        except ConfigError as exc:
            _fail_config(str(exc))
    if threads < 1:
        _fail_config("--threads must be at least 1")
    ctx.obj = Session(config, seed, threads, out_dir)


@main.command("lp-demo")
@click.option("--n", type=int, default=None, help="Torus dimension.")
@click.option("--M", "M", type=int, default=None, help="Mode cutoff.")
@click.pass_obj
def lp_demo(sess: Session, n, M):
    """Dyadic block energies and partition defect of a seeded field."""

    def body():
        from .torus_spectral import (
            GridSpec,
            lp_block,
            partition_defect,
            sobolev_norm,
            synthesize,
        )

        spec = GridSpec(sess.size(n, "n", 2), sess.size(M, "M", 16))
        u = _seeded_scalar(spec, sess.seed)
        blocks = list(range(spec.J_max + 1))
        energies = [sobolev_norm(lp_block(u, j), 0.0) for j in blocks]
        total = sobolev_norm(u, 0.0)
        # Plancherel between the two representations; the blocks overlap,
        # so their energies are a decomposition, not an orthogonal one.
        grid_mean_square = float(np.mean(np.abs(synthesize(u)) ** 2))
        parseval_gap = abs(grid_mean_square - total * total)
        csv_path = write_plot_csv(
            sess.path("lp_blocks.csv"), {"j": blocks, "h0_energy": energies}
        )
        stub = write_gnuplot_stub(
            sess.path("lp_blocks.gp"), "lp_blocks.csv", "dyadic block energies"
        )
        summary = sess.write_json(
            "lp_summary.json",
            {
                "n": spec.n,
                "M": spec.M,
                "J_max": spec.J_max,
                "partition_defect": partition_defect(u),
                "parseval_gap": parseval_gap,
                "seed": sess.seed,
            },
        )
        click.echo(f"wrote {csv_path}, {stub}, {summary}")

    _guarded(body)


@main.command("calculus-check")
@click.option("--M", "M", type=int, default=None, help="Mode cutoff.")
@click.option("--k-ladder", default="4,8,16", show_default=True,
              help="Probe frequencies for the smoothing fits.")
@click.pass_obj
def calculus_check(sess: Session, M, k_ladder):
    """Remainder smoothing exponents against probe frequency."""

    def body():
        from .paracalculus import (
            cm_remainder_apply,
            fit_power_exponent,
            pm_remainder,
        )
        from .paraflow import Diffeo, refined_paralin_remainder
        from .torus_spectral import (
            GridSpec,
            TorusField,
            field_from_modes,
            holder_norm,
            sobolev_norm,
        )

        try:
            ladder = [int(v) for v in k_ladder.split(",")]
        except ValueError:
            raise ConfigError(f"cannot parse --k-ladder {k_ladder!r}")
        spec = GridSpec(sess.size(None, "n", 2), sess.size(M, "M", 32))
        if max(ladder) > spec.M // 2:
            raise ConfigError("probe frequencies must stay below M/2")
        a = _seeded_scalar(spec, sess.seed, parity="even")
        b = _seeded_scalar(spec, sess.seed + 1, parity="even")
        raw = _seeded_scalar(spec, sess.seed + 2, parity="odd")
        scale = 0.1 / max(holder_norm(raw, 1.0), 1e-300)
        chi = Diffeo(TorusField(spec, np.stack([scale * raw.coeffs] * spec.n), "odd"))
        rows: dict[str, list] = {"K": [], "pm": [], "cm": [], "refined": []}
        for K in ladder:
            mode = tuple([K] + [0] * (spec.n - 1))
            conj = tuple([-K] + [0] * (spec.n - 1))
            probe = field_from_modes(spec, {mode: 0.5, conj: 0.5}, parity="even")
            rows["K"].append(K)
            rows["pm"].append(sobolev_norm(pm_remainder(a, probe), 0.0))
            rows["cm"].append(
                sobolev_norm(cm_remainder_apply(a, b, probe, side="scalar"), 0.0)
            )
            rows["refined"].append(
                sobolev_norm(refined_paralin_remainder(probe, chi), 0.0)
            )
        csv_path = write_plot_csv(sess.path("calculus_fits.csv"), rows)
        stub = write_gnuplot_stub(
            sess.path("calculus_fits.gp"),
            "calculus_fits.csv",
            "remainder norms vs probe frequency",
            ycols=(2, 3, 4),
        )
        summary = sess.write_json(
            "calculus_summary.json",
            {
                "exponents": {
                    key: fit_power_exponent(rows["K"], rows[key])
                    for key in ("pm", "cm", "refined")
                },
                "seed": sess.seed,
            },
        )
        click.echo(f"wrote {csv_path}, {stub}, {summary}")

    _guarded(body)


@main.command("paracomp-check")
@click.option("--M", "M", type=int, default=None, help="Mode cutoff.")
@click.option("--amp", type=float, default=0.1, show_default=True,
              help="C^1 size of the displacement.")
@click.pass_obj
def paracomp_check(sess: Session, M, amp):
    """Forward/backward composition roundtrip against step count."""

    def body():
        from .paraflow import Diffeo, paracompose
        from .torus_spectral import GridSpec, TorusField, holder_norm, sobolev_norm

        spec = GridSpec(sess.size(None, "n", 2), sess.size(M, "M", 16))
        raw = _seeded_scalar(spec, sess.seed, parity="odd")
        scale = amp / max(holder_norm(raw, 1.0), 1e-300)
        theta = TorusField(
            spec, np.stack([scale * raw.coeffs] * spec.n), "odd"
        )
        chi = Diffeo(theta)
        f = _seeded_scalar(spec, sess.seed + 2)
        steps = [16, 32, 64, 128]
        errs = []
        for ns in steps:
            pulled = paracompose(chi, f, n_steps=ns)
            back = paracompose(chi, pulled, inverse=True, n_steps=ns)
            errs.append(sobolev_norm(back - f, 4.0))
        csv_path = write_plot_csv(
            sess.path("paracomp.csv"), {"n_steps": steps, "roundtrip_h4": errs}
        )
        stub = write_gnuplot_stub(
            sess.path("paracomp.gp"), "paracomp.csv", "composition roundtrip"
        )
        summary = sess.write_json(
            "paracomp_summary.json",
            {
                "amp_c1": amp,
                "inverse_residual": chi.inverse_residual(),
                "roundtrip_at_max_steps": errs[-1],
                "seed": sess.seed,
            },
        )
        click.echo(f"wrote {csv_path}, {stub}, {summary}")

    _guarded(body)


@main.command("reduce-matrix")
@click.option("--omega", default=None, help="Comma-separated frequency vector.")
@click.option("--amp", type=float, default=1e-2, show_default=True,
              help="Size of the seeded coefficient matrix.")
@click.pass_obj
def reduce_matrix(sess: Session, omega, amp):
    """Reduce a seeded zeroth-order matrix to constant coefficients."""

    def body():
        from .reduce_matrix import MatrixReductionProblem, matred_residual, matred_solve
        from .torus_spectral import GridSpec, TorusField, save_field

        cfg = sess.config
        n = cfg.n if cfg is not None else 2
        Mval = cfg.M if cfg is not None else 16
        Nval = cfg.N if cfg is not None else 2
        spec = GridSpec(n, Mval)
        om = _parse_omega(omega, n)
        rows = [
            [
                amp * _seeded_scalar(spec, sess.seed + 10 * i + j, parity="odd").coeffs
                for j in range(Nval)
            ]
            for i in range(Nval)
        ]
        A = TorusField(spec, np.array(rows), "odd")
        problem = MatrixReductionProblem(omega=om, A=A, params=sess.dio_params())
        U, report = matred_solve(problem)
        report.record("equation_residual_final", matred_residual(om, A, U))
        snap = sess.path("gauge_U.json")
        save_field(U, snap)
        rep = emit_report(report, sess.path("reduce_matrix_report.json"))
        click.echo(f"wrote {snap}, {rep}")

    _guarded(body)


@main.command("straighten")
@click.option("--family", default="quasilinear-demo", show_default=True,
              help="Registry key for the transport field.")
@click.option("--eps", type=float, default=1e-3, show_default=True)
@click.option("--omega", default=None, help="Comma-separated frequency vector.")
@click.option("--M", "M", type=int, default=None, help="Mode cutoff.")
@click.pass_obj
def straighten_cmd(sess: Session, family, eps, omega, M):
    """Straighten a registry family's transport field at u = 0."""

    def body():
        from .kam_hyperbolic import build_problem, paralinearize_eq
        from .reduce_vector import StraighteningProblem, straighten
        from .torus_spectral import TorusField, save_field, zero_field

        problem = build_problem(
            family, M=sess.size(M, "M", 16), eps=eps,
            gamma=sess.config.gamma if sess.config is not None else None,
        )
        spec = problem.spec
        om = _parse_omega(omega, spec.n)
        u0 = zero_field(spec, (problem.N,))
        Y, _, _ = paralinearize_eq(problem, u0)
        drift = TorusField(spec, eps * Y.coeffs, "even")
        result = straighten(
            StraighteningProblem(omega=om, X=drift, params=problem.params)
        )
        theta_path = sess.path("straighten_theta.json")
        chi_path = sess.path("straighten_chi_theta.json")
        save_field(result.eta.theta, theta_path)
        save_field(result.chi.theta, chi_path)
        summary = sess.write_json(
            "straighten.json",
            {
                "family": family,
                "eps": eps,
                "omega": list(om),
                "h": list(result.h),
                "iterations": result.report.iterations,
                "feasible": result.report.feasible,
                "residual_norms": dict(
                    sorted(result.report.residual_norms.items())
                ),
            },
        )
        click.echo(f"wrote {summary}, {theta_path}, {chi_path}")

    _guarded(body)


@main.command("solve-hyperbolic")
@click.option("--family", default="quasilinear-demo", show_default=True)
@click.option("--eps", type=float, default=1e-3, show_default=True)
@click.option("--omega", default=None, help="Comma-separated frequency vector.")
@click.option("--M", "M", type=int, default=None, help="Mode cutoff.")
@click.pass_obj
def solve_hyperbolic(sess: Session, family, eps, omega, M):
    """Solve a registry problem and write the solution snapshot."""

    def body():
        from .kam_hyperbolic import build_problem, kam_solve
        from .torus_spectral import save_field

        problem = build_problem(
            family, M=sess.size(M, "M", 16), eps=eps,
            gamma=sess.config.gamma if sess.config is not None else None,
        )
        om = _parse_omega(omega, problem.spec.n)
        state = kam_solve(problem, om)
        snap = sess.path("solution_u.json")
        save_field(state.u, snap)
        rep = emit_report(state.report, sess.path("solve_report.json"))
        ratios = list(state.report.contraction_ratios)
        trace = write_plot_csv(
            sess.path("solve_trace.csv"),
            {"iteration": list(range(2, len(ratios) + 2)), "ratio": ratios},
        )
        stub = write_gnuplot_stub(
            sess.path("solve_trace.gp"), "solve_trace.csv", "outer contraction"
        )
        click.echo(
            f"converged in {state.report.iterations} iterations, "
            f"pde_residual {state.report.residual_norms['pde_residual']:.3e}"
        )
        click.echo(f"wrote {snap}, {rep}, {trace}, {stub}")

    _guarded(body)


@main.command("scan-feasible")
@click.option("--family", default="linear-forcing", show_default=True)
@click.option("--eps", type=float, default=1e-3, show_default=True)
@click.option("--radius", "-R", "radius", type=float, default=2.0, show_default=True)
@click.option("--samples", type=int, default=64, show_default=True)
@click.option("--M", "M", type=int, default=None, help="Mode cutoff.")
@click.pass_obj
def scan_feasible(sess: Session, family, eps, radius, samples, M):
    """Tabulate solver feasibility over sampled base frequencies."""

    def body():
        from .kam_hyperbolic import build_problem, feasible_set_scan

        problem = build_problem(
            family, M=sess.size(M, "M", 16), eps=eps,
            gamma=sess.config.gamma if sess.config is not None else None,
        )
        table = feasible_set_scan(
            problem, radius, samples, seed=sess.seed, workers=sess.threads
        )
        n = problem.spec.n
        columns: dict[str, list] = {}
        for axis in range(n):
            columns[f"omega_{axis}"] = [float(r.omega[axis]) for r in table.rows]
        for axis in range(n):
            columns[f"h_{axis}"] = [float(r.h[axis]) for r in table.rows]
        columns["feasible"] = [int(r.feasible) for r in table.rows]
        columns["residual"] = [float(r.residual) for r in table.rows]
        columns["stage_failures"] = [r.stage for r in table.rows]
        csv_path = write_plot_csv(sess.path("scan_feasible.csv"), columns)
        summary = sess.write_json(
            "scan_summary.json",
            {
                "family": family,
                "eps": eps,
                "R": radius,
                "samples": samples,
                "seed": sess.seed,
                "excluded_fraction": table.excluded_fraction,
            },
        )
        click.echo(
            f"excluded fraction {table.excluded_fraction:.4f} "
            f"({len(table)} samples)"
        )
        click.echo(f"wrote {csv_path}, {summary}")

    _guarded(body)


def _measure_body(sess: Session, gammas, radius, samples, n, tau):
    from .small_divisor import DioParams, dio_measure_mc

    try:
        ladder = [float(v) for v in gammas.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse --gammas {gammas!r}")
    dim = sess.size(n, "n", 2)
    t = sess.size(tau, "tau", 1.5)
    fractions = []
    for g in ladder:
        params = DioParams(g, t, sess.size(None, "M_dio", 200))
        fractions.append(
            dio_measure_mc(
                params, dim, radius, samples,
                rng_seed=sess.seed, workers=sess.threads,
            )
        )
    csv_path = write_plot_csv(
        sess.path("dio_measure.csv"),
        {
            "gamma": ladder,
            "R": [radius] * len(ladder),
            "samples": [samples] * len(ladder),
            "excluded_fraction": fractions,
            "seed": [sess.seed] * len(ladder),
        },
    )
    stub = write_gnuplot_stub(
        sess.path("dio_measure.gp"), "dio_measure.csv",
        "excluded measure vs divisor threshold", ycols=(4,),
    )
    click.echo(f"wrote {csv_path}, {stub}")


@main.command("measure-dio")
@click.option("--gammas", default=DEFAULT_GAMMAS, show_default=True,
              help="Comma-separated divisor thresholds.")
@click.option("--radius", "-R", "radius", type=float, default=2.0, show_default=True)
@click.option("--samples", type=int, default=20000, show_default=True)
@click.option("--n", type=int, default=None, help="Frequency dimension.")
@click.option("--tau", type=float, default=None, help="Diophantine exponent.")
@click.pass_obj
def measure_dio(sess: Session, gammas, radius, samples, n, tau):
    """Monte Carlo measure of the excluded frequency set."""
    _guarded(lambda: _measure_body(sess, gammas, radius, samples, n, tau))


@main.command("measure-feasible", hidden=True)
@click.option("--gammas", default=DEFAULT_GAMMAS, show_default=True)
@click.option("--radius", "-R", "radius", type=float, default=2.0, show_default=True)
@click.option("--samples", type=int, default=20000, show_default=True)
@click.option("--n", type=int, default=None)
@click.option("--tau", type=float, default=None)
@click.pass_obj
def measure_feasible(sess: Session, gammas, radius, samples, n, tau):
    """Alias of measure-dio kept for config compatibility."""
    _guarded(lambda: _measure_body(sess, gammas, radius, samples, n, tau))


if __name__ == "__main__":
    main()
