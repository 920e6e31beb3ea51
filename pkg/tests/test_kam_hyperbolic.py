"""Tests for the quasilinear hyperbolic solver.

Independence of the checks, from strongest to weakest:

* Closed forms.  With no coefficients the whole machine must collapse
  to one Fourier division, compared coefficient-by-coefficient against
  a hand-built oracle.  Zero forcing must give the zero solution with
  an exactly zero residual.
* Cross-module identities.  The paralinearization remainder for a
  semilinear term must equal the generic paraproduct remainder plus
  the symmetric counter-term, computed by an independent routine; the
  gauge substitution must satisfy the paraproduct Leibniz rule exactly.
* The defining equation.  For genuinely quasilinear problems (the
  unknown advecting itself, variable coefficients in two frequencies)
  there is no closed form, and correctness is judged by the PDE
  residual evaluated on a grid with doubled mode cutoff, a code path
  that shares nothing with the solver's paradifferential rearrangement.

Tolerances are frozen from probe runs with two or more orders of
margin; anything tagged "exactly" was measured to be bit-exact.
"""

import pickle

import numpy as np
import pytest

import paratorus.kam_hyperbolic as kh
from paratorus.harness import NoConvergenceError, SolverError
from paratorus.kam_hyperbolic import (
    HyperbolicProblem,
    KamState,
    ball_samples,
    build_problem,
    change_unknown,
    conjugation_data,
    default_working_index,
    epsilon_ladder_scan,
    feasible_set_scan,
    forced_wrapper,
    invert_unknown,
    kam_solve,
    kam_step,
    paralinearize_eq,
    pde_residual,
    reduction_audit,
)
from paratorus.paracalculus import paraproduct, pm_remainder
from paratorus.small_divisor import DioParams, dio_check
from paratorus.torus_spectral import (
    GridSpec,
    TorusField,
    field_from_modes,
    partial_derivative,
    sobolev_norm,
)
from test_torus_spectral import random_field

OMEGA2 = np.array([1.0, np.sqrt(2.0)])


def sin_axis(spec, axis, value_shape=()):
    plus = tuple(1 if k == axis else 0 for k in range(spec.n))
    minus = tuple(-1 if k == axis else 0 for k in range(spec.n))
    shape_one = np.ones(value_shape) if value_shape else 1.0
    return field_from_modes(
        spec,
        {plus: -0.5j * shape_one, minus: 0.5j * shape_one},
        value_shape=value_shape,
        parity="odd",
    )


def small_even_iterate(spec, seed, amp=2e-3):
    w = random_field(spec, seed=seed, parity="even")
    return TorusField(spec, (amp * w.coeffs)[None], "even")


def self_speed(x, z):
    """Transport speed equal to the unknown itself (n = N = 1)."""
    return z.copy()


def odd_nonvanishing(x, z):
    return np.sin(x[0])[None] * (1.0 + z)


@pytest.fixture(scope="module")
def linear_case():
    prob = build_problem("linear-forcing", M=8, eps=1e-2)
    return prob, kam_solve(prob, OMEGA2)


@pytest.fixture(scope="module")
def demo_case():
    prob = build_problem("quasilinear-demo", M=8, eps=1e-3)
    return prob, kam_solve(prob, OMEGA2)


def linear_oracle(prob, omega):
    """eps (omega . grad)^{-1} f by explicit coefficient division."""
    spec = prob.spec
    xi = np.stack(np.meshgrid(*([spec.xi1d] * spec.n), indexing="ij"))
    div = 1j * np.einsum("l,l...->...", omega, xi)
    out = np.zeros_like(prob.f.coeffs)
    mask = np.abs(div) > 0
    out[0][mask] = prob.eps * prob.f.coeffs[0][mask] / div[mask]
    return out


class TestProblemValidation:
    def test_default_working_index_values(self):
        assert default_working_index(2, 1.5) == 12.5
        assert default_working_index(1, 1.0) == 9.5

    def test_problem_defaults_to_analytic_index(self):
        spec = GridSpec(2, 8)
        prob = HyperbolicProblem(
            X=None,
            F=None,
            f=sin_axis(spec, 0, (1,)),
            eps=1e-3,
            params=DioParams(gamma=0.1, tau=1.5),
        )
        assert prob.s == 12.5

    def test_builders_run_at_moderate_index(self):
        assert build_problem("linear-forcing", M=8).s == 6.0
        assert build_problem("quasilinear-demo", M=8).s == 6.0
        assert build_problem("forced-transport", M=8).s == 6.0

    def test_rejects_wrong_forcing(self):
        spec = GridSpec(1, 8)
        f = sin_axis(spec, 0, (1,))
        P = DioParams(gamma=0.2, tau=1.0)
        with pytest.raises(ValueError, match="tagged odd"):
            HyperbolicProblem(
                X=None, F=None, f=TorusField(spec, f.coeffs, "even"), eps=1e-2, params=P
            )
        with pytest.raises(ValueError, match=r"shape \(N,\)"):
            HyperbolicProblem(
                X=None, F=None, f=TorusField(spec, f.coeffs[0], "odd"), eps=1e-2, params=P
            )
        with pytest.raises(ValueError, match="positive"):
            HyperbolicProblem(X=None, F=None, f=f, eps=0.0, params=P)

    def test_audits_closure_symmetry(self):
        spec = GridSpec(1, 8)
        f = sin_axis(spec, 0, (1,))
        P = DioParams(gamma=0.2, tau=1.0)

        def odd_speed(x, z):
            return np.sin(x[0])[None]

        def even_zeroth(x, z):
            return np.cos(x[0])[None] * z

        with pytest.raises(ValueError, match="even in x"):
            HyperbolicProblem(X=odd_speed, F=None, f=f, eps=1e-2, params=P)
        with pytest.raises(ValueError, match="odd in x"):
            HyperbolicProblem(X=None, F=even_zeroth, f=f, eps=1e-2, params=P)
        with pytest.raises(ValueError, match="vanish at z = 0"):
            HyperbolicProblem(X=None, F=odd_nonvanishing, f=f, eps=1e-2, params=P)

    def test_unknown_family(self):
        with pytest.raises(ValueError, match="unknown problem family"):
            build_problem("no-such-family")


class TestParalinearize:
    def test_no_coefficients_gives_zeros(self, linear_case):
        prob, st = linear_case
        Y, A, R = paralinearize_eq(prob, st.u)
        assert not np.any(Y.coeffs)
        assert not np.any(A.coeffs)
        assert not np.any(R.coeffs)

    def test_semilinear_matches_paraproduct_remainder(self):
        spec = GridSpec(2, 8)
        prob = HyperbolicProblem(
            X=None,
            F=kh.demo_zeroth_order,
            f=sin_axis(spec, 0, (1,)),
            eps=1e-3,
            params=DioParams(gamma=0.1, tau=1.5),
            s=6.0,
        )
        u = small_even_iterate(spec, seed=3, amp=1e-2)
        Y, A, R = paralinearize_eq(prob, u)
        sin1 = sin_axis(spec, 0)
        assert not np.any(Y.coeffs)
        assert np.max(np.abs(A.coeffs[0, 0] - sin1.coeffs)) <= 1e-13
        scalar_u = TorusField(spec, u.coeffs[0], "even")
        ref = pm_remainder(sin1, scalar_u) + paraproduct(scalar_u, sin1, side="scalar")
        assert np.max(np.abs(R.coeffs[0] - ref.coeffs)) <= 1e-15

    def test_self_advection_coefficients(self):
        spec = GridSpec(1, 16)
        prob = HyperbolicProblem(
            X=self_speed,
            F=None,
            f=sin_axis(spec, 0, (1,)),
            eps=1e-2,
            params=DioParams(gamma=0.2, tau=1.0),
            s=6.0,
        )
        u = small_even_iterate(spec, seed=5, amp=1e-2)
        Y, A, R = paralinearize_eq(prob, u)
        assert np.max(np.abs(Y.coeffs[0] - u.coeffs[0])) <= 1e-13
        du = partial_derivative(u, 0)
        assert np.max(np.abs(A.coeffs[0, 0] - du.coeffs[0])) <= 1e-13

    def test_parity_tags(self, demo_case):
        prob, st = demo_case
        Y, A, R = paralinearize_eq(prob, st.u)
        assert Y.parity == "even"
        assert A.parity == "odd"
        assert R.parity == "odd"

    def test_rejects_mismatched_iterate(self, demo_case):
        prob, st = demo_case
        other = GridSpec(2, 4)
        with pytest.raises(ValueError, match="different grid"):
            paralinearize_eq(prob, small_even_iterate(other, seed=1))
        two = TorusField(
            prob.spec, np.stack([st.u.coeffs[0], st.u.coeffs[0]]), "even"
        )
        with pytest.raises(ValueError, match="same components"):
            paralinearize_eq(prob, two)


class TestConjugationData:
    def test_trivial_for_linear_problem(self, linear_case):
        prob, st = linear_case
        data = st.data
        assert np.array_equal(data.h, np.zeros(2))
        assert not np.any(data.U.coeffs)
        assert not np.any(data.eta.theta.coeffs)
        assert data.report.residual_norms["q_defect"] <= 1e-12
        assert data.report.feasible is True

    def test_demo_defect_monitors(self, demo_case):
        prob, st = demo_case
        rn = st.data.report.residual_norms
        assert rn["straighten_equation"] <= 1e-12
        assert rn["u_defect"] <= 1e-11
        assert rn["q_defect"] <= 1e-12

    def test_warm_restart_agrees(self, demo_case):
        prob, st = demo_case
        again = conjugation_data(prob, OMEGA2, st.u, warm=st.data)
        assert np.max(np.abs(again.h - st.data.h)) <= 1e-12
        assert again.report.iterations <= st.data.report.iterations + 1

    def test_rejects_wrong_frequency_dimension(self, demo_case):
        prob, st = demo_case
        with pytest.raises(ValueError, match="frequency dimension"):
            conjugation_data(prob, np.array([1.0]), st.u)


class TestUnknownExchange:
    def test_roundtrip(self, demo_case):
        prob, st = demo_case
        u = small_even_iterate(prob.spec, seed=9)
        y = change_unknown(st.data, u, n_steps=prob.n_steps)
        back = invert_unknown(st.data, y, tol=1e-12, s=prob.s - 1, n_steps=prob.n_steps)
        assert sobolev_norm(back - u, prob.s - 1) <= 1e-10

    def test_identity_conjugation_is_identity(self, linear_case):
        prob, st = linear_case
        u = small_even_iterate(prob.spec, seed=2)
        y = change_unknown(st.data, u, n_steps=prob.n_steps)
        assert np.array_equal(y.coeffs, u.coeffs)

    def test_inversion_stall_raises_with_stage(self, demo_case):
        prob, st = demo_case
        y = change_unknown(st.data, small_even_iterate(prob.spec, seed=4))
        with pytest.raises(NoConvergenceError) as err:
            invert_unknown(st.data, y, tol=0.0, s=prob.s - 1, max_iter=2)
        assert err.value.report.stage == "inner-inversion"


class TestKamStep:
    def test_linear_step_is_fourier_division(self, linear_case):
        prob, st = linear_case
        got = kam_step(prob, OMEGA2, KamState(u=st.u, y=st.y, data=st.data))
        assert np.max(np.abs(got.coeffs - linear_oracle(prob, OMEGA2))) <= 1e-12

    def test_contraction_in_reduced_unknown(self, demo_case):
        prob, st = demo_case
        bump = random_field(prob.spec, seed=21, parity="even")
        dy = TorusField(prob.spec, (1e-4 * bump.coeffs)[None], "even")
        shifted = TorusField(prob.spec, st.y.coeffs + dy.coeffs, "even")
        out_a = kam_step(prob, OMEGA2, KamState(u=st.u, y=st.y, data=st.data))
        out_b = kam_step(prob, OMEGA2, KamState(u=st.u, y=shifted, data=st.data))
        ratio = sobolev_norm(out_b - out_a, prob.s) / sobolev_norm(dy, prob.s)
        assert ratio <= 1e-3


class TestKamSolve:
    def test_linear_matches_division_oracle(self, linear_case):
        prob, st = linear_case
        assert st.report.iterations <= 3
        assert st.feasible is True
        assert np.max(np.abs(st.u.coeffs - linear_oracle(prob, OMEGA2))) <= 1e-12
        assert st.report.residual_norms["pde_residual"] <= 1e-10

    def test_zero_forcing_gives_zero_solution(self):
        prob = build_problem("quasilinear-demo", M=8, eps=1e-3)
        zero_f = TorusField(
            prob.spec, np.zeros((1,) + prob.spec.lattice_shape, complex), "odd"
        )
        silent = HyperbolicProblem(
            X=kh.demo_transport_speed,
            F=kh.demo_zeroth_order,
            f=zero_f,
            eps=1e-3,
            params=prob.params,
            s=6.0,
            n_steps=48,
        )
        st = kam_solve(silent, OMEGA2)
        assert st.report.iterations == 1
        assert not np.any(st.u.coeffs)
        assert st.report.residual_norms["pde_residual"] == 0.0

    def test_quasilinear_demo_residual(self, demo_case):
        prob, st = demo_case
        assert st.feasible is True
        assert st.report.iterations <= 8
        fnorm = prob.eps * sobolev_norm(prob.f, prob.s - 1.0)
        assert st.report.residual_norms["pde_residual"] <= 1e-8 * fnorm

    def test_state_consistency_and_tags(self, demo_case):
        prob, st = demo_case
        assert st.u.parity == "even"
        gap = st.y - change_unknown(st.data, st.u, n_steps=prob.n_steps)
        assert sobolev_norm(gap, prob.s - 1) <= 1e-12
        assert st.report.feasible is st.feasible

    def test_monitors_reported(self, demo_case):
        _, st = demo_case
        for label in (
            "straighten_equation",
            "straighten_inverse_defect",
            "straighten_shift",
            "u_defect",
            "q_defect",
            "pde_residual",
        ):
            assert label in st.report.residual_norms

    def test_rerun_is_bit_identical(self, demo_case):
        prob, st = demo_case
        again = kam_solve(prob, OMEGA2)
        assert np.array_equal(again.u.coeffs, st.u.coeffs)
        assert np.array_equal(again.data.h, st.data.h)

    def test_self_advection_converges(self):
        spec = GridSpec(1, 16)
        prob = HyperbolicProblem(
            X=self_speed,
            F=None,
            f=sin_axis(spec, 0, (1,)),
            eps=1e-2,
            params=DioParams(gamma=0.2, tau=1.0),
            s=6.0,
        )
        st = kam_solve(prob, np.array([1.3]))
        assert st.report.iterations <= 8
        assert np.abs(st.data.h[0]) <= 1e-6
        fnorm = prob.eps * sobolev_norm(prob.f, prob.s - 1.0)
        assert st.report.residual_norms["pde_residual"] <= 1e-8 * fnorm

    def test_resonant_frequency_flagged_infeasible(self, linear_case):
        prob, _ = linear_case
        st = kam_solve(prob, np.array([1.0, 1.0]))
        assert st.feasible is False
        assert not dio_check(np.array([1.0, 1.0]) + st.data.h, prob.params)

    def test_rejects_wrong_frequency_dimension(self, linear_case):
        prob, _ = linear_case
        with pytest.raises(ValueError, match="frequency dimension"):
            kam_solve(prob, np.array([1.0, 1.0, 1.0]))


class TestReductionAudit:
    def test_identities_hold_at_converged_state(self, demo_case):
        prob, st = demo_case
        audit = reduction_audit(prob, OMEGA2, st)
        assert audit["paralinearization"] <= 1e-12
        assert audit["gauge_leibniz"] <= 1e-14
        assert audit["reduced_equation"] <= 1e-8


class TestPdeResidual:
    def test_hand_built_linear_solution(self, linear_case):
        prob, _ = linear_case
        by_hand = TorusField(prob.spec, linear_oracle(prob, OMEGA2), "even")
        assert pde_residual(prob, OMEGA2, by_hand) <= 1e-10

    def test_detects_corruption(self, demo_case):
        prob, st = demo_case
        clean = pde_residual(prob, OMEGA2, st.u)
        noise = random_field(prob.spec, seed=5, parity="even")
        bad = TorusField(prob.spec, st.u.coeffs + (1e-6 * noise.coeffs)[None], "even")
        assert pde_residual(prob, OMEGA2, bad) >= 100.0 * clean

    def test_embedding_preserves_norms(self, demo_case):
        prob, st = demo_case
        big = GridSpec(2, 16)
        lifted = kh._embed(st.u, big)
        assert lifted.parity == st.u.parity
        assert abs(
            sobolev_norm(lifted, 4.0) - sobolev_norm(st.u, 4.0)
        ) <= 1e-14 * max(1.0, sobolev_norm(st.u, 4.0))
        with pytest.raises(ValueError, match="refine"):
            kh._embed(st.u, GridSpec(2, 4))


class TestScans:
    def test_ball_samples_deterministic_and_bounded(self):
        a = ball_samples(2, 2.0, 64, seed=7)
        b = ball_samples(2, 2.0, 64, seed=7)
        assert np.array_equal(a, b)
        assert a.shape == (64, 2)
        assert np.max(np.linalg.norm(a, axis=1)) <= 2.0

    def test_scan_identical_across_worker_counts(self):
        prob = build_problem("linear-forcing", M=8, eps=1e-2)
        serial = feasible_set_scan(prob, 2.0, 6, seed=11)
        parallel = feasible_set_scan(prob, 2.0, 6, seed=11, workers=3)
        assert len(serial) == len(parallel) == 6
        for a, b in zip(serial.rows, parallel.rows):
            assert np.array_equal(a.omega, b.omega)
            assert a.feasible == b.feasible
            assert a.stage == b.stage
            assert a.residual == b.residual or (
                np.isnan(a.residual) and np.isnan(b.residual)
            )
        counted = sum(1 for r in serial.rows if not r.feasible)
        assert serial.excluded_fraction == counted / 6

    def test_failures_recorded_not_raised(self):
        prob = build_problem("quasilinear-demo", M=8, eps=0.9, tol=1e-7)
        table = feasible_set_scan(prob, 2.0, 3, seed=3)
        assert len(table) == 3
        assert all(not r.feasible for r in table.rows)
        assert all(r.stage == "straightening" for r in table.rows)
        assert table.excluded_fraction == 1.0

    def test_explicit_frequency_list(self):
        prob = build_problem("linear-forcing", M=8, eps=1e-2)
        table = feasible_set_scan(prob, 2.0, np.array([OMEGA2, [1.0, 1.0]]), seed=0)
        assert table.rows[0].feasible is True
        assert table.rows[1].feasible is False

    def test_epsilon_ladder_fraction_decreases(self):
        rungs, exponent = epsilon_ladder_scan(
            lambda e, g: build_problem("linear-forcing", M=8, eps=e, gamma=g),
            [1e-2, 3e-3, 1e-3],
            R=2.0,
            samples=24,
            seed=4,
            workers=4,
        )
        fractions = [r[2] for r in rungs]
        gammas = [r[1] for r in rungs]
        assert gammas[0] > gammas[1] > gammas[2]
        assert fractions[0] > fractions[1] > fractions[2]
        assert fractions[0] - fractions[2] >= 0.1
        assert np.isfinite(exponent) and exponent > 0


class TestForcedWrapper:
    def test_phase_block_is_exactly_zero(self):
        prob = build_problem("forced-transport", M=8)
        x = kh._grid_coords(prob.spec)
        z = 0.03 * np.ones((1,) + prob.spec.grid_shape)
        assert np.max(np.abs(prob.X(x, z)[0])) == 0.0

    def test_phase_frequency_never_shifts(self):
        prob = build_problem("forced-transport", M=8, eps=1e-3)
        st = kam_solve(prob, OMEGA2)
        assert st.data.h[0] == 0.0
        fnorm = prob.eps * sobolev_norm(prob.f, prob.s - 1.0)
        assert st.report.residual_norms["pde_residual"] <= 1e-8 * fnorm

    def test_rejects_wrong_split(self):
        spec = GridSpec(2, 8)
        f = sin_axis(spec, 0, (1,))
        P = DioParams(gamma=0.1, tau=1.5)
        with pytest.raises(ValueError, match="combined torus"):
            forced_wrapper(nu=1, d=2, N=1, X=None, F=None, f=f, eps=1e-3, params=P)
        with pytest.raises(ValueError, match="N components"):
            forced_wrapper(nu=1, d=1, N=2, X=None, F=None, f=f, eps=1e-3, params=P)


class TestRegistry:
    def test_families_present(self):
        assert set(kh.PROBLEM_FAMILIES) == {
            "linear-forcing",
            "quasilinear-demo",
            "forced-transport",
        }

    def test_problems_are_picklable(self):
        prob = build_problem("quasilinear-demo", M=8)
        clone = pickle.loads(pickle.dumps(prob))
        assert clone.eps == prob.eps
        assert np.array_equal(clone.f.coeffs, prob.f.coeffs)

    def test_demo_uses_short_flow_steps(self):
        assert build_problem("quasilinear-demo", M=8).n_steps == 48
