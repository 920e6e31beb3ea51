"""Straightening a perturbed constant vector field on the torus.

The solver is exercised at three levels of independence.  Trivial
inputs (zero or constant perturbations) have exact answers that the
iteration must reproduce in one step.  On one frequency the conjugacy
problem has closed forms: the rotation number of ``x' = a + b cos x``
is ``sqrt(a^2 - b^2)``, which pins both the counterterm
``lam = w - sqrt(w^2 + b^2)`` of the modified equation and the
frequency amendment ``h = sqrt(w^2 - b^2) - w``, and the conjugacy
itself is the inverse of the period map ``Phi(y) = w int_0^y dz/v(z)``,
computable to machine precision by a spectral antiderivative plus
Newton.  The two-frequency instance has no closed form and is judged
by the defining equation evaluated through grid composition and the
spectral derivative alone, with none of the paradifferential machinery
that produced the answer.
"""

import numpy as np
import pytest

from paratorus.torus_spectral import (
    GridSpec,
    TorusField,
    average,
    compose,
    constant_field,
    field_from_modes,
    parity_defect,
    sobolev_norm,
    synthesize,
)
from paratorus.small_divisor import DioParams, dio_check
from paratorus.harness import NonContractionError
from paratorus.reduce_vector import (
    StraighteningProblem,
    default_straightening_index,
    modified_residual,
    modified_solve,
    shift_invert,
    straighten,
    straighten_residual,
)

from test_torus_spectral import random_field

PARAMS1 = DioParams(gamma=0.1, tau=1.0)
PARAMS2 = DioParams(gamma=0.1, tau=1.5)
OMEGA2 = np.array([1.0, np.sqrt(2.0)])
B = 0.05


def cosine_drift(spec, b):
    """``X(x) = b cos x`` as a one-component even field."""
    return field_from_modes(
        spec, {(1,): 0.5 * b, (-1,): 0.5 * b}, value_shape=(1,), parity="even"
    )


def two_torus_drift(spec, amp=1e-3):
    """A generic even perturbation with energy in mixed directions."""
    table = {
        (1, 0): np.array([0.4, 0.1]),
        (1, 1): np.array([0.25, -0.3]),
        (0, 1): np.array([-0.2, 0.35]),
        (2, 1): np.array([0.15, 0.2]),
    }
    modes = {}
    for xi, vec in table.items():
        modes[xi] = amp * vec
        modes[tuple(-c for c in xi)] = amp * vec
    return field_from_modes(spec, modes, value_shape=(2,), parity="even")


def conjugacy_oracle(omega_bar, b, lam, x):
    """Displacement solving ``w th' = b cos(x + th) - lam`` on one frequency.

    The conjugacy ``y = eta(x)`` inverts the period map of the flow of
    ``v(y) = w + b cos y - lam``; with the exact counterterm the map
    ``Phi(y) = w int_0^y dz/v`` satisfies ``Phi(2 pi) = 2 pi`` and the
    displacement is ``Phi^{-1}(x) - x``.  The antiderivative of the
    periodic part of ``1/v`` is formed spectrally (its coefficients
    decay like ``(b/2w)^{|k|}``, so 4096 samples are absurd overkill)
    and the inversion runs Newton to 1e-14.
    """
    G = 4096
    z = 2.0 * np.pi * np.arange(G) / G
    cf = np.fft.fft(1.0 / (omega_bar + b * np.cos(z) - lam)) / G
    k = np.fft.fftfreq(G, d=1.0 / G)
    anti = np.zeros_like(cf)
    anti[1:] = cf[1:] / (1j * k[1:])

    def phi(y):
        per = np.real(np.sum(anti[None, :] * (np.exp(1j * np.outer(y, k)) - 1.0), axis=1))
        return omega_bar * (np.real(cf[0]) * y + per)

    y = x.copy()
    for _ in range(60):
        r = phi(y) - x
        if np.max(np.abs(r)) < 1e-14:
            break
        y = y - r * (omega_bar + b * np.cos(y) - lam) / omega_bar
    else:
        raise AssertionError("oracle Newton inversion stalled")
    return y - x


class TestProblemValidation:
    def test_drift_must_be_tagged_even(self):
        spec = GridSpec(1, 8)
        odd = random_field(spec, seed=3, value_shape=(1,), parity="odd")
        with pytest.raises(ValueError, match="tagged even"):
            StraighteningProblem(omega=[1.0], X=odd, params=PARAMS1)
        untagged = random_field(spec, seed=3, value_shape=(1,))
        with pytest.raises(ValueError, match="tagged even"):
            modified_solve([1.0], untagged, PARAMS1)

    def test_drift_must_have_one_component_per_frequency(self):
        spec = GridSpec(1, 8)
        scalar = random_field(spec, seed=4, parity="even")
        with pytest.raises(ValueError, match="n-component"):
            StraighteningProblem(omega=[1.0], X=scalar, params=PARAMS1)

    def test_frequency_dimension_checked(self):
        spec = GridSpec(1, 8)
        X = cosine_drift(spec, 0.01)
        with pytest.raises(ValueError, match="frequency dimension"):
            StraighteningProblem(omega=[1.0, 2.0], X=X, params=PARAMS1)
        with pytest.raises(ValueError, match="frequency dimension"):
            modified_solve([1.0, 2.0], X, PARAMS1)

    def test_default_smoothness_index(self):
        assert default_straightening_index(2, 1.5) == pytest.approx(7.1)
        assert default_straightening_index(1, 1.0) == pytest.approx(5.1)
        spec = GridSpec(2, 4)
        prob = StraighteningProblem(
            omega=OMEGA2, X=two_torus_drift(spec), params=PARAMS2
        )
        assert prob.s1 == pytest.approx(7.1)
        prob = StraighteningProblem(
            omega=OMEGA2, X=two_torus_drift(spec), params=PARAMS2, s1=6.0
        )
        assert prob.s1 == 6.0


class TestModifiedSolve:
    def test_zero_drift_is_a_fixed_point(self):
        spec = GridSpec(1, 16)
        X = TorusField(
            spec, np.zeros((1,) + spec.lattice_shape, dtype=complex), "even"
        )
        theta, lam, report = modified_solve([1.0], X, PARAMS1)
        assert report.iterations == 1
        assert np.all(lam == 0.0)
        assert np.all(theta.coeffs == 0.0)
        assert report.residual_norms["equation_residual"] == 0.0

    def test_constant_drift_goes_into_the_counterterm(self):
        spec = GridSpec(1, 16)
        X = constant_field(spec, np.array([0.3]))
        theta, lam, report = modified_solve([1.0], X, PARAMS1)
        assert lam == pytest.approx([0.3], abs=1e-15)
        assert np.all(theta.coeffs == 0.0)
        assert report.iterations == 1

    def test_one_frequency_counterterm_matches_rotation_number(self):
        spec = GridSpec(1, 16)
        X = cosine_drift(spec, B)
        theta, lam, report = modified_solve([1.0], X, PARAMS1)
        lam_exact = 1.0 - np.sqrt(1.0 + B * B)
        assert abs(lam[0] - lam_exact) <= 1e-12
        assert report.residual_norms["equation_residual"] <= 1e-8
        assert theta.parity == "odd"
        assert parity_defect(theta) <= 1e-13
        assert np.max(np.abs(np.atleast_1d(average(theta)))) <= 1e-14

        # the counterterm is, by construction, the exact average of the
        # composed drift at the returned displacement
        comp_mean = np.real(np.atleast_1d(average(compose(X, theta))))
        assert np.max(np.abs(lam - comp_mean)) <= 1e-12

    def test_one_frequency_displacement_matches_period_map(self):
        spec = GridSpec(1, 16)
        X = cosine_drift(spec, B)
        theta, lam, _ = modified_solve([1.0], X, PARAMS1)
        x = spec.grid_points()[:, 0]
        want = conjugacy_oracle(1.0, B, 1.0 - np.sqrt(1.0 + B * B), x)
        got = np.real(synthesize(theta))[0]
        assert np.max(np.abs(got - want)) <= 1e-9

    def test_warm_start_shortens_a_neighbouring_solve(self):
        spec = GridSpec(1, 16)
        X = cosine_drift(spec, B)
        theta, _, cold = modified_solve([1.0], X, PARAMS1)
        _, _, warm = modified_solve([1.001], X, PARAMS1, theta0=theta)
        assert warm.iterations < cold.iterations

    def test_oversized_drift_diagnosed_not_mangled(self):
        spec = GridSpec(1, 16)
        X = cosine_drift(spec, 1.5)
        with pytest.raises(NonContractionError) as exc:
            modified_solve([1.0], X, PARAMS1)
        assert exc.value.report.feasible is False


class TestShiftInvert:
    def test_zero_drift_needs_no_shift(self):
        spec = GridSpec(1, 16)
        X = TorusField(
            spec, np.zeros((1,) + spec.lattice_shape, dtype=complex), "even"
        )
        h = shift_invert([1.0], X, PARAMS1)
        assert np.all(h == 0.0)

    def test_constant_drift_shifts_by_its_own_value(self):
        spec = GridSpec(1, 16)
        X = constant_field(spec, np.array([0.3]))
        h = shift_invert([1.0], X, PARAMS1)
        assert h == pytest.approx([0.3], abs=1e-14)

    def test_one_frequency_shift_matches_rotation_number(self):
        spec = GridSpec(1, 16)
        X = cosine_drift(spec, B)
        h = shift_invert([1.0], X, PARAMS1)
        assert abs(h[0] - (np.sqrt(1.0 - B * B) - 1.0)) <= 1e-12


@pytest.fixture(scope="module")
def two_torus_case():
    spec = GridSpec(2, 8)
    X = two_torus_drift(spec)
    prob = StraighteningProblem(omega=OMEGA2, X=X, params=PARAMS2)
    return prob, straighten(prob)


class TestStraighten:
    def test_conjugacy_equation_holds(self, two_torus_case):
        prob, res = two_torus_case
        assert straighten_residual(OMEGA2, res, prob.X, s1=prob.s1) <= 1e-10

    def test_inverse_pair_is_consistent(self, two_torus_case):
        _, res = two_torus_case
        assert res.report.residual_norms["inverse_defect"] <= 1e-10

    def test_shift_agrees_with_final_counterterm(self, two_torus_case):
        _, res = two_torus_case
        assert res.report.residual_norms["shift_residual"] <= 1e-12
        assert len(res.lambda_path) >= 2
        assert np.max(np.abs(res.lambda_path[-1] - res.h)) <= 1e-12

    def test_amended_frequency_on_the_good_set(self, two_torus_case):
        prob, res = two_torus_case
        assert res.report.feasible is True
        assert dio_check(OMEGA2 + res.h, prob.params)
        # quadratic smallness of the amendment in the drift size
        assert np.max(np.abs(res.h)) <= 1e-5

    def test_displacement_is_odd_and_perturbative(self, two_torus_case):
        _, res = two_torus_case
        theta = res.eta.theta
        assert theta.parity == "odd"
        assert parity_defect(theta) <= 1e-13
        assert np.max(np.abs(synthesize(theta))) <= 0.05

    def test_rerun_is_bit_identical(self, two_torus_case):
        prob, res = two_torus_case
        again = straighten(prob)
        assert np.array_equal(again.h, res.h)
        assert np.array_equal(again.eta.theta.coeffs, res.eta.theta.coeffs)

    def test_warm_started_rerun_matches_and_is_shorter(self, two_torus_case):
        prob, res = two_torus_case
        warm = StraighteningProblem(
            omega=OMEGA2,
            X=prob.X,
            params=PARAMS2,
            h0=res.h,
            theta0=res.eta.theta,
        )
        again = straighten(warm)
        assert np.max(np.abs(again.h - res.h)) <= 1e-10
        assert again.report.iterations <= res.report.iterations

    def test_resonant_frequency_is_flagged_not_fatal(self):
        spec = GridSpec(2, 8)
        X = two_torus_drift(spec)
        prob = StraighteningProblem(
            omega=np.array([1.0, 1.0]), X=X, params=PARAMS2
        )
        res = straighten(prob)
        assert res.report.feasible is False
        assert np.all(np.isfinite(res.h))
        # the extended multiplier clamps the truly resonant modes, so
        # the equation cannot be solved there; small forcing keeps the
        # leftover small but well above the non-resonant floor
        assert straighten_residual(prob.omega, res, X, s1=prob.s1) <= 1e-3

    def test_shift_is_flat_in_the_frequency(self, two_torus_case):
        prob, res = two_torus_case
        delta = 1e-4
        h_near = shift_invert(OMEGA2 + np.array([delta, 0.0]), prob.X, PARAMS2)
        slope = np.max(np.abs(h_near - res.h)) / delta
        assert slope <= 0.5


class TestResidualDiagnostics:
    def test_zero_drift_residual_is_exactly_zero(self):
        spec = GridSpec(1, 8)
        X = TorusField(
            spec, np.zeros((1,) + spec.lattice_shape, dtype=complex), "even"
        )
        prob = StraighteningProblem(omega=[1.0], X=X, params=PARAMS1)
        res = straighten(prob)
        assert np.all(res.h == 0.0)
        assert straighten_residual([1.0], res, X) == 0.0

    def test_corrupting_the_displacement_is_detected(self, two_torus_case):
        prob, res = two_torus_case
        theta = res.eta.theta
        clean = modified_residual(OMEGA2 + res.h, prob.X, theta, res.h, s1=prob.s1)
        noise = random_field(theta.spec, seed=77, value_shape=(2,), parity="odd")
        noise = noise * (1e-3 / sobolev_norm(noise, prob.s1))
        dirty = modified_residual(
            OMEGA2 + res.h, prob.X, theta + noise, res.h, s1=prob.s1
        )
        assert clean <= 1e-10
        assert dirty >= 1e-4
        assert dirty >= 1e4 * clean
