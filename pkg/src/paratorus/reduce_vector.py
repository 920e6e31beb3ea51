"""Straightening a perturbed constant vector field on the torus.

Given a frequency ``omega`` and a small even perturbation ``X(x)``, the
goal is a diffeomorphism ``eta = Id + theta`` and an amended frequency
``omega + h`` such that the flow of ``omega + X`` is the flow of the
parallel field ``omega + h`` seen through ``eta``.  Written out, the
displacement solves

.. math:: D_{\\bar\\omega}\\theta = X(x + \\theta) - \\lambda,

where ``D`` is the directional derivative along ``\\bar\\omega`` and the
constant ``lambda`` absorbs the average of the right side (without it
the equation is not solvable: the derivative has zero mean).  Two nested
iterations untangle the pair ``(theta, lambda)``:

- `modified_solve` fixes ``\\bar\\omega`` and finds ``(theta, lambda)``
  by Picard iteration of a parahomological map, the same rearrangement
  idea as in `reduce_matrix`: composition is paralinearized, the
  paraproduct factors ``I + T_{d\\theta}`` are inverted by Neumann
  series, and the division multiplier only ever sees a zero-average
  right side.  The rearrangement defects are kept as exact operator
  differences, so a small fixed point solves the displacement equation
  itself, not an approximation of it.
- `shift_invert` then adjusts the frequency: it looks for ``h`` with
  ``lambda(omega + h, X) = h``, so that at ``\\bar\\omega = omega + h``
  the counterterm exactly cancels the amendment and the original field
  ``omega + X`` is straightened.  The map ``h -> lambda(omega + h)`` is
  a strong contraction for small ``X`` (its slope is quadratic in the
  perturbation), and each evaluation warm-starts the inner solve from
  the previous displacement.

`straighten` packages both stages and returns the diffeomorphism pair
``eta``, ``chi = eta^{-1}``; `straighten_residual` checks the conjugacy
equation directly through grid composition, independent of every
paradifferential object used to produce the solution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .torus_spectral import (
    TorusField,
    average,
    compose,
    constant_field,
    directional_derivative,
    grid_product,
    identity_field,
    jacobian,
    matrix_inverse,
    sobolev_norm,
)
from .paraflow import Diffeo, default_tau_steps, paracompose, refined_paralin_remainder
from .paracalculus import paraproduct
from .small_divisor import DioParams, ExtendedInverse, dio_check
from .harness import NonContractionError, SolveReport, fixed_point_solve
from .reduce_matrix import NeumannDivergenceError, neumann_inverse_apply

__all__ = [
    "DisplacementOverflowError",
    "StraighteningProblem",
    "StraighteningResult",
    "default_straightening_index",
    "modified_solve",
    "shift_invert",
    "straighten",
    "straighten_residual",
]


class DisplacementOverflowError(ValueError):
    """An iterate left the certified diffeomorphism class.

    The composition machinery requires ``sup |d theta| <= 0.99``; a
    Picard iterate violating that bound means the perturbation is far too
    large for the straightening to be perturbative, the same diagnosis as
    a contraction-ratio breach.
    """


def default_straightening_index(n: int, tau: float, delta: float = 0.1) -> float:
    """The base Sobolev index ``2 tau + 2 + n + delta`` for this stage."""
    return 2.0 * tau + 2.0 + float(n) + delta


@dataclass
class StraighteningProblem:
    """One straightening instance: frequency, even perturbation, exponents.

    ``X`` must be an ``n``-component field tagged even; evenness is what
    makes the displacement odd and in particular fixes its normalization
    (an odd displacement vanishes at the origin, which selects one member
    of the circle of conjugacies).  No a-priori smallness is enforced;
    both Picard loops abort on the contraction ratio they observe.

    ``h0`` and ``theta0`` warm-start the shift and displacement loops;
    callers that straighten a slowly drifting family (the outer KAM
    iteration does exactly this) pass the previous member's answer and
    typically land within one or two steps.
    """

    omega: np.ndarray
    X: TorusField
    params: DioParams
    s1: float | None = None
    tol: float = 1e-10
    max_iter: int = 40
    n_steps: int | None = None
    neumann_cutoff: float = 1e-14
    ratio_guard: float = 0.95
    h0: np.ndarray | None = None
    theta0: TorusField | None = None

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float).reshape(-1)
        spec = self.X.spec
        if self.omega.shape[0] != spec.n:
            raise ValueError("frequency dimension disagrees with the field")
        if self.X.value_shape != (spec.n,):
            raise ValueError("X must be an n-component vector field")
        if self.X.parity != "even":
            raise ValueError("X must be tagged even")
        if self.s1 is None:
            self.s1 = default_straightening_index(spec.n, self.params.tau)


@dataclass
class StraighteningResult:
    """Frequency amendment, diffeomorphism pair, and the run diagnostics.

    ``lambda_path`` lists the counterterm of every outer shift step plus
    the final value at the converged frequency; its last entry agrees
    with ``h`` up to the solve tolerance.  ``report.feasible`` records
    whether ``omega + h`` passes the lattice Diophantine scan; the solver
    itself never needs that (the extension multiplier is total), but a
    failed scan means the computed conjugacy lives off the Cantor set the
    persistence statement quantifies over.
    """

    h: np.ndarray
    eta: Diffeo
    chi: Diffeo
    lambda_path: list = field(default_factory=list)
    report: SolveReport = field(default_factory=SolveReport)


def _zero_displacement(spec) -> TorusField:
    return TorusField(
        spec, np.zeros((spec.n,) + spec.lattice_shape, dtype=np.complex128), "odd"
    )


def _rearrangement_defect(
    omega_bar: np.ndarray,
    theta: TorusField,
    dth: TorusField,
    V: TorusField,
    Vm: TorusField,
) -> TorusField:
    """The exact defect of pulling the derivative through the paraproducts.

    Two composites are measured against what they replace:
    ``(T_A T_{A^{-1}} - 1)`` applied to ``D theta`` and
    ``(T_A T_{A^{-1}B} - T_B)`` applied to ``theta``, where ``A`` is the
    composition Jacobian ``I + d theta`` and ``B = (D d theta) A^{-1}``.
    Every ``T`` is the one-sided matrix paraproduct actually used by the
    solver, so the difference is computable to rounding; both composites
    are quadratically small in the displacement.
    """
    Dth = directional_derivative(theta, omega_bar)
    Ddth = directional_derivative(dth, omega_bar)
    B = grid_product(Ddth, V, kind="matmul")
    VB = grid_product(V, B, kind="matmul")

    inner = Dth + paraproduct(Vm, Dth, "left")
    first = inner + paraproduct(dth, inner, "left") - Dth
    tmid = paraproduct(VB, theta, "left")
    second = tmid + paraproduct(dth, tmid, "left") - paraproduct(B, theta, "left")
    return first - second


def _straighten_map(
    omega_bar: np.ndarray,
    X: TorusField,
    Linv: ExtendedInverse,
    theta: TorusField,
    n_steps: int,
    cutoff: float,
):
    """One evaluation of the displacement map; returns the new iterate
    and the counterterm belonging to the current one."""
    spec = X.spec
    Id = identity_field(spec, spec.n)

    try:
        eta = Diffeo(theta)
    except ValueError as exc:
        # the constructor only rejects a displacement whose Jacobian bound
        # is uncertifiable (the value shape is fixed by construction here)
        raise DisplacementOverflowError(str(exc)) from exc
    dth = jacobian(theta)
    V = matrix_inverse(dth, add_identity=True)
    Vm = V - Id

    flow = paracompose(eta, X, n_steps=n_steps)
    rplr = refined_paralin_remainder(X, eta, n_steps=n_steps)
    defect = _rearrangement_defect(omega_bar, theta, dth, V, Vm)

    w = neumann_inverse_apply(dth, flow + rplr + defect, cutoff)
    lam = np.real(np.atleast_1d(average(w)))
    y = Linv.apply(w - constant_field(spec, lam))
    out = neumann_inverse_apply(Vm, y, cutoff)
    assert out.parity == "odd", "parity bookkeeping broke inside the iteration"
    return out, lam


def modified_solve(
    omega_bar,
    X: TorusField,
    params: DioParams,
    s1: float | None = None,
    tol: float = 1e-10,
    max_iter: int = 40,
    theta0: TorusField | None = None,
    n_steps: int | None = None,
    neumann_cutoff: float = 1e-14,
    ratio_guard: float = 0.95,
):
    """Solve the displacement equation at a fixed frequency.

    Returns ``(theta, lam, report)`` with ``theta`` odd and zero-average
    and ``lam`` the real counterterm; the pair satisfies
    ``D theta = X(x + theta) - lam`` up to the solve tolerance, which the
    report records as ``equation_residual``.  The counterterm is chosen
    inside every step as the average of the Neumann-inverted right side,
    so the division multiplier always receives an exactly centered field.

    ``theta0`` warm-starts the Picard loop (used by the frequency-shift
    iteration, where consecutive problems differ only slightly);
    ``n_steps`` overrides the transport step count of the paracomposition
    legs.  A Neumann divergence inside any step is converted to the same
    non-contraction diagnosis as a ratio breach: the perturbation is too
    large for the paradifferential rearrangement to be perturbative.
    """
    spec = X.spec
    omega_bar = np.asarray(omega_bar, dtype=float).reshape(-1)
    if omega_bar.shape[0] != spec.n:
        raise ValueError("frequency dimension disagrees with the field")
    if X.value_shape != (spec.n,):
        raise ValueError("X must be an n-component vector field")
    if X.parity != "even":
        raise ValueError("X must be tagged even")
    if s1 is None:
        s1 = default_straightening_index(spec.n, params.tau)
    steps = default_tau_steps(spec, n_steps)
    Linv = ExtendedInverse(omega_bar, params, spec)

    lam_seen: list[np.ndarray] = []

    def step(theta: TorusField) -> TorusField:
        theta_next, lam = _straighten_map(
            omega_bar, X, Linv, theta, steps, neumann_cutoff
        )
        lam_seen.append(lam)
        return theta_next

    x0 = theta0 if theta0 is not None else _zero_displacement(spec)
    try:
        theta, report = fixed_point_solve(
            step,
            x0,
            tol,
            max_iter,
            ratio_guard,
            norm=lambda d: sobolev_norm(d, s1),
            stage="straightening",
        )
    except (NeumannDivergenceError, DisplacementOverflowError) as exc:
        raise NonContractionError(
            f"displacement map left the perturbative regime: {exc}",
            SolveReport(stage="straightening", feasible=False),
        ) from exc
    lam = lam_seen[-1]
    report.record(
        "equation_residual", modified_residual(omega_bar, X, theta, lam, s1)
    )
    return theta, lam, report


def modified_residual(
    omega_bar, X: TorusField, theta: TorusField, lam, s1: float | None = None
) -> float:
    """``H^{s1}`` size of ``D theta - X(x + theta) + lam``.

    The composition is evaluated exactly on the collocation grid, so this
    measures the displacement equation itself rather than its
    paradifferential rearrangement.
    """
    spec = X.spec
    if s1 is None:
        s1 = default_straightening_index(spec.n, 1.5)
    res = (
        directional_derivative(theta, omega_bar)
        - compose(X, theta)
        + constant_field(spec, np.asarray(lam, dtype=float))
    )
    return sobolev_norm(res, s1)


def _shift_solve(problem: StraighteningProblem):
    """Picard iteration on the frequency amendment, warm-starting the
    inner displacement solve; returns the amendment, the last inner
    state, the counterterm history, and the outer report."""
    spec = problem.X.spec
    carry = {"theta": problem.theta0}
    lam_path: list[np.ndarray] = []

    def step(h: np.ndarray) -> np.ndarray:
        theta, lam, _ = modified_solve(
            problem.omega + h,
            problem.X,
            problem.params,
            s1=problem.s1,
            tol=problem.tol,
            max_iter=problem.max_iter,
            theta0=carry["theta"],
            n_steps=problem.n_steps,
            neumann_cutoff=problem.neumann_cutoff,
            ratio_guard=problem.ratio_guard,
        )
        carry["theta"] = theta
        lam_path.append(lam)
        return lam

    # the guard encodes the precondition: the observed slope of
    # h -> lambda(omega + h) must stay below one half
    h_start = np.zeros(spec.n) if problem.h0 is None else np.asarray(problem.h0, dtype=float)
    h, report = fixed_point_solve(
        step,
        h_start,
        problem.tol,
        problem.max_iter,
        ratio_guard=0.5,
        stage="frequency-shift",
    )
    return h, carry["theta"], lam_path, report


def shift_invert(omega, X: TorusField, params: DioParams, **options) -> np.ndarray:
    """Amendment ``h`` with ``lambda(omega + h, X) = h``.

    At the returned frequency the counterterm of the modified problem
    exactly cancels the amendment, so ``omega + X`` itself (not a shifted
    copy) is conjugated to the parallel field ``omega + h``.  Keyword
    options are forwarded to the `StraighteningProblem` fields.
    """
    problem = StraighteningProblem(omega=omega, X=X, params=params, **options)
    h, _, _, _ = _shift_solve(problem)
    return h


def straighten(problem: StraighteningProblem) -> StraighteningResult:
    """Full pipeline: invert the shift, solve at the amended frequency,
    and assemble the diffeomorphism pair.

    The final displacement solve runs at ``omega + h`` starting from the
    shift iteration's last inner state, so it typically converges in one
    or two steps.  The returned report is that final solve's, extended
    with the defining-equation residual of the shift
    (``|h - lambda(omega + h)|``, labeled ``shift_residual``), the sup
    defect of ``eta(chi(x)) = x`` (``inverse_defect``), and the
    feasibility flag of the lattice Diophantine scan at ``omega + h``.
    """
    h, theta_carry, lam_path, shift_report = _shift_solve(problem)
    theta, lam, report = modified_solve(
        problem.omega + h,
        problem.X,
        problem.params,
        s1=problem.s1,
        tol=problem.tol,
        max_iter=problem.max_iter,
        theta0=theta_carry,
        n_steps=problem.n_steps,
        neumann_cutoff=problem.neumann_cutoff,
        ratio_guard=problem.ratio_guard,
    )
    eta = Diffeo(theta)
    chi = eta.inverse()

    report.record("shift_residual", float(np.max(np.abs(h - lam))))
    report.record("shift_increment", shift_report.residual_norms["increment"])
    report.record("inverse_defect", eta.inverse_residual())
    report.feasible = dio_check(problem.omega + h, problem.params)
    return StraighteningResult(
        h=h, eta=eta, chi=chi, lambda_path=lam_path + [lam], report=report
    )


def straighten_residual(
    omega, result: StraighteningResult, X: TorusField, s1: float | None = None
) -> float:
    """``H^{s1}`` size of the conjugacy equation at the amended frequency.

    Computes ``((omega + h) . grad)(eta - Id) - (X(eta) - h)`` through
    grid composition and the spectral derivative only; none of the
    paradifferential operators that produced the result are involved.
    The defining property of ``h`` makes the counterterm of the final
    solve equal to ``h`` (to tolerance), which is why ``h`` itself
    appears here in place of a separately stored counterterm.
    """
    theta = result.eta.theta
    spec = theta.spec
    if s1 is None:
        s1 = default_straightening_index(spec.n, 1.5)
    omega_bar = np.asarray(omega, dtype=float).reshape(-1) + result.h
    res = (
        directional_derivative(theta, omega_bar)
        - compose(X, theta)
        + constant_field(spec, result.h)
    )
    return sobolev_norm(res, s1)
