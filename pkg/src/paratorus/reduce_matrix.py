"""Reduction of ``omega . grad - A(x)`` to constant coefficients.

The target equation is the matrix homological equation

.. math:: D_\\omega U = A\\,(I_N + U),

whose solution conjugates the variable-coefficient operator
``D_omega - A`` to the plain derivative ``D_omega``.  Solving it
directly would invert ``D_omega`` against a right side that depends on
``U`` at full regularity; the trick implemented here rewrites the
equation as a fixed point of a quadratic paradifferential perturbation
(the parahomological map), in which every inverted operator is either
the globally defined division multiplier or ``I + T_U`` with ``T_U``
tiny.  A small fixed point of that map is automatically an exact
solution: the leftover error term satisfies a self-bound that forces it
to vanish.

The dense oracle at the bottom flattens the truncated equation into one
sparse linear system over all Fourier coefficients and solves it
directly; it shares no code with the fixed-point path and is the
independent check the tests lean on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix, diags
from scipy.sparse.linalg import splu

from .torus_spectral import (
    TorusField,
    average,
    directional_derivative,
    grid_product,
    identity_field,
    matrix_inverse,
    sobolev_norm,
)
from .paracalculus import paraproduct, pm_remainder
from .small_divisor import DioParams, ExtendedInverse
from .harness import NonContractionError, SolveReport, fixed_point_solve

__all__ = [
    "MatrixReductionProblem",
    "NeumannDivergenceError",
    "default_base_index",
    "matred_solve",
    "matred_residual",
    "matred_oracle",
    "neumann_inverse_apply",
]


class NeumannDivergenceError(ValueError):
    """The paraproduct perturbation has operator norm >= 1.

    ``(I + T_C)^{-1}`` is only available as a Neumann series when ``T_C``
    is a strict contraction; a first-term ratio at or above 1 means the
    coefficient is far outside the perturbative regime.
    """


def default_base_index(n: int, tau: float, delta: float = 0.1) -> float:
    """The base Sobolev index ``2 tau + 1 + n/2 + delta``."""
    return 2.0 * tau + 1.0 + 0.5 * n + delta


@dataclass
class MatrixReductionProblem:
    """One reducibility instance: frequency, odd coefficient, exponents.

    ``A`` must be a square matrix field tagged odd (the parity bookkeeping
    of the solver relies on the tag, and oddness makes every right side
    zero-average so the division multiplier applies).  Smallness of ``A``
    is not checked a priori; the solver gates on the contraction ratio it
    actually observes.
    """

    omega: np.ndarray
    A: TorusField
    params: DioParams
    s0: float | None = None
    tol: float = 1e-10
    max_iter: int = 50
    neumann_cutoff: float = 1e-14
    ratio_guard: float = 0.95

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float).reshape(-1)
        spec = self.A.spec
        if self.omega.shape[0] != spec.n:
            raise ValueError("frequency dimension disagrees with the field")
        if self.A.value_ndim != 2 or self.A.value_shape[0] != self.A.value_shape[1]:
            raise ValueError("A must be a square matrix field")
        if self.A.parity != "odd":
            raise ValueError("A must be tagged odd")
        scale = max(1.0, float(np.max(np.abs(self.A.coeffs))))
        if np.max(np.abs(np.atleast_1d(average(self.A)))) > 1e-12 * scale:
            raise ValueError("A must have zero average")
        if self.s0 is None:
            self.s0 = default_base_index(spec.n, self.params.tau)

    @property
    def N(self) -> int:
        return self.A.value_shape[0]


def neumann_inverse_apply(
    C: TorusField,
    w: TorusField,
    cutoff: float = 1e-14,
    max_terms: int = 200,
) -> TorusField:
    """Apply ``(I + T^left_C)^{-1}`` by the truncated Neumann series.

    The term count is chosen from the measured decay ratio of the first
    application so that the dropped tail is below ``cutoff`` relative to
    the input; the sum also stops early once a term falls below that
    threshold.  A first-term ratio at or above 1 means ``T_C`` is not a
    small perturbation and the series is refused.
    """
    base = float(np.max(np.abs(w.coeffs)))
    if base == 0.0:
        return w
    total = w
    term = w
    K = max_terms
    for k in range(1, max_terms + 1):
        term = -1.0 * paraproduct(C, term, "left")
        size = float(np.max(np.abs(term.coeffs)))
        if k == 1:
            r = size / base
            if r >= 1.0:
                raise NeumannDivergenceError(
                    f"paraproduct Neumann series diverges (first ratio {r:.2f})"
                )
            if r > 0.0:
                K = min(max_terms, int(np.ceil(np.log(cutoff) / np.log(r))))
        total = total + term
        if size <= cutoff * base or k >= K:
            return total
    return total


def _parahom_map(problem: MatrixReductionProblem, Linv: ExtendedInverse, U: TorusField) -> TorusField:
    """One evaluation of the parahomological fixed-point map."""
    A = problem.A
    spec = A.spec
    Id = identity_field(spec, problem.N)

    V = matrix_inverse(U, add_identity=True)
    Vm = V - Id
    DU = directional_derivative(U, problem.omega)
    DUV = grid_product(DU, V, kind="matmul")
    VDUV = grid_product(V, DUV, kind="matmul")

    # quadratic smoothing remainder: the defect of the Leibniz rearrangement
    inner = DU + paraproduct(Vm, DU, "left")
    R1 = inner + paraproduct(U, inner, "left") - DU
    tmid = paraproduct(VDUV, U, "left")
    R2 = tmid + paraproduct(U, tmid, "left") - paraproduct(DUV, U, "left")

    rhs = A + paraproduct(U, A, "right") + pm_remainder(A, U) + (R1 - R2)
    y = neumann_inverse_apply(U, rhs, problem.neumann_cutoff)
    y = Linv.apply(y)
    out = neumann_inverse_apply(Vm, y, problem.neumann_cutoff)
    assert out.parity == "even", "parity bookkeeping broke inside the iteration"
    return out


def matred_solve(problem: MatrixReductionProblem):
    """Fixed point of the parahomological map, with the equation residual.

    Returns ``(U, report)``; ``U`` is even, the report carries the ratio
    series and both the final increment and the exact-equation residual.
    Raises the harness errors when the map fails to contract or the
    budget runs out (the former is the practical signal that ``A`` is too
    large for the current ``gamma``).
    """
    A = problem.A
    spec = A.spec
    Linv = ExtendedInverse(problem.omega, problem.params, spec)
    U0 = TorusField(
        spec, np.zeros_like(A.coeffs), "even"
    )
    s0 = problem.s0

    try:
        U, report = fixed_point_solve(
            lambda U: _parahom_map(problem, Linv, U),
            U0,
            problem.tol,
            problem.max_iter,
            problem.ratio_guard,
            norm=lambda d: sobolev_norm(d, s0),
            stage="matrix-reduction",
        )
    except NeumannDivergenceError as exc:
        # same diagnosis as a ratio breach: A is too large for this gamma
        raise NonContractionError(
            f"parahomological map left the perturbative regime: {exc}",
            SolveReport(stage="matrix-reduction", feasible=False),
        ) from exc
    report.record("equation_residual", matred_residual(problem.omega, A, U, s0))
    return U, report


def matred_residual(omega, A: TorusField, U: TorusField, s0: float = None) -> float:
    """``H^{s0}`` size of ``D_omega U - A (I + U)`` on the truncated lattice.

    This is the exact nonlinear equation, not its paradifferential
    rearrangement, so it measures what the fixed point actually solved.
    """
    spec = A.spec
    if s0 is None:
        s0 = default_base_index(spec.n, 1.5)
    IU = identity_field(spec, A.value_shape[0]) + U
    res = directional_derivative(U, omega) - grid_product(A, IU, kind="matmul")
    return sobolev_norm(res, s0)


def matred_oracle(omega, A: TorusField, max_unknowns: int = 40000) -> TorusField:
    """Direct sparse solve of the truncated coefficient system.

    Flattens ``i (omega . xi) U^(xi) - sum_eta A^(xi - eta) U^(eta) =
    A^(xi)`` over the whole lattice into one sparse matrix (shared by the
    ``N`` unknown columns) and factorizes it.  Entirely independent of
    the paradifferential machinery.

    One regularization is unavoidable: whenever the equation is solvable
    at all, ``(I + U) C`` solves the homogeneous part for every constant
    matrix ``C``, so the truncated operator carries an ``N^2``-dimensional
    near-kernel (singular values at the size of the neglected coefficient
    tail, i.e. numerically zero).  The zero-frequency rows are therefore
    replaced by the gauge ``mean(U) = 0``, which is the normalization the
    fixed-point map enforces on its own; a plain ungauged solve returns
    noise precisely on the instances this oracle is meant to check.
    """
    spec = A.spec
    omega = np.asarray(omega, dtype=float).reshape(-1)
    N = A.value_shape[0]
    n, L = spec.n, spec.L
    P = L**spec.n
    if P * N > max_unknowns:
        raise ValueError(f"oracle system too large ({P * N} unknowns)")

    basis = spec.basis()
    t = sum(omega[l] * basis.xi_axes[l] for l in range(n))
    off_center = basis.abs_xi > 0
    if np.min(np.abs(t[off_center])) < 1e-12:
        raise ValueError("frequency is resonant on the truncated lattice")

    Ahat = A.coeffs.reshape((N, N, P))
    lattice_idx = np.arange(P).reshape(spec.lattice_shape)
    center = int(np.ravel_multi_index((spec.M,) * n, spec.lattice_shape))

    rows, cols, vals = [], [], []
    live = np.argwhere(np.max(np.abs(A.coeffs), axis=(0, 1)) > 0.0)
    for z_idx in live:
        zeta = z_idx - spec.M  # lattice index offset equals the frequency
        sl_eta, sl_xi = [], []
        for dz in zeta:
            lo, hi = max(0, -dz), L - max(0, dz)
            sl_eta.append(slice(lo, hi))
            sl_xi.append(slice(lo + dz, hi + dz))
        eta_flat = lattice_idx[tuple(sl_eta)].ravel()
        xi_flat = lattice_idx[tuple(sl_xi)].ravel()
        keep = xi_flat != center  # gauge replaces the zero-frequency rows
        eta_flat, xi_flat = eta_flat[keep], xi_flat[keep]
        block = Ahat[(Ellipsis,) + (lattice_idx[tuple(z_idx)],)]
        for i in range(N):
            for k in range(N):
                v = block[i, k]
                if v == 0.0:
                    continue
                rows.append(xi_flat * N + i)
                cols.append(eta_flat * N + k)
                vals.append(np.full(eta_flat.shape[0], v))

    diag = np.repeat(1j * t.ravel(), N)
    diag[center * N : center * N + N] = 1.0  # the mean(U) = 0 gauge rows
    D = diags(diag)
    if rows:
        C = coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(P * N, P * N),
        )
        system = (D - C).tocsc()
    else:
        system = D.tocsc()

    lu = splu(system)
    Uhat = np.empty((N, N, P), dtype=np.complex128)
    for j in range(N):
        b = Ahat[:, j, :].T.ravel()  # rows ordered (xi, i)
        b[center * N : center * N + N] = 0.0
        x = lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise ValueError("oracle solve produced non-finite values")
        Uhat[:, j, :] = x.reshape(P, N).T
    return TorusField(spec, Uhat.reshape((N, N) + spec.lattice_shape))
