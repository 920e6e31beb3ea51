"""Diophantine frequencies and the globally defined division multiplier.

Division by ``i omega . xi`` is the basic inversion step of every
reduction in this package, and it blows up on resonant lattice points.
This module provides the standard workaround: a frequency-wise clamp
that agrees with exact division whenever ``omega`` is Diophantine for
the given ``(gamma, tau)`` and otherwise caps each divisor at the
Diophantine floor ``gamma |xi|^{-tau}``.  The clamped multiplier is
defined for every ``omega``, stays bounded by ``gamma^{-1} |xi|^tau``
coefficient-wise, and preserves the odd symmetry in ``xi`` exactly, so
solvers can iterate on frequencies without knowing in advance whether
they are resonant.

Membership in the Diophantine set is decided by exhaustive scan over a
finite lattice; true membership is undecidable in finite time, but for
fields truncated at ``M`` only ``|xi|_inf <= 2M`` can ever enter the
solves.  A Monte Carlo routine estimates the measure of the excluded
frequency set, which is the quantity the measure-theoretic side of the
existence argument cares about.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .torus_spectral import TorusField, average, flip_parity

__all__ = [
    "DioParams",
    "ExtendedInverse",
    "dio_check",
    "extended_multiplier_apply",
    "dio_measure_mc",
]


@dataclass(frozen=True)
class DioParams:
    """Diophantine exponents and the lattice cutoff for membership scans.

    ``gamma`` is the constant in the lower bound ``|omega . xi| >=
    gamma |xi|^{-tau}``; ``tau`` the decay exponent (must exceed
    ``n - 1`` for the Diophantine set to have full measure, enforced
    where the dimension is known); ``M_dio`` bounds the scanned lattice
    in the sup norm.
    """

    gamma: float
    tau: float
    M_dio: int = 200

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.M_dio < 1:
            raise ValueError("M_dio must be at least 1")

    def check_dimension(self, n: int) -> None:
        if self.tau <= n - 1:
            raise ValueError(
                f"tau = {self.tau} must exceed n - 1 = {n - 1} for a "
                "full-measure Diophantine set"
            )


def _lattice_blocks(n: int, M: int):
    """Yield (xi_block, squared_norm) slabs of the punctured cube.

    Iterates over the first component so that memory stays at one
    ``(2M+1)^{n-1}`` slab regardless of dimension; the origin row is
    masked out by the caller via the returned squared norm (0 marks it).
    """
    axis = np.arange(-M, M + 1)
    if n == 1:
        yield axis.reshape(-1, 1), axis.astype(float) ** 2
        return
    rest = np.stack(
        np.meshgrid(*([axis] * (n - 1)), indexing="ij"), axis=-1
    ).reshape(-1, n - 1)
    rest_sq = np.sum(rest.astype(float) ** 2, axis=1)
    for x1 in axis:
        block = np.concatenate(
            [np.full((rest.shape[0], 1), x1), rest], axis=1
        )
        yield block, x1 * x1 + rest_sq


def dio_check(omega, params: DioParams) -> bool:
    """Exhaustive test of ``|omega . xi| >= gamma |xi|^{-tau}``.

    Scans all ``0 < |xi|_inf <= M_dio``; a single violation decides.
    """
    omega = np.asarray(omega, dtype=float).reshape(-1)
    params.check_dimension(omega.shape[0])
    for block, sq in _lattice_blocks(omega.shape[0], params.M_dio):
        keep = sq > 0
        if not np.any(keep):
            continue
        t = np.abs(block[keep].astype(float) @ omega)
        floor = params.gamma * sq[keep] ** (-params.tau / 2.0)
        if np.any(t < floor):
            return False
    return True


def _lex_sign(spec) -> np.ndarray:
    """Sign of the first nonzero component, lattice-shaped; 0 at the origin.

    Fixes the half-lattice split that orients clamped divisors sitting
    exactly on a resonance, so that oddness in ``xi`` survives the clamp.
    """
    basis = spec.basis()
    s = np.zeros(spec.lattice_shape)
    for ax in basis.xi_axes:
        s = np.where(s == 0, np.sign(ax), s)
    return s


class ExtendedInverse:
    """The division multiplier ``1 / (i clamp(omega . xi))`` on a lattice.

    ``clamp(t)`` keeps ``t`` whenever ``|t| >= gamma |xi|^{-tau}`` and
    otherwise replaces it by ``sign(t) gamma |xi|^{-tau}``, with the sign
    of an exact zero taken from the lexicographic half-lattice split.
    The zero frequency maps to zero, so the operator is only a left
    inverse of ``omega . grad`` on zero-average fields.
    """

    def __init__(self, omega, params: DioParams, spec):
        omega = np.asarray(omega, dtype=float).reshape(-1)
        if omega.shape[0] != spec.n:
            raise ValueError("frequency dimension disagrees with the spec")
        params.check_dimension(spec.n)
        self.omega = omega
        self.params = params
        self.spec = spec

        basis = spec.basis()
        t = sum(omega[l] * basis.xi_axes[l] for l in range(spec.n))
        absxi = basis.abs_xi
        center = absxi == 0
        with np.errstate(divide="ignore"):
            floor = params.gamma * np.where(center, np.inf, absxi) ** (-params.tau)
        sign = np.where(t > 0, 1.0, np.where(t < 0, -1.0, _lex_sign(spec)))
        clamped = np.abs(t) < floor
        divisor = np.where(clamped, sign * floor, t)
        divisor = np.where(center, 1.0, divisor)
        self.values = np.where(center, 0.0, 1.0 / (1j * divisor))
        self.clamped_count = int(np.count_nonzero(clamped & ~center))

    def apply(self, u: TorusField) -> TorusField:
        """Divide coefficients; requires zero average, flips parity."""
        if u.spec is not self.spec and u.spec.key() != self.spec.key():
            raise ValueError("field lives on a different spec")
        avg = np.max(np.abs(np.atleast_1d(average(u))))
        scale = max(1.0, float(np.max(np.abs(u.coeffs))))
        if avg > 1e-12 * scale:
            raise ValueError(
                f"extended inverse needs zero-average input (got |mean| = {avg:.2e})"
            )
        return TorusField(u.spec, u.coeffs * self.values, flip_parity(u.parity))


def extended_multiplier_apply(omega, params: DioParams, u: TorusField) -> TorusField:
    """One-shot form of `ExtendedInverse` for a single application."""
    return ExtendedInverse(omega, params, u.spec).apply(u)


def _excluded_mask(W: np.ndarray, params: DioParams) -> np.ndarray:
    """Boolean mask over sample rows that violate the Diophantine bound."""
    n = W.shape[1]
    bad = np.zeros(W.shape[0], dtype=bool)
    for block, sq in _lattice_blocks(n, params.M_dio):
        keep = sq > 0
        if not np.any(keep):
            continue
        t = np.abs(block[keep].astype(float) @ W.T)
        floor = params.gamma * sq[keep] ** (-params.tau / 2.0)
        bad |= np.any(t < floor[:, None], axis=0)
    return bad


def dio_measure_mc(
    params: DioParams,
    n: int,
    R: float,
    samples: int,
    rng_seed: int,
    workers: int = 1,
) -> float:
    """Monte Carlo fraction of the ball ``B(0, R)`` failing `dio_check`.

    All samples are drawn up front from the seeded generator, so the
    result is reproducible independently of ``workers``; the lattice scan
    itself is what gets parallelized.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    params.check_dimension(n)
    rng = np.random.default_rng(rng_seed)
    d = rng.standard_normal((samples, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = R * rng.uniform(size=(samples, 1)) ** (1.0 / n)
    W = r * d

    batches = [W[k : k + 1024] for k in range(0, samples, 1024)]
    if workers <= 1:
        masks = [_excluded_mask(b, params) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            masks = list(pool.map(lambda b: _excluded_mask(b, params), batches))
    return float(np.count_nonzero(np.concatenate(masks))) / samples
