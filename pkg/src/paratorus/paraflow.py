"""Paracomposition: transport along a deformation homotopy of the torus.

Given a displacement ``theta`` with ``sup |d theta| <= 0.99``, the map
``chi = Id + theta`` is deformed to the identity through

.. math:: \\Theta(\\tau, x) = \\tau\\, e^{-(1-\\tau)\\langle D\\rangle}
          \\theta(x),

whose time slices interpolate from 0 to ``theta`` while keeping the
Jacobian bound of the endpoint.  The deformation vector field

.. math:: X(\\tau) = -(I + \\partial_x\\Theta)^{-1} \\partial_\\tau\\Theta

drives a paradifferential transport equation
``d w/d tau + T_X . grad w = 0`` whose time-1 flow map is the
paracomposition operator ``chi*``: a bounded, invertible substitute for
``f -> f o chi`` that commutes with the paradifferential calculus up to
smoothing remainders.  Inverting means integrating the same equation
backwards.

The integrator is classical RK4 on a uniform tau grid with the vector
field sampled at half steps.  Everything here is exact arithmetic on
truncated series except that single integration, so conjugation defects
measured downstream inherit only the RK4 error and the genuinely
paradifferential remainders.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .torus_spectral import (
    GridSpec,
    TorusField,
    analyze,
    composition_lipschitz,
    compose,
    evaluate_at,
    flip_parity,
    grid_product,
    jacobian,
    partial_derivative,
    synth_array,
)
from .paracalculus import (
    FreqProfile,
    SeparableSymbol,
    paradiff_apply,
    paraproduct,
)

__all__ = [
    "Diffeo",
    "DeformationPath",
    "DivergenceError",
    "deformation",
    "paratransport_solve",
    "paracompose",
    "conjugation_symbol",
    "refined_paralin_remainder",
    "conj_defect_apply",
    "default_tau_steps",
]


class DivergenceError(RuntimeError):
    """Raised when a tau-integration produces non-finite values."""

    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step


def default_tau_steps(spec: GridSpec, requested: int | None = None) -> int:
    """Step count honoring the resolution-dependent stability floor.

    The deformation field stiffens like the largest resolved frequency near
    ``tau = 1``, so the floor scales with ``8 <M>``; an explicit request
    below the floor is still honored (callers that know their displacement
    is mild may override).
    """
    floor = int(np.ceil(8.0 * np.sqrt(1.0 + spec.M**2)))
    if requested is not None:
        return requested
    return max(128, floor)


class Diffeo:
    """A near-identity torus diffeomorphism ``chi = Id + theta``.

    Wraps the displacement field with its measured Jacobian bound, a
    lazily computed inverse displacement (per-grid-point Newton), and
    cached deformation paths keyed by step count.
    """

    def __init__(self, theta: TorusField):
        spec = theta.spec
        if theta.value_shape != (spec.n,):
            raise ValueError("displacement must have n components")
        self.spec = spec
        self.theta = theta
        self.lip = composition_lipschitz(theta)
        if self.lip > 0.99:
            raise ValueError(
                f"displacement Jacobian bound {self.lip:.4f} exceeds 0.99; "
                "not a certified diffeomorphism"
            )
        self._inverse_theta: TorusField | None = None
        self._paths: dict[int, "DeformationPath"] = {}

    def path(self, n_steps: int) -> "DeformationPath":
        got = self._paths.get(n_steps)
        if got is None:
            got = DeformationPath(self.theta, n_steps)
            self._paths[n_steps] = got
        return got

    def inverse_displacement(self) -> TorusField:
        """Displacement of ``chi^{-1}``, solved pointwise and re-analyzed."""
        if self._inverse_theta is None:
            self._inverse_theta = _invert_displacement(self.theta)
        return self._inverse_theta

    def inverse(self) -> "Diffeo":
        inv = Diffeo(self.inverse_displacement())
        inv._inverse_theta = self.theta
        return inv

    def inverse_residual(self) -> float:
        """``sup_grid |chi(chi^{-1}(x)) - x|`` using the analyzed inverse."""
        spec = self.spec
        inv = self.inverse_displacement()
        pts = spec.grid_points()
        y = pts + synth_array(spec, inv.coeffs).real.reshape(spec.n, -1).T
        fwd = evaluate_at(self.theta, y).real.T
        return float(np.max(np.abs(y + fwd - pts)))


def _invert_displacement(theta: TorusField, tol: float = 1e-12, max_iter: int = 50) -> TorusField:
    """Newton solve of ``y + theta(y) = x`` at every collocation point."""
    spec = theta.spec
    n = spec.n
    J = jacobian(theta)
    stacked = TorusField(
        spec, np.concatenate([theta.coeffs, J.coeffs.reshape((n * n,) + spec.lattice_shape)])
    )
    x = spec.grid_points()
    y = x - synth_array(spec, theta.coeffs).real.reshape(n, -1).T
    for _ in range(max_iter):
        vals = evaluate_at(stacked, y).real
        th = vals[:n].T
        dth = np.moveaxis(vals[n:].reshape(n, n, -1), -1, 0)
        res = y + th - x
        worst = np.max(np.abs(res))
        if worst < tol:
            break
        step = np.linalg.solve(np.eye(n) + dth, res[..., None])[..., 0]
        y = y - step
    else:
        raise RuntimeError(f"displacement inversion stalled at residual {worst:.2e}")
    disp = (y - x).T.reshape((n,) + spec.grid_shape)
    tag = theta.parity if theta.parity == "odd" else None
    return analyze(spec, disp, tag)


# ---------------------------------------------------------------------------
# the homotopy and its vector field


def deformation(theta: TorusField, tau: float) -> tuple[TorusField, TorusField]:
    """One time slice of the homotopy: ``(Theta(tau), X(tau))``.

    ``Theta`` applies the multiplier ``tau exp(-(1-tau)<xi>)`` to the
    displacement; its tau-derivative carries ``(1 + tau <xi>)`` times the
    same exponential; ``X = -(I + dTheta)^{-1} dTheta/dtau`` with the
    matrix inverted pointwise on the grid.
    """
    spec = theta.spec
    n = spec.n
    basis = spec.basis()
    bracket = np.sqrt(1.0 + basis.abs_xi**2)
    damp = np.exp(-(1.0 - tau) * bracket)
    Theta = TorusField(spec, theta.coeffs * (tau * damp), theta.parity)
    dTheta = TorusField(spec, theta.coeffs * ((1.0 + tau * bracket) * damp), theta.parity)

    gJ = synth_array(spec, jacobian(Theta).coeffs).real
    mats = np.moveaxis(gJ.reshape((n, n, -1)), -1, 0)
    lip = float(np.linalg.norm(mats, ord=2, axis=(1, 2)).max())
    if lip >= 1.0:
        raise ValueError(f"homotopy Jacobian became singular (sup |dTheta| = {lip:.3f})")
    inv = np.linalg.inv(mats + np.eye(n))
    gd = synth_array(spec, dTheta.coeffs).real.reshape(n, -1).T
    X_pts = -np.einsum("pij,pj->pi", inv, gd)
    tag = "odd" if theta.parity == "odd" else None
    X = analyze(spec, X_pts.T.reshape((n,) + spec.grid_shape), tag)
    return Theta, X


class DeformationPath:
    """The homotopy sampled on the half-step grid an RK4 sweep needs.

    Stores ``2 n_steps + 1`` nodes ``tau_k = k / (2 n_steps)`` with the
    slice fields and the vector field at each; keeps a tiny rolling cache
    of synthesized low-pass stacks so adjacent integration stages do not
    repeat transforms.
    """

    def __init__(self, theta: TorusField, n_steps: int):
        if n_steps < 1:
            raise ValueError("need at least one step")
        self.spec = theta.spec
        self.theta = theta
        self.n_steps = n_steps
        self.tau_nodes = np.linspace(0.0, 1.0, 2 * n_steps + 1)
        self.Theta: list[TorusField] = []
        self.X: list[TorusField] = []
        for tau in self.tau_nodes:
            T, X = deformation(theta, float(tau))
            self.Theta.append(T)
            self.X.append(X)
        self._low_cache: dict[int, np.ndarray] = {}

    def jacobian_bound_defect(self) -> float:
        """Max over nodes of ``sup|dTheta(tau)| - sup|dtheta|``, clipped at 0."""
        cap = composition_lipschitz(self.theta)
        worst = 0.0
        for T in self.Theta:
            worst = max(worst, composition_lipschitz(T) - cap)
        return max(worst, 0.0)

    def low_stack_grid(self, node: int) -> np.ndarray:
        """Synthesized ``S_{j-3} X_l`` stack at a node, shape (J+1, n, grid)."""
        got = self._low_cache.get(node)
        if got is not None:
            return got
        spec = self.spec
        basis = spec.basis()
        J1 = spec.J_max + 1
        low = self.X[node].coeffs[np.newaxis] * basis.low_stack.reshape(
            (J1, 1) + spec.lattice_shape
        )
        got = synth_array(spec, low)
        if len(self._low_cache) > 6:
            self._low_cache.pop(next(iter(self._low_cache)))
        self._low_cache[node] = got
        return got


def _transport_rhs(
    spec: GridSpec,
    low_grid: np.ndarray,
    x_parity: str | None,
    w: TorusField,
    B: TorusField | None,
    f: TorusField | None,
) -> TorusField:
    """``-T_X . grad w - T_B w + f`` with the X low-pass stack pre-synthesized."""
    basis = spec.basis()
    J1 = spec.J_max + 1
    n = spec.n
    # blocked gradient of w: axes (J+1, n) + value + grid
    grads = np.stack(
        [partial_derivative(w, l).coeffs for l in range(n)]
    )  # (n,) + value + lattice
    blk = grads[np.newaxis] * basis.block_stack.reshape(
        (J1, 1) + (1,) * w.value_ndim + spec.lattice_shape
    )
    gblk = synth_array(spec, blk)  # (J+1, n) + value + grid
    lows = low_grid.reshape((J1, n) + (1,) * w.value_ndim + spec.grid_shape)
    out_grid = -np.sum(lows * gblk, axis=(0, 1))
    if x_parity == "odd":
        tag = w.parity  # odd X against the odd-flipped gradient flips back
    elif x_parity == "even":
        tag = flip_parity(w.parity)
    else:
        tag = None
    rhs = analyze(spec, out_grid, tag)
    if B is not None:
        side = "left" if B.value_ndim == 2 else "scalar"
        rhs = rhs - paraproduct(B, w, side)
    if f is not None:
        rhs = rhs + f
    return rhs


def paratransport_solve(
    X_path,
    w0: TorusField,
    forcing: Callable[[float], TorusField] | None = None,
    zeroth_order=None,
    direction: str = "forward",
    n_steps: int | None = None,
) -> TorusField:
    """Integrate ``dw/dtau + T_X . grad w + T_B w = f`` across [0, 1].

    `X_path` is a `DeformationPath` (nodes reused, transforms cached) or a
    callable ``tau -> TorusField`` sampled on demand.  `zeroth_order` may
    be a field ``B`` or a callable of tau; `forcing` a callable of tau.
    ``direction="backward"`` starts at ``tau = 1`` and integrates to 0,
    which inverts the forward flow up to the integrator's O(h^4) error.
    """
    spec = w0.spec
    if isinstance(X_path, DeformationPath):
        steps = X_path.n_steps if n_steps is None else n_steps
        if steps != X_path.n_steps:
            raise ValueError("step count disagrees with the sampled path")
        get_low = X_path.low_stack_grid
        x_parity = X_path.X[0].parity
    else:
        if n_steps is None:
            raise ValueError("a callable vector field needs an explicit n_steps")
        steps = n_steps
        x_parity = None
        cache: dict[int, np.ndarray] = {}

        def get_low(node: int) -> np.ndarray:
            got = cache.get(node)
            if got is None:
                X = X_path(node / (2.0 * steps))
                basis = spec.basis()
                J1 = spec.J_max + 1
                low = X.coeffs[np.newaxis] * basis.low_stack.reshape(
                    (J1, 1) + spec.lattice_shape
                )
                got = synth_array(spec, low)
                if len(cache) > 6:
                    cache.pop(next(iter(cache)))
                cache[node] = got
            return got

    if direction == "forward":
        nodes = range(0, 2 * steps, 2)
        h = 1.0 / steps
    elif direction == "backward":
        nodes = range(2 * steps, 0, -2)
        h = -1.0 / steps
    else:
        raise ValueError("direction must be 'forward' or 'backward'")

    def B_at(tau: float):
        if zeroth_order is None:
            return None
        if callable(zeroth_order):
            return zeroth_order(tau)
        return zeroth_order

    def f_at(tau: float):
        return forcing(tau) if forcing is not None else None

    w = w0
    sgn = 1 if h > 0 else -1
    for count, start in enumerate(nodes):
        tau0 = start / (2.0 * steps)
        mid = start + sgn
        end = start + 2 * sgn
        tau_m = mid / (2.0 * steps)
        tau1 = end / (2.0 * steps)

        k1 = _transport_rhs(spec, get_low(start), x_parity, w, B_at(tau0), f_at(tau0))
        k2 = _transport_rhs(
            spec, get_low(mid), x_parity, w + (0.5 * h) * k1, B_at(tau_m), f_at(tau_m)
        )
        k3 = _transport_rhs(
            spec, get_low(mid), x_parity, w + (0.5 * h) * k2, B_at(tau_m), f_at(tau_m)
        )
        k4 = _transport_rhs(spec, get_low(end), x_parity, w + h * k3, B_at(tau1), f_at(tau1))
        w = w + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

        peak = np.max(np.abs(w.coeffs))
        if not np.isfinite(peak):
            raise DivergenceError(
                count, f"transport integration diverged at step {count} (tau ~ {tau1:.3f})"
            )
    return w


def paracompose(
    chi: Diffeo, f: TorusField, inverse: bool = False, n_steps: int = 128
) -> TorusField:
    """The paracomposition ``chi* f`` (or its inverse flow when flagged)."""
    if not np.any(chi.theta.coeffs):
        # zero displacement: the deformation field vanishes along the
        # whole homotopy, every RK4 stage is a paraproduct against a zero
        # coefficient, and the flow is exactly the identity
        return f
    path = chi.path(n_steps)
    direction = "backward" if inverse else "forward"
    return paratransport_solve(path, f, direction=direction)


# ---------------------------------------------------------------------------
# conjugated symbols


def conjugation_symbol(p: SeparableSymbol, chi: Diffeo, terms: int = 0) -> SeparableSymbol:
    """Symbol ``q`` with ``chi* T_p = T_q chi*`` modulo smoothing.

    The leading part is the pullback ``q0(x, xi) = p(chi(x),
    chi'(x)^{-T} xi)``; for a first-order differential symbol this is the
    chain rule and is already exact.  ``terms = 1`` adds the first
    correction of the stationary-phase expansion with the two-point
    Jacobian frozen at the diagonal, which contributes
    ``sum_r d_xi_r p . (chi'^{-T} grad log det chi')_r`` evaluated at the
    pulled-back arguments.

    Frequency profiles of degree at most one are supported; anything
    higher is outside the pipeline's scope.
    """
    if terms not in (0, 1):
        raise ValueError("terms must be 0 or 1")
    spec = p.spec
    n = spec.n
    theta = chi.theta

    Jc = jacobian(theta)
    gJ = synth_array(spec, Jc.coeffs).real
    mats = np.moveaxis(gJ.reshape((n, n, -1)), -1, 0) + np.eye(n)  # chi'(x_g)
    inv = np.linalg.inv(mats)  # chi'(x)^{-1} at every grid point

    if terms == 1:
        det = np.linalg.det(mats)
        if np.min(det) <= 0:
            raise ValueError("orientation-reversing Jacobian in conjugation")
        det_field = analyze(spec, det.reshape(spec.grid_shape))
        dlog = []
        for l in range(n):
            dd = synth_array(spec, partial_derivative(det_field, l).coeffs).real
            dlog.append(dd.reshape(-1) / det)
        dlog = np.stack(dlog, axis=-1)  # (points, n): grad log det chi'

    out_terms: list[tuple[TorusField, FreqProfile]] = []
    for c, m in p.terms:
        deg = m.degree()
        if deg > 1:
            raise ValueError("conjugation supports frequency profiles of degree <= 1")
        comp = compose(c, theta)  # c(chi(x)) on the grid, re-analyzed
        if deg == 0:
            out_terms.append((m.constant_value() * comp, FreqProfile.const(n)))
            continue
        # linear profile sum_l i w_l xi_l: pull back the direction
        w = np.zeros(n, dtype=complex)
        for a, coef in m.terms.items():
            s = sum(a)
            if s == 0:
                out_terms.append((coef * comp, FreqProfile.const(n)))
            else:
                w[a.index(1)] = coef / 1j
        W = np.einsum("prl,l->pr", inv, w.real) + 1j * np.einsum(
            "prl,l->pr", inv, w.imag
        )  # chi'^{-1} w at each point
        for r in range(n):
            Wr = analyze(spec, W[:, r].reshape(spec.grid_shape))
            cr = grid_product(comp, Wr, kind="scalar")
            prof = FreqProfile(n, {tuple(1 if k == r else 0 for k in range(n)): 1j})
            out_terms.append((cr, prof))
        if terms == 1:
            # (1/i) d_xi_r p * d_x-derivative of the density, frozen Jacobian
            corr = np.einsum("pr,pr->p", W.real, dlog) + 1j * np.einsum(
                "pr,pr->p", W.imag, dlog
            )
            corr_field = analyze(spec, corr.reshape(spec.grid_shape))
            out_terms.append((grid_product(comp, corr_field, kind="scalar"), FreqProfile.const(n)))

    return SeparableSymbol(spec, p.order, out_terms).merged()


# ---------------------------------------------------------------------------
# remainders


def refined_paralin_remainder(f: TorusField, chi: Diffeo, n_steps: int = 128) -> TorusField:
    """Defect of the composition paralinearization.

    ``f o chi - T_{f' o chi} theta - chi* f`` as an exact difference of
    implemented operators; the gradient is spectral, the composition exact
    on the collocation grid, the paracomposition carries RK4 error only.
    """
    spec = f.spec
    theta = chi.theta
    f_comp = compose(f, theta)
    flow = paracompose(chi, f, n_steps=n_steps)
    para = None
    for l in range(spec.n):
        gl = compose(partial_derivative(f, l), theta)
        tl = TorusField(spec, theta.coeffs[l], theta.parity)
        term = paraproduct(gl, tl)
        para = term if para is None else para + term
    return f_comp - para - flow


def conj_defect_apply(
    p: SeparableSymbol,
    chi: Diffeo,
    u: TorusField,
    terms: int = 0,
    n_steps: int = 128,
) -> TorusField:
    """Exact action of the conjugation defect: ``chi*(T_p u) - T_q(chi* u)``."""
    q = conjugation_symbol(p, chi, terms)
    left = paracompose(chi, paradiff_apply(p, u), n_steps=n_steps)
    right = paradiff_apply(q, paracompose(chi, u, n_steps=n_steps))
    return left - right
