"""Second probe round: criterion 4 fixture shape, criterion 7/8b timings."""

import time

import numpy as np

from paratorus.torus_spectral import (
    GridSpec,
    TorusField,
    analyze,
    holder_norm,
    parity_project,
    sobolev_norm,
    synthesize,
)
from paratorus.paraflow import Diffeo, paracompose
from paratorus.kam_hyperbolic import (
    ball_samples,
    build_linear_forcing,
    feasible_set_scan,
    kam_solve,
    pde_residual,
)


def decay_field(spec, seed, value_shape=(), power=2.0):
    rng = np.random.default_rng(seed)
    shape = value_shape + spec.lattice_shape
    raw = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    w = 1.0
    grids = np.meshgrid(*([spec.xi1d] * spec.n), indexing="ij")
    for g in grids:
        w = w + g.astype(float) ** 2
    u = TorusField(spec, raw / w**power, None)
    vals = np.real(synthesize(u))
    return analyze(spec, vals)


spec2 = GridSpec(2, 32)
theta2 = parity_project(decay_field(spec2, 11, (2,)), "odd")
theta2 = theta2 * (0.3 / holder_norm(theta2, 1.0))
chi2 = Diffeo(theta2)

for power in (2.5, 3.0):
    f2 = decay_field(spec2, 12, power=power)
    f2 = f2 * (1.0 / sobolev_norm(f2, 4.0))
    errs = {}
    for n_steps in (64, 128):
        g = paracompose(chi2, f2, n_steps=n_steps)
        back = paracompose(chi2, g, inverse=True, n_steps=n_steps)
        errs[n_steps] = sobolev_norm(back - f2, 4.0)
    print(
        f"c4 power={power}: err128 {errs[128]:.3e} err64 {errs[64]:.3e} "
        f"ratio {errs[64]/errs[128]:.1f}"
    )

# criterion 7 linear oracle leg at M=16
t0 = time.monotonic()
prob = build_linear_forcing(M=16, eps=1e-3)
omega = np.array([1.0, np.sqrt(2.0)])
state = kam_solve(prob, omega)
res = pde_residual(prob, omega, state.u)
print(
    f"c7 linear M=16: iters {state.report.iterations} resid {res:.2e} "
    f"wall {time.monotonic() - t0:.1f}s"
)

# 8b rung cost at M=16: 8 samples, workers=4
t0 = time.monotonic()
prob = build_linear_forcing(M=16, eps=1e-2, gamma=1e-2**0.3)
table = feasible_set_scan(prob, 2.0, ball_samples(2, 2.0, 8, seed=3), workers=4)
dt = time.monotonic() - t0
print(f"c8b probe rung: 8 samples in {dt:.1f}s -> 200 samples ~ {dt*25:.0f}s/rung")
print("fractions", table.excluded_fraction)
