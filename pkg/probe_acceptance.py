"""One-off measurement run backing the tolerance pins in test_acceptance."""

import time

import numpy as np

from paratorus.torus_spectral import (
    GridSpec,
    TorusField,
    analyze,
    field_from_modes,
    holder_norm,
    partition_defect,
    sobolev_norm,
    synthesize,
)
from paratorus.paracalculus import (
    FreqProfile,
    SeparableSymbol,
    cm_remainder_apply,
    fit_power_exponent,
    pm_remainder,
)
from paratorus.paraflow import Diffeo, conj_defect_apply, paracompose, refined_paralin_remainder
from paratorus.small_divisor import DioParams, dio_measure_mc


def mode_probe(spec, K):
    modes = {}
    xi = tuple([K] + [0] * (spec.n - 1))
    modes[xi] = 0.5
    modes[tuple(-c for c in xi)] = 0.5
    return field_from_modes(spec, modes)


# --- criterion 3: smoothing fits at n=1, M=64 -------------------------------
t0 = time.monotonic()
spec1 = GridSpec(1, 64)
x = spec1.grid1d
a = analyze(spec1, np.exp(np.cos(x)))
b = analyze(spec1, 1.0 / (1.2 + np.sin(x)))

rng = np.random.default_rng(7)
tab = {}
for k in (1, 2, 3):
    c = 0.05 * rng.standard_normal() / k**2
    tab[(k,)] = np.array([1j * c])
    tab[(-k,)] = np.array([-1j * c])
theta = field_from_modes(spec1, tab, value_shape=(1,), parity="odd")
theta = theta * (0.2 / holder_norm(theta, 1.0))
chi = Diffeo(theta)

p = SeparableSymbol(
    spec1,
    1.0,
    [
        (analyze(spec1, 1.0 + 0.0 * x), FreqProfile.linear((1.0,))),
        (analyze(spec1, 0.3 * np.sin(x)), FreqProfile.linear((1.0,))),
    ],
)

Ks = [4, 8, 16, 32]
rows = {"pm": [], "cm": [], "refined": [], "conj": []}
for K in Ks:
    u = mode_probe(spec1, K)
    base = sobolev_norm(u, 0.0)
    rows["pm"].append(sobolev_norm(pm_remainder(a, u), 0.0) / base)
    rows["cm"].append(sobolev_norm(cm_remainder_apply(a, b, u), 0.0) / base)
    rows["refined"].append(sobolev_norm(refined_paralin_remainder(u, chi, n_steps=64), 0.0) / base)
    rows["conj"].append(sobolev_norm(conj_defect_apply(p, chi, u, terms=0, n_steps=64), 0.0) / base)
for name, vals in rows.items():
    print(f"c3 {name}: ratios {['%.3e' % v for v in vals]} exponent {fit_power_exponent(Ks, vals):+.3f}")
print(f"c3 wall {time.monotonic() - t0:.1f}s")

# --- criterion 4: roundtrip order at n=2, M=32 ------------------------------
from paratorus.torus_spectral import parity_project

t0 = time.monotonic()
spec2 = GridSpec(2, 32)


def decay_field(spec, seed, value_shape=()):
    rng = np.random.default_rng(seed)
    shape = value_shape + spec.lattice_shape
    raw = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    w = 1.0
    grids = np.meshgrid(*([spec.xi1d] * spec.n), indexing="ij")
    for g in grids:
        w = w + g.astype(float) ** 2
    u = TorusField(spec, raw / w**2, None)
    vals = np.real(synthesize(u))
    return analyze(spec, vals)


theta2 = parity_project(decay_field(spec2, 11, (2,)), "odd")
theta2 = theta2 * (0.3 / holder_norm(theta2, 1.0))
print("c4 |theta|_C1:", holder_norm(theta2, 1.0))
chi2 = Diffeo(theta2)
f2 = decay_field(spec2, 12)

errs = {}
for n_steps in (32, 64, 128):
    g = paracompose(chi2, f2, n_steps=n_steps)
    back = paracompose(chi2, g, inverse=True, n_steps=n_steps)
    errs[n_steps] = sobolev_norm(back - f2, 4.0)
    print(f"c4 n_steps={n_steps}: roundtrip H^4 {errs[n_steps]:.3e}")
print(f"c4 halving ratios: 32/64 {errs[32]/errs[64]:.1f}  64/128 {errs[64]/errs[128]:.1f}")
print(f"c4 wall {time.monotonic() - t0:.1f}s")

# --- criterion 8a: dio measure at 2e4 samples -------------------------------
t0 = time.monotonic()
fracs = []
for gamma in (0.02, 0.05, 0.1, 0.2):
    params = DioParams(gamma=gamma, tau=1.5, M_dio=200)
    frac = dio_measure_mc(params, 2, 2.0, 20000, rng_seed=0, workers=4)
    fracs.append(frac)
    print(f"c8a gamma={gamma}: excluded {frac:.5f} ratio {frac/gamma:.4f}")
ratios = [f / g for f, g in zip(fracs, (0.02, 0.05, 0.1, 0.2))]
print(f"c8a ratio spread max/min {max(ratios)/min(ratios):.4f}")
print(f"c8a wall {time.monotonic() - t0:.1f}s")

# --- criterion 1 timing: n=2 M=64 -------------------------------------------
t0 = time.monotonic()
spec64 = GridSpec(2, 64)
u64 = decay_field(spec64, 3)
pd = partition_defect(u64)
vals = synthesize(u64)
plancherel = abs(float(np.mean(np.abs(vals) ** 2)) - sobolev_norm(u64, 0.0) ** 2)
print(f"c1 partition {pd:.2e} plancherel {plancherel:.2e} wall {time.monotonic() - t0:.1f}s")

