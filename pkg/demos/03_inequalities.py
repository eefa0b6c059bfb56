"""
Weighted inequalities, ratio by ratio
=====================================

Each inequality is turned into a ratio lhs / rhs evaluated on a fixed family
of test functions. Bounded ratios across the family and across seeds are
what we look for; a ratio that blows up along a sequence would be a
counterexample.
"""
import numpy as np

from subelliptic_lab import geometry as geo
from subelliptic_lab import inequalities as iq
from subelliptic_lab import measures as ms

H1 = geo.heisenberg()
spec = ms.MeasureSpec(H1, 3.0)
spec.require_z(200_000, 0)            # localised bumps are integrated on their own region
S = ms.sample(spec, 40_000, seed=1)
family = iq.standard_family(H1, 3.0)
print(f"{len(family)} test functions, e.g. {family[0].label} ... {family[-1].label}")

for op in (iq.ubound_ratio, iq.hardy_ratio, iq.ckn_ratio):
    reps = [op(spec, 1.0, f, samples=S) for f in family]
    r = np.array([x.ratio for x in reps])
    k = int(np.argmax(r))
    print(f"{op.__name__:>14}: max {r[k]:.3f} at {reps[k].function}, median {np.median(r):.3f}")

# Concentrating tubes |x| < w stress the Hardy weight |x|^-1 as w -> 0.
print("\nHardy ratio on shrinking tubes")
for k in range(1, 6):
    w = 2.0 ** -k
    rep = iq.hardy_ratio(spec, 1.0, iq.tube(H1, w), n_region=2 ** 14)
    print(f"  w = {w:.4f}: {rep.ratio:.4f} +- {rep.stderr:.4f}")

# Super-Poincare growth: beta(eps) ~ exp(C eps^-sigma), sigma = p(alpha+1)/(q(p-alpha-1)).
spec4 = ms.MeasureSpec(H1, 4.0)
spec4.require_z(200_000, 0)
curve = iq.constructive_beta_curve(spec4, 2.0, [0.5, 0.25, 0.1, 0.05, 0.025])
probe = iq.spi_optimality_probe(spec4, [2.0, 3.0, 4.0, 6.0], 2.0)
print(f"\nconstructive sigma {curve.fitted_sigma:.6f} (formula {iq.growth_exponent(1, 4, 2):g})")
print(f"probe sigma from below {probe.fitted_sigma:.3f}")
for e, lb in zip(probe.epsilons, probe.log_betas):
    print(f"  eps {e:.3e}: log beta >= {lb:.3f}")
