"""
Gauges, horizontal frames and the basic estimates
==================================================

A walk through the geometry layer: build a few spaces, look at their
homogeneous norms, and check how far the norm is from being "exact" in the
sense of the gradient identity |grad_H N| = |x| / N.
"""
import numpy as np

from subelliptic_lab import calculus as calc
from subelliptic_lab import geometry as geo

rng = np.random.default_rng(0)

# The first Heisenberg group with the Kaplan gauge N = (|x|^4 + 16 t^2)^(1/4).
H1 = geo.heisenberg()
print(H1.describe(), "Q =", H1.Q, "alpha =", H1.alpha)
print("N(1,0,0) =", geo.hom_norm(H1, [1, 0, 0]), " N(0,0,1) =", geo.hom_norm(H1, [0, 0, 1]))

# Dilations scale x by lam and t by lam^2, and N is 1-homogeneous.
p = np.array([0.3, -0.4, 0.7])
for lam in (0.5, 2.0, 10.0):
    print(f"lam={lam:5}: N(dil p) / (lam N(p)) = {geo.hom_norm(H1, geo.dilate(H1, lam, p)) / (lam * geo.hom_norm(H1, p)):.15f}")

# On H-type groups the Kaplan gauge satisfies |grad_H N| = |x| / N exactly.
# Finite differences along the left-invariant frame reproduce it to ~1e-9.
cloud = geo.sample_cloud(H1, rng, 5000, (0.1, 10.0), 1e-3)
g = calc.subgradient(H1, calc.norm_field(H1), cloud, "fd")
ratio = np.linalg.norm(g, axis=1) * geo.hom_norm(H1, cloud) / geo.first_layer_norm(H1, cloud)
print("\nH^1 gradient identity, worst deviation over the cloud:", np.abs(ratio - 1).max())

# On Grushin and filiform spaces there is no such identity, only two-sided
# estimates with exponent alpha. check_estimates reports the ratio ranges.
for kind in (geo.Grushin(2, 1, 2.0), geo.Filiform(3)):
    sp = geo.make_space(kind)
    rep = calc.check_estimates(sp, sp.alpha, geo.sample_cloud(sp, rng, 5000, (0.1, 10.0), 1e-3))
    print(f"\n{sp.describe()}  (alpha = {sp.alpha:g})")
    print(rep.to_csv(), end="")

# Horizontal paths give an upper bound for the Carnot-Caratheodory distance,
# and the Euclidean length of the first-layer projection a lower one.
for q in ([0.6, 0.8, 0.0], [0.0, 0.0, 1.0], [0.5, 0.5, 0.5]):
    lo, up = calc.cc_sandwich(H1, q)
    print(f"d(0, {q}) in [{lo:.4f}, {up:.4f}],  N = {float(geo.hom_norm(H1, q)):.4f}")
