import dataclasses
import math

import numpy as np
import pytest

from subelliptic_lab import calculus as calc
from subelliptic_lab import geometry as geo
from subelliptic_lab import inequalities as iq
from subelliptic_lab import measures as ms
from subelliptic_lab.measures import MeasureSpec

H1 = geo.heisenberg()
GRUSHIN = geo.make_space(geo.Grushin(1, 1, 1.0))

# Frozen from an independent (rho, t) dblquad on H^1 with N = (rho^4 + 16 t^2)^(1/4):
# mean of |x| N under p = 3, of 1/|x| under p = 3, of |x| under p = 3 (ckn = 1/sqrt),
# and of |x|^2 N^4 under p = 4.
UBOUND_CONST_P3_Q1 = 0.8541738680671425
HARDY_CONST_P3_Q1 = 1.8693079311693688
CKN_CONST_P3_Q1 = 1.1387915691807264
UBOUND_CONST_P4_Q2 = 0.8462843753216344
# N^4 ~ Gamma(1) under p = 4 on H^1, so E[N] = Gamma(5/4)
MERGED_CONST_P4_Q1 = math.gamma(1.25)


@pytest.fixture(scope="module")
def spec3():
    return MeasureSpec(H1, 3.0)


@pytest.fixture(scope="module")
def spec4():
    return MeasureSpec(H1, 4.0)


@pytest.fixture(scope="module")
def spec2():
    return MeasureSpec(H1, 2.0)


@pytest.fixture(scope="module")
def s3(spec3):
    return ms.sample(spec3, 40_000, seed=1)


@pytest.fixture(scope="module")
def s4(spec4):
    return ms.sample(spec4, 40_000, seed=3)


@pytest.fixture(scope="module")
def s2(spec2):
    return ms.sample(spec2, 40_000, seed=1)


def within(report, expected, k=3.0):
    return abs(report.ratio - expected) < k * report.stderr


# -- families ------------------------------------------------------------------------

def test_family_sizes():
    fam = iq.standard_family(H1, 3.0)
    assert len(fam) == 50 and len(iq.bump_family(H1, 3.0)) == 30 and len(iq.global_family(H1, 3.0)) == 20
    assert len({f.label for f in fam}) == 50


def fd_subgradient(f, P, h):
    C = geo.frame_coefficients(f.space, P)
    h = np.broadcast_to(np.asarray(h, float), (len(P),))[:, None]
    return np.stack([(f.evaluate(P + h * C[:, i]) - f.evaluate(P - h * C[:, i])) / (2 * h[:, 0])
                     for i in range(f.space.n_fields)], axis=1)


def anisotropic_step(space, eta, C, frac=1e-3):
    # move every coordinate by at most frac of its natural size N(eta)^w_k
    scale = geo.hom_norm(space, eta)[:, None] ** space.dilation_weights
    reach = np.abs(C).max(axis=1)
    return frac * np.min(scale / np.maximum(reach, 1e-300), axis=1)


@pytest.mark.parametrize("space", [H1, GRUSHIN, geo.make_space(geo.Greiner(1, 2))], ids=lambda s: s.describe())
def test_family_gradients_match_fd(space):
    # far bumps lose digits to c^-1 xi at these radii; only the near ones are checked here
    rng = np.random.default_rng(0)
    for f in iq.standard_family(space, 3.0):
        if f.region is not None:
            if geo.hom_norm(space, f.region.center) > 1.0 + 1e-12:
                continue
            eta = rng.uniform(-1, 1, (400, space.ambient_dim)) * np.asarray(f.region.half_widths)
            # the gauge is not C^1 at the bump centre (|grad| ~ |t|^-1/2 on Greiner), so skip a core
            eta = eta[geo.hom_norm(space, eta) > 0.2 * f.params["radius"]]
            P = f.region.to_xi(space, eta)
            h = anisotropic_step(space, eta, geo.frame_coefficients(space, P))
        else:
            P = geo.sample_cloud(space, rng, 200, (0.2, 3.0), 0.05)
            h = 1e-6
        exact = f.subgradient(P)
        fd = fd_subgradient(f, P, h)
        # psi'' jumps at the support edge, so central differences are only first order there
        assert np.max(np.abs(fd - exact)) <= 2e-3 * np.abs(exact).max() + 1e-9, f.label


def test_far_bump_local_gradient():
    # left invariance: X_i f(c xi') = X_i (f o L_c)(xi'), so the local gradient is the FD gradient at eta
    for f in iq.bump_family(H1, 3.0)[-6:]:
        r = f.params["radius"]
        eta = np.random.default_rng(1).uniform(-1, 1, (100, 3)) * np.asarray(f.region.half_widths)
        _, g = f.local(eta, f.region.to_xi(H1, eta))
        centred = iq.bump(H1, [0.0, 0.0, 0.0], r)
        np.testing.assert_allclose(g, fd_subgradient(centred, eta, 1e-4 * r), atol=1e-4 * np.abs(g).max())


def test_natural_radius():
    assert iq.natural_radius(0.5, 3.0) == 0.5
    assert iq.natural_radius(4.0, 3.0) == pytest.approx(1 / 48)


def test_anchor_points_unit_norm():
    for sp in (H1, GRUSHIN, geo.make_space(geo.Filiform(3))):
        assert geo.hom_norm(sp, iq.axis_point(sp)) == pytest.approx(1.0)
        assert geo.hom_norm(sp, iq.horizontal_point(sp)) == pytest.approx(1.0)


def test_unknown_radial_shape():
    with pytest.raises(ValueError):
        iq.radial_in_N(H1, "cosh")


def test_global_needs_samples(spec3):
    with pytest.raises(ValueError, match="SampleSet"):
        iq.ubound_ratio(spec3, 1.0, iq.constant(H1))


# -- U-bounds ------------------------------------------------------------------------

def test_ubound_constant(spec3, s3):
    r = iq.ubound_ratio(spec3, 1.0, iq.constant(H1), samples=s3)
    assert r.rhs_terms[0].value == 0.0 and r.rhs_terms[1].value == 1.0
    assert within(r, UBOUND_CONST_P3_Q1)
    rq = iq.ubound_ratio(spec3, 1.0, iq.constant(H1), method="quadrature")
    assert rq.ratio == pytest.approx(UBOUND_CONST_P3_Q1, rel=1e-4)


def test_ubound_constant_q2(spec4, s4):
    assert within(iq.ubound_ratio(spec4, 2.0, iq.constant(H1), samples=s4), UBOUND_CONST_P4_Q2)


def test_far_bumps_stabilise(spec3):
    ratios = [iq.ubound_ratio(spec3, 1.0, iq.bump(H1, geo.dilate(H1, N0, iq.horizontal_point(H1)),
                                                  0.4 * iq.natural_radius(N0, 3.0))).ratio
              for N0 in (2.0, 4.0, 8.0)]
    assert max(ratios) / min(ratios) < 1.15


def test_tube_ubound_bounded(spec3):
    r = iq.ubound_ratio(spec3, 1.0, iq.tube(H1, 0.1), method="quadrature")
    assert 0 < r.ratio < 1 and r.lhs.value < 0.1 * r.rhs_terms[1].value


def test_merged_constant(spec4, s4):
    r = iq.merged_ubound_ratio(spec4, 1.0, iq.constant(H1), samples=s4)
    assert within(r, MERGED_CONST_P4_Q1)
    rq = iq.merged_ubound_ratio(spec4, 1.0, iq.constant(H1), method="quadrature")
    assert rq.ratio == pytest.approx(MERGED_CONST_P4_Q1, rel=1e-4)


def test_merged_tube_bounded(spec4):
    ratios = [iq.merged_ubound_ratio(spec4, 1.0, iq.tube(H1, w), method="quadrature").ratio for w in (0.2, 0.05)]
    assert all(0 < r < 2 for r in ratios)


def test_merged_needs_strict_p():
    with pytest.raises(ValueError, match="alpha"):
        iq.merged_ubound_ratio(MeasureSpec(H1, 2.0), 1.0, iq.constant(H1))


def test_merged_rejects_q2(spec4):
    with pytest.raises(ValueError):
        iq.merged_ubound_ratio(spec4, 2.0, iq.constant(H1))


@pytest.mark.parametrize("q", [0.5, 3.0])
def test_q_range(spec3, q):
    with pytest.raises(ValueError, match="outside"):
        iq.ubound_ratio(spec3, q, iq.constant(H1))


def test_ubound_needs_p_threshold():
    with pytest.raises(ValueError):
        iq.ubound_ratio(MeasureSpec(H1, 1.5), 1.0, iq.constant(H1))


# -- Hardy -----------------------------------------------------------------------------

def test_hardy_constant(spec3, s3):
    r = iq.hardy_ratio(spec3, 1.0, iq.constant(H1), samples=s3)
    assert within(r, HARDY_CONST_P3_Q1, k=4.0)
    rq = iq.hardy_ratio(spec3, 1.0, iq.constant(H1), method="quadrature")
    assert rq.ratio == pytest.approx(HARDY_CONST_P3_Q1, rel=1e-4)


def test_hardy_away_from_axis(spec3):
    f = iq.bump(H1, geo.dilate(H1, 2.0, iq.horizontal_point(H1)), 0.5)
    r = iq.hardy_ratio(spec3, 1.0, f)
    assert math.isfinite(r.lhs.value) and r.lhs.value > 0


def test_hardy_concentrating_tubes(spec3):
    lhs, ratios = [], []
    for k in range(1, 7):
        r = iq.hardy_ratio(spec3, 1.0, iq.tube(H1, 2.0 ** -k), n_region=1 << 14)
        lhs.append(r.lhs.value / r.rhs_terms[1].value)
        ratios.append(r.ratio)
    assert lhs[-1] > 10 * lhs[0]
    assert max(ratios) < 1.5


def test_hardy_rejections(spec3):
    with pytest.raises(ValueError):
        iq.hardy_ratio(spec3, 2.0, iq.constant(H1))
    with pytest.raises(ValueError, match="n1"):
        iq.hardy_ratio(MeasureSpec(GRUSHIN, 3.0), 1.0, iq.constant(GRUSHIN))


def test_almost_hardy_grushin_bump():
    spec = MeasureSpec(GRUSHIN, 3.0)
    f = iq.bump(GRUSHIN, geo.dilate(GRUSHIN, 1.0, iq.axis_point(GRUSHIN)), 0.5)
    r = iq.almost_hardy_ratio(spec, 0.5, 4.0, f)
    rq = iq.almost_hardy_ratio(spec, 0.5, 4.0, f, method="quadrature")
    assert r.ratio <= 1.1 and rq.ratio <= 1.1
    assert abs(r.ratio - rq.ratio) < 3 * math.hypot(r.stderr, rq.stderr)


def test_almost_hardy_coefficients():
    c = [iq.almost_hardy_coefficients(0.5, R0)[2] for R0 in (1.0, 4.0, 16.0)]
    np.testing.assert_allclose(c, [1.0, 0.5, 0.25])
    assert iq.almost_hardy_coefficients(0.25, 16.0)[:2] == (8.0, 8.0)


def test_almost_hardy_trivialises_near_one():
    # delta -> 1: the weight |x|^{-(1-delta)} tends to 1 and lhs to int |f|
    spec = MeasureSpec(GRUSHIN, 3.0)
    f = iq.bump(GRUSHIN, iq.horizontal_point(GRUSHIN), 0.5)
    r = iq.almost_hardy_ratio(spec, 0.999, 1.0, f)
    assert r.lhs.value == pytest.approx(r.rhs_terms[2].value, rel=0.01)


def test_almost_hardy_rejections(spec3):
    with pytest.raises(ValueError, match="n1"):
        iq.almost_hardy_ratio(spec3, 0.5, 1.0, iq.constant(H1))
    with pytest.raises(ValueError, match="delta"):
        iq.almost_hardy_ratio(MeasureSpec(GRUSHIN, 3.0), 1.0, 1.0, iq.constant(GRUSHIN))


# -- CKN -------------------------------------------------------------------------------

def test_ckn_constant(spec3, s3):
    r = iq.ckn_ratio(spec3, 1.0, iq.constant(H1), samples=s3)
    assert within(r, CKN_CONST_P3_Q1)
    assert r.params["constant_C"] == 1.0


def test_ckn_tubes_bounded(spec3):
    ratios = [iq.ckn_ratio(spec3, 1.0, iq.tube(H1, w), method="quadrature").ratio for w in (0.2, 0.05, 0.0125)]
    assert max(ratios) < 3 * min(ratios)


# -- homogeneity and oracle equivalence ----------------------------------------------------

@pytest.mark.parametrize("op,q", [(iq.ubound_ratio, 1.0), (iq.hardy_ratio, 1.0), (iq.ckn_ratio, 1.0),
                                  (iq.merged_ubound_ratio, 1.0), (iq.ubound_ratio, 2.0)])
def test_homogeneity(spec4, s4, op, q):
    for f in (iq.bump(H1, iq.axis_point(H1), 0.4), iq.polynomial_cutoff(H1, 2, 2.0)):
        a = op(spec4, q, f, samples=s4)
        b = op(spec4, q, f.scaled(2.0), samples=s4)
        assert b.ratio == pytest.approx(a.ratio, rel=1e-9)


def test_mc_matches_quadrature(spec3):
    members = [iq.bump(H1, geo.dilate(H1, N0, a), s * iq.natural_radius(N0, 3.0))
               for N0 in (0.5, 2.0) for a in (iq.axis_point(H1), iq.horizontal_point(H1)) for s in (0.4,)]
    for f in members:
        for op in (iq.ubound_ratio, iq.hardy_ratio, iq.ckn_ratio):
            r = op(spec3, 1.0, f)
            rq = op(spec3, 1.0, f, method="quadrature")
            assert abs(r.ratio - rq.ratio) < 3 * math.hypot(r.stderr, rq.stderr), (op.__name__, f.label)


def test_report_dict(spec3, s3):
    d = iq.ubound_ratio(spec3, 1.0, iq.constant(H1), samples=s3).to_dict()
    assert set(d) == {"inequality", "function", "q", "params", "lhs", "rhs_terms", "ratio", "stderr"}
    assert d["params"]["p"] == 3.0 and len(d["rhs_terms"]) == 2


# -- super-Poincare --------------------------------------------------------------------------

def test_required_beta_constant(spec4, s4):
    for eps in (1e-3, 0.1, 10.0):
        assert iq.spi_required_beta(spec4, 2.0, iq.constant(H1), eps, samples=s4) == pytest.approx(1.0, rel=1e-12)


def test_required_beta_huge_epsilon(spec4):
    f = iq.bump(H1, iq.axis_point(H1), 0.4)
    assert iq.spi_required_beta(spec4, 2.0, f, 1e6) == 0.0


def test_required_beta_monotone(spec4):
    f = iq.bump(H1, geo.dilate(H1, 2.0, iq.axis_point(H1)), 0.1)
    terms, ls = iq.spi_log_terms(spec4, 2.0, f)
    eps = np.logspace(-6, 1, 40)
    lb = iq.required_log_beta(terms, ls, eps)
    assert np.all(lb[1:] <= lb[:-1]) and lb[0] > 0 and lb[-1] == -np.inf


@pytest.mark.parametrize("space", [H1, geo.make_space(geo.Grushin(2, 1, 1.0))], ids=lambda s: s.describe())
def test_probe_growth(space):
    fit = iq.spi_optimality_probe(MeasureSpec(space, 4.0), [2, 3, 4, 6])
    assert fit.fitted_sigma >= 1.7 and fit.extras["target_sigma"] == 2.0
    assert all(np.diff(fit.epsilons) < 0)
    assert all(np.diff(fit.log_betas) >= 0)
    assert min(fit.extras["lower_bound_log_margin"]) > -50


def test_probe_rejects_bad_input():
    with pytest.raises(ValueError):
        iq.spi_optimality_probe(MeasureSpec(geo.make_space(geo.Filiform(3)), 4.0), [2, 3, 4, 6])
    with pytest.raises(ValueError):
        iq.spi_optimality_probe(MeasureSpec(H1, 4.0), [2, 3, 4])


@pytest.mark.parametrize("alpha,p,q,sigma", [(1, 4, 1, 4.0), (1, 4, 2, 2.0), (3, 8, 2, 4.0)])
def test_growth_exponent(alpha, p, q, sigma):
    assert iq.growth_exponent(alpha, p, q) == sigma


@pytest.mark.parametrize("space,p,q,sigma", [(H1, 4.0, 1.0, 4.0), (H1, 4.0, 2.0, 2.0),
                                             (geo.make_space(geo.Greiner(1, 2)), 8.0, 2.0, 4.0)],
                         ids=["h1-q1", "h1-q2", "greiner"])
def test_constructive_curve(space, p, q, sigma):
    fit = iq.constructive_beta_curve(MeasureSpec(space, p), q, [0.5, 0.2, 0.1, 0.05, 0.02], C=1.0)
    assert abs(fit.fitted_sigma - sigma) < 1e-9
    assert all(np.diff(fit.log_betas) > 0)


def test_constructive_comparison_constant():
    fit = iq.constructive_beta_curve(MeasureSpec(H1, 4.0), 2.0, [0.5, 0.2, 0.1, 0.05])
    assert 0 < fit.extras["C"] <= 1.0 + 1e-9


def test_growth_fit_serialisation():
    fit = iq.GrowthFit([0.1, 0.01], [1.0, math.inf], 2.0, 0.0, [0.0, 800.0])
    d = fit.to_dict()
    assert d["betas"] == [1.0, None] and d["log_betas"] == [0.0, 800.0]
    assert fit.to_csv().splitlines()[0] == "epsilon,beta,log_beta"


# -- F-Sobolev and Cheeger ---------------------------------------------------------------------

def test_fsobolev_theta():
    assert iq.fsobolev_theta(1.0, 4.0) == 0.25
    assert iq.fsobolev_theta(1.0, 2.0) == 0.0


def test_fsobolev_constant(spec4, s4):
    for theta in (0.25, 0.375):
        r = iq.fsobolev_ratio(spec4, iq.constant(H1), theta, samples=s4)
        assert r.lhs.value == pytest.approx(math.log(2) ** theta, rel=1e-12)
        assert r.rhs_terms[0].value == 0.0


def test_fsobolev_normalisation_invariant(spec4, s4):
    f = iq.polynomial_cutoff(H1, 1, 2.0)
    a = iq.fsobolev_ratio(spec4, f, samples=s4)
    b = iq.fsobolev_ratio(spec4, f.scaled(5.0), samples=s4)
    assert b.ratio == pytest.approx(a.ratio, rel=1e-9)


def test_fsobolev_majorant(spec4, s4):
    reps = [iq.fsobolev_ratio(spec4, f, samples=s4, n_region=1 << 13) for f in iq.bump_family(H1, 4.0)[::3]]
    c1, c2 = iq.fsobolev_majorant(reps)
    assert math.isfinite(c1) and math.isfinite(c2)
    for r in reps:
        assert r.lhs.value <= c1 * r.rhs_terms[0].value + c2


def test_weighted_median():
    assert iq.weighted_median([3.0, 1.0, 2.0]) == 2.0
    assert iq.weighted_median([1.0, 2.0, 10.0], [1.0, 1.0, 5.0]) == 10.0


def test_cheeger_odd_median(spec2, s2):
    r = iq.cheeger_ratio(spec2, iq.odd_coordinate(H1), s2)
    sd = np.std(s2.points[:, 0])
    assert abs(r.params["median"]) < 0.05 * sd


def test_cheeger_shift_invariant(spec2, s2):
    f = iq.smoothed_halfspace(H1)
    g = dataclasses.replace(f, value=lambda P: f.value(P) + 3.0)
    assert iq.cheeger_ratio(spec2, g, s2).ratio == pytest.approx(iq.cheeger_ratio(spec2, f, s2).ratio, rel=1e-12)


def test_cheeger_halfspace_finite(spec2, s2):
    r = iq.cheeger_ratio(spec2, iq.smoothed_halfspace(H1), s2)
    assert math.isfinite(r.ratio) and r.ratio > 0


def test_cheeger_rejections(spec2, spec4, s2, s4):
    with pytest.raises(ValueError, match="endpoint"):
        iq.cheeger_ratio(spec4, iq.smoothed_halfspace(H1), s4)
    with pytest.raises(ValueError, match="global"):
        iq.cheeger_ratio(spec2, iq.bump(H1, iq.axis_point(H1), 0.3), s2)
    with pytest.raises(ValueError, match="constant"):
        iq.cheeger_ratio(spec2, iq.constant(H1), s2)
