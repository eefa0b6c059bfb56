import json

import numpy as np
import pytest

from subelliptic_lab import calculus as calc
from subelliptic_lab import geometry as geo
from subelliptic_lab.calculus import ScalarField

H1 = geo.heisenberg()
GRUSHIN = geo.make_space(geo.Grushin(1, 1, 1.0))
SPACES = [H1, geo.quaternionic_htype(), GRUSHIN, geo.make_space(geo.Grushin(2, 1, 2.0)),
          geo.make_space(geo.Greiner(1, 2)), geo.make_space(geo.Filiform(3))]


def cloud(space, k=500, seed=0):
    return geo.sample_cloud(space, np.random.default_rng(seed), k, (0.1, 10.0), 1e-3)


# -- subgradient ----------------------------------------------------------------

def test_kaplan_identity_exact_mode():
    P = cloud(H1)
    g = calc.subgradient(H1, calc.norm_field(H1), P, "exact")
    np.testing.assert_allclose(np.linalg.norm(g, axis=1), geo.first_layer_norm(H1, P) / geo.hom_norm(H1, P),
                               rtol=1e-12)


def test_kaplan_identity_fd_mode():
    P = cloud(H1)
    g = calc.subgradient(H1, calc.norm_field(H1), P, "fd")
    ratio = np.linalg.norm(g, axis=1) * geo.hom_norm(H1, P) / geo.first_layer_norm(H1, P)
    assert np.max(np.abs(ratio - 1)) < 1e-6


def test_constant_has_zero_gradient():
    f = ScalarField(lambda p: np.full(p.shape[:-1], 3.0))
    assert np.all(calc.subgradient(H1, f, cloud(H1, 20)) == 0.0)


def test_first_coordinate_on_grushin():
    f = ScalarField(lambda p: p[..., 0])
    np.testing.assert_allclose(calc.subgradient(GRUSHIN, f, [0.7, -2.0]), [1.0, 0.0], atol=1e-10)


@pytest.mark.parametrize("space", SPACES, ids=lambda s: s.describe())
def test_exact_matches_fd(space):
    P = cloud(space)
    for field in (calc.norm_field(space), calc.first_layer_norm_field(space)):
        ex = calc.subgradient(space, field, P, "exact")
        fd = calc.subgradient(space, field, P, "fd")
        rel = np.linalg.norm(fd - ex, axis=1) / np.linalg.norm(ex, axis=1)
        assert rel.max() < 1e-5, field.label


@pytest.mark.parametrize("space", SPACES, ids=lambda s: s.describe())
def test_gradient_degree_zero(space):
    P = cloud(space, 200)
    Nf = calc.norm_field(space)
    a = np.linalg.norm(calc.subgradient(space, Nf, P, "exact"), axis=1)
    b = np.linalg.norm(calc.subgradient(space, Nf, geo.dilate(space, 2.5, P), "exact"), axis=1)
    np.testing.assert_allclose(a, b, rtol=1e-8)


def test_missing_analytic_gradient():
    with pytest.raises(ValueError, match="no analytic"):
        calc.subgradient(H1, ScalarField(lambda p: p[..., 0]), [1, 0, 0], "exact")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_values_raise():
    f = ScalarField(lambda p: np.where(p[..., 0] > 0.5, np.inf, 0.0))
    with pytest.raises(calc.EvaluationError):
        calc.subgradient(H1, f, [1.0, 0.0, 0.0])


# -- sublaplacian ---------------------------------------------------------------

def test_laplacian_of_x_squared():
    f = ScalarField(lambda p: np.sum(p[..., :2] ** 2, axis=-1))
    assert calc.sublaplacian(H1, f, [0.3, 0.4, 1.0]) == pytest.approx(4.0, abs=1e-6)


def test_laplacian_of_abs_x():
    # (n1 - 1) / |x| at |x| = 2
    assert calc.sublaplacian(H1, calc.first_layer_norm_field(H1), [2.0, 0.0, 0.5]) == pytest.approx(0.5, abs=1e-6)


def test_fundamental_solution_is_harmonic():
    f = ScalarField(lambda p: geo.hom_norm(H1, p) ** (2 - H1.Q))
    P = np.array([[0.5, 0.7, 0.3], [1.0, 2.0, 3.0], [-0.2, 0.9, -1.5]])
    assert np.max(np.abs(calc.sublaplacian(H1, f, P))) < 1e-5


@pytest.mark.parametrize("space", SPACES, ids=lambda s: s.describe())
def test_laplacian_scale_covariant(space):
    P = cloud(space, 300)
    Nf = calc.norm_field(space)
    for lam in (0.5, 3.0):
        a = calc.sublaplacian(space, Nf, geo.dilate(space, lam, P)) * lam
        b = calc.sublaplacian(space, Nf, P)
        np.testing.assert_allclose(a, b, rtol=1e-6)


def test_sublaplacian_rejects_exact_mode():
    with pytest.raises(ValueError):
        calc.sublaplacian(H1, calc.norm_field(H1), [1, 0, 0], mode="exact")


# -- check_estimates ------------------------------------------------------------

def test_heisenberg_gradient_ratio_is_one():
    rep = calc.check_estimates(H1, 1.0, cloud(H1, 2000))
    g = rep.by_name("grad_lower")
    assert abs(g.min_ratio - 1) < 1e-8 and abs(g.max_ratio - 1) < 1e-8


def test_heisenberg_laplacian_ratio_is_q_minus_one():
    # Delta N = (Q - 1) |x|^2 / N^3 on H-type groups
    rep = calc.check_estimates(H1, 1.0, cloud(H1, 2000))
    lap = rep.by_name("laplacian")
    assert lap.min_ratio == pytest.approx(3.0, rel=1e-3) and lap.max_ratio == pytest.approx(3.0, rel=1e-3)


@pytest.mark.parametrize("space", [geo.make_space(geo.Grushin(2, 1, 2.0)), geo.make_space(geo.Filiform(3))],
                         ids=lambda s: s.describe())
def test_ratios_bounded_on_alpha_two(space):
    rep = calc.check_estimates(space, 2.0, cloud(space, 2000))
    for c in rep.checks:
        assert np.isfinite(c.min_ratio) and np.isfinite(c.max_ratio)
        assert c.sample_count == 2000
    assert rep.by_name("grad_lower").min_ratio > 0
    if isinstance(space.kind, geo.Filiform):
        assert rep.by_name("x1_lower").min_ratio > 0


def test_exclusion_removes_singular_points():
    P = np.array([[0.0, 0.0, 1.0], [1e-5, 0.0, 1.0], [1.0, 0.0, 0.0]])
    rep = calc.check_estimates(H1, 1.0, P)
    assert rep.checks[0].sample_count == 1


def test_empty_cloud_rejected():
    with pytest.raises(ValueError, match="empty"):
        calc.check_estimates(H1, 1.0, np.array([[0.0, 0.0, 1.0]]))


def test_report_serialization():
    rep = calc.check_estimates(H1, 1.0, cloud(H1, 50))
    doc = json.loads(rep.to_json())
    assert [c["name"] for c in doc["checks"]] == ["grad_lower", "grad_upper", "laplacian", "cross", "comparison"]
    rows = rep.to_csv().splitlines()
    assert rows[0] == "name,min,max,n,exclusion_radius" and len(rows) == 6


# -- horizontal paths -------------------------------------------------------------

def test_straight_segment_is_tight():
    lo, up = calc.cc_sandwich(H1, [0.6, 0.8, 0.0])
    assert lo == pytest.approx(1.0, abs=1e-12) and up == pytest.approx(1.0, abs=1e-12)


def test_vertical_upper_bound_homogeneous():
    vals = [calc.cc_sandwich(H1, [0, 0, t])[1] / geo.hom_norm(H1, [0, 0, t]) for t in (1.0, 10.0, 100.0)]
    np.testing.assert_allclose(vals, vals[0], rtol=1e-9)


@pytest.mark.parametrize("space", SPACES, ids=lambda s: s.describe())
def test_sandwich_ratios_bounded(space):
    P = cloud(space, 10, seed=8)
    N = geo.hom_norm(space, P)
    lo, up = np.array([calc.cc_sandwich(space, p) for p in P]).T
    assert np.all(lo <= up + 1e-9)
    assert np.all(np.isfinite(N / up)) and np.all(N / up > 0)
    assert np.max(lo / N) < 10


@pytest.mark.parametrize("space", SPACES, ids=lambda s: s.describe())
def test_path_reaches_target(space):
    p = cloud(space, 1, seed=3)[0]
    path = calc.horizontal_path(space, p)
    np.testing.assert_allclose(calc.endpoint(space, path), p, atol=1e-7 * max(1.0, np.abs(p).max()))


def test_path_from_origin_rejected():
    with pytest.raises(ValueError):
        calc.horizontal_path(H1, [0.0, 0.0, 0.0])
