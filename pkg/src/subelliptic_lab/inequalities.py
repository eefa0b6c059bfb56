"""Both sides of the weighted functional inequalities, evaluated on test-function families.

Every integral is a mu-integral. Three evaluation routes are available:

* ``"mc"``: sample averages over a :class:`~subelliptic_lab.measures.SampleSet`
  (global test functions) or iid importance sampling over the support of a
  compactly supported function (bumps and tubes), where weights are kept in
  log form so far-away supports do not underflow;
* ``"quadrature"``: adaptive cubature over the same supports (ambient_dim <= 3);
* ``"axisym"``: an exact reduction to a 2-D integral in (|x|, t) for bumps
  centred on the vertical axis of H-type / Grushin spaces with one vertical
  coordinate.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import cubature
from scipy.special import gammaln

from . import geometry as geo
from . import measures as ms
from .calculus import ScalarField, cc_sandwich
from .geometry import Grushin, Space, StepTwo
from .measures import IntegralEstimate, MeasureSpec, SampleSet
from .rng import stream, tag

REGION_POINTS = 1 << 15
BUMP_SCALES = (0.2, 0.4, 0.8)
CENTER_NORMS = (0.5, 1.0, 2.0, 4.0, 8.0)
CUTOFF_RADII = (1.0, 2.0, 4.0)
RADIAL_SHAPES = ("N", "N2", "N3", "log1p", "lorentz", "exp_decay", "gauss", "exp_grow")


class NonIntegrableError(ArithmeticError):
    pass


# -- profiles ------------------------------------------------------------------

def smoothstep(s):
    """C^1 cubic bump profile: 1 at 0, 0 for s >= 1, flat at both ends."""
    s = np.clip(s, 0.0, 1.0)
    return 1.0 - 3.0 * s * s + 2.0 * s ** 3


def smoothstep_deriv(s):
    inside = (s >= 0) & (s < 1)
    return np.where(inside, 6.0 * s * (s - 1.0), 0.0)


def _log_sphere_area(k: int) -> float:
    """log |S^{k-1}| (k = 1 gives log 2)."""
    return math.log(2.0) + 0.5 * k * math.log(math.pi) - gammaln(0.5 * k)


# -- supports ---------------------------------------------------------------------

@dataclass(frozen=True)
class Region:
    """Support of a test function written as xi = center * eta, eta in a box.

    ``group`` selects left translation (step-two groups, so that the quasi-distance
    N(c^-1 xi) becomes N(eta)); otherwise the translation is Euclidean. When
    ``polar`` is set, the first-layer part of eta is drawn in polar form about
    the axis {x = 0}, which removes the |x|^-1 singularity of Hardy weights.
    """
    center: tuple
    half_widths: tuple
    group: bool
    polar: bool = False

    def to_xi(self, space: Space, eta: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        if self.group:
            return geo.group_mul(space, np.broadcast_to(c, eta.shape), eta)
        return c + eta


# -- test functions ---------------------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    """A closed-form test function with its horizontal gradient.

    ``value(P)`` and ``grad(P)`` act on points xi; ``local(eta, xi)`` (bumps only)
    returns both from the support coordinate eta, which avoids the cancellation
    in c^-1 xi far from the origin.
    """
    __test__ = False
    family: str
    params: dict
    space: Space
    value: Callable
    grad: Callable
    region: Optional[Region] = None
    local: Optional[Callable] = None
    scale: float = 1.0

    @property
    def label(self) -> str:
        inner = ",".join(f"{k}={_fmt(v)}" for k, v in self.params.items())
        return f"{self.family}{{{inner}}}"

    def evaluate(self, P) -> np.ndarray:
        return self.scale * self.value(np.atleast_2d(P))

    def subgradient(self, P) -> np.ndarray:
        return self.scale * self.grad(np.atleast_2d(P))

    def scaled(self, lam: float) -> "TestFunction":
        return replace(self, scale=self.scale * lam)

    def field(self) -> ScalarField:
        return ScalarField(self.evaluate, self.subgradient, self.label)


def _fmt(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return "(" + ",".join(_fmt(u) for u in v) + ")"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _horizontal(space: Space, P: np.ndarray, egrad: np.ndarray) -> np.ndarray:
    return np.einsum("kld,kd->kl", geo.frame_coefficients(space, P), egrad)


def _local_norm_grad(space: Space, eta: np.ndarray, xi: np.ndarray, group: bool) -> np.ndarray:
    """Horizontal gradient at xi of N(c^-1 xi) (group) or N(xi - c) (Euclidean)."""
    if group:
        return geo.norm_subgradient(space, eta)
    return _horizontal(space, xi, geo.norm_euclidean_gradient(space, eta))


def bump(space: Space, center, radius: float, polar: Optional[bool] = None) -> TestFunction:
    """psi(d(xi, c) / r) with psi the C^1 cubic step and d the gauge quasi-distance."""
    c = np.asarray(center, float)
    group = isinstance(space.kind, StepTwo)
    on_axis = bool(np.all(geo.first_layer(space, c) == 0.0))
    polar = on_axis and space.n1 >= 2 if polar is None else polar
    hw = geo.gauge_box(space, radius)
    if polar:
        hw = hw.copy()
        hw[: space.n1] = radius     # |x| <= N for the kinds with n1 >= 2
    region = Region(tuple(c), tuple(hw), group, polar)

    def rel(P):
        if group:
            return geo.group_mul(space, geo.group_inv(space, np.broadcast_to(c, P.shape)), P)
        return P - c

    def local(eta, xi):
        d = geo.hom_norm(space, eta) / radius
        v = smoothstep(d)
        dpsi = smoothstep_deriv(d) / radius
        with np.errstate(invalid="ignore", divide="ignore"):
            g = _local_norm_grad(space, eta, xi, group) * dpsi[:, None]
        g[dpsi == 0.0] = 0.0
        return v, g

    def value(P):
        return smoothstep(geo.hom_norm(space, rel(P)) / radius)

    def grad(P):
        return local(rel(P), P)[1]

    return TestFunction("bump", {"center": tuple(float(u) for u in c), "radius": float(radius)},
                        space, value, grad, region, local)


def tube(space: Space, width: float, cutoff: float = 2.0) -> TestFunction:
    """psi(|x| / width) psi(N / cutoff): concentrates on the degeneracy locus {x = 0}."""
    hw = geo.gauge_box(space, cutoff).copy()
    hw[: space.n1] = width
    region = Region(tuple(np.zeros(space.ambient_dim)), tuple(hw), False, space.n1 >= 2)

    def value(P):
        return smoothstep(geo.first_layer_norm(space, P) / width) * smoothstep(geo.hom_norm(space, P) / cutoff)

    def grad(P):
        x = geo.first_layer(space, P)
        xn = np.linalg.norm(x, axis=1)
        N = geo.hom_norm(space, P)
        gx = np.zeros((len(P), space.n_fields))
        with np.errstate(invalid="ignore", divide="ignore"):
            gx[:, : space.n1] = np.where(xn[:, None] > 0, x / xn[:, None], 0.0)
        a, b = smoothstep(xn / width), smoothstep(N / cutoff)
        da, db = smoothstep_deriv(xn / width) / width, smoothstep_deriv(N / cutoff) / cutoff
        gN = np.where(db[:, None] != 0, geo.norm_subgradient(space, P), 0.0)
        return (da * b)[:, None] * gx + (a * db)[:, None] * gN

    return TestFunction("tube", {"width": float(width), "cutoff": float(cutoff)}, space, value, grad, region)


def polynomial_cutoff(space: Space, degree: int, cutoff: float) -> TestFunction:
    """(1 + xi_1 + xi_d)^degree psi(N / cutoff)."""
    d = space.ambient_dim
    e = np.zeros(d)
    e[0] += 1.0
    e[-1] += 1.0

    def value(P):
        return (1.0 + P @ e) ** degree * smoothstep(geo.hom_norm(space, P) / cutoff)

    def grad(P):
        base = 1.0 + P @ e
        N = geo.hom_norm(space, P)
        poly_e = (degree * base ** (degree - 1))[:, None] * e if degree else np.zeros_like(P)
        db = smoothstep_deriv(N / cutoff) / cutoff
        gN = np.where(db[:, None] != 0, geo.norm_subgradient(space, P), 0.0)
        return smoothstep(N / cutoff)[:, None] * _horizontal(space, P, poly_e) + (base ** degree * db)[:, None] * gN

    return TestFunction("polynomial_cutoff", {"degree": int(degree), "cutoff": float(cutoff)}, space, value, grad)


def radial_in_N(space: Space, shape: str, p: float = 2.0) -> TestFunction:
    """g(N) for a small catalogue of profiles g; tails stay below exp(N^p / 8)."""
    table = {
        "N": (lambda N: N, lambda N: np.ones_like(N)),
        "N2": (lambda N: N * N, lambda N: 2 * N),
        "N3": (lambda N: N ** 3, lambda N: 3 * N * N),
        "log1p": (np.log1p, lambda N: 1 / (1 + N)),
        "lorentz": (lambda N: 1 / (1 + N * N), lambda N: -2 * N / (1 + N * N) ** 2),
        "exp_decay": (lambda N: np.exp(-N), lambda N: -np.exp(-N)),
        "gauss": (lambda N: np.exp(-N * N), lambda N: -2 * N * np.exp(-N * N)),
        "exp_grow": (lambda N: np.exp(N ** p / 8), lambda N: p / 8 * N ** (p - 1) * np.exp(N ** p / 8)),
    }
    if shape not in table:
        raise ValueError(f"unknown radial shape {shape!r}")
    g, dg = table[shape]

    def grad(P):
        N = geo.hom_norm(space, P)
        with np.errstate(invalid="ignore"):
            out = dg(N)[:, None] * geo.norm_subgradient(space, P)
        out[N == 0] = 0.0
        return out

    params = {"shape": shape} if shape != "exp_grow" else {"shape": shape, "p": float(p)}
    return TestFunction("radial_in_N", params, space, lambda P: g(geo.hom_norm(space, P)), grad)


def constant(space: Space, value: float = 1.0) -> TestFunction:
    return TestFunction("constant", {"value": float(value)}, space,
                        lambda P: np.full(len(P), value), lambda P: np.zeros((len(P), space.n_fields)))


def smoothed_halfspace(space: Space, coordinate: int = 0, width: float = 0.1) -> TestFunction:
    """(1 + tanh(xi_i / width)) / 2, a smoothed indicator of {xi_i > 0}."""
    def value(P):
        return 0.5 * (1.0 + np.tanh(P[:, coordinate] / width))

    def grad(P):
        eg = np.zeros_like(P)
        eg[:, coordinate] = 0.5 / width / np.cosh(P[:, coordinate] / width) ** 2
        return _horizontal(space, P, eg)

    return TestFunction("smoothed_halfspace", {"coordinate": int(coordinate), "width": float(width)},
                        space, value, grad)


def odd_coordinate(space: Space, coordinate: int = 0) -> TestFunction:
    """xi_i psi(N / 4): antisymmetric under xi -> -xi."""
    def value(P):
        return P[:, coordinate] * smoothstep(geo.hom_norm(space, P) / 4.0)

    def grad(P):
        eg = np.zeros_like(P)
        eg[:, coordinate] = 1.0
        N = geo.hom_norm(space, P)
        db = smoothstep_deriv(N / 4.0) / 4.0
        gN = np.where(db[:, None] != 0, geo.norm_subgradient(space, P), 0.0)
        return smoothstep(N / 4.0)[:, None] * _horizontal(space, P, eg) + (P[:, coordinate] * db)[:, None] * gN

    return TestFunction("odd_coordinate", {"coordinate": int(coordinate)}, space, value, grad)


def axis_point(space: Space) -> np.ndarray:
    """Point with N = 1 on the last coordinate axis (inside {x = 0})."""
    c = geo.coordinate_gauge(space)[-1]
    e = np.zeros(space.ambient_dim)
    e[-1] = c ** (-space.dilation_weights[-1])
    return e


def horizontal_point(space: Space) -> np.ndarray:
    """Point with N = 1 on the first coordinate axis (off {x = 0})."""
    e = np.zeros(space.ambient_dim)
    e[0] = 1.0 / geo.coordinate_gauge(space)[0]
    return e


def natural_radius(N0: float, p: float) -> float:
    """Length over which exp(-N^p) changes by O(1) near N = N0, capped by N0."""
    return min(N0, 1.0 / (p * N0 ** (p - 1)))


def bump_family(space: Space, p: float) -> list:
    out = []
    for N0 in CENTER_NORMS:
        for anchor in (axis_point(space), horizontal_point(space)):
            for s in BUMP_SCALES:
                out.append(bump(space, geo.dilate(space, N0, anchor), s * natural_radius(N0, p)))
    return out


def standard_family(space: Space, p: float) -> list:
    """The 50-member family: 30 bumps, 12 polynomial cutoffs, 8 radial profiles."""
    fam = bump_family(space, p)
    fam += [polynomial_cutoff(space, k, R) for k in range(4) for R in CUTOFF_RADII]
    fam += [radial_in_N(space, s, p) for s in RADIAL_SHAPES]
    return fam


def global_family(space: Space, p: float) -> list:
    """The 20 nonconstant members of the standard family that are not localised bumps."""
    return [f for f in standard_family(space, p) if f.region is None]


# -- evaluation engine ------------------------------------------------------------

@dataclass
class Evaluation:
    """Points, values and log-weights such that int h dmu ~ mean(h * exp(logw)) * exp(log_scale)."""
    P: np.ndarray
    F: np.ndarray
    G: np.ndarray           # |grad_H f|
    logw: np.ndarray
    log_scale: float
    method: str
    iid: bool

    def moments(self, H: np.ndarray) -> tuple:
        """Means and covariance of the mean for the columns of H (n, k)."""
        H = np.asarray(H, float)
        if H.ndim == 1:
            H = H[:, None]
        if not np.all(np.isfinite(H)):
            raise NonIntegrableError("non-finite integrand values")
        V = H * np.exp(self.logw)[:, None]
        if self.iid:
            m = V.mean(axis=0)
            cov = np.atleast_2d(np.cov(V, rowvar=False)) / len(V)
            return m, cov
        return ms.batch_means(V)


def _region_eval(spec: MeasureSpec, f: TestFunction, n: int, seed: int) -> Evaluation:
    sp, reg = spec.space, f.region
    rng = stream(seed, tag("region"), tag(f.label))
    hw = np.asarray(reg.half_widths)
    d, n1 = sp.ambient_dim, sp.n1
    eta = rng.uniform(-1.0, 1.0, (n, d)) * hw
    log_qinv = np.full(n, float(np.sum(np.log(2 * hw))))
    if reg.polar:
        rho = rng.uniform(0.0, hw[0], n)
        u = rng.standard_normal((n, n1))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        eta[:, :n1] = rho[:, None] * u
        log_qinv = (np.sum(np.log(2 * hw[n1:])) + math.log(hw[0]) + _log_sphere_area(n1)
                    + (n1 - 1) * np.log(np.maximum(rho, 1e-300)))
    xi = reg.to_xi(sp, eta)
    if f.local is not None:
        F, G = f.local(eta, xi)
    else:
        F, G = f.value(xi), f.grad(xi)
    F, G = f.scale * F, f.scale * G
    logw = ms.log_density_unnormalized(spec, xi) + log_qinv
    shift = float(np.max(logw))
    z, _ = spec.require_z()
    return Evaluation(xi, F, np.linalg.norm(G, axis=1), logw - shift, shift - math.log(z), "mc-region", True)


def evaluate(spec: MeasureSpec, f: TestFunction, samples: Optional[SampleSet] = None,
             n_region: int = REGION_POINTS, seed: int = 0) -> Evaluation:
    """Monte Carlo evaluation points for f: region sampling for localised f, SampleSet otherwise."""
    if f.region is not None:
        return _region_eval(spec, f, n_region, seed)
    if samples is None:
        raise ValueError(f"{f.label}: global test functions need a SampleSet")
    P = samples.points
    F = f.evaluate(P)
    G = np.linalg.norm(f.subgradient(P), axis=1)
    return Evaluation(P, F, G, np.zeros(len(P)), 0.0, "mc", False)


def _axisym_ok(spec: MeasureSpec, f: TestFunction) -> bool:
    k = spec.space.kind
    if f.region is None or f.local is None or not f.region.polar:
        return False
    if isinstance(k, StepTwo):
        return k.m == 1 and (k.htype or k.n == 2)
    return isinstance(k, Grushin) and k.m == 1


def quadrature_moments(spec: MeasureSpec, f: TestFunction, integrands: Sequence[Callable],
                       rtol: float = 1e-4, axisym: Optional[bool] = None) -> tuple:
    """Cubature of int h_k(F, G, xi) dmu for each k; returns (values, errors, log_scale)."""
    sp = spec.space
    if sp.ambient_dim > 3:
        raise ValueError("quadrature needs ambient_dim <= 3")
    z, _ = ms.quadrature_Z(spec)
    n1 = sp.n1
    axisym = _axisym_ok(spec, f) if axisym is None else axisym
    reg = f.region
    if reg is None:
        R = ms.truncation_radius(spec)
        hw = geo.gauge_box(sp, R)
        polar = n1 == 2
        if polar:
            hw = hw.copy()
            hw[:n1] = R

        def to_xi(eta):
            return eta
    else:
        hw = np.asarray(reg.half_widths)
        polar = reg.polar and n1 == 2

        def to_xi(eta):
            return reg.to_xi(sp, eta)

    def fg(eta, xi):
        if reg is not None and f.local is not None:
            F, G = f.local(eta, xi)
        else:
            F, G = f.value(xi), f.grad(xi)
        return f.scale * F, np.linalg.norm(f.scale * G, axis=1)

    breaks = None
    if axisym:
        # (rho, tau): eta = rho e_1 + tau e_d, Jacobian |S^{n1-1}| rho^{n1-1}
        lo, hi = np.array([0.0, -hw[-1]]), np.array([hw[0], hw[-1]])

        def lift(u):
            eta = np.zeros((len(u), sp.ambient_dim))
            eta[:, 0], eta[:, -1] = u[:, 0], u[:, 1]
            return eta, _log_sphere_area(n1) + (n1 - 1) * np.log(np.maximum(u[:, 0], 1e-300))
    elif polar:
        lo = np.concatenate([[0.0, 0.0], -hw[2:]])
        hi = np.concatenate([[hw[0], 2 * math.pi], hw[2:]])

        def lift(u):
            eta = np.empty((len(u), sp.ambient_dim))
            eta[:, 0] = u[:, 0] * np.cos(u[:, 1])
            eta[:, 1] = u[:, 0] * np.sin(u[:, 1])
            eta[:, 2:] = u[:, 2:]
            return eta, np.log(np.maximum(u[:, 0], 1e-300))
    else:
        lo, hi = -hw.astype(float), hw.astype(float)
        x0 = -(reg.center[0] if reg is not None and not reg.group else 0.0)
        if n1 == 1 and lo[0] < x0 < hi[0]:
            # Hardy-type weights blow up on {x = 0} when n1 = 1; x - x0 = s|s| puts a
            # Jacobian 2|s| against them and s = 0 on a subregion face
            lo[0], hi[0] = -math.sqrt(x0 - lo[0]), math.sqrt(hi[0] - x0)

            def lift(u):
                eta = u.copy()
                eta[:, 0] = x0 + u[:, 0] * np.abs(u[:, 0])
                return eta, np.log(np.maximum(2 * np.abs(u[:, 0]), 1e-300))
            breaks = [np.where(np.arange(len(lo)) == 0, 0.0, np.clip(0.0, lo, hi))]
        else:
            def lift(u):
                return u, np.zeros(len(u))

    # log-shift so the integrand peaks near 1 even for supports far out
    probe = np.random.default_rng(0).uniform(lo, hi, (4096, len(lo)))
    shift = float(np.max(-geo.hom_norm(sp, to_xi(lift(probe)[0])) ** spec.p)) if reg is not None else 0.0

    def integrand(u):
        eta, logj = lift(u)
        xi = to_xi(eta)
        F, G = fg(eta, xi)
        w = np.exp(-geo.hom_norm(sp, xi) ** spec.p - shift + logj)
        cols = [np.asarray(h(F, G, xi), float) * w for h in integrands]
        return np.stack(cols, axis=-1)

    res = cubature(integrand, lo, hi, rule="gk15", rtol=rtol, atol=0.0, max_subdivisions=100_000,
                   points=breaks)
    if res.status != "converged":
        raise RuntimeError(f"cubature did not converge for {f.label}")
    est = np.asarray(res.estimate, float)
    if not np.all(np.isfinite(est)):
        raise NonIntegrableError(f"{f.label}: non-finite quadrature")
    return est, np.asarray(res.error, float), shift - math.log(z)


# -- reports ------------------------------------------------------------------------

@dataclass
class RatioReport:
    inequality: str
    function: str
    lhs: IntegralEstimate
    rhs_terms: list
    ratio: float
    stderr: float
    q: float
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"inequality": self.inequality, "function": self.function, "q": self.q,
                "params": self.params, "lhs": self.lhs.to_dict(),
                "rhs_terms": [t.to_dict() for t in self.rhs_terms],
                "ratio": self.ratio, "stderr": self.stderr}


@dataclass
class GrowthFit:
    epsilons: list
    betas: list
    fitted_sigma: float
    fit_residual: float
    log_betas: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(v):
            return float(v) if math.isfinite(v) else None
        return {"epsilons": [float(e) for e in self.epsilons], "betas": [clean(b) for b in self.betas],
                "log_betas": [clean(b) for b in self.log_betas], "fitted_sigma": self.fitted_sigma,
                "residual": self.fit_residual, **self.extras}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epsilon", "beta", "log_beta"])
        for e, b, lb in zip(self.epsilons, self.betas, self.log_betas):
            w.writerow([repr(float(e)), repr(float(b)), repr(float(lb))])
        return buf.getvalue()


def _delta_stderr(fun: Callable, m: np.ndarray, cov: np.ndarray) -> float:
    """First-order propagation of cov through fun at m (central differences)."""
    g = np.zeros(len(m))
    for i in range(len(m)):
        h = 1e-6 * max(abs(m[i]), 1e-300)
        up, dn = m.copy(), m.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (fun(up) - fun(dn)) / (2 * h)
    return float(math.sqrt(max(g @ cov @ g, 0.0)))


def _estimates(m, cov, log_scale, method, n) -> list:
    return [IntegralEstimate(float(m[i]), float(math.sqrt(max(cov[i, i], 0.0))), method, n, float(log_scale))
            for i in range(len(m))]


def _collect(spec, f, integrands, method, samples, n_region, seed):
    if method == "quadrature":
        est, err, ls = quadrature_moments(spec, f, integrands)
        return est, np.diag(err ** 2), ls, "quadrature", 0
    if method != "mc":
        raise ValueError(f"unknown method {method!r}")
    ev = evaluate(spec, f, samples, n_region, seed)
    H = np.stack([h(ev.F, ev.G, ev.P) for h in integrands], axis=1)
    m, cov = ev.moments(H)
    return m, cov, ev.log_scale, ev.method, len(ev.P)


def _ratio_report(name, spec, f, q, integrands, combine, method, samples, n_region, seed, params,
                  rhs_coeffs=None) -> RatioReport:
    m, cov, ls, meth, n = _collect(spec, f, integrands, method, samples, n_region, seed)
    if rhs_coeffs is not None:
        c = np.concatenate([[1.0], rhs_coeffs])
        m, cov = m * c, cov * np.outer(c, c)
    ratio = float(combine(m))
    est = _estimates(m, cov, ls, meth, n)
    if not math.isfinite(ratio):
        raise NonIntegrableError(f"{name}: non-finite ratio for {f.label}")
    base = {"p": spec.p, "alpha": spec.space.alpha}
    base.update(params)
    return RatioReport(name, f.label, est[0], est[1:], ratio, _delta_stderr(combine, m, cov), q, base)


def _sum_ratio(m):
    return m[0] / np.sum(m[1:])


def _check_q(q, lo=1.0, hi=2.0, hi_open=False):
    if not (lo <= q <= hi) or (hi_open and q >= hi):
        raise ValueError(f"q={q} outside [{lo}, {hi}{')' if hi_open else ']'}")


def _check_p(spec: MeasureSpec, strict: bool = False):
    a = spec.space.alpha
    if spec.p < a + 1 - 1e-12 or (strict and spec.p <= a + 1):
        raise ValueError(f"p={spec.p} must be {'>' if strict else '>='} alpha+1={a + 1}")


def _xnorm(P, space):
    return geo.first_layer_norm(space, P)


def ubound_ratio(spec: MeasureSpec, q: float, f: TestFunction, method: str = "mc",
                 samples: Optional[SampleSet] = None, n_region: int = REGION_POINTS, seed: int = 0) -> RatioReport:
    """int |f|^q |x|^{q alpha} N^{q(p-alpha-1)} against int |grad f|^q + int |f|^q."""
    _check_q(q)
    _check_p(spec)
    sp, a, p = spec.space, spec.space.alpha, spec.p
    hs = [lambda F, G, P: np.abs(F) ** q * _xnorm(P, sp) ** (q * a) * geo.hom_norm(sp, P) ** (q * (p - a - 1)),
          lambda F, G, P: G ** q,
          lambda F, G, P: np.abs(F) ** q]
    return _ratio_report("ubound", spec, f, q, hs, _sum_ratio, method, samples, n_region, seed, {})


def merged_ubound_ratio(spec: MeasureSpec, q: float, f: TestFunction, method: str = "mc",
                        samples: Optional[SampleSet] = None, n_region: int = REGION_POINTS,
                        seed: int = 0) -> RatioReport:
    """Nondegenerate weight N^{q(p-alpha-1)/(alpha+1)}."""
    _check_q(q, hi_open=True)
    _check_p(spec, strict=True)
    sp, a, p = spec.space, spec.space.alpha, spec.p
    hs = [lambda F, G, P: np.abs(F) ** q * geo.hom_norm(sp, P) ** (q * (p - a - 1) / (a + 1)),
          lambda F, G, P: G ** q,
          lambda F, G, P: np.abs(F) ** q]
    return _ratio_report("merged_ubound", spec, f, q, hs, _sum_ratio, method, samples, n_region, seed, {})


def hardy_ratio(spec: MeasureSpec, q: float, f: TestFunction, method: str = "mc",
                samples: Optional[SampleSet] = None, n_region: int = REGION_POINTS, seed: int = 0) -> RatioReport:
    """int |f|^q |x|^-q against int |grad f|^q + int |f|^q (needs n1 >= 2)."""
    sp = spec.space
    if sp.n1 < 2:
        raise ValueError("the Hardy inequality needs n1 >= 2; use almost_hardy_ratio")
    _check_q(q, hi=2.0, hi_open=sp.n1 == 2)
    with np.errstate(divide="ignore"):
        hs = [lambda F, G, P: np.where(F != 0, np.abs(F) ** q / _xnorm(P, sp) ** q, 0.0),
              lambda F, G, P: G ** q,
              lambda F, G, P: np.abs(F) ** q]
        return _ratio_report("hardy", spec, f, q, hs, _sum_ratio, method, samples, n_region, seed, {})


def almost_hardy_coefficients(delta: float, R0: float) -> tuple:
    return (R0 ** delta / delta, R0 ** delta / delta, R0 ** (-(1.0 - delta)))


def almost_hardy_ratio(spec: MeasureSpec, delta: float, R0: float, f: TestFunction, method: str = "mc",
                       samples: Optional[SampleSet] = None, n_region: int = REGION_POINTS,
                       seed: int = 0) -> RatioReport:
    """int |f| |x|^{-(1-delta)} against the three weighted terms (grad, U_1, mass) for n1 = 1."""
    sp, a, p = spec.space, spec.space.alpha, spec.p
    if sp.n1 != 1:
        raise ValueError("almost_hardy_ratio is for spaces with n1 = 1")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta={delta} outside (0, 1)")
    with np.errstate(divide="ignore"):
        hs = [lambda F, G, P: np.where(F != 0, np.abs(F) / _xnorm(P, sp) ** (1.0 - delta), 0.0),
              lambda F, G, P: G,
              lambda F, G, P: np.abs(F) * _xnorm(P, sp) ** a * geo.hom_norm(sp, P) ** (p - a - 1),
              lambda F, G, P: np.abs(F)]
        coeffs = np.array(almost_hardy_coefficients(delta, R0))
        return _ratio_report("almost_hardy", spec, f, 1.0, hs, _sum_ratio, method, samples, n_region, seed,
                             {"delta_hardy": delta, "R0": R0, "coefficients": coeffs.tolist()}, coeffs)


def ckn_ratio(spec: MeasureSpec, q: float, f: TestFunction, method: str = "mc",
              samples: Optional[SampleSet] = None, n_region: int = REGION_POINTS, seed: int = 0) -> RatioReport:
    """int |f|^q against (int |f|^q |x|^{q alpha})^{1/(a+1)} (int |grad f|^q + int |f|^q)^{a/(a+1)}."""
    _check_q(q)
    _check_p(spec)
    sp, a = spec.space, spec.space.alpha
    hs = [lambda F, G, P: np.abs(F) ** q,
          lambda F, G, P: np.abs(F) ** q * _xnorm(P, sp) ** (q * a),
          lambda F, G, P: G ** q]

    def combine(m):
        return m[0] / (m[1] ** (1 / (a + 1)) * (m[2] + m[0]) ** (a / (a + 1)))

    rep = _ratio_report("ckn", spec, f, q, hs, combine, method, samples, n_region, seed,
                        {"constant_C": sp.n1 - 1 + a * (q - 1)})
    return rep


# -- super-Poincare ---------------------------------------------------------------

def spi_log_terms(spec: MeasureSpec, q: float, f: TestFunction, method: str = "mc",
                  samples: Optional[SampleSet] = None, n_region: int = REGION_POINTS, seed: int = 0) -> tuple:
    """(int|f|^q, int|grad f|^q, int|f|^{q/2}) in a common scale: (values, log_scale)."""
    hs = [lambda F, G, P: np.abs(F) ** q, lambda F, G, P: G ** q, lambda F, G, P: np.abs(F) ** (q / 2)]
    if method == "axisym":
        est, _, ls = quadrature_moments(spec, f, hs, axisym=True)
        return est, ls
    m, _, ls, _, _ = _collect(spec, f, hs, method, samples, n_region, seed)
    return m, ls


def required_log_beta(terms: np.ndarray, log_scale: float, epsilon) -> np.ndarray:
    """log of the smallest beta making the q-super-Poincare inequality hold (-inf when it is 0)."""
    I1, I2, I3 = terms
    if I3 <= 0:
        raise ValueError("int |f|^{q/2} dmu vanishes")
    eps = np.asarray(epsilon, float)
    num = I1 - eps * I2
    with np.errstate(divide="ignore"):
        return np.where(num > 0, np.log(np.maximum(num, 1e-300)) - 2 * math.log(I3) - log_scale, -np.inf)


def spi_required_beta(spec: MeasureSpec, q: float, f: TestFunction, epsilon: float, **kw) -> float:
    terms, ls = spi_log_terms(spec, q, f, **kw)
    lb = float(required_log_beta(terms, ls, epsilon))
    return 0.0 if lb == -math.inf else math.exp(min(lb, 709.0)) if lb < 709.0 else math.inf


def probe_function(spec: MeasureSpec, t: float, q: float = 2.0) -> TestFunction:
    """Bump of radius t^{1 - p/(alpha+1)} centred at the dilate by t of the unit axis point."""
    sp = spec.space
    r = t ** (1.0 - spec.p / (sp.alpha + 1.0))
    return bump(sp, geo.dilate(sp, t, axis_point(sp)), r)


def spi_optimality_probe(spec: MeasureSpec, t_grid: Sequence[float], q: float = 2.0, method: str = "auto",
                         samples: Optional[SampleSet] = None, n_region: int = REGION_POINTS,
                         seed: int = 0) -> GrowthFit:
    """Lower-bound growth of beta_q(eps) from localised probes, fitted to exp(C eps^-sigma).

    The schedule is eps_t = c r_t^q with c = 1/(2 max_t rho_t), rho_t = r_t^q int|grad phi|^q / int|phi|^q,
    which keeps the subtracted gradient term below half of int |phi|^q at every t.
    """
    sp = spec.space
    k = sp.kind
    if not ((isinstance(k, StepTwo) and (k.htype or (k.n == 2 and k.m == 1))) or isinstance(k, Grushin)):
        raise ValueError("the optimality probe is defined for H-type and Grushin spaces")
    _check_p(spec, strict=True)
    _check_q(q)
    t_grid = sorted(float(t) for t in t_grid)
    if len(t_grid) < 4:
        raise ValueError("t_grid needs at least 4 points for a stable fit")
    probes = [probe_function(spec, t, q) for t in t_grid]
    if method == "auto":
        method = "axisym" if _axisym_ok(spec, probes[0]) else "mc"
    rows = [spi_log_terms(spec, q, f, method, samples, n_region, seed) for f in probes]
    radii = np.array([f.params["radius"] for f in probes])
    rho = np.array([r ** q * m[1] / m[0] for r, (m, _) in zip(radii, rows)])
    c = 1.0 / (2.0 * rho.max())
    eps = c * radii ** q
    log_betas = np.array([float(required_log_beta(m, ls, e)) for (m, ls), e in zip(rows, eps)])
    if np.any(log_betas <= 0):
        raise ArithmeticError("probe beta below 1; enlarge t_grid")
    A = np.stack([np.ones_like(eps), np.log(eps)], axis=1)
    y = np.log(log_betas)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    # displayed lower bound int phi^2 dmu >~ r^Q exp(-t^p N(xi_0)^p), log margin per t
    z, _ = spec.require_z()
    margins = [float(math.log(m[0]) + ls - (sp.Q * math.log(r) - t ** spec.p - math.log(z)))
               for (m, ls), r, t in zip(rows, radii, t_grid)]
    order = np.argsort(-eps)
    return GrowthFit([float(e) for e in eps[order]], [math.exp(b) if b < 709 else math.inf for b in log_betas[order]],
                     float(-coef[1]), resid, [float(b) for b in log_betas[order]],
                     {"t_grid": [t_grid[i] for i in order], "schedule_constant": float(c),
                      "target_sigma": spec.p / (spec.p - 2) if q == 2 else None,
                      "lower_bound_log_margin": [margins[i] for i in order], "method": method})


def growth_exponent(alpha: float, p: float, q: float) -> float:
    return p * (alpha + 1) / (q * (p - alpha - 1))


def comparison_constant(space: Space, p: float, n_points: int = 12, seed: int = 0) -> float:
    """(max N / d_upper)^p over unit-gauge points, d_upper from explicit horizontal paths.

    Because the path length only bounds d from above, this is a lower estimate of
    sup over d-balls of N^p / R^p.
    """
    rng = stream(seed, tag("comparison"))
    pts = geo.unit_sphere_points(space, rng, n_points)
    best = 0.0
    for P in pts:
        _, upper = cc_sandwich(space, P)
        best = max(best, float(geo.hom_norm(space, P)) / upper)
    return best ** p


def constructive_beta_curve(spec: MeasureSpec, q: float, epsilons: Sequence[float],
                            C: Optional[float] = None, seed: int = 0) -> GrowthFit:
    """Upper-bound curve log beta = log(1 + eps^-Q) + C eps^{-p/gamma} with R = eps^{-1/gamma}."""
    _check_p(spec, strict=True)
    sp = spec.space
    eps = np.array(sorted((float(e) for e in epsilons), reverse=True))
    if len(eps) < 2 or np.any(eps <= 0):
        raise ValueError("need at least two positive epsilons")
    gamma = q * (spec.p - sp.alpha - 1) / (sp.alpha + 1)
    C = comparison_constant(sp, spec.p, seed=seed) if C is None else float(C)
    poly = np.log1p(eps ** (-sp.Q))
    expo = C * eps ** (-spec.p / gamma)
    log_betas = poly + expo
    y = np.log(log_betas - poly)
    A = np.stack([np.ones_like(eps), np.log(eps)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return GrowthFit(eps.tolist(), [math.exp(b) if b < 709 else math.inf for b in log_betas],
                     float(-coef[1]), resid, log_betas.tolist(),
                     {"C": C, "gamma": gamma, "target_sigma": growth_exponent(sp.alpha, spec.p, q),
                      "R": (eps ** (-1 / gamma)).tolist()})


# -- F-Sobolev and Cheeger ---------------------------------------------------------

def fsobolev_theta(alpha: float, p: float) -> float:
    return (p - alpha - 1) / (p * (alpha + 1))


def fsobolev_ratio(spec: MeasureSpec, f: TestFunction, theta: Optional[float] = None,
                   samples: Optional[SampleSet] = None, n_region: int = REGION_POINTS, seed: int = 0) -> RatioReport:
    """int |g| log(1+|g|)^theta for g = f / int|f| dmu, against (int |grad g|, 1)."""
    sp = spec.space
    theta = fsobolev_theta(sp.alpha, spec.p) if theta is None else float(theta)
    ev = evaluate(spec, f, samples, n_region, seed)
    absF = np.abs(ev.F)
    m1, _ = ev.moments(absF)
    if not m1[0] > 0:
        raise ValueError(f"{f.label}: int |f| dmu vanishes")
    log_mass = math.log(m1[0]) + ev.log_scale
    with np.errstate(divide="ignore"):
        lg = np.log(absF) - log_mass                 # log |g|
    log1p_g = np.logaddexp(0.0, lg)
    # fold 1/mass into the weights so huge |g| on far supports never materialises
    w = np.exp(ev.logw + ev.log_scale - log_mass)
    with np.errstate(invalid="ignore", over="ignore"):
        h_lhs = np.where(absF > 0, absF * log1p_g ** theta, 0.0)
    V = np.stack([h_lhs, ev.G, absF], axis=1) * w[:, None]
    if ev.iid:
        m, cov = V.mean(axis=0), np.atleast_2d(np.cov(V, rowvar=False)) / len(V)
    else:
        m, cov = ms.batch_means(V)
    est = _estimates(m, cov, 0.0, ev.method, len(V))
    est[2] = IntegralEstimate(1.0, est[2].stderr, ev.method, len(V))
    return RatioReport("fsobolev", f.label, est[0], [est[1], IntegralEstimate(1.0, 0.0, "exact", 0)],
                       float(m[0] / (m[1] + 1.0)), _delta_stderr(lambda v: v[0] / (v[1] + 1.0), m[:2], cov[:2, :2]),
                       1.0, {"p": spec.p, "alpha": sp.alpha, "theta": theta, "normalisation": float(m[2])})


def fsobolev_majorant(reports: Sequence[RatioReport], margin: float = 0.10) -> tuple:
    """(c1, c2): least-squares slope (clipped at 0), then the smallest intercept covering every member, both inflated."""
    g = np.array([r.rhs_terms[0].value for r in reports])
    L = np.array([r.lhs.value for r in reports])
    if len(g) >= 2 and np.ptp(g) > 0:
        c1 = max(0.0, float(np.polyfit(g, L, 1)[0]))
    else:
        c1 = 0.0
    c2 = float(np.max(L - c1 * g))
    return (1 + margin) * c1, (1 + margin) * max(c2, 0.0)


def weighted_median(values: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    v = np.asarray(values, float)
    if weights is None:
        return float(np.median(v))
    o = np.argsort(v, kind="stable")
    cw = np.cumsum(np.asarray(weights, float)[o])
    return float(v[o][np.searchsorted(cw, 0.5 * cw[-1])])


def cheeger_ratio(spec: MeasureSpec, f: TestFunction, samples: SampleSet, m: Optional[float] = None) -> RatioReport:
    """int |f - m| dmu against int |grad f| dmu, with m the mu-median of f by default."""
    sp = spec.space
    if abs(spec.p - (sp.alpha + 1)) > 1e-12:
        raise ValueError(f"the Cheeger endpoint needs p = alpha + 1 = {sp.alpha + 1}")
    if f.region is not None:
        raise ValueError("cheeger_ratio needs a globally supported f (the median is global)")
    ev = evaluate(spec, f, samples)
    med = weighted_median(ev.F) if m is None else float(m)
    mom, cov = ev.moments(np.stack([np.abs(ev.F - med), ev.G], axis=1))
    if not mom[1] > 0:
        raise ValueError(f"{f.label}: zero gradient integral (constant function)")
    est = _estimates(mom, cov, 0.0, ev.method, len(ev.P))
    return RatioReport("cheeger", f.label, est[0], [est[1]], float(mom[0] / mom[1]),
                       _delta_stderr(lambda v: v[0] / v[1], mom, cov), 1.0,
                       {"p": spec.p, "alpha": sp.alpha, "median": med})
