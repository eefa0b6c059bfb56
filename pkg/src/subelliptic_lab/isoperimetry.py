"""Surface measures by enlargement, the one-dimensional model profile, and candidate-set scans."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import gammainc, gammaincinv

from . import geometry as geo
from .geometry import Filiform, Space
from .measures import MeasureSpec, SampleSet, batch_means
from .rng import stream, tag

DEFAULT_EPS = (0.08, 0.04, 0.02)


def r_exponent(space: Space, p: float, variant: str = "main", delta: Optional[float] = None) -> float:
    """Isoperimetric exponent r for I_mu >~ U_r.

    ``main``: (a+1)p / ((a+1) + a p); ``almost``: the delta-softened version;
    ``filiform``: pn / (n + p(n-1)) for the filiform group of step n.
    """
    a = space.alpha
    if variant == "filiform":
        if not isinstance(space.kind, Filiform):
            raise ValueError("the filiform variant needs a Filiform space")
        n = space.kind.n
        if p < n:
            raise ValueError(f"p={p} below the threshold n={n}")
        return p * n / (n + p * (n - 1))
    if p < a + 1 - 1e-12:
        raise ValueError(f"p={p} below the threshold alpha+1={a + 1}")
    if variant == "main":
        return (a + 1) * p / ((a + 1) + a * p)
    if variant == "almost":
        if delta is None or not 0.0 < delta <= 1.0:
            raise ValueError("the almost variant needs delta in (0, 1]")
        return (a + 1 - delta) * p / (a + 1 - delta + a * (p - delta))
    raise ValueError(f"unknown variant {variant!r}")


class ModelProfile:
    """Profile t -> rho(F^-1(t)) of d(nu_r) = e^{-|x|^r} dx / Z on the line.

    Half-lines are extremal for even log-concave measures on R, so this is the
    exact isoperimetric profile of nu_r.
    """

    def __init__(self, r: float):
        if not 1.0 <= r <= 2.0:
            raise ValueError(f"r={r} outside [1, 2]")
        self.r = float(r)
        self.Z = 2.0 * gamma_fn(1.0 + 1.0 / self.r)

    def density(self, x) -> np.ndarray:
        return np.exp(-np.abs(x) ** self.r) / self.Z

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return 0.5 + 0.5 * np.sign(x) * gammainc(1.0 / self.r, np.abs(x) ** self.r)

    def quantile(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        s = gammaincinv(1.0 / self.r, np.abs(1.0 - 2.0 * t)) ** (1.0 / self.r)
        return np.where(t < 0.5, -s, s)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        # work from the nearer tail so that e.g. r = 1 gives min(t, 1 - t) to rounding
        m = np.minimum(t, 1.0 - t)
        out = self.density(self.quantile(m))
        return np.where((t > 0) & (t < 1), out, 0.0)


def model_profile(r: float) -> ModelProfile:
    return ModelProfile(r)


def sample_model(r: float, n: int, seed: int = 0) -> SampleSet:
    """iid draws from nu_r on the line: |x|^r ~ Gamma(1/r) with a random sign."""
    rng = stream(seed, tag("model"), int(round(r * 1e6)))
    g = rng.gamma(1.0 / r, 1.0, n) ** (1.0 / r)
    s = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    return SampleSet((s * g)[:, None], int(seed), {"iid": True})


# -- sets -----------------------------------------------------------------------------

@dataclass(frozen=True)
class SetSpec:
    """A = {phi < level} (or {phi > level} when ``inside='>'``).

    The quasi-distance from outside points is the first-order estimate
    |phi - level| / |grad_H phi|, exact for coordinate half-spaces and tubes.
    """
    family: str
    params: dict
    phi: Callable
    grad_norm: Callable
    level: float
    inside: str = "<"

    @property
    def label(self) -> str:
        inner = ",".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.params.items())
        return f"{self.family}{{{inner}}}"

    def indicator(self, P) -> np.ndarray:
        v = self.phi(np.atleast_2d(P))
        return v < self.level if self.inside == "<" else v > self.level

    def quasi_distance(self, P) -> np.ndarray:
        P = np.atleast_2d(P)
        v = self.phi(P)
        gap = v - self.level if self.inside == "<" else self.level - v
        g = self.grad_norm(P)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(gap > 0, gap / g, 0.0)
        return np.where(np.isnan(d), np.inf, d)

    def complement(self) -> "SetSpec":
        return SetSpec(f"complement[{self.family}]", self.params, self.phi, self.grad_norm, self.level,
                       ">" if self.inside == "<" else "<")


def norm_sublevel(space: Space, c: float) -> SetSpec:
    return SetSpec("norm_sublevel", {"c": float(c)}, lambda P: geo.hom_norm(space, P),
                   lambda P: np.linalg.norm(geo.norm_subgradient(space, P), axis=-1), float(c))


def halfspace(space: Space, coordinate: int, threshold: float) -> SetSpec:
    return SetSpec("halfspace", {"coordinate": int(coordinate), "threshold": float(threshold)},
                   lambda P: P[:, coordinate],
                   lambda P: np.linalg.norm(geo.frame_coefficients(space, P)[:, :, coordinate], axis=-1),
                   float(threshold))


def tube_set(space: Space, c: float) -> SetSpec:
    # every first-layer coordinate is moved by exactly one unit field, so |grad_H |x|| = 1
    return SetSpec("tube", {"c": float(c)}, lambda P: geo.first_layer_norm(space, P),
                   lambda P: np.ones(len(P)), float(c))


def halfline(threshold: float) -> SetSpec:
    """(-inf, a) on the line, for the one-dimensional model."""
    return SetSpec("halfline", {"threshold": float(threshold)}, lambda P: P[:, 0],
                   lambda P: np.ones(len(P)), float(threshold))


def sublevel_for_mass(spec: MeasureSpec, t: float) -> float:
    """c with mu(N < c) = t, from the exact law of N^p ~ Gamma(Q/p)."""
    return float(gammaincinv(spec.space.Q / spec.p, t) ** (1.0 / spec.p))


def default_zoo(spec: MeasureSpec, samples: SampleSet) -> list:
    """Five norm sublevels, four first-layer half-spaces, two tubes, one top-layer half-space.

    Thresholds other than the sublevels are quantiles of the supplied samples.
    """
    sp, P = spec.space, samples.points
    zoo = [norm_sublevel(sp, sublevel_for_mass(spec, t)) for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
    zoo += [halfspace(sp, 0, float(np.quantile(P[:, 0], t))) for t in (0.1, 0.3, 0.5, 0.8)]
    xn = geo.first_layer_norm(sp, P)
    zoo += [tube_set(sp, float(np.quantile(xn, t))) for t in (0.2, 0.6)]
    zoo.append(halfspace(sp, sp.ambient_dim - 1, float(np.quantile(P[:, -1], 0.3))))
    return zoo


# -- estimators -----------------------------------------------------------------------

@dataclass
class SurfaceEstimate:
    mu_plus: float
    stderr: float
    reliable: bool
    mass: float
    grid: list
    grid_values: list

    def __iter__(self):
        return iter((self.mu_plus, self.stderr))


def surface_measure(A: SetSpec, samples: SampleSet, eps_grid: Sequence[float] = DEFAULT_EPS,
                    spec: Optional[MeasureSpec] = None) -> SurfaceEstimate:
    """Minkowski content (mu(A_eps) - mu(A)) / eps extrapolated linearly to eps -> 0.

    The extrapolated value is used when the grid estimates are monotone within
    three standard errors; otherwise the smallest grid value is returned with
    ``reliable=False``. ``spec`` is accepted for symmetry with the other
    operations; the samples already encode mu.
    """
    eps = np.asarray(eps_grid, float)
    if len(eps) < 3 or np.any(np.diff(eps) >= 0) or eps[-1] <= 0:
        raise ValueError("eps_grid must be strictly decreasing, positive, with at least 3 values")
    P = samples.points
    d = A.quasi_distance(P)
    inside = A.indicator(P).astype(float)
    cols = [((d > 0) & (d < e)).astype(float) / e for e in eps]
    m, cov = batch_means(np.stack([inside] + cols, axis=1))
    mass, est, C = float(m[0]), m[1:], cov[1:, 1:]
    se = np.sqrt(np.maximum(np.diag(C), 0.0))
    diffs = np.diff(est)
    dse = np.sqrt(np.maximum(np.diag(C)[1:] + np.diag(C)[:-1] - 2 * np.diag(C, 1), 0.0))
    monotone = bool(np.all(diffs >= -3 * dse) or np.all(diffs <= 3 * dse))
    if np.all(est == 0):
        return SurfaceEstimate(0.0, 0.0, True, mass, eps.tolist(), est.tolist())
    if monotone:
        A_ = np.stack([np.ones_like(eps), eps], axis=1)
        w = np.linalg.pinv(A_)[0]           # intercept weights
        val = float(w @ est)
        err = float(math.sqrt(max(w @ C @ w, 0.0)))
        if val < 0:
            val, err = float(est.min()), float(se[np.argmin(est)])
        return SurfaceEstimate(val, err, True, mass, eps.tolist(), est.tolist())
    k = int(np.argmin(est))
    return SurfaceEstimate(float(est[k]), float(se[k]), False, mass, eps.tolist(), est.tolist())


@dataclass
class ProfilePoint:
    set_label: str
    t: float
    mu_plus: float
    stderr: float
    model: float
    ratio: float
    reliable: bool = True


@dataclass
class ProfileScan:
    r: float
    points: list
    c_min: float
    worst_set: str
    reliable: bool

    def to_dict(self) -> dict:
        return {"r": self.r, "c_min": self.c_min, "worst_set": self.worst_set, "reliable": self.reliable,
                "points": [p.__dict__ for p in self.points]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["set", "t", "mu_plus", "stderr", "model", "ratio"])
        for p in self.points:
            w.writerow([p.set_label, repr(p.t), repr(p.mu_plus), repr(p.stderr), repr(p.model), repr(p.ratio)])
        return buf.getvalue()


def profile_scan(spec: MeasureSpec, zoo: Sequence[SetSpec], r: float, samples: SampleSet,
                 eps_grid: Sequence[float] = DEFAULT_EPS) -> ProfileScan:
    """mu^+(A) against U_r(mu(A)) over candidate sets; c_min is the smallest ratio."""
    if not zoo:
        raise ValueError("empty zoo")
    U = ModelProfile(r)
    pts = []
    for A in zoo:
        s = surface_measure(A, samples, eps_grid, spec)
        model = float(U(s.mass))
        if not model > 0:
            raise ValueError(f"{A.label}: mass {s.mass} outside (0, 1)")
        pts.append(ProfilePoint(A.label, s.mass, s.mu_plus, s.stderr, model, s.mu_plus / model, s.reliable))
    worst = min(pts, key=lambda q: q.ratio)
    return ProfileScan(float(r), pts, worst.ratio, worst.set_label, all(q.reliable for q in pts))
