"""Subgradients, sublaplacians and pointwise certification of the gauge estimates."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import least_squares

from . import geometry as geo
from .geometry import Filiform, Greiner, Grushin, Space, StepTwo
from .rng import stream, tag

FD_STEP = 1e-5
FD_STEP_LAPLACIAN = 1e-4


class EvaluationError(FloatingPointError):
    pass


class PathBudgetError(RuntimeError):
    pass


@dataclass
class ScalarField:
    evaluate: Callable[[np.ndarray], np.ndarray]
    analytic_subgradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    label: str = ""


def norm_field(space: Space) -> ScalarField:
    return ScalarField(lambda p: geo.hom_norm(space, p), lambda p: geo.norm_subgradient(space, p), "N")


def first_layer_norm_field(space: Space) -> ScalarField:
    def grad(p):
        p = np.asarray(p, float)
        x = p[..., : space.n1]
        xn = np.linalg.norm(x, axis=-1, keepdims=True)
        out = np.zeros(p.shape[:-1] + (space.n_fields,))
        # field i acts as d/dx_i on the first layer for every kind here
        out[..., : space.n1] = x / xn
        return out
    return ScalarField(lambda p: geo.first_layer_norm(space, p), grad, "|x|")


def _check(values: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise EvaluationError(f"non-finite values while evaluating {what}")
    return values


def _steps(space: Space, p: np.ndarray, h: float) -> np.ndarray:
    # proportional to N, so the stencil at dilate(lam, p) is the dilated stencil at p
    N = geo.hom_norm(space, p)
    return h * np.where(N > 0, N, 1.0)


def _fd_subgradient(space: Space, f: Callable, p: np.ndarray, h: float) -> np.ndarray:
    p = np.atleast_2d(p)
    C = geo.frame_coefficients(space, p)                   # (k, l, d)
    s = _steps(space, p, h)[:, None, None]
    shifted = np.concatenate([p[:, None, :] + s * C, p[:, None, :] - s * C], axis=1)
    vals = np.asarray(f(shifted.reshape(-1, space.ambient_dim)), float).reshape(len(p), 2, space.n_fields)
    return (vals[:, 0] - vals[:, 1]) / (2 * s[:, :, 0])


def subgradient(space: Space, f: ScalarField, p, mode: str = "fd", h: float = FD_STEP) -> np.ndarray:
    """(X_1 f, ..., X_l f) at p by closed form (``mode='exact'``) or central differences."""
    p = geo.as_points(space, p)
    single = p.ndim == 1
    if mode == "exact":
        if f.analytic_subgradient is None:
            raise ValueError(f"field {f.label!r} has no analytic subgradient")
        out = np.asarray(f.analytic_subgradient(np.atleast_2d(p)), float)
    elif mode == "fd":
        out = _fd_subgradient(space, f.evaluate, p, h)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    _check(out, f"subgradient of {f.label or 'field'}")
    return out[0] if single else out


def sublaplacian(space: Space, f: ScalarField, p, mode: str = "fd", h: float = FD_STEP_LAPLACIAN) -> np.ndarray:
    """sum_i X_i (X_i f) by central differences along each field.

    The inner derivative X_i f uses the analytic subgradient when ``f`` has one
    and is itself a central difference otherwise (nested stencil).
    """
    if mode != "fd":
        raise ValueError("sublaplacian is only available in fd mode")
    p = geo.as_points(space, p)
    single = p.ndim == 1
    P = np.atleast_2d(p)
    C = geo.frame_coefficients(space, P)
    s = _steps(space, P, h)
    if np.any(s * 1e-3 < np.finfo(float).tiny):
        raise EvaluationError("finite-difference step underflow")

    def inner(q):
        if f.analytic_subgradient is not None:
            return np.asarray(f.analytic_subgradient(q), float)
        return _fd_subgradient(space, f.evaluate, q, h)

    total = np.zeros(len(P))
    for i in range(space.n_fields):
        ci = C[:, i, :]
        gp = inner(P + s[:, None] * ci)[:, i]
        gm = inner(P - s[:, None] * ci)[:, i]
        total += (gp - gm) / (2 * s)
    _check(total, f"sublaplacian of {f.label or 'field'}")
    return total[0] if single else total


# -- estimate certification -----------------------------------------------------

@dataclass
class EstimateCheck:
    name: str
    min_ratio: float
    max_ratio: float
    argmax: list
    argmin: list
    sample_count: int


@dataclass
class EstimateReport:
    space: str
    alpha: float
    exclusion_radius: float
    checks: list = field(default_factory=list)

    def by_name(self, name: str) -> EstimateCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "min", "max", "n", "exclusion_radius"])
        for c in self.checks:
            w.writerow([c.name, repr(c.min_ratio), repr(c.max_ratio), c.sample_count, repr(self.exclusion_radius)])
        return buf.getvalue()


def _summarize(name: str, ratio: np.ndarray, cloud: np.ndarray) -> EstimateCheck:
    _check(ratio, name)
    i_max, i_min = int(np.argmax(ratio)), int(np.argmin(ratio))
    return EstimateCheck(name, float(ratio[i_min]), float(ratio[i_max]),
                         cloud[i_max].tolist(), cloud[i_min].tolist(), int(len(ratio)))


def check_estimates(space: Space, alpha: float, cloud, exclusion_radius: float = 1e-3,
                    mode: str = "auto") -> EstimateReport:
    """Measure the ratios whose boundedness the gauge hypotheses assert.

    Checks (ratios should stay in (0, C] over the cloud):
      grad_lower / grad_upper   |grad N| N^a / |x|^a   (min, resp. max, is the bound)
      laplacian                 Delta N N^(2a+1) / |x|^(2a)
      cross                     (grad N . grad |x|) N^(2a+1) / |x|^(2a+1)
      comparison                |x| / N
    Filiform spaces additionally get ``x1_lower``:
      X_1 N X_1|x_1| N^(n-1) / |x_1|^(n-1).

    ``mode='auto'`` differentiates N and |x| in closed form (only Delta N is a
    finite difference); ``mode='fd'`` uses finite differences throughout.
    """
    cloud = np.atleast_2d(geo.as_points(space, cloud))
    xn = geo.first_layer_norm(space, cloud)
    N = geo.hom_norm(space, cloud)
    keep = (xn > exclusion_radius) & (N > exclusion_radius)
    cloud, xn, N = cloud[keep], xn[keep], N[keep]
    if len(cloud) == 0:
        raise ValueError("cloud is empty after excluding the singular locus")
    Nf = norm_field(space)
    xf = first_layer_norm_field(space)
    gm = "exact" if mode == "auto" else mode
    gN = subgradient(space, Nf, cloud, gm)
    gx = subgradient(space, xf, cloud, gm)
    if mode == "fd":
        Nf = ScalarField(Nf.evaluate, None, Nf.label)
    lapN = sublaplacian(space, Nf, cloud)
    a = alpha
    grad_ratio = np.linalg.norm(gN, axis=-1) * N ** a / xn ** a
    checks = [
        _summarize("grad_lower", grad_ratio, cloud),
        _summarize("grad_upper", grad_ratio, cloud),
        _summarize("laplacian", lapN * N ** (2 * a + 1) / xn ** (2 * a), cloud),
        _summarize("cross", np.sum(gN * gx, axis=-1) * N ** (2 * a + 1) / xn ** (2 * a + 1), cloud),
        _summarize("comparison", xn / N, cloud),
    ]
    if isinstance(space.kind, Filiform):
        n = int(space.kind.n)
        x1 = np.abs(cloud[:, 0])
        prod = gN[:, 0] * np.sign(cloud[:, 0])
        checks.append(_summarize("x1_lower", prod * N ** (n - 1) / x1 ** (n - 1), cloud))
    return EstimateReport(space.describe(), float(alpha), float(exclusion_radius), checks)


# -- horizontal paths and the distance sandwich -------------------------------------

@dataclass
class HorizontalPath:
    """Piecewise-constant controls; segment k flows along sum_i u_k[i] X_i for unit time."""
    controls: list

    @property
    def length(self) -> float:
        return float(sum(np.linalg.norm(u) for u in self.controls))

    def scaled(self, lam: float) -> "HorizontalPath":
        return HorizontalPath([lam * np.asarray(u) for u in self.controls])


def flow(space: Space, start, u, substeps: int = 64) -> np.ndarray:
    """RK4 integration of xi' = sum_i u_i X_i(xi) over unit time."""
    y = np.array(start, dtype=float)
    u = np.asarray(u, dtype=float)
    dt = 1.0 / substeps

    def rhs(z):
        return u @ geo.frame_coefficients(space, z)

    for _ in range(substeps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * dt * k1)
        k3 = rhs(y + 0.5 * dt * k2)
        k4 = rhs(y + dt * k3)
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def endpoint(space: Space, path: HorizontalPath, start=None) -> np.ndarray:
    y = geo.identity(space) if start is None else np.asarray(start, float)
    for u in path.controls:
        y = flow(space, y, u)
    return y


def _unit(space: Space, i: int, s: float) -> np.ndarray:
    u = np.zeros(space.n_fields)
    u[i] = s
    return u


def _square_loop(space: Space, i: int, j: int, a: float, b: float) -> list:
    return [_unit(space, i, a), _unit(space, j, b), _unit(space, i, -a), _unit(space, j, -b)]


def _path_step_two(space: Space, p: np.ndarray, budget: int) -> HorizontalPath:
    n, m = space.n1, space.rest
    x, t = p[:n], p[n:]
    cols, pairs = [], []
    for i in range(n):
        for j in range(i + 1, n):
            v = endpoint(space, HorizontalPath(_square_loop(space, i, j, 1.0, 1.0)))[n:]
            trial = np.array(cols + [v])
            if np.linalg.matrix_rank(trial, tol=1e-10) > len(cols):
                cols.append(v)
                pairs.append((i, j))
            if len(cols) == m:
                break
        if len(cols) == m:
            break
    w = np.linalg.solve(np.array(cols).T, t)
    controls = []
    for (i, j), wk in zip(pairs, w):
        if abs(wk) > 0:
            a = math.sqrt(abs(wk))
            controls += _square_loop(space, i, j, a, math.copysign(a, wk))
    if np.linalg.norm(x) > 0:
        controls.append(np.r_[x, np.zeros(space.n_fields - n)])
    if len(controls) > budget:
        raise PathBudgetError(f"path needs {len(controls)} segments, budget is {budget}")
    return HorizontalPath(controls)


def _path_greiner(space: Space, p: np.ndarray, budget: int) -> HorizontalPath:
    n, z = space.kind.n, int(space.kind.zeta)
    r, t = p[: 2 * n], p[-1]
    controls = []
    if t != 0:
        v = endpoint(space, HorizontalPath(_square_loop(space, 0, n, 1.0, 1.0)))[-1]
        a = (abs(t) / abs(v)) ** (1.0 / (2 * z))
        controls += _square_loop(space, 0, n, a, a * np.sign(t) * np.sign(v))
    if np.linalg.norm(r) > 0:
        controls.append(r.copy())
    if len(controls) > budget:
        raise PathBudgetError(f"path needs {len(controls)} segments, budget is {budget}")
    return HorizontalPath(controls)


def _path_grushin(space: Space, p: np.ndarray, budget: int) -> HorizontalPath:
    n, eta = space.kind.n, space.kind.eta
    x, y = p[:n], p[n:]
    dy = float(np.linalg.norm(y))
    xl = float(np.linalg.norm(x))
    if dy == 0:
        return HorizontalPath([np.r_[x, np.zeros(space.rest)]])
    e = x / xl if xl > 0 else np.eye(n)[0]
    c = max(xl, (eta * dy / 2.0) ** (1.0 / (1.0 + eta)))
    controls = [np.r_[c * e, np.zeros(space.rest)],
                np.r_[np.zeros(n), y / c ** eta],
                np.r_[x - c * e, np.zeros(space.rest)]]
    controls = [u for u in controls if np.linalg.norm(u) > 0]
    if len(controls) > budget:
        raise PathBudgetError(f"path needs {len(controls)} segments, budget is {budget}")
    return HorizontalPath(controls)


def _filiform_endpoint(lengths: np.ndarray, n: int) -> np.ndarray:
    """Exact endpoint of alternating X_1 / X_2 segments started at the origin."""
    y = np.zeros(n + 1)
    fact = np.array([math.factorial(k) for k in range(n)], float)
    for k, s in enumerate(lengths):
        if k % 2 == 0:
            y[0] += s
        else:
            y[1] += s
            y[2:] += s * y[0] ** np.arange(1, n) / fact[1:]
    return y


def _path_filiform(space: Space, p: np.ndarray, budget: int) -> HorizontalPath:
    n = int(space.kind.n)
    nseg = min(budget, 2 * (n + 1))
    if nseg < n + 1:
        raise PathBudgetError(f"filiform path needs at least {n + 1} segments, budget is {budget}")
    rng = stream(0, tag("filiform-path"))
    best = None
    for _ in range(40):
        x0 = rng.normal(scale=1.0, size=nseg)
        sol = least_squares(lambda s: _filiform_endpoint(s, n) - p, x0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
        if np.max(np.abs(sol.fun)) < 1e-11:
            L = float(np.sum(np.abs(sol.x)))
            if best is None or L < best[0]:
                best = (L, sol.x)
    if best is None:
        raise PathBudgetError("could not steer to the target within the segment budget")
    controls = [_unit(space, k % 2, s) for k, s in enumerate(best[1])]
    return HorizontalPath(controls)


def horizontal_path(space: Space, p, path_budget: int = 64) -> HorizontalPath:
    """Horizontal path from the origin to p, built at unit gauge and dilated back."""
    p = geo.as_points(space, p)
    N = float(geo.hom_norm(space, p))
    if N == 0:
        raise ValueError("target must differ from the origin")
    q = geo.dilate(space, 1.0 / N, p)
    k = space.kind
    if isinstance(k, StepTwo):
        path = _path_step_two(space, q, path_budget)
    elif isinstance(k, Greiner):
        path = _path_greiner(space, q, path_budget)
    elif isinstance(k, Grushin):
        path = _path_grushin(space, q, path_budget)
    else:
        path = _path_filiform(space, q, path_budget)
    err = np.max(np.abs(endpoint(space, path) - q))
    if err > 1e-8:
        raise PathBudgetError(f"constructed path misses its target by {err:.3g}")
    return path.scaled(N)


def cc_sandwich(space: Space, p, path_budget: int = 64) -> tuple[float, float]:
    """(lower, upper) bounds on the Carnot-Caratheodory distance d(0, p).

    lower is the euclidean length of the horizontal-layer projection (horizontal
    fields move it at unit speed at most); upper is the length of an explicit
    horizontal path.
    """
    p = geo.as_points(space, p)
    lower = float(np.linalg.norm(p[list(space.horizontal_dims)]))
    upper = horizontal_path(space, p, path_budget).length
    return lower, upper
