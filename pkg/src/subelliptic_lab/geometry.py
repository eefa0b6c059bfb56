"""Subelliptic model spaces: group laws, dilations, gauges and horizontal frames.

Points are plain float arrays whose last axis has length ``space.ambient_dim``;
every function here accepts either a single point ``(d,)`` or a batch
``(k, d)`` and returns arrays of matching leading shape.

Coordinate layout per kind::

    StepTwo   (x_1..x_n, t_1..t_m)              first layer x
    Grushin   (x_1..x_n, y_1..y_m)              first layer x
    Greiner   (x_1..x_n, y_1..y_n, t)           first layer r = (x, y)
    Filiform  (x_1, ..., x_{n+1})               first layer x_1
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

SKEW_TOL = 1e-12


class GeometryError(ValueError):
    """Raised for invalid space parameters or kind mismatches."""


@dataclass(frozen=True)
class StepTwo:
    n: int
    m: int
    B: tuple
    kappa: float = 16.0
    htype: bool = False

    def matrices(self) -> np.ndarray:
        return np.asarray(self.B, dtype=float).reshape(self.m, self.n, self.n)


@dataclass(frozen=True)
class Grushin:
    n: int
    m: int
    eta: float


@dataclass(frozen=True)
class Greiner:
    n: int
    zeta: int


@dataclass(frozen=True)
class Filiform:
    n: int


SpaceKind = Union[StepTwo, Grushin, Greiner, Filiform]


@dataclass(frozen=True)
class Space:
    kind: SpaceKind
    ambient_dim: int
    n1: int
    alpha: float
    Q: float
    dilation_weights: np.ndarray = field(compare=False)
    n_fields: int = 0
    horizontal_dims: tuple = ()

    @property
    def rest(self) -> int:
        return self.ambient_dim - self.n1

    @property
    def name(self) -> str:
        return type(self.kind).__name__

    def describe(self) -> str:
        k = self.kind
        if isinstance(k, StepTwo):
            return f"StepTwo(n={k.n}, m={k.m}, kappa={k.kappa:g})"
        if isinstance(k, Grushin):
            return f"Grushin(n={k.n}, m={k.m}, eta={k.eta:g})"
        if isinstance(k, Greiner):
            return f"Greiner(n={k.n}, zeta={k.zeta})"
        return f"Filiform(n={k.n})"


def _freeze(B) -> tuple:
    arr = np.asarray(B, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    return tuple(tuple(tuple(float(v) for v in row) for row in mat) for mat in arr)


def _validate_step_two(kind: StepTwo) -> None:
    if kind.n < 2 or kind.m < 1:
        raise GeometryError(f"StepTwo needs n >= 2 and m >= 1, got n={kind.n}, m={kind.m}")
    if not kind.kappa > 0:
        raise GeometryError(f"kappa must be positive, got {kind.kappa}")
    Bs = np.asarray(kind.B, dtype=float)
    if Bs.shape != (kind.m, kind.n, kind.n):
        raise GeometryError(f"B must have shape {(kind.m, kind.n, kind.n)}, got {Bs.shape}")
    for j, Bj in enumerate(Bs):
        if np.max(np.abs(Bj + Bj.T)) > SKEW_TOL * max(1.0, np.max(np.abs(Bj))):
            raise GeometryError(f"B[{j}] is not skew-symmetric")
    if np.linalg.matrix_rank(Bs.reshape(kind.m, -1)) < kind.m:
        raise GeometryError("the family B is linearly dependent")
    if kind.htype:
        eye = np.eye(kind.n)
        for i, Bi in enumerate(Bs):
            if not np.allclose(Bi.T @ Bi, eye, atol=1e-12):
                raise GeometryError(f"H-type flag: B[{i}] is not orthogonal")
            for j in range(i + 1, kind.m):
                if not np.allclose(Bi @ Bs[j] + Bs[j] @ Bi, 0.0, atol=1e-12):
                    raise GeometryError(f"H-type flag: B[{i}], B[{j}] do not anticommute")


def make_space(kind: SpaceKind) -> Space:
    """Validate ``kind`` and derive alpha, Q and the dilation weights."""
    if isinstance(kind, StepTwo):
        kind = StepTwo(kind.n, kind.m, _freeze(kind.B), float(kind.kappa), bool(kind.htype))
        _validate_step_two(kind)
        w = np.r_[np.ones(kind.n), 2.0 * np.ones(kind.m)]
        return Space(kind, kind.n + kind.m, kind.n, 1.0, float(kind.n + 2 * kind.m), w,
                     kind.n, tuple(range(kind.n)))
    if isinstance(kind, Grushin):
        if kind.n < 1 or kind.m < 1:
            raise GeometryError("Grushin needs n >= 1 and m >= 1")
        if not kind.eta > 0:
            raise GeometryError(f"eta must be positive, got {kind.eta}")
        eta = float(kind.eta)
        w = np.r_[np.ones(kind.n), (1.0 + eta) * np.ones(kind.m)]
        return Space(kind, kind.n + kind.m, kind.n, eta, kind.n + (1.0 + eta) * kind.m, w,
                     kind.n + kind.m, tuple(range(kind.n)))
    if isinstance(kind, Greiner):
        if kind.n < 1:
            raise GeometryError("Greiner needs n >= 1")
        if int(kind.zeta) != kind.zeta or kind.zeta < 1:
            raise GeometryError(f"zeta must be an integer >= 1, got {kind.zeta}")
        z = int(kind.zeta)
        w = np.r_[np.ones(2 * kind.n), [2.0 * z]]
        return Space(kind, 2 * kind.n + 1, 2 * kind.n, 2.0 * z - 1, 2.0 * kind.n + 2 * z, w,
                     2 * kind.n, tuple(range(2 * kind.n)))
    if isinstance(kind, Filiform):
        if int(kind.n) != kind.n or kind.n < 3:
            raise GeometryError(f"filiform step must be an integer >= 3, got {kind.n}")
        n = int(kind.n)
        # weights make the displayed gauge 1-homogeneous: x1, x2 -> 1, x_j -> j - 1, x_{n+1} -> n
        w = np.r_[1.0, 1.0, np.arange(2, n), float(n)]
        return Space(kind, n + 1, 1, float(n - 1), float(w.sum()), w, 2, (0, 1))
    raise GeometryError(f"unknown space kind {kind!r}")


def heisenberg(k: int = 1, kappa: float = 16.0) -> Space:
    """Isotropic Heisenberg group H^k as an H-type StepTwo space.

    Uses the orthogonal symplectic matrix J (entries +-1), which together with
    kappa = 16 makes the Kaplan gauge satisfy |grad N| = |x| / N exactly.
    """
    J = np.zeros((2 * k, 2 * k))
    J[:k, k:] = np.eye(k)
    J[k:, :k] = -np.eye(k)
    return make_space(StepTwo(2 * k, 1, _freeze(J), kappa, True))


def quaternionic_htype(kappa: float = 16.0) -> Space:
    """H-type group with n = 4, m = 3 (quaternionic Heisenberg)."""
    def lmul(a, b, c, d):
        return np.array([[a, -b, -c, -d], [b, a, -d, c], [c, d, a, -b], [d, -c, b, a]], float)
    Bs = [lmul(0, 1, 0, 0), lmul(0, 0, 1, 0), lmul(0, 0, 0, 1)]
    return make_space(StepTwo(4, 3, _freeze(Bs), kappa, True))


# -- point helpers -----------------------------------------------------------

def as_points(space: Space, p) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    if arr.shape[-1] != space.ambient_dim:
        raise GeometryError(f"point has length {arr.shape[-1]}, space needs {space.ambient_dim}")
    return arr


def first_layer(space: Space, p) -> np.ndarray:
    return as_points(space, p)[..., : space.n1]


def first_layer_norm(space: Space, p) -> np.ndarray:
    """Euclidean norm |x| of the block carrying the degenerate weight."""
    return np.linalg.norm(first_layer(space, p), axis=-1)


def identity(space: Space) -> np.ndarray:
    return np.zeros(space.ambient_dim)


# -- group law (step two only) -----------------------------------------------

def _require_step_two(space: Space) -> StepTwo:
    if not isinstance(space.kind, StepTwo):
        raise GeometryError(f"group law is only implemented for StepTwo, not {space.name}")
    return space.kind


def group_mul(space: Space, g, h) -> np.ndarray:
    """(x, t) o (xi, tau) = (x + xi, t + 1/2 <B x, xi>)."""
    kind = _require_step_two(space)
    g = as_points(space, g)
    h = as_points(space, h)
    n = kind.n
    x, t = g[..., :n], g[..., n:]
    xi, tau = h[..., :n], h[..., n:]
    Bx = np.einsum("jab,...b->...ja", kind.matrices(), x)
    twist = 0.5 * np.einsum("...ja,...a->...j", Bx, xi)
    return np.concatenate([x + xi, t + tau + twist], axis=-1)


def group_inv(space: Space, g) -> np.ndarray:
    _require_step_two(space)
    return -as_points(space, g)


# -- dilations and gauges ----------------------------------------------------

def dilate(space: Space, lam, p) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise GeometryError("dilation factor must be positive")
    p = as_points(space, p)
    return p * lam[..., None] ** space.dilation_weights if lam.ndim else p * lam ** space.dilation_weights


def _filiform_bracket(p: np.ndarray, n: int) -> np.ndarray:
    """The displayed ||x||^n sum for the filiform gauge."""
    a = np.abs(p[..., 0]) ** ((n + 1) / 2) + np.abs(p[..., 1]) ** ((n + 1) / 2)
    total = np.zeros(p.shape[:-1])
    for j in range(2, n + 1):
        total = total + (a + np.abs(p[..., j - 1]) ** ((n + 1) / (2 * (j - 1)))) ** (2 * n / (n + 1))
    return total


def hom_norm(space: Space, p) -> np.ndarray:
    """Homogeneous gauge N, 1-homogeneous under ``dilate``."""
    p = as_points(space, p)
    k = space.kind
    if isinstance(k, StepTwo):
        x2 = np.sum(p[..., : k.n] ** 2, axis=-1)
        t2 = np.sum(p[..., k.n:] ** 2, axis=-1)
        return (x2 * x2 + k.kappa * t2) ** 0.25
    if isinstance(k, Grushin):
        e = 1.0 + k.eta
        xn = np.sqrt(np.sum(p[..., : k.n] ** 2, axis=-1))
        y2 = np.sum(p[..., k.n:] ** 2, axis=-1)
        return (xn ** (2 * e) + e * e * y2) ** (1.0 / (2 * e))
    if isinstance(k, Greiner):
        z = int(k.zeta)
        r2 = np.sum(p[..., : 2 * k.n] ** 2, axis=-1)
        return (r2 ** (2 * z) + p[..., -1] ** 2) ** (1.0 / (4 * z))
    n = int(k.n)
    return (_filiform_bracket(p, n) + np.abs(p[..., n])) ** (1.0 / n)


def coordinate_gauge(space: Space) -> np.ndarray:
    """N(e_i) for each coordinate axis; N(s e_i) = c_i |s|^(1/w_i) for these gauges."""
    return hom_norm(space, np.eye(space.ambient_dim))


def gauge_box(space: Space, R: float) -> np.ndarray:
    """Half-widths of a coordinate box containing the ball {N < R}.

    Valid because each gauge is monotone in every |coordinate| separately, so
    N(p) >= N(p_i e_i) = c_i |p_i|^(1/w_i).
    """
    c = coordinate_gauge(space)
    return (R / c) ** space.dilation_weights


def unit_sphere_points(space: Space, rng: np.random.Generator, k: int) -> np.ndarray:
    """Points with N = 1 obtained by dilating Gaussian draws onto the unit sphere."""
    g = rng.standard_normal((k, space.ambient_dim))
    return dilate(space, 1.0 / hom_norm(space, g), g)


# -- horizontal frame ----------------------------------------------------------

def frame_coefficients(space: Space, p) -> np.ndarray:
    """Coefficients of the horizontal fields: shape ``(..., n_fields, ambient_dim)``.

    Row i holds the components of X_i at p, so X_i f(p) = grad_E f(p) . row_i.
    """
    p = as_points(space, p)
    lead = p.shape[:-1]
    d = space.ambient_dim
    k = space.kind
    C = np.zeros(lead + (space.n_fields, d))
    if isinstance(k, StepTwo):
        n = k.n
        C[..., :, :n] = np.eye(n)
        # X_i = d/dx_i + 1/2 sum_j (B^j x)_i d/dt_j  (left translation differentiated at e)
        Bx = np.einsum("jab,...b->...aj", k.matrices(), p[..., :n])
        C[..., :, n:] = 0.5 * Bx
    elif isinstance(k, Grushin):
        n, m = k.n, k.m
        C[..., :n, :n] = np.eye(n)
        xn = np.linalg.norm(p[..., :n], axis=-1)
        C[..., n:, n:] = (xn ** k.eta)[..., None, None] * np.eye(m)
    elif isinstance(k, Greiner):
        n, z = k.n, int(k.zeta)
        x, y = p[..., :n], p[..., n: 2 * n]
        r2 = np.sum(p[..., : 2 * n] ** 2, axis=-1)
        s = 2.0 * z * r2 ** (z - 1)
        C[..., :, : 2 * n] = np.eye(2 * n)
        C[..., :n, -1] = s[..., None] * y
        C[..., n:, -1] = -s[..., None] * x
    else:
        n = int(k.n)
        C[..., 0, 0] = 1.0
        C[..., 1, 1] = 1.0
        x1 = p[..., 0]
        for j in range(1, n):
            C[..., 1, j + 1] = x1 ** j / math.factorial(j)
    return C


def frame(space: Space) -> list[Callable[[np.ndarray], np.ndarray]]:
    """The horizontal fields as callables p -> coefficient vector in R^d."""
    return [(lambda p, i=i: frame_coefficients(space, p)[..., i, :]) for i in range(space.n_fields)]


def _filiform_euclidean_grad(p: np.ndarray, n: int) -> np.ndarray:
    """Euclidean gradient of the filiform gauge (valid off the coordinate hyperplanes)."""
    e = (n + 1) / 2
    ax1, ax2 = np.abs(p[..., 0]), np.abs(p[..., 1])
    a = ax1 ** e + ax2 ** e
    da1 = e * ax1 ** (e - 1) * np.sign(p[..., 0])
    da2 = e * ax2 ** (e - 1) * np.sign(p[..., 1])
    g = np.zeros(p.shape)
    power = 2 * n / (n + 1)
    for j in range(2, n + 1):
        ej = (n + 1) / (2 * (j - 1))
        axj = np.abs(p[..., j - 1])
        T = a + axj ** ej
        outer = power * T ** (power - 1)
        dT = ej * axj ** (ej - 1) * np.sign(p[..., j - 1]) if ej != 1 else np.sign(p[..., j - 1])
        g[..., 0] += outer * da1
        g[..., 1] += outer * da2
        g[..., j - 1] += outer * dT
    g[..., n] += np.sign(p[..., n])
    return g


def norm_euclidean_gradient(space: Space, p) -> np.ndarray:
    """Closed-form Euclidean gradient of N (away from the origin)."""
    p = as_points(space, p)
    k = space.kind
    N = hom_norm(space, p)[..., None]
    if isinstance(k, StepTwo):
        x, t = p[..., : k.n], p[..., k.n:]
        x2 = np.sum(x * x, axis=-1, keepdims=True)
        return np.concatenate([x2 * x, 0.5 * k.kappa * t], axis=-1) / N ** 3
    if isinstance(k, Grushin):
        e = 1.0 + k.eta
        x, y = p[..., : k.n], p[..., k.n:]
        xn = np.linalg.norm(x, axis=-1, keepdims=True)
        return np.concatenate([xn ** (2 * e - 2) * x, e * y], axis=-1) / N ** (2 * e - 1)
    if isinstance(k, Greiner):
        z = int(k.zeta)
        r = p[..., : 2 * k.n]
        r2 = np.sum(r * r, axis=-1, keepdims=True)
        return np.concatenate([r2 ** (2 * z - 1) * r, 0.5 * p[..., -1:] / z], axis=-1) / N ** (4 * z - 1)
    n = int(k.n)
    return _filiform_euclidean_grad(p, n) * N ** (1 - n) / n


def norm_subgradient(space: Space, p) -> np.ndarray:
    """Closed-form (X_1 N, ..., X_l N)."""
    p = as_points(space, p)
    k = space.kind
    N = hom_norm(space, p)
    if isinstance(k, Filiform):
        n = int(k.n)
        gE = _filiform_euclidean_grad(p, n) * (N ** (1 - n) / n)[..., None]
        return np.einsum("...ld,...d->...l", frame_coefficients(space, p), gE)
    if isinstance(k, StepTwo):
        n = k.n
        x, t = p[..., :n], p[..., n:]
        x2 = np.sum(x * x, axis=-1)
        Bx = np.einsum("jab,...b->...aj", k.matrices(), x)
        grad4 = 4.0 * x2[..., None] * x + k.kappa * np.einsum("...aj,...j->...a", Bx, t)
        return grad4 / (4.0 * N[..., None] ** 3)
    if isinstance(k, Grushin):
        n = k.n
        e = 1.0 + k.eta
        x, y = p[..., :n], p[..., n:]
        xn = np.linalg.norm(x, axis=-1)
        gx = 2 * e * (xn ** (2 * e - 2))[..., None] * x
        gy = 2 * e * e * (xn ** k.eta)[..., None] * y
        return np.concatenate([gx, gy], axis=-1) / (2 * e * N[..., None] ** (2 * e - 1))
    n, z = k.n, int(k.zeta)
    x, y, t = p[..., :n], p[..., n: 2 * n], p[..., -1:]
    r2 = np.sum(p[..., : 2 * n] ** 2, axis=-1)[..., None]
    a = 4.0 * z * r2 ** (2 * z - 1)
    b = 4.0 * z * t * r2 ** (z - 1)
    gx = a * x + b * y
    gy = a * y - b * x
    return np.concatenate([gx, gy], axis=-1) / (4.0 * z * N[..., None] ** (4 * z - 1))


# -- serialization -------------------------------------------------------------

def space_to_dict(space: Space) -> dict:
    k = space.kind
    if isinstance(k, StepTwo):
        return {"kind": "StepTwo", "n": k.n, "m": k.m, "B": [[list(r) for r in M] for M in k.B],
                "kappa": k.kappa, "htype": k.htype}
    if isinstance(k, Grushin):
        return {"kind": "Grushin", "n": k.n, "m": k.m, "eta": k.eta}
    if isinstance(k, Greiner):
        return {"kind": "Greiner", "n": k.n, "zeta": k.zeta}
    return {"kind": "Filiform", "n": k.n}


def space_from_dict(doc: dict) -> Space:
    """Inverse of :func:`space_to_dict`.

    ``{"kind": "Heisenberg", "k": 1}`` is accepted as shorthand for the H-type
    Heisenberg group H^k with kappa = 16.
    """
    kind = doc.get("kind")
    if kind == "Heisenberg":
        return heisenberg(int(doc.get("k", 1)), float(doc.get("kappa", 16.0)))
    if kind == "StepTwo":
        return make_space(StepTwo(int(doc["n"]), int(doc["m"]), _freeze(doc["B"]),
                                  float(doc.get("kappa", 16.0)), bool(doc.get("htype", False))))
    if kind == "Grushin":
        return make_space(Grushin(int(doc["n"]), int(doc["m"]), float(doc["eta"])))
    if kind == "Greiner":
        return make_space(Greiner(int(doc["n"]), int(doc["zeta"])))
    if kind == "Filiform":
        return make_space(Filiform(int(doc["n"])))
    raise GeometryError(f"unknown space kind {kind!r}")


def space_to_json(space: Space) -> str:
    return json.dumps(space_to_dict(space), sort_keys=True)


def space_from_json(text: str) -> Space:
    return space_from_dict(json.loads(text))


def sample_cloud(space: Space, rng: np.random.Generator, k: int, radii: Sequence[float] = (0.1, 10.0),
                 exclusion_radius: float = 1e-3) -> np.ndarray:
    """Points with N log-uniform in ``radii`` and |x|, N above the exclusion buffer."""
    lo, hi = radii
    out = []
    have = 0
    while have < k:
        u = unit_sphere_points(space, rng, 2 * (k - have) + 16)
        lam = np.exp(rng.uniform(math.log(lo), math.log(hi), len(u)))
        pts = dilate(space, lam, u)
        keep = (first_layer_norm(space, pts) > exclusion_radius) & (hom_norm(space, pts) > exclusion_radius)
        out.append(pts[keep])
        have += int(keep.sum())
    return np.concatenate(out)[:k]
