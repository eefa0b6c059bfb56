"""Exponential-power measures mu = Z^-1 exp(-N^p) d(xi): normalisation, sampling, integration."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats
from scipy.integrate import cubature
from scipy.special import gammaincc, gammainccinv, gammaln

from . import geometry as geo
from .geometry import Space
from .rng import stream, tag

TAIL_TOL = 1e-10
DEFAULT_CHAINS = 64
BURN_IN = 10_000
TARGET_ACCEPT = 0.3


class DegenerateProposalError(RuntimeError):
    pass


class AdaptationError(RuntimeError):
    pass


@dataclass
class MeasureSpec:
    space: Space
    p: float
    Z: Optional[tuple] = None    # (estimate, stderr)

    def __post_init__(self):
        if not self.p >= 1:
            raise ValueError(f"p must be >= 1, got {self.p}")

    @property
    def key(self) -> str:
        return f"{geo.space_to_json(self.space)}|p={self.p!r}"

    def require_z(self, budget: int = 200_000, seed: int = 0) -> tuple:
        if self.Z is None:
            self.Z = cached_z(self, budget, seed)
        est, err = self.Z
        if err / est >= 0.05:
            raise ValueError(f"Z estimate too noisy for a normalised report ({err / est:.2%})")
        return self.Z


@dataclass
class IntegralEstimate:
    value: float
    stderr: float
    method: str
    n: int
    log_scale: float = 0.0     # true value = value * exp(log_scale)

    def to_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "method": self.method, "n": self.n,
                "log_scale": self.log_scale}


@dataclass
class SampleSet:
    points: np.ndarray
    seed: int
    chain_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points.setflags(write=False)

    def __len__(self) -> int:
        return len(self.points)


def log_density_unnormalized(spec: MeasureSpec, p) -> np.ndarray:
    return -geo.hom_norm(spec.space, p) ** spec.p


def truncation_radius(spec: MeasureSpec, tol: float = TAIL_TOL) -> float:
    """R with mu(N > R) = Gamma(Q/p, R^p) / Gamma(Q/p) = tol.

    The mass outside {N < R} follows from the coarea/homogeneity identity
    vol{N < s} = |B_1| s^Q, so it does not depend on |B_1|.
    """
    return float(gammainccinv(spec.space.Q / spec.p, tol) ** (1.0 / spec.p))


def tail_mass(spec: MeasureSpec, R: float) -> float:
    return float(gammaincc(spec.space.Q / spec.p, R ** spec.p))


# -- normalisation -----------------------------------------------------------

class _Proposal:
    """Exp-power on the first layer, Student-t on the rest, scaled by the dilation weights."""

    DF = 3.0

    def __init__(self, spec: MeasureSpec):
        sp = spec.space
        self.spec = spec
        self.n1 = sp.n1
        p = spec.p
        typical = (sp.Q / p) ** (1.0 / p)           # E[N^p] = Q/p under mu
        c = geo.coordinate_gauge(sp)
        self.scales = (typical / c[sp.n1:]) ** sp.dilation_weights[sp.n1:]
        n1 = self.n1
        log_sphere = math.log(2.0) + 0.5 * n1 * math.log(math.pi) - gammaln(0.5 * n1)
        self.log_c1 = log_sphere + (n1 / p) * math.log(2.0) - math.log(p) + gammaln(n1 / p)

    def draw(self, rng: np.random.Generator, k: int) -> np.ndarray:
        p, n1 = self.spec.p, self.n1
        u = rng.gamma(n1 / p, 1.0, size=k)
        r = (2.0 * u) ** (1.0 / p)
        d = rng.standard_normal((k, n1))
        x = d / np.linalg.norm(d, axis=1, keepdims=True) * r[:, None]
        t = rng.standard_t(self.DF, size=(k, len(self.scales))) * self.scales
        return np.concatenate([x, t], axis=1)

    def logpdf(self, pts: np.ndarray) -> np.ndarray:
        x = pts[:, : self.n1]
        lx = -np.linalg.norm(x, axis=1) ** self.spec.p / 2.0 - self.log_c1
        lt = stats.t.logpdf(pts[:, self.n1:], self.DF, scale=self.scales).sum(axis=1)
        return lx + lt


def _hill_tail_index(w: np.ndarray, frac: float = 0.01) -> float:
    w = np.sort(w)[::-1]
    k = max(10, int(frac * len(w)))
    top = np.log(w[: k + 1])
    gap = np.mean(top[:k] - top[k])
    return math.inf if gap <= 0 else 1.0 / gap


def estimate_Z(spec: MeasureSpec, budget: int = 200_000, seed: int = 0) -> tuple:
    """Importance-sampling estimate of Z = int exp(-N^p); returns (Z, stderr)."""
    if budget < 10_000:
        raise ValueError("estimate_Z needs budget >= 10^4")
    prop = _Proposal(spec)
    rng = stream(seed, tag("estimate_Z"))
    chunks = []
    left = budget
    while left > 0:
        k = min(left, 250_000)
        pts = prop.draw(rng, k)
        chunks.append(np.exp(log_density_unnormalized(spec, pts) - prop.logpdf(pts)))
        left -= k
    w = np.concatenate(chunks)
    alpha = _hill_tail_index(w)
    if alpha < 2.0:
        raise DegenerateProposalError(f"importance weights look heavy-tailed (Hill index {alpha:.2f})")
    return float(w.mean()), float(w.std(ddof=1) / math.sqrt(len(w)))


_Z_CACHE: dict = {}


def cached_z(spec: MeasureSpec, budget: int = 200_000, seed: int = 0) -> tuple:
    key = (spec.key, budget, seed)
    if key not in _Z_CACHE:
        _Z_CACHE[key] = estimate_Z(spec, budget, seed)
    return _Z_CACHE[key]


# -- quadrature ----------------------------------------------------------------

def quadrature_unnormalized(spec: MeasureSpec, f: Optional[Callable] = None, rtol: float = 1e-8,
                            atol: float = 0.0, R: Optional[float] = None) -> tuple:
    """Adaptive cubature of int f exp(-N^p) over the anisotropic box containing {N < R}.

    Returns (value, error) where error is the embedded-rule refinement delta plus
    the tail bound sup|f| mu-mass outside the box (for bounded f).
    """
    sp = spec.space
    if sp.ambient_dim > 3:
        raise ValueError(f"quadrature is limited to ambient_dim <= 3, got {sp.ambient_dim}")
    R = truncation_radius(spec) if R is None else R
    box = geo.gauge_box(sp, R)

    def integrand(P):
        w = np.exp(log_density_unnormalized(spec, P))
        return w if f is None else np.asarray(f(P), float) * w

    res = cubature(integrand, -box, box, rtol=rtol, atol=atol, points=[np.zeros(sp.ambient_dim)],
                   max_subdivisions=200_000)
    if res.status != "converged":
        raise RuntimeError(f"cubature did not converge: {res.status}")
    return float(res.estimate), float(res.error)


def quadrature_Z(spec: MeasureSpec, rtol: float = 1e-9) -> tuple:
    z, err = quadrature_unnormalized(spec, None, rtol)
    return z, err + z * TAIL_TOL


# -- MCMC ---------------------------------------------------------------------------

def _autocov(x: np.ndarray) -> np.ndarray:
    """Autocovariance per chain via FFT; x has shape (K, T)."""
    K, T = x.shape
    x = x - x.mean(axis=1, keepdims=True)
    nfft = 1 << (2 * T - 1).bit_length()
    f = np.fft.rfft(x, nfft, axis=1)
    ac = np.fft.irfft(f * np.conj(f), nfft, axis=1)[:, :T] / T
    return ac.mean(axis=0)


def integrated_autocorr_time(x: np.ndarray) -> float:
    """Geyer initial-positive-sequence estimate; x has shape (K, T)."""
    x = np.asarray(x, float)
    if x.shape[1] < 4:
        return 1.0
    ac = _autocov(x)
    if ac[0] <= 0:
        return 1.0
    rho = ac / ac[0]
    tau = -1.0
    for k in range(0, len(rho) - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return max(tau, 1.0)


def _proposal_scales(spec: MeasureSpec) -> np.ndarray:
    sp = spec.space
    typical = (sp.Q / spec.p) ** (1.0 / spec.p)
    c = geo.coordinate_gauge(sp)
    return (typical / c) ** sp.dilation_weights


class _Chains:
    """K random-walk Metropolis chains advanced in lockstep, one RNG stream each."""

    BLOCK = 512

    def __init__(self, spec: MeasureSpec, seed: int, n_chains: int):
        self.spec = spec
        self.rngs = [stream(seed, tag("rwm"), k) for k in range(n_chains)]
        init = stream(seed, tag("rwm-init"))
        prop = _Proposal(spec)
        # start from importance resampling so the chains begin near stationarity
        cand = prop.draw(init, 20 * n_chains)
        lw = log_density_unnormalized(spec, cand) - prop.logpdf(cand)
        w = np.exp(lw - lw.max())
        idx = init.choice(len(cand), size=n_chains, replace=False, p=w / w.sum())
        self.x = cand[np.sort(idx)]
        self.lp = log_density_unnormalized(spec, self.x)
        self.base = _proposal_scales(spec)
        self.log_scale = math.log(2.38 / math.sqrt(spec.space.ambient_dim))

    def _noise(self, steps: int):
        K, d = self.x.shape
        z = np.empty((steps, K, d))
        u = np.empty((steps, K))
        for k, g in enumerate(self.rngs):
            z[:, k, :] = g.standard_normal((steps, d))
            u[:, k] = g.random(steps)
        return z, np.log(u)

    def run(self, steps: int, keep_every: int = 0, adapt: bool = False):
        K, d = self.x.shape
        kept = []
        accepted = 0
        done = 0
        while done < steps:
            b = min(self.BLOCK, steps - done)
            z, logu = self._noise(b)
            blk_acc = 0
            for i in range(b):
                prop = self.x + np.exp(self.log_scale) * self.base * z[i]
                lp = log_density_unnormalized(self.spec, prop)
                ok = logu[i] < lp - self.lp
                self.x = np.where(ok[:, None], prop, self.x)
                self.lp = np.where(ok, lp, self.lp)
                n_ok = int(ok.sum())
                blk_acc += n_ok
                if keep_every and (done + i + 1) % keep_every == 0:
                    kept.append(self.x.copy())
            accepted += blk_acc
            done += b
            if adapt:
                rate = blk_acc / (b * K)
                self.log_scale += 2.0 * (rate - TARGET_ACCEPT) / math.sqrt(done / self.BLOCK)
        return accepted / (steps * K), (np.stack(kept, axis=1) if kept else None)


def sample(spec: MeasureSpec, n: int, seed: int = 0, n_chains: int = DEFAULT_CHAINS,
           burn_in: int = BURN_IN, pilot: int = 4000) -> SampleSet:
    """Draw n points from mu with multi-chain random-walk Metropolis.

    Per-coordinate steps follow the dilation weights ((Q/p)^(1/p) / c_i)^(w_i);
    a global step multiplier is adapted during burn-in toward acceptance 0.3
    and then frozen. Thinning is chosen from a pilot run so that ESS/n > 0.1.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    chains = _Chains(spec, seed, n_chains)
    burn_rate, _ = chains.run(burn_in, adapt=True)
    pilot_rate, pilot_pts = chains.run(pilot, keep_every=1)
    if not 0.1 < pilot_rate < 0.7:
        raise AdaptationError(f"acceptance {pilot_rate:.3f} outside (0.1, 0.7) after adaptation "
                              f"(burn-in rate {burn_rate:.3f}, log step {chains.log_scale:.3f})")
    N = geo.hom_norm(spec.space, pilot_pts)
    taus = [integrated_autocorr_time(pilot_pts[:, :, j]) for j in range(spec.space.ambient_dim)]
    taus.append(integrated_autocorr_time(N ** spec.p))
    thin = max(1, int(math.ceil(max(taus) / 5.0)))
    per_chain = -(-n // n_chains)
    rate, pts = chains.run(per_chain * thin, keep_every=thin)
    # pts: (K, per_chain, d); chain-major order keeps batch means meaningful
    flat = pts.reshape(-1, spec.space.ambient_dim)[:n]
    ess = [float(per_chain * n_chains / integrated_autocorr_time(pts[:, :, j]))
           for j in range(spec.space.ambient_dim)]
    meta = {
        "acceptance_rate": float(rate),
        "ess_per_coordinate": ess,
        "burn_in": int(burn_in),
        "thinning": int(thin),
        "n_chains": int(n_chains),
        "step_scale": float(math.exp(chains.log_scale)),
    }
    return SampleSet(np.ascontiguousarray(flat), int(seed), meta)


MAGIC = b"SLABCOL1"


def save_samples(path, samples: SampleSet, spec: MeasureSpec) -> None:
    """Columnar binary file: magic, u64 header length, JSON header, then one float64 column per coordinate."""
    header = {"space": geo.space_to_dict(spec.space), "p": spec.p, "seed": samples.seed,
              "n": len(samples), "d": int(samples.points.shape[1]), "chain_meta": samples.chain_meta}
    blob = json.dumps(header, sort_keys=True).encode()
    cols = np.ascontiguousarray(samples.points.T, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint64(len(blob)).astype("<u8").tobytes())
        fh.write(blob)
        fh.write(cols.tobytes())


def load_samples(path) -> tuple:
    """Return (SampleSet, MeasureSpec) from a file written by :func:`save_samples`."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a sample file")
        hl = int(np.frombuffer(fh.read(8), dtype="<u8")[0])
        header = json.loads(fh.read(hl).decode())
        data = np.frombuffer(fh.read(), dtype="<f8")
    n, d = header["n"], header["d"]
    if data.size != n * d:
        raise ValueError(f"{path}: truncated sample file")
    pts = data.reshape(d, n).T.copy()
    spec = MeasureSpec(geo.space_from_dict(header["space"]), header["p"])
    return SampleSet(pts, header["seed"], header["chain_meta"]), spec


# -- integration ------------------------------------------------------------------

def batch_means(values: np.ndarray, n_batches: int = 32) -> tuple:
    """Means and covariance of the mean for the columns of ``values`` (n, k) via batch means."""
    values = np.asarray(values, float)
    if values.ndim == 1:
        values = values[:, None]
    n = len(values)
    B = max(2, min(n_batches, n // 2))
    cut = (n // B) * B
    bm = values[:cut].reshape(B, -1, values.shape[1]).mean(axis=1)
    return values.mean(axis=0), np.atleast_2d(np.cov(bm, rowvar=False)) / B


def integrate(spec: MeasureSpec, f: Callable, method: str = "mc", samples: Optional[SampleSet] = None,
              samples_spec: Optional[MeasureSpec] = None, rtol: float = 1e-8) -> IntegralEstimate:
    """int f d(mu) by sample average over ``samples`` (Z cancels) or by cubature."""
    if method == "mc":
        if samples is None:
            raise ValueError("mc integration needs a SampleSet")
        if samples_spec is not None and samples_spec.key != spec.key:
            raise ValueError("SampleSet was drawn from a different measure")
        vals = np.asarray(f(samples.points), float)
        m, cov = batch_means(vals)
        return IntegralEstimate(float(m[0]), float(math.sqrt(max(cov[0, 0], 0.0))), "mc", len(vals))
    if method == "quadrature":
        num, e1 = quadrature_unnormalized(spec, f, rtol)
        z, e2 = quadrature_Z(spec)
        val = num / z
        err = math.hypot(e1 / z, abs(val) * e2 / z)
        return IntegralEstimate(val, err, "quadrature", 0)
    raise ValueError(f"unknown method {method!r}")
