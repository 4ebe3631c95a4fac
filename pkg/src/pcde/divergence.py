"""Divergences between (conditional) densities.

Densities are plain callables mapping an ``(m, d)`` array of responses to an
``(m,)`` array of density values. Integrals are taken over a box ``domain``
either with a midpoint tensor grid or by Monte Carlo; the latter samples from
``s`` when it exposes ``sample(rng, m)`` and uniformly over the box otherwise.

The squared Hellinger distance follows the convention without the 1/2 factor,
``d2(s, t) = int (sqrt(s) - sqrt(t))**2``, so that it ranges over ``[0, 2]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import ContractError, DomainError

Density = Callable[[np.ndarray], np.ndarray]

_MASS_EPS = 1e-12


@dataclass(frozen=True)
class Grid:
    points: int = 512


@dataclass(frozen=True)
class MonteCarlo:
    samples: int = 20_000
    seed: int = 0

    def __post_init__(self):
        if self.samples < 100:
            raise ValueError("Monte Carlo quadrature needs at least 100 samples")


@dataclass(frozen=True)
class DivergenceConfig:
    rho: float = 0.5
    quadrature: Grid | MonteCarlo | None = None
    epsilon_floor: float = 1e-300
    normalization_tol: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")

    def resolved_quadrature(self, d: int):
        if self.quadrature is not None:
            return self.quadrature
        return Grid() if d <= 2 else MonteCarlo()


@dataclass(frozen=True)
class DivergenceEstimate:
    value: float
    std_error: float = 0.0

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.value)

    def __float__(self):
        return float(self.value)


@dataclass(frozen=True)
class Box:
    lower: np.ndarray = field(default_factory=lambda: np.zeros(1))
    upper: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        object.__setattr__(self, "lower", np.atleast_1d(np.asarray(self.lower, dtype=float)))
        object.__setattr__(self, "upper", np.atleast_1d(np.asarray(self.upper, dtype=float)))

    @classmethod
    def unit(cls, d: int) -> "Box":
        return cls(np.zeros(d), np.ones(d))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))


def _as_box(domain) -> Box:
    if isinstance(domain, Box):
        return domain
    lo, hi = domain
    return Box(lo, hi)


def grid_nodes(box: Box, points: int) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint-rule nodes and weights of a tensor grid over ``box``."""
    axes = []
    widths = []
    for lo, hi in zip(box.lower, box.upper):
        h = (hi - lo) / points
        axes.append(lo + h * (np.arange(points) + 0.5))
        widths.append(h)
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    weights = np.full(nodes.shape[0], float(np.prod(widths)))
    return nodes, weights


class _Quadrature:
    """Nodes, weights and the density values of ``s`` and ``t`` at the nodes."""

    def __init__(self, s: Density, t: Density, domain, cfg: DivergenceConfig, rng=None):
        box = _as_box(domain)
        quad = cfg.resolved_quadrature(box.dim)
        self.from_s = False
        if isinstance(quad, Grid):
            nodes, w = grid_nodes(box, quad.points)
            self.mc = False
        else:
            rng = rng if rng is not None else np.random.default_rng(quad.seed)
            if hasattr(s, "sample"):
                nodes = np.asarray(s.sample(rng, quad.samples), dtype=float).reshape(quad.samples, -1)
                self.from_s = True
                w = None
            else:
                u = rng.random((quad.samples, box.dim))
                nodes = box.lower + u * (box.upper - box.lower)
                w = np.full(quad.samples, box.volume / quad.samples)
            self.mc = True
        self.nodes = nodes
        self.s = np.asarray(s(nodes), dtype=float).reshape(-1)
        self.t = np.asarray(t(nodes), dtype=float).reshape(-1)
        if np.any(self.s < 0) or np.any(self.t < 0):
            raise ContractError("densities must be nonnegative")
        if self.from_s:
            # importance weights 1/s, averaged: integral of f = mean(f / s)
            with np.errstate(divide="ignore"):
                self.w = np.where(self.s > 0, 1.0 / (self.s * nodes.shape[0]), 0.0)
        else:
            self.w = w
        self._check_normalization(cfg)

    def _check_normalization(self, cfg):
        for name, vals in (("s", self.s), ("t", self.t)):
            if self.from_s and name == "s":
                continue
            mass, se = self.integrate(vals)
            tol = cfg.normalization_tol if not self.mc else max(cfg.normalization_tol, 6.0 * se)
            if abs(mass - 1.0) > tol:
                raise ContractError(f"density {name} integrates to {mass:.8g} over the domain, not 1")

    def integrate(self, f: np.ndarray) -> tuple[float, float]:
        terms = f * self.w
        total = float(np.sum(terms))
        if not self.mc:
            return total, 0.0
        m = terms.shape[0]
        se = float(np.std(terms * m, ddof=1) / math.sqrt(m))
        return total, se


def _xlogy_ratio(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a * ln(a / b)`` with ``0 ln 0 = 0``; callers handle ``b == 0``."""
    out = np.zeros_like(a)
    pos = a > 0
    out[pos] = a[pos] * (np.log(a[pos]) - np.log(b[pos]))
    return out


def _kl_from(q: _Quadrature, cfg: DivergenceConfig) -> DivergenceEstimate:
    bad = (q.t < cfg.epsilon_floor) & (q.s > 0)
    if np.any(bad) and float(np.sum(q.s[bad] * q.w[bad])) > _MASS_EPS:
        return DivergenceEstimate(math.inf, 0.0)
    keep = ~bad
    val, se = q.integrate(np.where(keep, _xlogy_ratio(q.s, np.where(keep, q.t, 1.0)), 0.0))
    return DivergenceEstimate(max(val, 0.0), se)


def _jkl_from(q: _Quadrature, rho: float) -> DivergenceEstimate:
    mix = (1.0 - rho) * q.s + rho * q.t
    val, se = q.integrate(_xlogy_ratio(q.s, np.where(mix > 0, mix, 1.0)))
    return DivergenceEstimate(max(val / rho, 0.0), se / rho)


def _hellinger_from(q: _Quadrature) -> DivergenceEstimate:
    if q.from_s:
        # 2 - 2 * int sqrt(s t) written as an expectation under s
        ratio = np.where(q.s > 0, np.sqrt(q.t / np.where(q.s > 0, q.s, 1.0)), 0.0)
        m = ratio.shape[0]
        val = 2.0 - 2.0 * float(np.mean(ratio))
        se = 2.0 * float(np.std(ratio, ddof=1)) / math.sqrt(m)
    else:
        val, se = q.integrate((np.sqrt(q.s) - np.sqrt(q.t)) ** 2)
    return DivergenceEstimate(min(max(val, 0.0), 2.0), se)


def _l1_from(q: _Quadrature) -> DivergenceEstimate:
    if q.from_s:
        raise ContractError("squared L1 needs grid or uniform Monte-Carlo quadrature")
    val, se = q.integrate(np.abs(q.s - q.t))
    val = min(max(val, 0.0), 2.0)
    return DivergenceEstimate(val * val, 2.0 * val * se)


def kl(s: Density, t: Density, domain, cfg: DivergenceConfig | None = None, rng=None) -> DivergenceEstimate:
    """Kullback-Leibler divergence ``int s ln(s / t)``; ``inf`` when ``s`` puts mass where ``t`` vanishes."""
    cfg = cfg or DivergenceConfig()
    return _kl_from(_Quadrature(s, t, domain, cfg, rng), cfg)


def jkl(s: Density, t: Density, domain, cfg: DivergenceConfig | None = None, rng=None) -> DivergenceEstimate:
    """Jensen-Kullback-Leibler divergence ``KL(s, (1 - rho) s + rho t) / rho``."""
    cfg = cfg or DivergenceConfig()
    return _jkl_from(_Quadrature(s, t, domain, cfg, rng), cfg.rho)


def hellinger2(s: Density, t: Density, domain, cfg: DivergenceConfig | None = None, rng=None) -> DivergenceEstimate:
    cfg = cfg or DivergenceConfig()
    return _hellinger_from(_Quadrature(s, t, domain, cfg, rng))


def l1_squared(s: Density, t: Density, domain, cfg: DivergenceConfig | None = None, rng=None) -> DivergenceEstimate:
    cfg = cfg or DivergenceConfig()
    return _l1_from(_Quadrature(s, t, domain, cfg, rng))


_DIVERGENCES = {
    "kl": lambda q, cfg: _kl_from(q, cfg),
    "jkl": lambda q, cfg: _jkl_from(q, cfg.rho),
    "hellinger2": lambda q, cfg: _hellinger_from(q),
    "l1_squared": lambda q, cfg: _l1_from(q),
}


# ---------------------------------------------------------------------------
# Discrete and Gaussian helpers
# ---------------------------------------------------------------------------

def histogram_density(weights, lower: float = 0.0, upper: float = 1.0) -> Density:
    """Piecewise-constant density on ``[lower, upper]`` with equal-width bins of the given masses."""
    w = np.asarray(weights, dtype=float)
    k = w.shape[0]
    width = (upper - lower) / k

    def density(y):
        y = np.asarray(y, dtype=float).reshape(-1)
        idx = np.clip(np.floor((y - lower) / width).astype(int), 0, k - 1)
        inside = (y >= lower) & (y <= upper)
        return np.where(inside, w[idx] / width, 0.0)

    return density


def gaussian_density(mu, Sigma) -> Density:
    """Gaussian density evaluator with a ``sample(rng, m)`` method."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    chol = np.linalg.cholesky(Sigma)
    p = mu.shape[0]
    log_norm = -0.5 * p * math.log(2 * math.pi) - float(np.sum(np.log(np.diag(chol))))

    def density(y):
        y = np.asarray(y, dtype=float).reshape(-1, p)
        z = np.linalg.solve(chol, (y - mu).T)
        return np.exp(log_norm - 0.5 * np.sum(z * z, axis=0))

    def sample(rng, m):
        return mu + rng.standard_normal((m, p)) @ chol.T

    density.sample = sample
    return density


def _spd(S, name):
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if not np.allclose(S, S.T, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise np.linalg.LinAlgError(f"{name} is not symmetric")
    np.linalg.cholesky(S)  # raises LinAlgError when not positive definite
    return S


def gaussian_hellinger2(mu1, Sigma1, mu2, Sigma2) -> float:
    """Closed-form squared Hellinger distance between two full-rank Gaussians."""
    S1, S2 = _spd(Sigma1, "Sigma1"), _spd(Sigma2, "Sigma2")
    diff = np.atleast_1d(np.asarray(mu1, dtype=float) - np.asarray(mu2, dtype=float))
    D = diff.shape[0]
    _, ld1 = np.linalg.slogdet(S1)
    _, ld2 = np.linalg.slogdet(S2)
    _, ld_inv = np.linalg.slogdet(np.linalg.inv(S1) + np.linalg.inv(S2))
    quad = float(diff @ np.linalg.solve(S1 + S2, diff))
    log_aff = 0.5 * D * math.log(2.0) - 0.25 * (ld1 + ld2) - 0.5 * ld_inv - 0.25 * quad
    return float(min(max(2.0 * (1.0 - math.exp(log_aff)), 0.0), 2.0))


def gaussian_ratio_bound(mu1, Sigma1, mu2, Sigma2) -> float:
    """Upper bound on ``sup_x phi_1(x) / phi_2(x)`` when ``Sigma1^-1 - Sigma2^-1`` is positive definite."""
    S1, S2 = _spd(Sigma1, "Sigma1"), _spd(Sigma2, "Sigma2")
    gap = np.linalg.inv(S1) - np.linalg.inv(S2)
    if np.linalg.eigvalsh((gap + gap.T) / 2.0).min() <= 0:
        raise DomainError("Sigma1^-1 - Sigma2^-1 must be positive definite")
    diff = np.atleast_1d(np.asarray(mu1, dtype=float) - np.asarray(mu2, dtype=float))
    _, ld1 = np.linalg.slogdet(S1)
    _, ld2 = np.linalg.slogdet(S2)
    quad = float(diff @ np.linalg.solve(S2 - S1, diff))
    return float(math.exp(0.5 * (ld2 - ld1) + 0.5 * quad))


# ---------------------------------------------------------------------------
# Tensorized divergences
# ---------------------------------------------------------------------------

def _per_point_rng(cfg: DivergenceConfig, index: int):
    quad = cfg.quadrature
    if isinstance(quad, MonteCarlo):
        return np.random.default_rng([quad.seed, index])
    return None


def tensorized(div_kind: str, s, t, design, domain, cfg: DivergenceConfig | None = None) -> DivergenceEstimate:
    """Design average ``(1/n) sum_i div(s(.|X_i), t(.|X_i))``.

    ``s`` and ``t`` are conditional densities called as ``s(x, Y)``. When both
    expose ``cell_key(x)`` (a hashable label of the covariate region on which
    the conditional density is constant), evaluations are shared between
    design points with equal keys. Monte-Carlo substreams are derived from the
    configured seed and the design index.
    """
    cfg = cfg or DivergenceConfig()
    try:
        fn = _DIVERGENCES[div_kind]
    except KeyError:
        raise ValueError(f"unknown divergence {div_kind!r}") from None
    design = np.atleast_2d(np.asarray(design, dtype=float))
    n = design.shape[0]
    if n == 0:
        raise ContractError("design must be nonempty")
    shared = hasattr(s, "cell_key") and hasattr(t, "cell_key") and not isinstance(cfg.quadrature, MonteCarlo)
    cache = {}
    values = np.empty(n)
    ses = np.empty(n)
    for i, x in enumerate(design):
        key = (s.cell_key(x), t.cell_key(x)) if shared else None
        if key is not None and key in cache:
            est = cache[key]
        else:
            q = _Quadrature(_bind(s, x), _bind(t, x), domain, cfg, _per_point_rng(cfg, i))
            est = fn(q, cfg)
            if key is not None:
                cache[key] = est
        values[i] = est.value
        ses[i] = est.std_error
    if np.any(np.isinf(values)):
        return DivergenceEstimate(math.inf, 0.0)
    return DivergenceEstimate(float(np.sum(values) / n), float(math.sqrt(np.sum(ses ** 2)) / n))


def _bind(cond, x):
    def density(y):
        return cond(x, y)

    if hasattr(cond, "sample_y"):
        density.sample = lambda rng, m: cond.sample_y(x, rng, m)
    return density


def c_rho(rho: float) -> float:
    """Constant of the lower bound ``C_rho * d2 <= JKL_rho``."""
    return (1.0 / rho) * min((1.0 - rho) / rho, 1.0) * (math.log(1.0 + rho / (1.0 - rho)) - rho)
