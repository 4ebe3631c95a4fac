"""Gaussian mixtures whose mixing proportions are constant on the leaves of a covariate partition.

All leaves share the same ``K`` Gaussian components. Each covariance is
written ``Sigma = L * D diag(A) D'`` with a volume ``L``, an orthogonal basis
``D`` and a diagonal shape ``A`` of unit determinant. Every block (and the
means) is either ``"free"`` (one value per component), ``"common"`` (one value
shared by all components) or :class:`Known`.

Only the coordinates listed in ``E_indices`` discriminate between components;
the remaining ones follow one shared Gaussian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .data import Dataset
from .exceptions import DegenerateFitError
from .geometry import PartitionTree

FREE = "free"
COMMON = "common"
COV_FLOOR = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Known:
    """A block fixed to ``value`` (one value shared by all components, or one per component)."""

    value: object

    def per_component(self, K: int, shape: tuple) -> np.ndarray:
        v = np.asarray(self.value, dtype=float)
        if v.shape == shape:
            return np.broadcast_to(v, (K,) + shape).copy()
        if v.shape == (K,) + shape:
            return v.copy()
        raise ValueError(f"known value of shape {v.shape} does not match {shape} or {(K,) + shape}")


def _mode_kind(mode) -> str:
    if isinstance(mode, Known):
        return "known"
    if mode in (FREE, COMMON):
        return mode
    raise ValueError(f"unknown parametrisation mode {mode!r}")


def multiplier(mode, K: int) -> int:
    """Number of copies of a block's parameters: 0 if known, 1 if common, K if free."""
    kind = _mode_kind(mode)
    return {"known": 0, "common": 1, "free": K}[kind]


@dataclass(frozen=True)
class CovarianceSpec:
    mean_mode: object = FREE
    volume_mode: object = FREE
    basis_mode: object = FREE
    shape_mode: object = FREE
    a: float = 1e6
    L_minus: float = 1e-6
    L_plus: float = 1e6
    lambda_minus: float = 1e-6
    lambda_plus: float = 1e6
    enforce_bounds: bool = False

    def __post_init__(self):
        for m in (self.mean_mode, self.volume_mode, self.basis_mode, self.shape_mode):
            _mode_kind(m)
        if not (0 < self.L_minus <= self.L_plus):
            raise ValueError("need 0 < L_minus <= L_plus")
        if not (0 < self.lambda_minus <= 1.0 <= self.lambda_plus):
            raise ValueError("need 0 < lambda_minus <= 1 <= lambda_plus")
        if not self.a > 0:
            raise ValueError("mean bound a must be positive")

    @property
    def code(self) -> str:
        """Label in the ``[mu_K L D_0 A]`` style: ``_K`` free, ``_0`` known, bare common."""
        parts = []
        for name, mode in (("mu", self.mean_mode), ("L", self.volume_mode),
                           ("D", self.basis_mode), ("A", self.shape_mode)):
            kind = _mode_kind(mode)
            parts.append(name + {"free": "_K", "common": "", "known": "_0"}[kind])
        return "[" + " ".join(parts) + "]"

    @classmethod
    def parse(cls, text: str, **bounds) -> "CovarianceSpec":
        """Build a spec from a code such as ``"mu_K L D A_K"``.

        Known blocks get the neutral values (zero mean, unit volume, identity
        basis and shape).
        """
        tokens = text.replace("[", " ").replace("]", " ").replace(",", " ").split()
        neutral = ("mu", "L", "D", "A")
        modes = {}
        for tok in tokens:
            base, _, suffix = tok.partition("_")
            if base not in neutral:
                raise ValueError(f"bad covariance spec token {tok!r}")
            if suffix == "K":
                modes[base] = FREE
            elif suffix == "0":
                modes[base] = "known"
            elif suffix == "":
                modes[base] = COMMON
            else:
                raise ValueError(f"bad covariance spec token {tok!r}")
        if len(tokens) != 4 or set(modes) != set(neutral):
            raise ValueError("a covariance spec names mu, L, D and A exactly once")
        return cls(
            mean_mode=modes["mu"] if modes["mu"] != "known" else Known(_NeutralMean()),
            volume_mode=modes["L"] if modes["L"] != "known" else Known(1.0),
            basis_mode=modes["D"] if modes["D"] != "known" else Known(_NeutralBasis()),
            shape_mode=modes["A"] if modes["A"] != "known" else Known(_NeutralShape()),
            **bounds,
        )


class _Neutral:
    """Dimension-free placeholder for a known block, resolved once ``p`` is known."""

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(type(self).__name__)


class _NeutralMean(_Neutral):
    def resolve(self, p):
        return np.zeros(p)


class _NeutralBasis(_Neutral):
    def resolve(self, p):
        return np.eye(p)


class _NeutralShape(_Neutral):
    def resolve(self, p):
        return np.ones(p)


def _known_values(mode: Known, K: int, shape: tuple) -> np.ndarray:
    v = mode.value
    if isinstance(v, _Neutral):
        v = v.resolve(shape[0] if shape else 1)
    return Known(v).per_component(K, shape)


@dataclass(frozen=True)
class GaussianComponent:
    mu: np.ndarray
    L: float
    D: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", np.atleast_1d(np.asarray(self.mu, dtype=float)))
        object.__setattr__(self, "D", np.atleast_2d(np.asarray(self.D, dtype=float)))
        object.__setattr__(self, "A", np.atleast_1d(np.asarray(self.A, dtype=float)))
        object.__setattr__(self, "L", float(self.L))

    @property
    def p(self) -> int:
        return self.mu.shape[0]

    @property
    def Sigma(self) -> np.ndarray:
        S = self.L * (self.D * self.A) @ self.D.T
        return (S + S.T) / 2.0

    @classmethod
    def from_sigma(cls, mu, Sigma) -> "GaussianComponent":
        Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
        evals, evecs = np.linalg.eigh((Sigma + Sigma.T) / 2.0)
        if evals.min() <= 0:
            raise np.linalg.LinAlgError("covariance is not positive definite")
        p = evals.shape[0]
        L = float(np.exp(np.mean(np.log(evals))))
        return cls(mu, L, evecs, evals / L)

    def log_pdf(self, Y: np.ndarray) -> np.ndarray:
        Y = np.atleast_2d(Y)
        lam = self.L * self.A
        if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
            raise np.linalg.LinAlgError("degenerate covariance")
        z = (Y - self.mu) @ self.D
        quad = np.sum(z * z / lam, axis=1)
        return -0.5 * (self.p * LOG_2PI + float(np.sum(np.log(lam))) + quad)


@dataclass(frozen=True)
class SpatialGmm:
    x_tree: PartitionTree
    components: tuple
    proportions: np.ndarray
    spec: CovarianceSpec = field(default_factory=CovarianceSpec)
    E_indices: tuple = ()
    perp: GaussianComponent | None = None
    perp_spec: CovarianceSpec = field(default_factory=CovarianceSpec)
    d_y: int = 0
    loglik: float = float("nan")
    history: tuple = ()

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.proportions, dtype=float))
        object.__setattr__(self, "proportions", P)
        p = self.components[0].p
        if not self.E_indices:
            object.__setattr__(self, "E_indices", tuple(range(p)))
        if self.d_y == 0:
            object.__setattr__(self, "d_y", len(self.E_indices) + (self.perp.p if self.perp is not None else 0))
        if P.shape != (self.x_tree.n_leaves, len(self.components)):
            raise ValueError("proportions must have one row per X-leaf and one column per component")
        if np.any(P < -1e-15) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("every proportion vector must lie in the simplex")

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def perp_indices(self) -> tuple:
        return tuple(j for j in range(self.d_y) if j not in self.E_indices)

    @property
    def E_dim(self) -> int:
        return len(self.E_indices)

    @property
    def identifier(self) -> str:
        E = ",".join(str(j + 1) for j in self.E_indices)
        return f"X={self.x_tree.signature};K={self.K};cov={self.spec.code};E={E}"

    def dimension(self) -> int:
        return dimension(self.x_tree, self.K, self.spec, self.E_dim, self.d_y, self.perp_spec)

    def component_log_pdf(self, Y) -> np.ndarray:
        """``(m, K)`` array of component log-densities on the discriminant coordinates."""
        YE = np.atleast_2d(Y)[:, list(self.E_indices)]
        return np.column_stack([c.log_pdf(YE) for c in self.components])

    def perp_log_pdf(self, Y) -> np.ndarray:
        Y = np.atleast_2d(Y)
        if self.perp is None:
            return np.zeros(Y.shape[0])
        return self.perp.log_pdf(Y[:, list(self.perp_indices)])

    def joint_log_terms(self, X, Y) -> np.ndarray:
        """``ln pi_k[leaf(x)] + ln Phi_k(y_E)`` for every point and component."""
        leaves = self.x_tree.leaf_index(X)
        with np.errstate(divide="ignore"):
            logpi = np.log(self.proportions[leaves])
        return logpi + self.component_log_pdf(Y)

    def log_density_many(self, X, Y) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        return logsumexp(self.joint_log_terms(X, Y), axis=1) + self.perp_log_pdf(Y)

    def log_density(self, x, y) -> float:
        return float(self.log_density_many(np.reshape(x, (1, -1)), np.reshape(y, (1, -1)))[0])

    def __call__(self, x, Y) -> np.ndarray:
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        X = np.repeat(np.reshape(np.asarray(x, dtype=float), (1, -1)), Y.shape[0], axis=0)
        return np.exp(self.log_density_many(X, Y))

    def cell_key(self, x):
        return self.x_tree.leaf_of(x)

    def sample_y(self, x, rng, m: int) -> np.ndarray:
        from .simulate import sample_gmm_leaf
        Y, _ = sample_gmm_leaf(self, self.x_tree.leaf_of(x), rng, m)
        return Y


# ---------------------------------------------------------------------------
# Constrained M-step
# ---------------------------------------------------------------------------

def _weighted_scatter(Y, gamma, mus):
    out = []
    for k in range(gamma.shape[1]):
        Z = Y - mus[k]
        out.append((Z * gamma[:, k:k + 1]).T @ Z)
    return np.array(out)


def _jacobi_common_basis(D, M, W, sweeps: int = 30, tol: float = 1e-13):
    """Minimise ``sum_k tr(D diag(M_k) D' W_k)`` over orthogonal ``D`` by exact plane rotations.

    Each rotation minimises the objective in its plane, so the objective never
    increases.
    """
    D = D.copy()
    p = D.shape[0]
    for _ in range(sweeps):
        biggest = 0.0
        for i in range(p - 1):
            for j in range(i + 1, p):
                di, dj = D[:, i], D[:, j]
                wii = np.einsum("a,kab,b->k", di, W, di)
                wjj = np.einsum("a,kab,b->k", dj, W, dj)
                wij = np.einsum("a,kab,b->k", di, W, dj)
                dm = M[:, i] - M[:, j]
                alpha = float(np.sum(dm * (wii - wjj))) / 2.0
                beta = float(np.sum(dm * wij))
                gain = math.hypot(alpha, beta) + alpha
                if gain <= tol * (abs(alpha) + abs(beta) + 1e-300):
                    continue
                phi = math.atan2(-beta, -alpha)
                theta = phi / 2.0
                c, s = math.cos(theta), math.sin(theta)
                D[:, i], D[:, j] = c * di + s * dj, -s * di + c * dj
                biggest = max(biggest, gain)
        if biggest <= tol:
            break
    return D


def _free_basis(W_k, A_k):
    """Orthogonal basis minimising ``tr(diag(1/A) D' W D)``: large eigenvalues go with large A."""
    evals, evecs = np.linalg.eigh(W_k)
    order = np.argsort(A_k, kind="stable")
    D = np.empty_like(evecs)
    D[:, order] = evecs
    return D


def _checked_from_sigma(mu, Sigma, k):
    try:
        return GaussianComponent.from_sigma(mu, Sigma)
    except np.linalg.LinAlgError:
        raise DegenerateFitError(f"component {k} collapsed (singular covariance)", component=k) from None


def constrained_m_step(Y, gamma, comps: Sequence[GaussianComponent], spec: CovarianceSpec,
                       sweeps: int = 3) -> list:
    """Generalised M-step: each block is set to its exact conditional maximiser.

    Starting from ``comps``, the expected complete log-likelihood never
    decreases, which keeps EM monotone for every parametrisation.
    """
    K = gamma.shape[1]
    p = Y.shape[1]
    nk = gamma.sum(axis=0)
    n = float(nk.sum())
    for k in range(K):
        if nk[k] <= 1e-10 * max(n, 1.0):
            raise DegenerateFitError(f"component {k} has no responsibility mass", component=k)
    mu_mode = _mode_kind(spec.mean_mode)
    L = np.array([c.L for c in comps])
    D = np.array([c.D for c in comps])
    A = np.array([c.A for c in comps])
    sums = gamma.T @ Y
    if mu_mode == "free":
        mus = sums / nk[:, None]
    elif mu_mode == "common":
        prec = [np.linalg.inv(c.Sigma) for c in comps]
        lhs = sum(nk[k] * prec[k] for k in range(K))
        rhs = sum(prec[k] @ sums[k] for k in range(K))
        mus = np.repeat(np.linalg.solve(lhs, rhs)[None, :], K, axis=0)
    else:
        mus = _known_values(spec.mean_mode, K, (p,))
    W = _weighted_scatter(Y, gamma, mus)

    vm, bm, sm = (_mode_kind(m) for m in (spec.volume_mode, spec.basis_mode, spec.shape_mode))
    if vm == bm == sm == "free":
        return [_checked_from_sigma(mus[k], W[k] / nk[k], k) for k in range(K)]
    if vm == bm == sm == "common":
        pooled = _checked_from_sigma(mus[0], W.sum(axis=0) / n, 0)
        return [replace(pooled, mu=mus[k]) for k in range(K)]

    if vm == "known":
        L = _known_values(spec.volume_mode, K, ())
    if bm == "known":
        D = _known_values(spec.basis_mode, K, (p, p))
    if sm == "known":
        A = _known_values(spec.shape_mode, K, (p,))
    for _ in range(sweeps):
        # orientation
        if bm == "free":
            D = np.array([_free_basis(W[k], A[k]) for k in range(K)])
        elif bm == "common" and p > 1:
            M = 1.0 / (L[:, None] * A)
            D = np.repeat(_jacobi_common_basis(D[0], M, W)[None], K, axis=0)
        # shape
        B = np.einsum("kai,kab,kbi->ki", D, W, D)
        if sm == "free":
            A = B / np.exp(np.mean(np.log(B), axis=1, keepdims=True))
        elif sm == "common":
            pooled = (B / L[:, None]).sum(axis=0)
            A = np.repeat((pooled / np.exp(np.mean(np.log(pooled))))[None], K, axis=0)
        # volume
        T = np.sum(B / A, axis=1)
        if vm == "free":
            L = T / (p * nk)
        elif vm == "common":
            L = np.full(K, T.sum() / (p * n))
    return [GaussianComponent(mus[k], L[k], D[k], A[k]) for k in range(K)]


def _geomean_normalize(a):
    return a / np.exp(np.mean(np.log(a)))


def _project_shape(A, lo, hi):
    """Closest (in log scale shift) vector clipped to ``[lo, hi]`` with unit geometric mean."""
    la = np.log(A)
    llo, lhi = math.log(lo), math.log(hi)

    def mean_after(t):
        return float(np.mean(np.clip(la + t, llo, lhi)))

    if llo <= la.min() and la.max() <= lhi and abs(la.mean()) < 1e-14:
        return A.copy()
    t_lo, t_hi = llo - la.max() - 1.0, lhi - la.min() + 1.0
    for _ in range(200):
        mid = 0.5 * (t_lo + t_hi)
        if mean_after(mid) < 0:
            t_lo = mid
        else:
            t_hi = mid
    out = np.exp(np.clip(la + 0.5 * (t_lo + t_hi), llo, lhi))
    return _geomean_normalize(out) if np.all((out >= lo) & (out <= hi)) else out


def project_constraints(components: Sequence[GaussianComponent], spec: CovarianceSpec) -> list:
    """Enforce the bounds and the common/known structure of ``spec``.

    Means are clamped to the box ``[-a, a]``, volumes to ``[L_minus, L_plus]``
    and shapes to ``[lambda_minus, lambda_plus]`` with unit determinant. Common
    blocks that disagree are replaced by their pooled value and known blocks are
    overwritten. The map is idempotent.
    """
    K = len(components)
    p = components[0].p
    mus = np.array([c.mu for c in components])
    L = np.array([c.L for c in components])
    D = np.array([c.D for c in components])
    A = np.array([c.A for c in components])

    if _mode_kind(spec.mean_mode) == "known":
        mus = _known_values(spec.mean_mode, K, (p,))
    elif _mode_kind(spec.mean_mode) == "common" and not np.allclose(mus, mus[0], rtol=0, atol=1e-12):
        mus = np.repeat(mus.mean(axis=0)[None], K, axis=0)
    if _mode_kind(spec.volume_mode) == "known":
        L = _known_values(spec.volume_mode, K, ())
    elif _mode_kind(spec.volume_mode) == "common" and not np.allclose(L, L[0], rtol=1e-12, atol=0):
        L = np.full(K, np.exp(np.mean(np.log(L))))
    if _mode_kind(spec.shape_mode) == "known":
        A = _known_values(spec.shape_mode, K, (p,))
    elif _mode_kind(spec.shape_mode) == "common" and not np.allclose(A, A[0], rtol=1e-12, atol=0):
        A = np.repeat(_geomean_normalize(np.exp(np.mean(np.log(A), axis=0)))[None], K, axis=0)
    if _mode_kind(spec.basis_mode) == "known":
        D = _known_values(spec.basis_mode, K, (p, p))
    elif _mode_kind(spec.basis_mode) == "common" and not np.allclose(D, D[0], rtol=0, atol=1e-12):
        mean_omega = np.mean([(D[k] * A[k]) @ D[k].T for k in range(K)], axis=0)
        _, vecs = np.linalg.eigh(mean_omega)
        D = np.repeat(vecs[None], K, axis=0)

    if spec.enforce_bounds:
        mus = np.clip(mus, -spec.a, spec.a)
        L = np.clip(L, spec.L_minus, spec.L_plus)
        A = np.array([_project_shape(A[k], spec.lambda_minus, spec.lambda_plus) for k in range(K)])
    return [GaussianComponent(mus[k], L[k], D[k], A[k]) for k in range(K)]


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EMOptions:
    max_iter: int = 500
    tol: float = 1e-7
    seed: int = 0
    inner_sweeps: int = 3
    cov_floor: float = COV_FLOOR
    E_indices: tuple | None = None
    perp_spec: CovarianceSpec = field(default_factory=CovarianceSpec)


def kmeans_pp_seeds(Y: np.ndarray, K: int, rng) -> np.ndarray:
    """k-means++ seeding: each new centre drawn with probability proportional to squared distance."""
    n = Y.shape[0]
    centres = [Y[rng.integers(n)]]
    d2 = np.sum((Y - centres[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centres.append(Y[idx])
        d2 = np.minimum(d2, np.sum((Y - Y[idx]) ** 2, axis=1))
    return np.array(centres)


def initial_components(YE: np.ndarray, K: int, spec: CovarianceSpec, rng) -> list:
    mus = kmeans_pp_seeds(YE, K, rng)
    cov = np.atleast_2d(np.cov(YE, rowvar=False, bias=True))
    p = YE.shape[1]
    cov = cov + 1e-9 * np.trace(cov) / p * np.eye(p)
    base = GaussianComponent.from_sigma(np.zeros(p), cov)
    comps = [replace(base, mu=mus[k]) for k in range(K)]
    return project_constraints(comps, replace(spec, enforce_bounds=False))


def leaf_proportions(gamma: np.ndarray, leaves: np.ndarray, n_leaves: int, previous=None) -> np.ndarray:
    """Per-leaf M-step: average responsibility of the points in each leaf.

    Leaves without points keep their previous proportions (uniform if none).
    """
    K = gamma.shape[1]
    sums = np.zeros((n_leaves, K))
    np.add.at(sums, leaves, gamma)
    counts = np.bincount(leaves, minlength=n_leaves).astype(float)
    out = np.full((n_leaves, K), 1.0 / K) if previous is None else np.array(previous, dtype=float)
    has = counts > 0
    out[has] = sums[has] / counts[has, None]
    out[has] /= out[has].sum(axis=1, keepdims=True)
    return out


def _check_collapse(comps, spec, floor):
    if spec.enforce_bounds:
        return
    for k, c in enumerate(comps):
        lam = c.L * c.A
        if not np.all(np.isfinite(lam)) or lam.min() < floor:
            raise DegenerateFitError(f"component {k} collapsed (covariance eigenvalue {lam.min():.3g})", component=k)


def fit_perp(Yp: np.ndarray, perp_spec: CovarianceSpec) -> GaussianComponent | None:
    """Shared Gaussian of the non-discriminant coordinates, fitted by pooled moments."""
    if Yp.shape[1] == 0:
        return None
    gamma = np.ones((Yp.shape[0], 1))
    start = initial_components(Yp, 1, perp_spec, np.random.default_rng(0))
    comps = constrained_m_step(Yp, gamma, start, perp_spec, sweeps=10)
    if perp_spec.enforce_bounds:
        comps = project_constraints(comps, perp_spec)
    return comps[0]


def _e_step(model_parts, leaves, YE):
    comps, props = model_parts
    logphi = np.column_stack([c.log_pdf(YE) for c in comps])
    with np.errstate(divide="ignore"):
        logp = np.log(props[leaves]) + logphi
    ll_i = logsumexp(logp, axis=1)
    gamma = np.exp(logp - ll_i[:, None])
    return gamma, float(np.sum(ll_i))


def em_fit(dataset: Dataset, x_tree: PartitionTree, K: int, spec: CovarianceSpec | None = None,
           opts: EMOptions | None = None, init=None) -> SpatialGmm:
    """EM with the partition held fixed.

    ``init`` may be ``(components, proportions)`` to warm-start; otherwise
    means are seeded by k-means++, covariances by the pooled sample covariance
    and proportions are uniform. The returned model's ``history`` lists the
    log-likelihood after every iteration.
    """
    spec = spec or CovarianceSpec()
    opts = opts or EMOptions()
    n = dataset.n
    if n < K:
        raise ValueError("need at least K observations")
    E = tuple(range(dataset.d_y)) if opts.E_indices is None else tuple(opts.E_indices)
    perp_idx = [j for j in range(dataset.d_y) if j not in E]
    YE = dataset.Y[:, list(E)]
    perp = fit_perp(dataset.Y[:, perp_idx], opts.perp_spec)
    perp_ll = 0.0 if perp is None else float(np.sum(perp.log_pdf(dataset.Y[:, perp_idx])))
    leaves = x_tree.leaf_index(dataset.X)
    n_leaves = x_tree.n_leaves

    if init is None:
        comps = initial_components(YE, K, spec, np.random.default_rng(opts.seed))
        props = np.full((n_leaves, K), 1.0 / K)
    else:
        comps, props = list(init[0]), np.array(init[1], dtype=float)
    if spec.enforce_bounds:
        comps = project_constraints(comps, spec)

    gamma, ll = _e_step((comps, props), leaves, YE)
    history = [ll + perp_ll]
    for _ in range(opts.max_iter):
        props = leaf_proportions(gamma, leaves, n_leaves, props)
        comps = constrained_m_step(YE, gamma, comps, spec, opts.inner_sweeps)
        if spec.enforce_bounds:
            comps = project_constraints(comps, spec)
        _check_collapse(comps, spec, opts.cov_floor)
        gamma, ll_new = _e_step((comps, props), leaves, YE)
        history.append(ll_new + perp_ll)
        gain = ll_new - ll
        ll = ll_new
        if gain < opts.tol * abs(ll_new):
            break
    return SpatialGmm(x_tree, tuple(comps), props, spec, E, perp, opts.perp_spec, dataset.d_y,
                      ll + perp_ll, tuple(history))


def loglik(model: SpatialGmm, dataset: Dataset) -> float:
    return float(np.sum(model.log_density_many(dataset.X, dataset.Y)))


def responsibilities(model: SpatialGmm, dataset: Dataset) -> np.ndarray:
    terms = model.joint_log_terms(dataset.X, dataset.Y)
    return np.exp(terms - logsumexp(terms, axis=1, keepdims=True))


def segment(model: SpatialGmm, dataset: Dataset) -> np.ndarray:
    """MAP labels ``argmax_k pi_k[leaf(x)] Phi_k(y)``, numbered 1..K, ties to the lowest index."""
    terms = model.joint_log_terms(dataset.X, dataset.Y)
    return np.argmax(terms, axis=1).astype(np.int64) + 1


# ---------------------------------------------------------------------------
# Dimensions
# ---------------------------------------------------------------------------

def theta_dimension(K: int, spec: CovarianceSpec, q: int) -> int:
    """Number of free Gaussian parameters of ``K`` components in dimension ``q``."""
    if q == 0:
        return 0
    blocks = (
        (spec.mean_mode, q),
        (spec.volume_mode, 1),
        (spec.basis_mode, q * (q - 1) // 2),
        (spec.shape_mode, q - 1),
    )
    return sum(multiplier(mode, K) * size for mode, size in blocks)


def dimension(x_tree, K: int, spec: CovarianceSpec, E_dim: int, d_y: int,
              perp_spec: CovarianceSpec | None = None) -> int:
    """Model dimension: leaf proportions, shared components and the non-discriminant Gaussian."""
    n_leaves = x_tree.n_leaves if isinstance(x_tree, PartitionTree) else int(x_tree)
    perp_spec = perp_spec or CovarianceSpec()
    return n_leaves * (K - 1) + theta_dimension(K, spec, E_dim) + theta_dimension(1, perp_spec, d_y - E_dim)


def variable_selection_weight(E_mode: str, E_dim: int, p: int) -> float:
    """Coding cost of the discriminant subspace: 0 if known, ``E_dim`` if ordered, larger if free."""
    if not 1 <= E_dim <= p:
        raise ValueError("need 1 <= E_dim <= p")
    if E_mode == "known":
        return 0.0
    if E_mode == "ordered":
        return float(E_dim)
    if E_mode == "free":
        return (1.0 + math.log(2.0) + math.log(p / E_dim)) * E_dim
    raise ValueError(f"unknown subspace mode {E_mode!r}")
