"""Piecewise squared-polynomial conditional densities.

On each product cell ``R_x x R_y`` the conditional density is ``w * Q(y)**2``
where ``Q`` is a polynomial of degree at most ``r`` per response axis, with unit
L2 norm on ``R_y``, and the weights ``w`` of the cells of an X-leaf sum to one.
``Q`` is stored by its coefficients in the tensor basis of shifted Legendre
polynomials rescaled to be orthonormal on the cell, so the normalisation is
simply ``||coeffs|| = 1``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.polynomial import legendre

from .data import Dataset
from .exceptions import DomainError
from .geometry import Hyperrectangle, PartitionTree

LOG_FLOOR = math.log(1e-300)
MAX_DEGREE = 4


def as_degree(r, d_y: int | None = None) -> tuple:
    """Validate a degree vector; a scalar is broadcast to ``d_y`` axes."""
    if np.isscalar(r):
        if d_y is None:
            raise ValueError("scalar degree needs d_y")
        r = (int(r),) * d_y
    r = tuple(int(v) for v in r)
    if d_y is not None and len(r) != d_y:
        raise ValueError(f"degree vector {r} does not match d_y={d_y}")
    if any(v < 0 or v > MAX_DEGREE for v in r):
        raise ValueError(f"degrees must lie in [0, {MAX_DEGREE}], got {r}")
    return r


def basis_size(r) -> int:
    return int(np.prod([v + 1 for v in r]))


def multi_indices(r) -> list:
    return list(itertools.product(*[range(v + 1) for v in r]))


def basis_matrix(Y: np.ndarray, cell: Hyperrectangle, r) -> np.ndarray:
    """Orthonormal tensor Legendre basis of ``cell`` evaluated at ``Y``: shape ``(m, prod(r+1))``."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    lo = np.asarray(cell.lower)
    w = np.asarray(cell.upper) - lo
    per_axis = []
    for j, rj in enumerate(r):
        t = 2.0 * (Y[:, j] - lo[j]) / w[j] - 1.0
        V = legendre.legvander(t, rj) * np.sqrt(2.0 * np.arange(rj + 1) + 1.0) / math.sqrt(w[j])
        per_axis.append(V)
    out = per_axis[0]
    for V in per_axis[1:]:
        out = (out[:, :, None] * V[:, None, :]).reshape(Y.shape[0], -1)
    return out


# ---------------------------------------------------------------------------
# Per-cell maximum likelihood on the unit sphere
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SphereOptions:
    restarts: int = 8
    tol: float = 1e-8
    max_iter: int = 500
    seed: int = 0


def sphere_objective(Phi: np.ndarray, c: np.ndarray) -> float:
    v = Phi @ c
    return float(np.sum(np.maximum(np.log(np.maximum(v * v, 1e-300)), LOG_FLOOR)))


def sphere_gradient(Phi: np.ndarray, c: np.ndarray) -> np.ndarray:
    v = Phi @ c
    v = np.where(np.abs(v) < 1e-150, 1e-150, v)
    return 2.0 * (Phi / v[:, None]).sum(axis=0)


def kkt_residual(Phi: np.ndarray, c: np.ndarray) -> float:
    """Norm of the tangential gradient of the log-likelihood at ``c``."""
    g = sphere_gradient(Phi, c)
    return float(np.linalg.norm(g - (g @ c) * c))


def _tangent_basis(c: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(np.column_stack([c, np.eye(c.shape[0])]))
    return q[:, 1:c.shape[0]]


def _ascend(Phi, c, opts: SphereOptions):
    f = sphere_objective(Phi, c)
    for _ in range(opts.max_iter):
        v = Phi @ c
        v = np.where(np.abs(v) < 1e-150, 1e-150, v)
        g = 2.0 * (Phi / v[:, None]).sum(axis=0)
        gc = float(g @ c)
        gt = g - gc * c
        if np.linalg.norm(gt) <= opts.tol:
            break
        # Riemannian Newton direction; the Hessian is negative definite on the tangent space
        B = _tangent_basis(c)
        W = Phi / v[:, None]
        H = -2.0 * W.T @ W - gc * np.eye(c.shape[0])
        A = B.T @ H @ B
        try:
            direction = -B @ np.linalg.solve(A, B.T @ g)
        except np.linalg.LinAlgError:
            direction = gt
        if direction @ gt <= 0:
            direction = gt
        step = 1.0
        improved = False
        while step > 1e-14:
            trial = c + step * direction
            trial /= np.linalg.norm(trial)
            ft = sphere_objective(Phi, trial)
            if ft >= f:
                improved = ft > f or np.linalg.norm(trial - c) > 0
                c, f = trial, ft
                break
            step *= 0.5
        if not improved:
            break
    return c, f


def _canonical_sign(c: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(c) > 1e-14)
    if nz.size and c[nz[0]] < 0:
        return -c
    return c


def sphere_mle(Phi: np.ndarray, opts: SphereOptions | None = None) -> tuple[np.ndarray, float]:
    """Maximise ``sum_i ln (Phi_i . c)**2`` over unit vectors ``c``.

    The search starts from the constant polynomial and from ``opts.restarts``
    random unit vectors; the first best local maximum found wins.
    """
    opts = opts or SphereOptions()
    P = Phi.shape[1]
    e0 = np.zeros(P)
    e0[0] = 1.0
    if P == 1 or Phi.shape[0] == 0:
        return e0, sphere_objective(Phi, e0)
    rng = np.random.default_rng(opts.seed)
    starts = [e0] + [v / np.linalg.norm(v) for v in rng.standard_normal((opts.restarts, P))]
    best_c, best_f = None, -math.inf
    for c0 in starts:
        c, f = _ascend(Phi, c0, opts)
        if best_c is None or f > best_f + 1e-12 * max(1.0, abs(best_f)):
            best_c, best_f = c, f
    return _canonical_sign(best_c), best_f


@dataclass(frozen=True)
class CellPoly:
    """Fitted squared polynomial of one (X-leaf, Y-cell) pair."""

    coeffs: np.ndarray
    weight: float
    count: int = 0
    loglik: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=float).reshape(-1))


def uniform_cell(cell: Hyperrectangle, r, weight: float | None = None) -> CellPoly:
    c = np.zeros(basis_size(r))
    c[0] = 1.0
    return CellPoly(c, cell.volume if weight is None else weight, 0, 0.0)


def fit_cell(points: np.ndarray, n_leaf: int, cell: Hyperrectangle, r, opts: SphereOptions | None = None) -> CellPoly:
    """Maximum-likelihood squared polynomial of one cell.

    ``points`` are the responses of the X-leaf falling in ``cell``; ``n_leaf``
    is the number of covariates in the X-leaf. The weight is the count ratio;
    with no points the weight is 0 and ``Q`` is the flat polynomial.
    """
    if n_leaf < 1:
        raise ValueError("n_leaf must be positive")
    points = np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, cell.dim)
    m = points.shape[0]
    r = as_degree(r, cell.dim)
    if m == 0:
        return uniform_cell(cell, r, weight=0.0)
    if basis_size(r) == 1:
        coeffs = np.ones(1)
        f = -m * math.log(cell.volume)
    else:
        coeffs, f = sphere_mle(basis_matrix(points, cell, r), opts)
    weight = m / n_leaf
    return CellPoly(coeffs, weight, m, m * math.log(weight) + f)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolyModel:
    """Conditional density ``s(y|x) = w Q(y)**2`` on the product cells.

    ``y_trees[l]`` partitions the responses of X-leaf ``l`` and
    ``cells[l][k]`` holds the polynomial of its ``k``-th Y-cell.
    """

    x_tree: PartitionTree
    y_trees: tuple
    cells: tuple
    degree: tuple
    loglik: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def d_x(self) -> int:
        return self.x_tree.dim

    @property
    def d_y(self) -> int:
        return self.y_trees[0].dim

    def dimension(self) -> tuple:
        return dimension([t.n_leaves for t in self.y_trees], self.degree)

    @property
    def n_cells(self) -> int:
        return sum(t.n_leaves for t in self.y_trees)

    @property
    def identifier(self) -> str:
        ys = "|".join(t.signature for t in self.y_trees)
        r = ",".join(str(v) for v in self.degree)
        return f"X={self.x_tree.signature};Y={ys};r={r}"

    def cell_key(self, x):
        return self.x_tree.leaf_of(x)

    def _leaf_log_density(self, leaf: int, Y: np.ndarray) -> np.ndarray:
        ytree = self.y_trees[leaf]
        idx = ytree.leaf_index(Y)
        out = np.full(Y.shape[0], -np.inf)
        for k in np.unique(idx):
            sel = idx == k
            cp = self.cells[leaf][k]
            if cp.weight <= 0:
                continue
            q = basis_matrix(Y[sel], ytree.leaves[k], self.degree) @ cp.coeffs
            with np.errstate(divide="ignore"):
                out[sel] = math.log(cp.weight) + np.log(q * q)
        return out

    def log_density(self, x, y) -> float:
        x = np.asarray(x, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(1, -1)
        return float(self._leaf_log_density(self.x_tree.leaf_of(x), y)[0])

    def log_density_many(self, X, Y) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        leaves = self.x_tree.leaf_index(X)
        out = np.empty(X.shape[0])
        for leaf in np.unique(leaves):
            sel = leaves == leaf
            out[sel] = self._leaf_log_density(int(leaf), Y[sel])
        return out

    def __call__(self, x, Y) -> np.ndarray:
        """Conditional density values ``s(Y | x)`` for a single covariate ``x``."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        leaf = self.x_tree.leaf_of(x)
        return np.exp(self._leaf_log_density(leaf, Y))

    def sample_y(self, x, rng, m: int) -> np.ndarray:
        from .simulate import sample_poly_leaf
        return sample_poly_leaf(self, self.x_tree.leaf_of(x), rng, m)


def dimension(y_cells_per_leaf: Sequence[int], r) -> tuple:
    """``(dim, D)``: the model dimension and the upper bound used by the penalty."""
    P = basis_size(r)
    cells = [int(k) for k in y_cells_per_leaf]
    dim = sum(k * P - 1 for k in cells)
    return dim, sum(cells) * P


def _check_unit(A: np.ndarray, name: str):
    if A.size and (np.any(A < 0.0) or np.any(A > 1.0)):
        raise DomainError(f"{name} must lie in the unit cube")


def fit(dataset: Dataset, x_tree: PartitionTree, y_trees, r, opts: SphereOptions | None = None) -> PolyModel:
    """Maximum-likelihood squared-polynomial model on fixed partitions.

    ``y_trees`` is one tree shared by every X-leaf or a sequence with one tree
    per X-leaf. X-leaves without data get the uniform density.
    """
    _check_unit(dataset.X, "covariates")
    _check_unit(dataset.Y, "responses")
    r = as_degree(r, dataset.d_y)
    if isinstance(y_trees, PartitionTree):
        y_trees = (y_trees,) * x_tree.n_leaves
    y_trees = tuple(y_trees)
    if len(y_trees) != x_tree.n_leaves:
        raise ValueError("need one Y-partition per X-leaf")
    leaves = x_tree.leaf_index(dataset.X)
    cells = []
    total = 0.0
    for l, ytree in enumerate(y_trees):
        Yl = dataset.Y[leaves == l]
        n_leaf = Yl.shape[0]
        if n_leaf == 0:
            cells.append(tuple(uniform_cell(c, r) for c in ytree.leaves))
            continue
        yidx = ytree.leaf_index(Yl)
        row = []
        for k, cell in enumerate(ytree.leaves):
            cp = fit_cell(Yl[yidx == k], n_leaf, cell, r, opts)
            total += cp.loglik
            row.append(cp)
        cells.append(tuple(row))
    return PolyModel(x_tree, y_trees, tuple(cells), r, total)


def loglik(model: PolyModel, dataset: Dataset) -> float:
    """Log-likelihood of ``dataset`` under ``model`` (``-inf`` if a point has zero density)."""
    return float(np.sum(model.log_density_many(dataset.X, dataset.Y)))
