"""Penalised model selection.

The penalised criterion is ``-loglik(m) + pen(m)``. With an additive penalty
(a sum of per-cell terms) the best partition is found exactly by dynamic
programming over tree-structured collections: every cell is either a leaf or
split according to the collection's growth rule, and the cost of a split is
the sum of the best costs of its children. For conditional densities the
cost of an X-leaf is itself the result of a DP over the Y-partitions.

Ties are broken by the smaller dimension, then by the lexicographically
smaller model identifier, both in the DP and in exhaustive search.
"""

from __future__ import annotations

import functools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import theilslopes

from . import polydens, spatial_gmm
from .data import Dataset
from .exceptions import CalibrationError, DegenerateFitError, ResourceBudgetError, SelectionError
from .geometry import (
    CollectionKind,
    Hyperrectangle,
    Node,
    PartitionTree,
    Split,
    coding_constants,
    enumerate_partitions,
    split_options,
    udp_max_depth,
)

LN2 = math.log(2.0)
CSTAR_GMM = (1.0 + math.sqrt(math.pi)) ** 2
CSTAR_CODING = 2.0 * LN2


# ---------------------------------------------------------------------------
# Complexity and penalties
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComplexitySpec:
    D: float
    V: float
    n: int
    localized: bool = True

    def __post_init__(self):
        if self.D < 0 or self.V < 0 or self.n < 1:
            raise ValueError("need D >= 0, V >= 0 and n >= 1")


def complexity(spec: ComplexitySpec) -> float:
    """Model complexity from the bracketing entropy bound ``H(delta) <= V + D ln(1/delta)``.

    ``D = 0`` gives ``V``; the localized bound gives ``C D`` with
    ``C = (sqrt(V/D) + sqrt(pi))**2``; the global bound adds the
    ``1 + (ln(n / (e C D)))_+`` correction.
    """
    if spec.D == 0:
        return float(spec.V)
    C = (math.sqrt(spec.V / spec.D) + math.sqrt(math.pi)) ** 2
    if spec.localized:
        return C * spec.D
    log_term = max(0.0, math.log(spec.n / (math.e * C * spec.D)))
    return (2.0 * C + 1.0 + log_term) * spec.D


@dataclass(frozen=True)
class Theoretical:
    kappa: float

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("theoretical mode requires kappa > 0")


@dataclass(frozen=True)
class Slope:
    """Slope heuristic; ``kappa_hat=None`` means calibrate from the data."""

    kappa_hat: float | None = None


@dataclass(frozen=True)
class Manual:
    kappa_tilde: float
    kappa_tilde2: float | None = None

    def __post_init__(self):
        if self.kappa_tilde < 0 or (self.kappa_tilde2 is not None and self.kappa_tilde2 < 0):
            raise ValueError("penalty multipliers must be nonnegative")


def parse_mode(mode: str, kappa: float | None):
    if mode == "slope":
        return Slope(kappa)
    if mode == "theoretical":
        if kappa is None:
            raise ValueError("theoretical mode needs an explicit kappa")
        return Theoretical(kappa)
    if mode == "manual":
        if kappa is None:
            raise ValueError("manual mode needs an explicit kappa")
        return Manual(kappa)
    raise ValueError(f"unknown penalty mode {mode!r}")


@dataclass(frozen=True)
class PenaltySpec:
    """An additive penalty.

    ``per_leaf_unit`` is charged for every product cell (conditional
    densities) or every X-leaf (spatial mixtures), ``per_x_leaf`` for every
    X-leaf of a conditional density, and ``constant`` plus ``extra_terms``
    once per model.
    """

    mode: object
    per_leaf_unit: float
    per_x_leaf: float = 0.0
    constant: float = 0.0
    extra_terms: tuple = ()

    def __post_init__(self):
        vals = [self.per_leaf_unit, self.constant] + [v for _, v in self.extra_terms]
        if any(v < 0 for v in vals) or self.per_leaf_unit + self.per_x_leaf < 0:
            raise ValueError("penalty values must be nonnegative")

    @property
    def extra(self) -> float:
        return float(sum(v for _, v in self.extra_terms))

    def scaled(self, factor: float) -> "PenaltySpec":
        return replace(
            self,
            per_leaf_unit=self.per_leaf_unit * factor,
            per_x_leaf=self.per_x_leaf * factor,
            constant=self.constant * factor,
            extra_terms=tuple((k, v * factor) for k, v in self.extra_terms),
        )

    def total(self, n_units: int, n_x_leaves: int = 0) -> float:
        return self.per_leaf_unit * n_units + self.per_x_leaf * n_x_leaves + self.constant + self.extra

    def for_model(self, model) -> float:
        if isinstance(model, polydens.PolyModel):
            return self.total(model.n_cells, model.x_tree.n_leaves)
        return self.total(model.x_tree.n_leaves)


def cstar_poly(r) -> float:
    """Upper bound on the entropy constant of squared polynomials of degree ``r``."""
    r = polydens.as_degree(r, len(r) if isinstance(r, (tuple, list)) else 1)
    return 0.5 * math.log(8 * math.pi * math.e) + sum(math.log(math.sqrt(2.0) * (rd + 1)) for rd in r)


def penalty_poly(r, kind_x, kind_y, n: int, d_x: int, mode, *, weak: bool = False,
                 shared_udp: bool = False, r_family: Sequence | None = None) -> PenaltySpec:
    """Penalty of piecewise squared-polynomial conditional densities of degree ``r``.

    The additive form charges ``kappa_tilde * prod(r_d + 1)`` per product
    cell. In theoretical mode ``kappa_tilde = kappa (C + c (A0X + B0X + A0Y +
    B0Y) + 2 ln n)``; ``weak=True`` uses the sharper split form in which the
    coding constants are charged per X-leaf and per cell. The ``2 ln n``
    term drops for uniform X-partitions sharing one uniform Y-partition.
    ``r_family`` lists every degree considered when degrees are selected
    globally.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    r = tuple(np.atleast_1d(r).astype(int).tolist())
    d_y = len(r)
    P = polydens.basis_size(r)
    if isinstance(mode, Manual):
        return PenaltySpec(mode, mode.kappa_tilde * P)
    if isinstance(mode, Slope):
        k = 1.0 if mode.kappa_hat is None else 2.0 * mode.kappa_hat
        return PenaltySpec(mode, k * P)
    if not isinstance(mode, Theoretical):
        raise TypeError(f"unsupported penalty mode {mode!r}")
    family = [tuple(np.atleast_1d(f).astype(int).tolist()) for f in (r_family or [r])]
    C = max(cstar_poly(f) for f in family)
    cx = coding_constants(kind_x, n, d_x)
    cy = coding_constants(kind_y, n, d_y)
    A0x = cx.A0 + (math.log(len(family)) if len(family) > 1 else 0.0)
    log_term = 0.0 if shared_udp else 2.0 * math.log(n)
    k = mode.kappa
    if weak:
        return PenaltySpec(
            mode,
            per_leaf_unit=k * ((C + log_term) * P + CSTAR_CODING * cy.B0),
            per_x_leaf=k * CSTAR_CODING * (cx.B0 + cy.A0),
            constant=k * CSTAR_CODING * A0x,
        )
    kt = k * (C + CSTAR_CODING * (A0x + cx.B0 + cy.A0 + cy.B0) + log_term)
    return PenaltySpec(mode, kt * P)


def _gmm_kappas(mode, kind_x, n, d_x, cstar=CSTAR_GMM, cstar_coding=CSTAR_CODING):
    if isinstance(mode, Manual):
        return mode.kappa_tilde, mode.kappa_tilde if mode.kappa_tilde2 is None else mode.kappa_tilde2
    if isinstance(mode, Slope):
        k = 1.0 if mode.kappa_hat is None else 2.0 * mode.kappa_hat
        return k, k
    if not isinstance(mode, Theoretical):
        raise TypeError(f"unsupported penalty mode {mode!r}")
    cx = coding_constants(kind_x, n, d_x)
    k1 = mode.kappa * (2.0 * cstar + 1.0 + max(0.0, math.log(n / (math.e * cstar)))
                       + cstar_coding * (cx.A0 + cx.B0 + 1.0))
    return k1, mode.kappa * cstar_coding


def penalty_gmm(x_tree, K: int, spec, E_mode: str, E_dim: int, p: int, n: int, mode,
                perp_spec=None, kind_x=None, d_x: int | None = None) -> PenaltySpec:
    """Penalty ``k1 * dim + k2 * D_E`` of a spatial mixture, split into a per-X-leaf part and the rest."""
    if isinstance(x_tree, PartitionTree):
        kind_x = x_tree.kind if kind_x is None else kind_x
        d_x = x_tree.dim if d_x is None else d_x
    kind_x = kind_x or CollectionKind.RDP
    d_x = d_x or 1
    k1, k2 = _gmm_kappas(mode, kind_x, n, d_x)
    perp_spec = perp_spec or spatial_gmm.CovarianceSpec()
    theta = spatial_gmm.theta_dimension(K, spec, E_dim) + spatial_gmm.theta_dimension(1, perp_spec, p - E_dim)
    return PenaltySpec(
        mode,
        per_leaf_unit=k1 * (K - 1),
        extra_terms=(("theta", k1 * theta), ("E", k2 * spatial_gmm.variable_selection_weight(E_mode, E_dim, p))),
    )


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelRecord:
    identifier: str
    dim: int
    neg_loglik: float
    penalty: float
    score: float


@dataclass(frozen=True)
class SlopeDiagnostics:
    kappa_hat: float
    kappa_tilde: float
    intercept: float
    n_fit: int
    jump_kappa: float
    jump_size: int
    path: tuple  # (kappa, selected dimension) along the sweep


@dataclass
class SelectionReport:
    records: list
    chosen: str
    chosen_score: float
    penalty: PenaltySpec | None = None
    slope: SlopeDiagnostics | None = None
    model: object = field(default=None, repr=False)

    @property
    def chosen_record(self) -> ModelRecord:
        return next(r for r in self.records if r.identifier == self.chosen)


def _tie_better(a: tuple, b: tuple | None) -> bool:
    """``a`` beats ``b`` where both are ``(cost, dim, identifier...)``; costs within 1e-10 tie."""
    if b is None:
        return True
    tol = 1e-10 * max(1.0, abs(a[0]), abs(b[0]))
    if a[0] < b[0] - tol:
        return True
    if a[0] > b[0] + tol:
        return False
    return a[1:] < b[1:]


def _model_dim(model) -> int:
    d = model.dimension()
    return int(d[0] if isinstance(d, tuple) else d)


def _pick(records: Sequence[ModelRecord]) -> ModelRecord:
    best = None
    for rec in records:
        if best is None or _tie_better((rec.score, rec.dim, rec.identifier), (best.score, best.dim, best.identifier)):
            best = rec
    return best


# ---------------------------------------------------------------------------
# Slope heuristic
# ---------------------------------------------------------------------------

def slope_calibrate(pairs: Iterable[tuple], min_models: int = 6, min_ratio: float = 4.0):
    """Estimate the slope of ``-loglik`` against dimension for the largest models.

    Returns ``(kappa_hat, diagnostics)``; the recommended multiplier is
    ``2 * kappa_hat``. For every dimension only the best ``-loglik`` is kept;
    a Theil-Sen line is fitted to the largest-dimension half. The diagnostics
    also report the largest jump of the selected dimension while ``kappa``
    sweeps ``[kappa_hat, 4 kappa_hat]``.
    """
    best = {}
    for dim, nll in pairs:
        dim = float(dim)
        if not math.isfinite(nll):
            continue
        best[dim] = min(best.get(dim, math.inf), float(nll))
    dims = np.array(sorted(best))
    nll = np.array([best[d] for d in dims])
    if dims.size < min_models or dims[-1] < min_ratio * max(dims[0], 1e-300) and dims[0] > 0:
        raise CalibrationError(
            f"slope calibration needs at least {min_models} models spanning a {min_ratio:g}x dimension range; "
            f"got {dims.size} dimensions in [{dims[0] if dims.size else 0:g}, {dims[-1] if dims.size else 0:g}]. "
            "Widen the model grid."
        )
    half = max(3, int(math.ceil(dims.size / 2)))
    slope, intercept, _, _ = theilslopes(nll[-half:], dims[-half:])
    kappa_hat = -float(slope)
    if not kappa_hat > 0:
        raise CalibrationError("fitted slope is not negative; widen the model grid toward larger models")
    sweep = np.linspace(kappa_hat, 4.0 * kappa_hat, 301)
    chosen = []
    for k in sweep:
        crit = nll + k * dims
        chosen.append(float(dims[int(np.flatnonzero(crit <= crit.min() + 1e-12 * max(1.0, abs(crit.min())))[0])]))
    jumps = -np.diff(chosen)
    j = int(np.argmax(jumps)) if jumps.size else 0
    diag = SlopeDiagnostics(
        kappa_hat=kappa_hat,
        kappa_tilde=2.0 * kappa_hat,
        intercept=float(intercept),
        n_fit=half,
        jump_kappa=float(sweep[j + 1]) if jumps.size else float(sweep[0]),
        jump_size=int(round(jumps[j])) if jumps.size else 0,
        path=tuple((float(k), int(round(c))) for k, c in zip(sweep[::30], chosen[::30])),
    )
    return kappa_hat, diag


def default_kappa_grid(n: int) -> np.ndarray:
    """Decreasing multipliers for the slope path; selected dimensions grow along it."""
    return np.geomspace(4.0 * math.log(n) + 4.0, 1e-2, 32)


# ---------------------------------------------------------------------------
# Generic tree DP
# ---------------------------------------------------------------------------

@dataclass
class Leaf:
    """Value of a cell used as a leaf: cost, dimension, identifier parts and payload."""

    cost: float
    dim: int
    aux: tuple = ()
    payload: object = None


@dataclass
class Solution:
    cost: float
    dim: int
    sig: str
    aux: tuple
    node: Node
    leaves: list  # Leaf values in depth-first order


def _split_prefix(split: Split) -> str:
    if split.kind == "dyadic":
        return "D"
    return f"S{split.axis}@{split.position:.12g}"


def _child_rows(X, rows, cell: Hyperrectangle, split: Split) -> list:
    pts = X[rows]
    if split.kind == "dyadic":
        idx = np.zeros(rows.shape[0], dtype=np.int64)
        for j in range(cell.dim):
            mid = (cell.lower[j] + cell.upper[j]) / 2.0
            idx |= (pts[:, j] >= mid).astype(np.int64) << j
        return [rows[idx == i] for i in range(2 ** cell.dim)]
    upper = pts[:, split.axis] >= split.position
    return [rows[~upper], rows[upper]]


def tree_depth(node: Node) -> int:
    if node.is_leaf:
        return 0
    return 1 + max(tree_depth(c) for c in node.children)


@dataclass(frozen=True)
class _Skeleton:
    cells: tuple
    splits: tuple  # per cell: ((split, prefix, child ids), ...)
    caps: tuple
    root: int
    udp: tuple | None


@functools.lru_cache(maxsize=64)
def _skeleton(kind: CollectionKind, n: int, d: int, cap, max_depth) -> _Skeleton:
    """Cells reachable from the root under the growth rule, children before parents."""
    if kind is CollectionKind.UDP:
        Jmax = udp_max_depth(n, d)
        if max_depth is not None:
            Jmax = min(Jmax, max_depth)
        trees = tuple(PartitionTree.uniform(n, d, J) for J in range(Jmax + 1)
                      if cap is None or 2 ** (d * J) <= cap)
        return _Skeleton((), (), (), -1, trees)
    cells, splits_out, caps, index = [], [], [], {}

    def build(cell, depth, cap_here):
        key = (cell.key, depth if max_depth is not None else None, cap_here)
        hit = index.get(key)
        if hit is not None:
            return hit
        splits = []
        if (max_depth is None or depth < max_depth) and (cap_here is None or cap_here >= 2):
            for split in split_options(cell, kind, n):
                kids = split.children(cell)
                if cap_here is not None and len(kids) > cap_here:
                    continue
                # each sibling needs at least one leaf
                kid_cap = None if cap_here is None else cap_here - len(kids) + 1
                ids = tuple(build(k, depth + 1, kid_cap) for k in kids)
                splits.append((split, _split_prefix(split), ids))
        cells.append(cell)
        splits_out.append(tuple(splits))
        caps.append(cap_here)
        index[key] = len(cells) - 1
        return len(cells) - 1

    root = build(Hyperrectangle.unit(d), 0, cap)
    return _Skeleton(tuple(cells), tuple(splits_out), tuple(caps), root, None)


class _Graph:
    """Every cell reachable under a collection's growth rule, with the points it holds.

    Built once; :meth:`solve` then minimises any additive leaf cost exactly.
    With ``cap`` set, each cell keeps the best sub-solution for every exact
    leaf count (children are combined by min-plus convolution); otherwise a
    single best entry. Cells reached by several split paths are shared.
    """

    def __init__(self, kind, n: int, X: np.ndarray, cap: int | None = None, max_depth: int | None = None,
                 max_cells: int | None = None):
        self.kind = CollectionKind.parse(kind)
        if self.kind is CollectionKind.HRP:
            raise ValueError("HRP has no tree structure; use exhaustive search")
        self.n, self.X, self.cap = int(n), X, cap
        sk = _skeleton(self.kind, self.n, X.shape[1], cap, max_depth)
        if max_cells is not None and len(sk.cells) > max_cells:
            raise ResourceBudgetError(f"partition DP exceeded the budget of {max_cells} cells")
        all_rows = np.arange(X.shape[0])
        if sk.udp is not None:
            self.udp = []
            for tree in sk.udp:
                idx = tree.leaf_index(X) if X.shape[0] else np.zeros(0, dtype=np.int64)
                self.udp.append((tree, [all_rows[idx == k] for k in range(tree.n_leaves)]))
            return
        self.udp = None
        self.cells, self.splits, self.caps, self.root = sk.cells, sk.splits, sk.caps, sk.root
        rows = [None] * len(sk.cells)
        rows[sk.root] = all_rows
        empty = all_rows[:0]
        for i in range(len(sk.cells) - 1, -1, -1):
            r = rows[i]
            if r is None:
                continue
            for split, _, ids in sk.splits[i]:
                if any(rows[k] is None for k in ids):
                    parts = _child_rows(X, r, sk.cells[i], split) if r.size else [empty] * len(ids)
                    for k, part in zip(ids, parts):
                        if rows[k] is None:
                            rows[k] = part
        self.rows = rows

    def leaf_inputs(self):
        """``(cell, rows)`` of every cell that can be a leaf."""
        if self.udp is not None:
            return [(c, r) for tree, rows in self.udp for c, r in zip(tree.leaves, rows)]
        return list(zip(self.cells, self.rows))

    # -- solving -----------------------------------------------------------

    def solve(self, leaf_fn: Callable) -> Solution:
        """Minimise the sum of ``leaf_fn(cell, rows).cost`` over the partitions of the collection."""
        if self.udp is not None:
            return self._solve_udp(leaf_fn)
        self._leaves = [leaf_fn(c, r) for c, r in zip(self.cells, self.rows)]
        self._sig, self._aux = {}, {}
        unit = 1 if self.cap is not None else 0
        self._tables = tables = []
        if self.cap is None:
            for i in range(len(self.cells)):
                lf = self._leaves[i]
                best = (lf.cost, lf.dim, None)
                for si, (_, _, kids) in enumerate(self.splits[i]):
                    cost, dim = 0.0, 0
                    for k in kids:
                        e = tables[k][0]
                        cost += e[0]
                        dim += e[1]
                    entry = (cost, dim, (si, tuple((k, 0) for k in kids)))
                    if self._better(i, entry, best):
                        best = entry
                tables.append({0: best})
        for i in range(len(tables), len(self.cells)):
            lf = self._leaves[i]
            table = {unit: (lf.cost, lf.dim, None)}
            for si, (_, _, kids) in enumerate(self.splits[i]):
                for count, (cost, dim, parts) in self._convolve(kids, self.caps[i]).items():
                    entry = (cost, dim, (si, parts))
                    if self._better(i, entry, table.get(count)):
                        table[count] = entry
            tables.append(table)
        root = self.root
        best = None
        for count, entry in tables[root].items():
            if best is None or self._better(root, entry, tables[root][best]):
                best = count
        entry = tables[root][best]
        leaves = []
        node = self._materialise(root, entry, leaves)
        return Solution(entry[0], entry[1], self._stored_sig(root, best), self._stored_aux(root, best), node, leaves)

    def _solve_udp(self, leaf_fn) -> Solution:
        best = None
        for tree, rows in self.udp:
            leaves = [leaf_fn(c, r) for c, r in zip(tree.leaves, rows)]
            sol = Solution(float(sum(l.cost for l in leaves)), sum(l.dim for l in leaves), tree.signature,
                           sum((l.aux for l in leaves), ()), tree.root, leaves)
            if best is None or _tie_better((sol.cost, sol.dim, sol.sig, sol.aux),
                                           (best.cost, best.dim, best.sig, best.aux)):
                best = sol
        return best

    def _stored_sig(self, i, count) -> str:
        key = (i, count)
        s = self._sig.get(key)
        if s is None:
            s = self._entry_sig(i, self._tables[i][count])
            self._sig[key] = s
        return s

    def _stored_aux(self, i, count) -> tuple:
        key = (i, count)
        a = self._aux.get(key)
        if a is None:
            a = self._entry_aux(i, self._tables[i][count])
            self._aux[key] = a
        return a

    def _entry_sig(self, i, entry) -> str:
        if entry[2] is None:
            return "L"
        si, parts = entry[2]
        prefix = self.splits[i][si][1]
        return prefix + "(" + ",".join(self._stored_sig(k, c) for k, c in parts) + ")"

    def _entry_aux(self, i, entry) -> tuple:
        if entry[2] is None:
            return self._leaves[i].aux
        return sum((self._stored_aux(k, c) for k, c in entry[2][1]), ())

    def _better(self, i, a, b) -> bool:
        if b is None:
            return True
        tol = 1e-10 * max(1.0, abs(a[0]), abs(b[0]))
        if a[0] < b[0] - tol:
            return True
        if a[0] > b[0] + tol:
            return False
        if a[1] != b[1]:
            return a[1] < b[1]
        return (self._entry_sig(i, a), self._entry_aux(i, a)) < (self._entry_sig(i, b), self._entry_aux(i, b))

    def _convolve(self, kids, cap) -> dict:
        partial = {0: (0.0, 0, ())}
        for k in kids:
            table = self._tables[k]
            nxt = {}
            for c0, (cost0, dim0, parts0) in partial.items():
                for c1, entry in table.items():
                    c = c0 + c1
                    if cap is not None and c > cap:
                        continue
                    cand = (cost0 + entry[0], dim0 + entry[1], parts0 + ((k, c1),))
                    if self._partial_better(cand, nxt.get(c)):
                        nxt[c] = cand
            partial = nxt
        return partial

    def _partial_better(self, a, b) -> bool:
        if b is None:
            return True
        tol = 1e-10 * max(1.0, abs(a[0]), abs(b[0]))
        if a[0] < b[0] - tol:
            return True
        if a[0] > b[0] + tol:
            return False
        if a[1] != b[1]:
            return a[1] < b[1]

        def ident(p):
            return (tuple(self._stored_sig(k, c) for k, c in p[2]),
                    sum((self._stored_aux(k, c) for k, c in p[2]), ()))

        return ident(a) < ident(b)

    def _materialise(self, i, entry, leaves) -> Node:
        if entry[2] is None:
            leaves.append(self._leaves[i])
            return Node(self.cells[i])
        si, parts = entry[2]
        split = self.splits[i][si][0]
        kids = tuple(self._materialise(k, self._tables[k][c], leaves) for k, c in parts)
        return Node(self.cells[i], split, kids)


# ---------------------------------------------------------------------------
# Conditional densities: two-level DP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolyBudget:
    max_x_leaves: int | None = None
    max_y_leaves: int | None = None
    max_depth_x: int | None = None
    max_depth_y: int | None = None
    max_cells: int | None = None


class _PolySearch:
    """Two-level DP for one degree; cell fits are cached so penalties can be swept cheaply."""

    def __init__(self, dataset: Dataset, kind_x, kind_y, r, budget: PolyBudget, n: int, opts=None):
        self.dataset, self.kind_x, self.kind_y, self.r = dataset, kind_x, kind_y, r
        self.budget, self.n, self.opts = budget, n, opts
        self.P = polydens.basis_size(r)
        self.xg = _Graph(kind_x, n, dataset.X, budget.max_x_leaves, budget.max_depth_x, budget.max_cells)
        self.ygraphs = {}
        self.shared_ll = {}

    def _cell_ll(self, Y, n_leaf, ycell) -> float:
        m = Y.shape[0]
        if m == 0:
            return 0.0
        if self.P == 1:
            # same arithmetic as fit_cell for constant densities
            return m * math.log(m / n_leaf) + (-m * math.log(ycell.volume))
        return polydens.fit_cell(Y, n_leaf, ycell, self.r, self.opts).loglik

    def _ygraph(self, xcell, rows):
        hit = self.ygraphs.get(xcell.key)
        if hit is None:
            Yl = self.dataset.Y[rows]
            g = _Graph(self.kind_y, self.n, Yl, self.budget.max_y_leaves, self.budget.max_depth_y,
                       self.budget.max_cells)
            ll = {c.key: self._cell_ll(Yl[r], rows.shape[0], c) for c, r in g.leaf_inputs()}
            hit = (g, ll)
            self.ygraphs[xcell.key] = hit
        return hit

    def solve(self, pen: PenaltySpec, shared_y: PartitionTree | None = None) -> Solution:
        P = self.P

        def x_leaf(xcell, rows):
            if shared_y is not None:
                key = (xcell.key, shared_y.signature)
                ll = self.shared_ll.get(key)
                if ll is None:
                    Yl = self.dataset.Y[rows]
                    idx = shared_y.leaf_index(Yl) if rows.size else np.zeros(0, dtype=np.int64)
                    ll = sum(self._cell_ll(Yl[idx == k], rows.shape[0], c) for k, c in enumerate(shared_y.leaves))
                    self.shared_ll[key] = ll
                k = shared_y.n_leaves
                ysol = Solution(-ll + pen.per_leaf_unit * k, k * P, shared_y.signature, (), shared_y.root, [])
            else:
                g, ll = self._ygraph(xcell, rows)
                ysol = g.solve(lambda c, _r: Leaf(-ll[c.key] + pen.per_leaf_unit, P))
            return Leaf(ysol.cost + pen.per_x_leaf, ysol.dim - 1, (ysol.sig,), ysol)

        return self.xg.solve(x_leaf)

    def model(self, sol: Solution, shared_y: PartitionTree | None = None) -> polydens.PolyModel:
        x_tree = PartitionTree(self.kind_x, sol.node, self.n)
        if shared_y is not None:
            y_trees = shared_y
        else:
            y_trees = tuple(PartitionTree(self.kind_y, leaf.payload.node, self.n) for leaf in sol.leaves)
        return polydens.fit(self.dataset, x_tree, y_trees, self.r, self.opts)


def _resolve_poly_penalty(penalty, r, kind_x, kind_y, n, d_x, r_family):
    if isinstance(penalty, PenaltySpec):
        return penalty
    if callable(penalty):
        return penalty(r)
    return penalty_poly(r, kind_x, kind_y, n, d_x, penalty, r_family=r_family)


def _record(model, pen: PenaltySpec) -> ModelRecord:
    nll = -float(model.loglik)
    p = pen.for_model(model)
    return ModelRecord(model.identifier, _model_dim(model), nll, p, nll + p)


def _poly_select(select_at: Callable, candidates_r, penalty, kind_x, kind_y, n, d_x, kappa_grid):
    """Shared driver: fixed penalty, or slope calibration along a kappa path."""
    family = [tuple(r) for r in candidates_r]
    mode = penalty if not isinstance(penalty, PenaltySpec) and not callable(penalty) else None
    path_models = []
    diag = None
    if isinstance(mode, Slope) and mode.kappa_hat is None:
        pairs = []
        seen = set()
        # the linear regime needs dimensions well below n
        max_dim = n / 2.0
        for r in family:
            for kappa in sorted((default_kappa_grid(n) if kappa_grid is None else kappa_grid), reverse=True):
                unit = penalty_poly(r, kind_x, kind_y, n, d_x, Slope(None)).scaled(float(kappa))
                model = select_at(r, unit)
                if model.dimension()[1] > max_dim:
                    break
                if model.identifier in seen:
                    continue
                seen.add(model.identifier)
                path_models.append(model)
                pairs.append((model.dimension()[1], -model.loglik))
        kappa_hat, diag = slope_calibrate(pairs)
        mode = Slope(kappa_hat)
    pens = {r: _resolve_poly_penalty(mode if mode is not None else penalty, r, kind_x, kind_y, n, d_x, family)
            for r in family}
    finals = [select_at(r, pens[r]) for r in family]
    by_id = {}
    for model in finals + path_models:
        pen = pens[tuple(model.degree)] if tuple(model.degree) in pens else None
        if pen is None:
            continue
        by_id.setdefault(model.identifier, (model, _record(model, pen)))
    records = [v[1] for v in by_id.values()]
    best = _pick([_record(m, pens[tuple(m.degree)]) for m in finals])
    model = by_id[best.identifier][0]
    records.sort(key=lambda rec: (rec.dim, rec.identifier))
    report = SelectionReport(records, best.identifier, best.score, pens[tuple(model.degree)], diag, model)
    return report, model


def dp_select_poly(dataset: Dataset, kind_x, kind_y, r_candidates=(0,), penalty=Slope(), n: int | None = None,
                   budget: PolyBudget | None = None, shared_y: bool = False, kappa_grid=None,
                   opts: polydens.SphereOptions | None = None):
    """Best piecewise squared-polynomial conditional density by two-level DP.

    ``penalty`` is a mode (:class:`Slope`, :class:`Theoretical`,
    :class:`Manual`), a :class:`PenaltySpec`, or a callable mapping a degree
    to a :class:`PenaltySpec`. With ``shared_y`` every X-leaf uses the same
    Y-partition, chosen by an outer loop. Degrees are compared globally.
    Returns ``(report, model)``.
    """
    budget = budget or PolyBudget()
    n = dataset.n if n is None else int(n)
    kind_x, kind_y = CollectionKind.parse(kind_x), CollectionKind.parse(kind_y)
    if CollectionKind.HRP in (kind_x, kind_y):
        raise ValueError("HRP collections are only searched by exhaustive_select_poly")
    polydens._check_unit(dataset.X, "covariates")
    polydens._check_unit(dataset.Y, "responses")
    family = [polydens.as_degree(r, dataset.d_y) for r in r_candidates]
    searches = {r: _PolySearch(dataset, kind_x, kind_y, r, budget, n, opts) for r in family}
    y_options = list(enumerate_partitions(kind_y, n, dataset.d_y, budget.max_y_leaves)) if shared_y else [None]
    if shared_y and budget.max_depth_y is not None:
        y_options = [t for t in y_options if tree_depth(t.root) <= budget.max_depth_y]

    def select_at(r, pen):
        best = None
        for ytree in y_options:
            sol = searches[r].solve(pen, ytree)
            key = (sol.cost, sol.dim, sol.sig, sol.aux)
            if best is None or _tie_better(key, best[0]):
                best = (key, sol, ytree)
        _, sol, ytree = best
        return searches[r].model(sol, ytree)

    return _poly_select(select_at, family, penalty, kind_x, kind_y, n, dataset.d_x, kappa_grid)


def exhaustive_select(dataset: Dataset, model_iterator: Iterable, penalty, threads: int = 1) -> SelectionReport:
    """Fit every model and return the penalised argmin.

    Items of ``model_iterator`` are fitted models (anything with an
    ``identifier``) or zero-argument callables returning one. ``penalty`` is a :class:`PenaltySpec` or a callable
    ``model -> float``.
    """
    items = list(model_iterator)
    if not items:
        raise SelectionError("no candidate models")

    def realise(item):
        return item if hasattr(item, "identifier") else item()

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            models = list(pool.map(realise, items))
    else:
        models = [realise(it) for it in items]
    records, by_id = [], {}
    for model in models:
        p = penalty.for_model(model) if isinstance(penalty, PenaltySpec) else float(penalty(model))
        nll = -float(model.loglik)
        rec = ModelRecord(model.identifier, _model_dim(model), nll, p, nll + p)
        records.append(rec)
        by_id.setdefault(rec.identifier, model)
    best = _pick(records)
    return SelectionReport(records, best.identifier, best.score,
                           penalty if isinstance(penalty, PenaltySpec) else None, None, by_id[best.identifier])


def exhaustive_select_poly(dataset: Dataset, kind_x, kind_y, r_candidates=(0,), penalty=Slope(),
                           n: int | None = None, budget: PolyBudget | None = None, shared_y: bool = False,
                           kappa_grid=None, opts: polydens.SphereOptions | None = None):
    """Exhaustive oracle for :func:`dp_select_poly`.

    Every X-partition of the collection within the budget is scored. Because
    the criterion is a sum over X-leaves, each X-leaf takes its best
    Y-partition, found by scoring every Y-partition on that leaf's data
    with an independent maximum-likelihood fit.
    """
    budget = budget or PolyBudget()
    n = dataset.n if n is None else int(n)
    kind_x, kind_y = CollectionKind.parse(kind_x), CollectionKind.parse(kind_y)
    family = [polydens.as_degree(r, dataset.d_y) for r in r_candidates]
    x_trees = [t for t in enumerate_partitions(kind_x, n, dataset.d_x, budget.max_x_leaves)
               if budget.max_depth_x is None or tree_depth(t.root) <= budget.max_depth_x]
    y_trees = [t for t in enumerate_partitions(kind_y, n, dataset.d_y, budget.max_y_leaves)
               if budget.max_depth_y is None or tree_depth(t.root) <= budget.max_depth_y]
    x_leaf_index = {t.signature: t.leaf_index(dataset.X) for t in x_trees}
    leaf_ll = {}

    def leaf_loglik(xcell, rows, ytree, r):
        key = (xcell.key, ytree.signature, r)
        if key not in leaf_ll:
            sub = Dataset(dataset.X[rows], dataset.Y[rows])
            trivial = PartitionTree.trivial(kind_x, n, dataset.d_x)
            leaf_ll[key] = 0.0 if rows.size == 0 else polydens.fit(sub, trivial, ytree, r, opts).loglik
        return leaf_ll[key]

    def select_at(r, pen):
        P = polydens.basis_size(r)
        best = None
        for xt in x_trees:
            idx = x_leaf_index[xt.signature]
            options = y_trees if not shared_y else None
            if shared_y:
                for yt in y_trees:
                    cost = sum(-leaf_loglik(c, np.flatnonzero(idx == k), yt, r) + pen.per_leaf_unit * yt.n_leaves
                               + pen.per_x_leaf for k, c in enumerate(xt.leaves))
                    dim = xt.n_leaves * (yt.n_leaves * P - 1)
                    key = (cost, dim, xt.signature, (yt.signature,) * xt.n_leaves)
                    if best is None or _tie_better(key, best[0]):
                        best = (key, xt, (yt,) * xt.n_leaves)
                continue
            chosen, cost, dim, ysigs = [], 0.0, 0, []
            for k, c in enumerate(xt.leaves):
                rows = np.flatnonzero(idx == k)
                leaf_best = None
                for yt in options:
                    lk = (-leaf_loglik(c, rows, yt, r) + pen.per_leaf_unit * yt.n_leaves,
                          yt.n_leaves * P, yt.signature)
                    if leaf_best is None or _tie_better(lk, leaf_best[0]):
                        leaf_best = (lk, yt)
                chosen.append(leaf_best[1])
                cost += leaf_best[0][0] + pen.per_x_leaf
                dim += leaf_best[0][1] - 1
                ysigs.append(leaf_best[1].signature)
            key = (cost, dim, xt.signature, tuple(ysigs))
            if best is None or _tie_better(key, best[0]):
                best = (key, xt, tuple(chosen))
        _, xt, yts = best
        return polydens.fit(dataset, xt, yts, r, opts)

    return _poly_select(select_at, family, penalty, kind_x, kind_y, n, dataset.d_x, kappa_grid)


def joint_poly_candidates(dataset: Dataset, kind_x, kind_y, r, budget: PolyBudget, opts=None):
    """Every (X-partition, per-leaf Y-partitions) pair as lazy fits; exponential, for tiny cases only."""
    import itertools

    n = dataset.n
    x_trees = list(enumerate_partitions(kind_x, n, dataset.d_x, budget.max_x_leaves))
    y_trees = list(enumerate_partitions(kind_y, n, dataset.d_y, budget.max_y_leaves))
    for xt in x_trees:
        for combo in itertools.product(y_trees, repeat=xt.n_leaves):
            yield lambda xt=xt, combo=combo: polydens.fit(dataset, xt, combo, r, opts)


# ---------------------------------------------------------------------------
# Spatial mixtures: EM / partition alternation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GmmSelectOptions:
    em: spatial_gmm.EMOptions = field(default_factory=spatial_gmm.EMOptions)
    max_rounds: int = 10
    max_x_leaves: int | None = None
    max_depth_x: int | None = None
    pi_tol: float = 1e-10
    pi_max_iter: int = 2000
    kappa_grid: tuple | None = None
    E_mode: str | None = None


def optimal_leaf_proportions(log_phi: np.ndarray, pi0: np.ndarray | None = None, tol: float = 1e-10,
                             max_iter: int = 2000) -> tuple:
    """Maximise ``sum_i ln sum_k pi_k phi_ik`` over the simplex by the EM fixed point.

    Returns ``(pi, loglik)``. The objective is concave in ``pi`` so the
    fixed point converges to the maximum.
    """
    m, K = log_phi.shape
    if m == 0:
        return (np.full(K, 1.0 / K) if pi0 is None else np.asarray(pi0, dtype=float)), 0.0
    shift = log_phi.max(axis=1, keepdims=True)
    F = np.exp(log_phi - shift)
    base = float(shift.sum())
    pi = np.full(K, 1.0 / K) if pi0 is None else np.clip(np.asarray(pi0, dtype=float), 1e-300, None)
    pi = pi / pi.sum()
    mix = F @ pi
    ll = float(np.sum(np.log(mix)))
    for _ in range(max_iter):
        pi = pi * (F / mix[:, None]).mean(axis=0)
        pi /= pi.sum()
        mix = F @ pi
        new = float(np.sum(np.log(mix)))
        gain = new - ll
        ll = new
        if gain <= tol * max(1.0, abs(ll)):
            break
    return pi, ll + base


def _score_gmm(model: spatial_gmm.SpatialGmm, pen: PenaltySpec) -> float:
    return -model.loglik + pen.for_model(model)


class _GmmPartitionSearch:
    """Partition DP with the Gaussian components held fixed.

    A leaf's cost is minus its log-likelihood at the optimal leaf
    proportions plus the per-leaf penalty; these optima are cached for the
    current components so penalty sweeps are cheap.
    """

    def __init__(self, dataset: Dataset, kind_x, opts: GmmSelectOptions):
        self.dataset, self.kind_x, self.opts = dataset, CollectionKind.parse(kind_x), opts
        self.graph = _Graph(self.kind_x, dataset.n, dataset.X, opts.max_x_leaves, opts.max_depth_x)
        self._components = None
        self._cache = {}

    def solve(self, model: spatial_gmm.SpatialGmm, pen: PenaltySpec):
        if self._components is not model.components:
            self._components = model.components
            self._cache = {}
            self._log_phi = model.component_log_pdf(self.dataset.Y)
        K = model.K

        def leaf(cell, rows):
            hit = self._cache.get(cell.key)
            if hit is None:
                hit = optimal_leaf_proportions(self._log_phi[rows], None, self.opts.pi_tol, self.opts.pi_max_iter)
                self._cache[cell.key] = hit
            pi, ll = hit
            return Leaf(-ll + pen.per_leaf_unit, K - 1, (), pi)

        sol = self.graph.solve(leaf)
        tree = PartitionTree(self.kind_x, sol.node, self.dataset.n)
        return tree, np.array([l.payload for l in sol.leaves])


def fit_gmm_alternating(dataset: Dataset, kind_x, K: int, spec, E: tuple, pen: PenaltySpec,
                        opts: GmmSelectOptions, start_tree: PartitionTree | None = None,
                        search: _GmmPartitionSearch | None = None):
    """Alternate EM (partition fixed) and partition DP (components fixed) while the score improves.

    Returns ``(model, scores)``, ``scores`` being the accepted penalised
    score after each round.
    """
    em_opts = replace(opts.em, E_indices=E)
    search = search or _GmmPartitionSearch(dataset, kind_x, opts)
    tree = start_tree or PartitionTree.trivial(kind_x, dataset.n, dataset.d_x)
    model = spatial_gmm.em_fit(dataset, tree, K, spec, em_opts)
    score = _score_gmm(model, pen)
    scores = [score]
    for _ in range(opts.max_rounds):
        if K == 1:
            break
        tree, props = search.solve(model, pen)
        cand = spatial_gmm.em_fit(dataset, tree, K, spec, em_opts, init=(model.components, props))
        s = _score_gmm(cand, pen)
        if not s < score - 1e-9 * max(1.0, abs(score)):
            break
        model, score = cand, s
        scores.append(score)
    return model, scores


def _gmm_candidates(dataset, K_range, specs, E_candidates):
    specs = list(specs) or [spatial_gmm.CovarianceSpec()]
    Es = [tuple(e) for e in (E_candidates or [tuple(range(dataset.d_y))])]
    for K in K_range:
        for spec in specs:
            for E in Es:
                yield int(K), spec, E


def _infer_E_mode(E_candidates, d_y):
    Es = [tuple(e) for e in (E_candidates or [tuple(range(d_y))])]
    if len(Es) == 1:
        return "known"
    if all(e == tuple(range(len(e))) for e in Es):
        return "ordered"
    return "free"


def dp_select_gmm(dataset: Dataset, kind_x, K_range, specs=(), E_candidates=None, penalty=Slope(),
                  n: int | None = None, opts: GmmSelectOptions | None = None):
    """Penalised selection of spatial Gaussian mixtures over partitions, ``K``, parametrisations and subspaces.

    Returns ``(report, model)``. In slope mode the multiplier is calibrated
    on the models visited along a kappa path of partition DPs.
    """
    opts = opts or GmmSelectOptions()
    n = dataset.n if n is None else int(n)
    kind_x = CollectionKind.parse(kind_x)
    E_mode = opts.E_mode or _infer_E_mode(E_candidates, dataset.d_y)
    cands = list(_gmm_candidates(dataset, K_range, specs, E_candidates))
    if not cands:
        raise SelectionError("empty candidate list")

    def pen_for(K, spec, E, mode):
        return penalty_gmm(None, K, spec, E_mode, len(E), dataset.d_y, n, mode,
                           perp_spec=opts.em.perp_spec, kind_x=kind_x, d_x=dataset.d_x)

    diag = None
    mode = penalty
    failures = []
    search = _GmmPartitionSearch(dataset, kind_x, opts)
    if isinstance(mode, Slope) and mode.kappa_hat is None:
        pairs = []
        grid = opts.kappa_grid if opts.kappa_grid is not None else np.geomspace(1e-2, 4.0 * math.log(n), 16)
        for K, spec, E in cands:
            em_opts = replace(opts.em, E_indices=E)
            try:
                base = spatial_gmm.em_fit(dataset, PartitionTree.trivial(kind_x, n, dataset.d_x), K, spec, em_opts)
            except (DegenerateFitError, np.linalg.LinAlgError):
                continue
            visited = [base]
            seen = {base.x_tree.signature}
            if K > 1:
                for kappa in grid:
                    tree, props = search.solve(base, pen_for(K, spec, E, Slope(None)).scaled(kappa))
                    if tree.signature in seen:
                        continue
                    seen.add(tree.signature)
                    try:
                        visited.append(spatial_gmm.em_fit(dataset, tree, K, spec, em_opts, init=(base.components, props)))
                    except (DegenerateFitError, np.linalg.LinAlgError):
                        continue
            for m in visited:
                pairs.append((m.dimension(), -m.loglik))
        kappa_hat, diag = slope_calibrate(pairs)
        mode = Slope(kappa_hat)

    records, models = [], {}
    for K, spec, E in cands:
        pen = pen_for(K, spec, E, mode)
        try:
            model, _ = fit_gmm_alternating(dataset, kind_x, K, spec, E, pen, opts, search=search)
        except (DegenerateFitError, np.linalg.LinAlgError) as exc:
            failures.append((K, spec.code, E, str(exc)))
            continue
        rec = ModelRecord(model.identifier, model.dimension(), -model.loglik, pen.for_model(model),
                          _score_gmm(model, pen))
        records.append(rec)
        models[rec.identifier] = (model, pen)
    if not records:
        raise SelectionError(f"every candidate failed: {failures}")
    best = _pick(records)
    model, pen = models[best.identifier]
    return SelectionReport(records, best.identifier, best.score, pen, diag, model), model
