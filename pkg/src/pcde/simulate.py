"""Synthetic ground truths, samplers and Monte-Carlo risk evaluation.

Risks are tensorized Jensen-Kullback-Leibler divergences between the truth
and a fitted estimate, evaluated on each replicate's own design and averaged
over replicates. Replicate seeds come from a splitmix64 stream started at the
master seed, so results do not depend on the number of worker threads.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import divergence, polydens, selection, spatial_gmm
from .data import Dataset
from .exceptions import ContractError, SamplerError
from .geometry import CollectionKind, Hyperrectangle, PartitionTree

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

MIN_ACCEPTANCE = 1e-3
_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------

def splitmix64(x: int) -> int:
    """One splitmix64 output for the state ``x`` (the state is not advanced)."""
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def replicate_seed(master: int, index: int) -> int:
    """Seed of replicate ``index``: the ``index``-th splitmix64 output after ``master``."""
    return splitmix64((int(master) + (int(index) + 1) * _GOLDEN) & _MASK64)


# ---------------------------------------------------------------------------
# Designs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UniformDesign:
    """Covariates drawn iid uniformly on the unit cube."""

    def draw(self, n: int, d: int, rng) -> np.ndarray:
        return rng.random((n, d))


@dataclass(frozen=True)
class GridDesign:
    """Deterministic grid ``X_i = (i - 0.5) / n`` in one dimension.

    In ``d`` dimensions the first ``n`` nodes (row-major) of the
    ``m**d`` midpoint grid with ``m = ceil(n**(1/d))`` are used.
    """

    def draw(self, n: int, d: int, rng) -> np.ndarray:
        if d == 1:
            return ((np.arange(1, n + 1) - 0.5) / n)[:, None]
        m = int(math.ceil(round(n ** (1.0 / d), 12)))
        axes = [(np.arange(1, m + 1) - 0.5) / m] * d
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([a.ravel() for a in mesh], axis=1)[:n]


@dataclass(frozen=True)
class CustomDesign:
    """Covariates from a user sampler ``sampler(rng, n, d) -> (n, d)`` array in the unit cube."""

    sampler: Callable

    def draw(self, n: int, d: int, rng) -> np.ndarray:
        X = np.asarray(self.sampler(rng, n, d), dtype=float).reshape(n, d)
        if np.any(X < 0) or np.any(X > 1):
            raise ContractError("custom design must stay in the unit cube")
        return X


def parse_design(name: str):
    return {"uniform": UniformDesign(), "grid": GridDesign()}[name]


# ---------------------------------------------------------------------------
# Ground truths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CustomTruth:
    """Conditional density given by callables.

    ``density(x, Y)`` returns the values ``s(Y | x)`` and ``sampler(x, rng,
    m)`` returns ``m`` responses drawn from ``s(. | x)``.
    """

    density: Callable
    sampler: Callable
    d_x: int
    d_y: int
    domain: divergence.Box | None = None

    def __call__(self, x, Y):
        return np.asarray(self.density(x, np.atleast_2d(Y)), dtype=float).reshape(-1)

    def sample_y(self, x, rng, m: int) -> np.ndarray:
        return np.asarray(self.sampler(x, rng, m), dtype=float).reshape(m, self.d_y)


def _y_domain(model) -> divergence.Box:
    if isinstance(model, spatial_gmm.SpatialGmm):
        lo = np.full(model.d_y, np.inf)
        hi = np.full(model.d_y, -np.inf)
        blocks = [(list(model.E_indices), c) for c in model.components]
        if model.perp is not None:
            blocks.append((list(model.perp_indices), model.perp))
        for idx, comp in blocks:
            sd = np.sqrt(np.diag(comp.Sigma))
            lo[idx] = np.minimum(lo[idx], comp.mu - 9.0 * sd)
            hi[idx] = np.maximum(hi[idx], comp.mu + 9.0 * sd)
        return divergence.Box(lo, hi)
    if isinstance(model, CustomTruth):
        return model.domain if model.domain is not None else divergence.Box.unit(model.d_y)
    return divergence.Box.unit(model.d_y)


@dataclass(frozen=True)
class GroundTruth:
    """A conditional density ``s0(y|x)`` together with its design law.

    ``model`` is a :class:`~pcde.polydens.PolyModel` (piecewise constant or
    polynomial), a :class:`~pcde.spatial_gmm.SpatialGmm` or a
    :class:`CustomTruth`. Normalisation is spot-checked by quadrature at a
    few covariates on construction.
    """

    model: object
    design: object = field(default_factory=UniformDesign)
    name: str = ""
    check_tol: float = 1e-3

    def __post_init__(self):
        if not isinstance(self.model, (polydens.PolyModel, spatial_gmm.SpatialGmm, CustomTruth)):
            raise TypeError("unsupported truth model")
        if not isinstance(self.model, spatial_gmm.SpatialGmm):
            self._check_normalised()

    @property
    def kind(self) -> str:
        if isinstance(self.model, spatial_gmm.SpatialGmm):
            return "spatial_gmm"
        if isinstance(self.model, CustomTruth):
            return "custom"
        return "piecewise_constant" if not any(self.model.degree) else "piecewise_poly"

    @property
    def d_x(self) -> int:
        return self.model.d_x if not isinstance(self.model, spatial_gmm.SpatialGmm) else self.model.x_tree.dim

    @property
    def d_y(self) -> int:
        return self.model.d_y

    @property
    def y_domain(self) -> divergence.Box:
        return _y_domain(self.model)

    def _check_normalised(self):
        box = self.y_domain
        points = max(8, int(2e5 ** (1.0 / box.dim)))
        nodes, w = divergence.grid_nodes(box, points)
        rng = np.random.default_rng(0)
        xs = [np.full(self.d_x, 0.5)] + list(rng.random((3, self.d_x)))
        for x in xs:
            mass = float(np.sum(np.asarray(self.model(x, nodes), dtype=float) * w))
            if abs(mass - 1.0) > self.check_tol:
                raise ContractError(f"truth integrates to {mass:.6g} at x={np.round(x, 4).tolist()}, not 1")


def piecewise_constant(x_tree: PartitionTree, y_trees, masses) -> polydens.PolyModel:
    """Histogram truth: ``masses[l][k]`` is the mass of Y-cell ``k`` given X-leaf ``l``."""
    if isinstance(y_trees, PartitionTree):
        y_trees = (y_trees,) * x_tree.n_leaves
    d_y = y_trees[0].dim
    r = (0,) * d_y
    rows = []
    for ytree, m in zip(y_trees, masses):
        m = np.asarray(m, dtype=float)
        if m.shape != (ytree.n_leaves,) or np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
            raise ValueError("each X-leaf needs nonnegative cell masses summing to 1")
        rows.append(tuple(polydens.CellPoly(np.ones(1), float(w)) for w in m))
    return polydens.PolyModel(x_tree, tuple(y_trees), tuple(rows), r)


def piecewise_poly(x_tree: PartitionTree, y_trees, r, coeffs, weights) -> polydens.PolyModel:
    """Squared-polynomial truth with unit-norm ``coeffs[l][k]`` and cell weights ``weights[l][k]``."""
    if isinstance(y_trees, PartitionTree):
        y_trees = (y_trees,) * x_tree.n_leaves
    r = polydens.as_degree(r, y_trees[0].dim)
    rows = []
    for ytree, cs, ws in zip(y_trees, coeffs, weights):
        row = []
        for c, w in zip(cs, ws):
            c = np.asarray(c, dtype=float)
            if c.shape != (polydens.basis_size(r),) or abs(np.linalg.norm(c) - 1.0) > 1e-9:
                raise ValueError("cell coefficients must be unit vectors of the basis size")
            row.append(polydens.CellPoly(c, float(w)))
        if len(row) != ytree.n_leaves or abs(sum(ws) - 1.0) > 1e-9:
            raise ValueError("each X-leaf needs one coefficient vector per cell and weights summing to 1")
        rows.append(tuple(row))
    return polydens.PolyModel(x_tree, tuple(y_trees), tuple(rows), r)


def spatial_mixture(x_tree: PartitionTree, means, covariances, proportions) -> spatial_gmm.SpatialGmm:
    """Spatial Gaussian mixture truth with free components."""
    comps = tuple(spatial_gmm.GaussianComponent.from_sigma(m, S) for m, S in zip(means, covariances))
    return spatial_gmm.SpatialGmm(x_tree, comps, np.asarray(proportions, dtype=float))


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

def _sup_bound(cell: Hyperrectangle, coeffs: np.ndarray, r) -> float:
    """Upper bound on ``Q**2`` over the cell from the sup norms of the Legendre factors."""
    w = np.asarray(cell.upper) - np.asarray(cell.lower)
    sups = np.array([np.prod([math.sqrt((2 * k + 1) / w[j]) for j, k in enumerate(idx)])
                     for idx in polydens.multi_indices(r)])
    return float(np.sum(np.abs(coeffs) * sups)) ** 2


def _uniform_in(cell: Hyperrectangle, rng, m: int) -> np.ndarray:
    lo, hi = np.asarray(cell.lower), np.asarray(cell.upper)
    return lo + rng.random((m, lo.shape[0])) * (hi - lo)


def _rejection(cell: Hyperrectangle, coeffs, r, rng, m: int) -> np.ndarray:
    M = _sup_bound(cell, coeffs, r)
    acceptance = 1.0 / (cell.volume * M)
    if acceptance < MIN_ACCEPTANCE:
        raise SamplerError(f"rejection acceptance {acceptance:.3g} is below {MIN_ACCEPTANCE:g}")
    out, have = [], 0
    while have < m:
        batch = int(math.ceil(1.2 * (m - have) / acceptance)) + 16
        Y = _uniform_in(cell, rng, batch)
        q = polydens.basis_matrix(Y, cell, r) @ coeffs
        keep = Y[rng.random(batch) * M < q * q]
        out.append(keep)
        have += keep.shape[0]
    return np.concatenate(out)[:m]


def sample_poly_leaf(model: polydens.PolyModel, leaf: int, rng, m: int) -> np.ndarray:
    """``m`` responses from the conditional density of X-leaf ``leaf``.

    Cells are picked by their weights; within a cell, constant densities are
    sampled uniformly and polynomial ones by rejection from the uniform law.
    """
    ytree = model.y_trees[leaf]
    w = np.array([c.weight for c in model.cells[leaf]], dtype=float)
    counts = rng.multinomial(m, w / w.sum())
    flat = not any(model.degree)
    parts = []
    for k, cnt in enumerate(counts):
        if cnt == 0:
            continue
        cell = ytree.leaves[k]
        if flat:
            parts.append(_uniform_in(cell, rng, int(cnt)))
        else:
            parts.append(_rejection(cell, model.cells[leaf][k].coeffs, model.degree, rng, int(cnt)))
    Y = np.concatenate(parts) if parts else np.zeros((0, model.d_y))
    return Y[rng.permutation(m)]


def sample_gmm_leaf(model: spatial_gmm.SpatialGmm, leaf: int, rng, m: int) -> tuple:
    """``(Y, labels)``: ``m`` draws of X-leaf ``leaf`` with their 1-based component labels."""
    pi = model.proportions[leaf]
    labels = rng.choice(model.K, size=m, p=pi / pi.sum())
    Y = np.zeros((m, model.d_y))
    E = list(model.E_indices)
    for k, comp in enumerate(model.components):
        sel = labels == k
        cnt = int(sel.sum())
        if cnt:
            chol = np.linalg.cholesky(comp.Sigma)
            Y[np.ix_(sel, E)] = comp.mu + rng.standard_normal((cnt, comp.p)) @ chol.T
    if model.perp is not None:
        chol = np.linalg.cholesky(model.perp.Sigma)
        Y[:, list(model.perp_indices)] = model.perp.mu + rng.standard_normal((m, model.perp.p)) @ chol.T
    return Y, labels.astype(np.int64) + 1


def sample(truth: GroundTruth, n: int, seed: int = 0) -> Dataset:
    """``n`` covariate/response pairs from ``truth``; bit-identical for equal seeds."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    X = truth.design.draw(n, truth.d_x, rng)
    model = truth.model
    Y = np.zeros((n, truth.d_y))
    labels = None
    if isinstance(model, CustomTruth):
        for i in range(n):
            Y[i] = model.sample_y(X[i], rng, 1)[0]
        return Dataset(X, Y)
    leaves = model.x_tree.leaf_index(X)
    if isinstance(model, spatial_gmm.SpatialGmm):
        labels = np.zeros(n, dtype=np.int64)
    for leaf in range(model.x_tree.n_leaves):
        rows = np.flatnonzero(leaves == leaf)
        if rows.size == 0:
            continue
        if labels is not None:
            Y[rows], labels[rows] = sample_gmm_leaf(model, leaf, rng, rows.size)
        else:
            Y[rows] = sample_poly_leaf(model, leaf, rng, rows.size)
    return Dataset(X, Y, labels)


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Truth:
    """The truth itself; its risk is 0 without any evaluation."""

    label: str = "truth"


@dataclass(frozen=True)
class Fixed:
    """Maximum-likelihood fit on uniform dyadic partitions of the given depths."""

    x_depth: int
    y_depth: int
    r: tuple = (0,)

    def trees(self, n: int, d_x: int, d_y: int):
        return (PartitionTree.uniform(n, d_x, self.x_depth), PartitionTree.uniform(n, d_y, self.y_depth))

    def fit(self, data: Dataset) -> polydens.PolyModel:
        xt, yt = self.trees(data.n, data.d_x, data.d_y)
        return polydens.fit(data, xt, yt, polydens.as_degree(self.r, data.d_y))

    @property
    def label(self) -> str:
        r = ",".join(str(v) for v in np.atleast_1d(self.r))
        return f"udp({self.x_depth},{self.y_depth});r={r}"


def _calibration_pairs(models, n):
    # the linear regime of -loglik needs dimensions well below n
    return [(m.dimension()[1], -m.loglik) for m in models if m.dimension()[1] <= n / 2.0]


@dataclass(frozen=True)
class GridSelect:
    """Penalised choice among :class:`Fixed` models.

    In slope mode (``kappa_hat=None``) the multiplier is calibrated on the
    grid models whose dimension is at most ``n / 2``.
    """

    models: tuple
    penalty: object = field(default_factory=selection.Slope)
    label: str = "selected"

    def fit_all(self, data: Dataset) -> list:
        return [m.fit(data) for m in self.models]

    def choose(self, data: Dataset, fitted: Sequence) -> tuple:
        """``(index of the chosen model, SelectionReport)``."""
        mode = self.penalty
        diag = None
        if isinstance(mode, selection.Slope) and mode.kappa_hat is None:
            kappa_hat, diag = selection.slope_calibrate(_calibration_pairs(fitted, data.n))
            mode = selection.Slope(kappa_hat)

        def pen(model):
            return selection.penalty_poly(model.degree, CollectionKind.UDP, CollectionKind.UDP, data.n,
                                          data.d_x, mode, shared_udp=True).for_model(model)

        report = selection.exhaustive_select(data, fitted, pen)
        report.slope = diag
        ids = [m.identifier for m in fitted]
        return ids.index(report.chosen), report

    def fit(self, data: Dataset):
        fitted = self.fit_all(data)
        return fitted[self.choose(data, fitted)[0]]


@dataclass(frozen=True)
class DPSelect:
    """Two-level partition DP over a collection pair."""

    kind_x: str = "RDP"
    kind_y: str = "RDP"
    r_candidates: tuple = ((0,),)
    penalty: object = field(default_factory=selection.Slope)
    budget: selection.PolyBudget | None = None
    label: str = "selected"

    def fit(self, data: Dataset):
        _, model = selection.dp_select_poly(data, self.kind_x, self.kind_y, self.r_candidates, self.penalty,
                                            budget=self.budget)
        return model


@dataclass(frozen=True)
class GmmSelect:
    """Spatial mixture selection over partitions, ``K`` and covariance parametrisations."""

    kind_x: str = "RDP"
    K_range: tuple = (1, 2, 3)
    specs: tuple = ()
    penalty: object = field(default_factory=selection.Slope)
    opts: selection.GmmSelectOptions | None = None
    label: str = "selected"

    def fit(self, data: Dataset):
        _, model = selection.dp_select_gmm(data, self.kind_x, self.K_range, self.specs, None, self.penalty,
                                           opts=self.opts)
        return model


# ---------------------------------------------------------------------------
# Risk
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RiskRow:
    n: int
    model: str
    risk: float
    std_error: float
    replicates: int


@dataclass
class RiskCurve:
    rows: list = field(default_factory=list)

    COLUMNS = ("n", "model", "risk", "std_error", "replicates")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r.n, r.model, repr(float(r.risk)), repr(float(r.std_error)), r.replicates])
        return buf.getvalue()


def jkl_risk(truth: GroundTruth, estimate, design: np.ndarray, div_cfg: divergence.DivergenceConfig | None = None):
    """Tensorized ``JKL_rho`` from the truth to ``estimate`` on ``design``."""
    return divergence.tensorized("jkl", truth.model, estimate, design, truth.y_domain, div_cfg)


def _mean_se(values) -> tuple:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def risk(truth: GroundTruth, estimator, n: int, replicates: int,
         div_cfg: divergence.DivergenceConfig | None = None, seed: int = 0, threads: int = 1) -> RiskRow:
    """Mean and standard error over replicates of the tensorized JKL risk of ``estimator``."""
    if replicates < 3:
        raise ValueError("need at least 3 replicates")
    if isinstance(estimator, Truth):
        return RiskRow(int(n), estimator.label, 0.0, 0.0, int(replicates))

    def one(i):
        data = sample(truth, n, replicate_seed(seed, i))
        return float(jkl_risk(truth, estimator.fit(data), data.X, div_cfg))

    mean, se = _mean_se(_map(one, range(replicates), threads))
    return RiskRow(int(n), estimator.label, mean, se, int(replicates))


def risk_curve(truth: GroundTruth, estimator, ns: Sequence[int], replicates: int,
               div_cfg: divergence.DivergenceConfig | None = None, seed: int = 0, threads: int = 1) -> RiskCurve:
    return RiskCurve([risk(truth, estimator, n, replicates, div_cfg, seed, threads) for n in ns])


@dataclass(frozen=True)
class OracleRow:
    identifier: str
    label: str
    dim: int
    risk: float
    std_error: float
    score: float


@dataclass
class OracleTable:
    """Per-model true risk and penalised score, with the selected-versus-oracle comparison."""

    n: int
    replicates: int
    rows: list
    selected_risk: float
    selected_std_error: float
    selected_dims: list

    @property
    def oracle(self) -> OracleRow:
        return min(self.rows, key=lambda r: (r.risk, r.dim))

    @property
    def ratio(self) -> float:
        o = self.oracle.risk
        return math.inf if o <= 0 else self.selected_risk / o

    COLUMNS = ("model", "dim", "risk", "std_error", "mean_score")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r.label, r.dim, repr(r.risk), repr(r.std_error), repr(r.score)])
        w.writerow(["selected", "", repr(self.selected_risk), repr(self.selected_std_error), ""])
        return buf.getvalue()


def oracle_table(truth: GroundTruth, grid: GridSelect, n: int, replicates: int,
                 div_cfg: divergence.DivergenceConfig | None = None, seed: int = 0, threads: int = 1) -> OracleTable:
    """True risk of every grid model and of the penalised choice, over common replicates."""
    if replicates < 3:
        raise ValueError("need at least 3 replicates")

    def one(i):
        data = sample(truth, n, replicate_seed(seed, i))
        fitted = grid.fit_all(data)
        risks = [float(jkl_risk(truth, m, data.X, div_cfg)) for m in fitted]
        k, report = grid.choose(data, fitted)
        scores = {rec.identifier: rec.score for rec in report.records}
        return fitted, risks, k, [scores[m.identifier] for m in fitted]

    results = _map(one, range(replicates), threads)
    rows = []
    for j, est in enumerate(grid.models):
        mean, se = _mean_se([res[1][j] for res in results])
        first = results[0][0][j]
        rows.append(OracleRow(first.identifier, est.label, int(first.dimension()[1]), mean, se,
                              float(np.mean([res[3][j] for res in results]))))
    sel_mean, sel_se = _mean_se([res[1][res[2]] for res in results])
    dims = [int(res[0][res[2]].dimension()[1]) for res in results]
    return OracleTable(int(n), int(replicates), rows, sel_mean, sel_se, dims)


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

SCENARIOS = ("histogram1d", "poly2d", "gmm2d")


@dataclass(frozen=True)
class Scenario:
    name: str
    truth: GroundTruth
    estimator: object
    grid: GridSelect | None
    ns: tuple
    replicates: int
    rho: float
    seed: int


def truth_from_config(cfg: dict) -> GroundTruth:
    """Build a truth from a ``[truth]`` table; partitions are uniform dyadic of the given depths."""
    kind = cfg["kind"]
    d_x, d_y = int(cfg.get("d_x", 1)), int(cfg.get("d_y", 1))
    n_ref = int(cfg.get("n_ref", 1 << 20))
    x_tree = PartitionTree.uniform(n_ref, d_x, int(cfg.get("x_depth", 0)))
    design = parse_design(cfg.get("design", "uniform"))
    if kind == "spatial_gmm":
        model = spatial_mixture(x_tree, cfg["means"], cfg["covariances"], cfg["proportions"])
    else:
        y_tree = PartitionTree.uniform(n_ref, d_y, int(cfg.get("y_depth", 0)))
        if kind == "piecewise_constant":
            model = piecewise_constant(x_tree, y_tree, cfg["masses"])
        elif kind == "piecewise_poly":
            model = piecewise_poly(x_tree, y_tree, cfg["degree"], cfg["coeffs"], cfg["weights"])
        else:
            raise ValueError(f"unknown truth kind {kind!r}")
    return GroundTruth(model, design, cfg.get("name", kind))


def _penalty(cfg: dict):
    return selection.parse_mode(cfg.get("penalty_mode", "slope"), cfg.get("kappa"))


def estimator_from_config(cfg: dict, grid: GridSelect | None = None):
    kind = cfg["kind"]
    if kind == "truth":
        return Truth()
    if kind == "fixed":
        return Fixed(int(cfg["x_depth"]), int(cfg["y_depth"]), tuple(cfg.get("degree", [0])))
    if kind == "grid_select":
        if grid is None:
            raise ValueError("grid_select needs a [grid] table")
        return grid
    if kind == "dp_select":
        degrees = tuple(tuple(np.atleast_1d(r).tolist()) for r in cfg.get("degrees", [[0]]))
        budget = selection.PolyBudget(max_x_leaves=cfg.get("max_x_leaves"), max_y_leaves=cfg.get("max_y_leaves"))
        return DPSelect(cfg.get("collection_x", "RDP"), cfg.get("collection_y", "RDP"), degrees, _penalty(cfg), budget)
    if kind == "gmm_select":
        specs = tuple(spatial_gmm.CovarianceSpec.parse(s) for s in cfg.get("cov_specs", []))
        opts = selection.GmmSelectOptions(max_x_leaves=cfg.get("max_x_leaves"), max_depth_x=cfg.get("max_depth_x"))
        return GmmSelect(cfg.get("collection_x", "RDP"), tuple(cfg.get("k_range", [1, 2, 3])), specs,
                         _penalty(cfg), opts)
    raise ValueError(f"unknown estimator kind {kind!r}")


def grid_from_config(cfg: dict) -> GridSelect:
    degree = tuple(cfg.get("degree", [0]))
    models = tuple(Fixed(int(a), int(b), degree) for a, b in cfg["udp_depths"])
    return GridSelect(models, _penalty(cfg))


def scenario_from_dict(doc: dict) -> Scenario:
    truth_cfg = dict(doc["truth"])
    truth_cfg.setdefault("name", doc.get("name", ""))
    truth = truth_from_config(truth_cfg)
    grid = grid_from_config(doc["grid"]) if "grid" in doc else None
    est = estimator_from_config(doc.get("estimator", {"kind": "grid_select"}), grid)
    r = doc.get("risk", {})
    return Scenario(doc.get("name", ""), truth, est, grid, tuple(int(v) for v in r.get("n", [200, 800, 3200])),
                    int(r.get("replicates", 20)), float(r.get("rho", 0.5)), int(r.get("seed", 0)))


def load_scenario(name_or_path) -> Scenario:
    """A shipped scenario by name (see :data:`SCENARIOS`) or a TOML file path."""
    if str(name_or_path) in SCENARIOS:
        text = resources.files("pcde").joinpath("scenarios", f"{name_or_path}.toml").read_text(encoding="utf-8")
    else:
        text = Path(name_or_path).read_text(encoding="utf-8")
    return scenario_from_dict(tomllib.loads(text))
