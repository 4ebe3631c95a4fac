"""Acceptance suite: one PASS/FAIL line per criterion, with pinned tolerances and runtime budgets."""

import itertools
import math
import time

import numpy as np
import pytest
from scipy import integrate

from pcde import divergence as dv
from pcde import polydens, selection as sel, simulate, spatial_gmm as sg
from pcde.data import Dataset
from pcde.exceptions import DegenerateFitError
from pcde.geometry import Hyperrectangle, PartitionTree, coding_constants, enumerate_partitions, kraft_sum, kraft_tree_sum


def _report(capsys, number, title, ok, detail, elapsed, budget):
    within = elapsed < budget
    status = "PASS" if ok and within else "FAIL"
    with capsys.disabled():
        print(f"\n{status} criterion {number:2d} {title}: {detail} [{elapsed:.1f}s, budget {budget:g}s]")
    assert ok, detail
    assert within, f"runtime {elapsed:.1f}s exceeds {budget}s"


def test_c01_divergence_sandwich(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    cfgs = {rho: dv.DivergenceConfig(rho=rho, quadrature=dv.Grid(64)) for rho in (0.1, 0.5, 0.9)}
    worst = math.inf
    for _ in range(1000):
        p, q = rng.dirichlet(np.full(32, 0.5)), rng.dirichlet(np.full(32, 0.5))
        s, t = dv.histogram_density(p), dv.histogram_density(q)
        h = dv.hellinger2(s, t, (0.0, 1.0), cfgs[0.5]).value
        k = dv.kl(s, t, (0.0, 1.0), cfgs[0.5]).value
        for rho, cfg in cfgs.items():
            j = dv.jkl(s, t, (0.0, 1.0), cfg).value
            worst = min(worst, j - dv.c_rho(rho) * h, k - j)
    _report(capsys, 1, "divergence sandwich", worst >= -1e-9, f"min slack {worst:.3g} (>= -1e-9)",
            time.perf_counter() - t0, 10)


def _gauss_legendre(lo, hi, panels=30, order=16):
    t, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(lo, hi, panels + 1)
    half = np.diff(edges)[:, None] / 2
    nodes = (edges[:-1, None] + half * (t + 1)).ravel()
    return nodes, (half * w).ravel()


def _hellinger_quadrature(m1, S1, m2, S2):
    """``int (sqrt f1 - sqrt f2)**2`` by composite Gauss-Legendre on a 12-sd box."""
    f1, f2 = dv.gaussian_density(m1, S1), dv.gaussian_density(m2, S2)
    lo = np.minimum(m1 - 12 * np.sqrt(np.diag(S1)), m2 - 12 * np.sqrt(np.diag(S2)))
    hi = np.maximum(m1 + 12 * np.sqrt(np.diag(S1)), m2 + 12 * np.sqrt(np.diag(S2)))
    axes = [_gauss_legendre(a, b) for a, b in zip(lo, hi)]
    Y = np.stack([g.ravel() for g in np.meshgrid(*[a[0] for a in axes], indexing="ij")], axis=1)
    W = np.prod(np.stack([g.ravel() for g in np.meshgrid(*[a[1] for a in axes], indexing="ij")], axis=1), axis=1)
    return float(np.sum(W * (np.sqrt(f1(Y)) - np.sqrt(f2(Y))) ** 2))


def test_c02_gaussian_hellinger(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for i in range(20):
        d = 1 if i < 10 else 2
        A, B = rng.standard_normal((d, d)), rng.standard_normal((d, d))
        S1, S2 = A @ A.T + 0.3 * np.eye(d), B @ B.T + 0.3 * np.eye(d)
        m1, m2 = rng.standard_normal(d), rng.standard_normal(d)
        worst = max(worst, abs(dv.gaussian_hellinger2(m1, S1, m2, S2) - _hellinger_quadrature(m1, S1, m2, S2)))
    _report(capsys, 2, "Gaussian Hellinger closed form", worst <= 1e-6, f"max |closed - quadrature| {worst:.2e} (<= 1e-6)",
            time.perf_counter() - t0, 5)


def test_c03_kraft(capsys):
    t0 = time.perf_counter()
    worst, lines = 0.0, []
    for kind in ("UDP", "RDP", "RDSP", "RSP"):
        for n, d in ((16, 1), (64, 1), (16, 2)):
            c = max(coding_constants(kind, n, d).c0, 2 * math.log(2))
            total = kraft_tree_sum(kind, n, d, c)
            # the exact sum dominates every enumerated truncation
            trunc = kraft_sum(kind, n, d, c, max_leaves=4)
            assert trunc <= total + 1e-12
            worst = max(worst, total)
            lines.append(f"{kind}({n},{d})={total:.4f}")
    _report(capsys, 3, "Kraft inequality", worst <= 1 + 1e-12, f"max sum {worst:.6f} (<= 1 + 1e-12)",
            time.perf_counter() - t0, 30)


def test_c04_histogram_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    kinds = ("UDP", "RDP", "RDSP", "RSP")
    trees = {(k, d): list(enumerate_partitions(k, 16, d, max_leaves=4)) for k in kinds for d in (1, 2)}
    bad = 0
    for case in range(50):
        d_x, d_y = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        n = int(rng.integers(5, 200))
        X, Y = rng.random((n, d_x)), rng.random((n, d_y)) ** rng.uniform(0.3, 3)
        xt = rng.choice(trees[kinds[case % 4], d_x])
        yt = rng.choice(trees[kinds[(case + 1) % 4], d_y])
        model = polydens.fit(Dataset(X, Y), xt, yt, (0,) * d_y)
        lx, ly = xt.leaf_index(X), yt.leaf_index(Y)
        for l in range(xt.n_leaves):
            nl = int(np.sum(lx == l))
            for k, cell in enumerate(model.cells[l]):
                want = np.sum((lx == l) & (ly == k)) / nl if nl else cell.weight
                bad += cell.weight != want
    _report(capsys, 4, "r=0 fit equals conditional histogram", bad == 0, f"{bad} mismatching weights in 50 cases",
            time.perf_counter() - t0, 10)


def test_c05_sphere_mle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    theta = np.linspace(0, 2 * np.pi, 100_000, endpoint=False)
    circle = np.stack([np.cos(theta), np.sin(theta)])
    worst = 0.0
    for _ in range(20):
        a, b = np.sort(rng.random(2))
        cell = Hyperrectangle((a,), (max(b, a + 0.05),))
        m = int(rng.integers(1, 40))
        Y = cell.lower[0] + (cell.upper[0] - cell.lower[0]) * rng.beta(rng.uniform(0.5, 3), rng.uniform(0.5, 3), (m, 1))
        Phi = polydens.basis_matrix(Y, cell, (1,))
        _, f = polydens.sphere_mle(Phi)
        V = Phi @ circle
        grid = np.max(np.sum(np.log(V * V), axis=0))
        worst = max(worst, abs(f - grid))
    _report(capsys, 5, "sphere MLE vs circle grid", worst <= 1e-6, f"max |solver - grid| {worst:.2e} (<= 1e-6)",
            time.perf_counter() - t0, 60)


def test_c06_dp_equals_exhaustive(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(606)
    budget = sel.PolyBudget(max_x_leaves=8, max_y_leaves=4)
    bad, worst = 0, 0.0
    for _ in range(50):
        X = rng.random((100, 1))
        shape = rng.uniform(0.5, 4, 2)
        Y = np.where(X < rng.random(), rng.beta(shape[0], shape[1], (100, 1)), rng.random((100, 1)))
        pen = sel.Manual(float(rng.uniform(0.3, 4.0)))
        dp = sel.dp_select_poly(Dataset(X, Y), "RDP", "RDP", (0,), penalty=pen, budget=budget)[0]
        ex = sel.exhaustive_select_poly(Dataset(X, Y), "RDP", "RDP", (0,), penalty=pen, budget=budget)[0]
        bad += dp.chosen != ex.chosen
        worst = max(worst, abs(dp.chosen_score - ex.chosen_score))
    ok = bad == 0 and worst <= 1e-9
    _report(capsys, 6, "DP equals exhaustive search", ok, f"{bad} model mismatches, max score gap {worst:.1e} (<= 1e-9)",
            time.perf_counter() - t0, 120)


def test_c07_em_monotone(capsys):
    t0 = time.perf_counter()
    modes = ["_K", "", "_0"]
    specs = [sg.CovarianceSpec.parse(f"mu{m} L{l} D{d} A{a}")
             for m, l, d, a in itertools.product(["_K", ""], modes, modes, modes)]
    rng = np.random.default_rng(707)
    fits, skipped, worst, seed = 0, 0, 0.0, 0
    while fits < 50:
        spec = specs[(fits * 7 + skipped) % len(specs)]
        n = int(rng.integers(80, 300))
        K = int(rng.integers(1, 4))
        centres = rng.standard_normal((K, 2)) * 3
        Y = centres[rng.integers(0, K, n)] + rng.standard_normal((n, 2)) @ rng.standard_normal((2, 2))
        data = Dataset(rng.random((n, 2)), Y)
        tree = PartitionTree.uniform(n, 2, int(rng.integers(0, 2)))
        seed += 1
        try:
            m = sg.em_fit(data, tree, max(K, 2), spec, sg.EMOptions(seed=seed, max_iter=200))
        except DegenerateFitError:
            skipped += 1
            continue
        worst = min(worst, float(np.min(np.diff(m.history))) if len(m.history) > 1 else 0.0)
        fits += 1
    _report(capsys, 7, "EM monotonicity", worst >= -1e-8,
            f"50 fits ({skipped} degenerate starts skipped), worst step {worst:.2e} (>= -1e-8)",
            time.perf_counter() - t0, 60)


def test_c08_oracle_inequality(capsys):
    t0 = time.perf_counter()
    sc = simulate.load_scenario("histogram1d")
    table = simulate.oracle_table(sc.truth, sc.grid, 2000, 20, seed=sc.seed)
    risks = [r.risk for r in sorted(table.rows, key=lambda r: r.dim)]
    k = int(np.argmin(risks))
    u_shaped = 0 < k < len(risks) - 1 and all(a > b for a, b in zip(risks[:k], risks[1:k + 1])) \
        and all(a < b for a, b in zip(risks[k:], risks[k + 1:]))
    ok = table.ratio <= 3 and u_shaped
    _report(capsys, 8, "empirical oracle inequality", ok,
            f"ratio {table.ratio:.3f} (<= 3), U-shaped {u_shaped}, risks {[round(r, 5) for r in risks]}",
            time.perf_counter() - t0, 300)


def test_c09_segmentation(capsys):
    t0 = time.perf_counter()
    sc = simulate.load_scenario("gmm2d")
    data = simulate.sample(sc.truth, 4000, seed=909)
    model = sc.estimator.fit(data)
    labels = sg.segment(model, data)
    agree = float(np.mean(labels == data.labels))
    if model.K == 2:
        agree = max(agree, float(np.mean((3 - labels) == data.labels)))
    ok = model.K == 2 and agree >= 0.95
    _report(capsys, 9, "segmentation recovery", ok, f"K={model.K} (want 2), label agreement {agree:.4f} (>= 0.95)",
            time.perf_counter() - t0, 300)


def test_c10_dimension_bookkeeping(capsys):
    t0 = time.perf_counter()
    P = sg.CovarianceSpec.parse
    cases = [
        (4, 3, "mu_K L_K D_K A_K", 2, 2, 23),   # 4*2 + 3*(2+1+1+1)
        (1, 1, "mu_0 L_0 D_0 A_0", 2, 2, 0),
        (1, 2, "mu_K L D A", 2, 2, 8),          # 1 + 2*2 + (1+1+1)
        (2, 2, "mu L D A", 2, 2, 7),            # 2 + (2+1+1+1)
        (1, 3, "mu_K L_K D A", 3, 3, 19),       # 2 + 9 + 3 + 3 + 2
        (8, 2, "mu_K L_K D_K A_K", 1, 1, 12),   # 8 + 2*(1+1)
        (3, 4, "mu_0 L_K D_0 A_0", 2, 2, 13),   # 3*3 + 4
        (1, 2, "mu_K L D_K A", 3, 3, 16),       # 1 + 6 + 1 + 2*3 + 2
        (2, 2, "mu_K L_K D_K A_K", 1, 3, 11),   # 2 + 2*2 + free 2-d complement (2+1+1+1)
        (5, 3, "mu_K L_0 D A_K", 2, 2, 20),     # 5*2 + 6 + 1 + 3
    ]
    got = [sg.dimension(l, K, P(code), E, d_y) for l, K, code, E, d_y, _ in cases]
    want = [c[-1] for c in cases]
    _report(capsys, 10, "dimension bookkeeping", got == want, f"got {got}, want {want}",
            time.perf_counter() - t0, 1)


def test_c11_risk_consistency(capsys):
    t0 = time.perf_counter()
    sc = simulate.load_scenario("histogram1d")
    curve = simulate.risk_curve(sc.truth, sc.estimator, (200, 800, 3200), 20, seed=sc.seed)
    rows = curve.rows
    gaps = [(a.risk - b.risk) / math.sqrt(a.std_error ** 2 + b.std_error ** 2) for a, b in zip(rows, rows[1:])]
    ok = all(g > 2 for g in gaps)
    _report(capsys, 11, "risk consistency", ok,
            f"risks {[round(r.risk, 5) for r in rows]}, gaps {[round(g, 1) for g in gaps]} combined s.e. (> 2)",
            time.perf_counter() - t0, 600)
