import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcde import polydens as pd
from pcde import simulate
from pcde.data import Dataset
from pcde.exceptions import DomainError
from pcde.geometry import Hyperrectangle, PartitionTree, enumerate_partitions


def _circle_grid_best(Phi, m=100_000):
    theta = np.linspace(0, 2 * np.pi, m, endpoint=False)
    C = np.stack([np.cos(theta), np.sin(theta)])
    V = Phi @ C
    return np.max(np.sum(np.log(np.maximum(V * V, 1e-300)), axis=0))


def test_basis_is_orthonormal():
    cell = Hyperrectangle((0.25, 0.0), (0.75, 0.5))
    nodes = np.polynomial.legendre.leggauss(8)
    t, w = nodes
    y1 = 0.25 + 0.5 * (t + 1) / 2
    y2 = 0.25 * (t + 1)
    Y = np.array([[a, b] for a in y1 for b in y2])
    W = np.array([wa * wb for wa in w for wb in w]) * 0.25 * 0.25
    B = pd.basis_matrix(Y, cell, (2, 1))
    assert np.allclose(B.T @ (B * W[:, None]), np.eye(6), atol=1e-12)


def test_fit_cell_histogram_value():
    cell = Hyperrectangle((0.0,), (0.25,))
    cp = pd.fit_cell(np.array([[0.05], [0.1], [0.2]]), 10, cell, (0,))
    assert cp.weight == 0.3
    val = cp.weight * (pd.basis_matrix(np.array([[0.1]]), cell, (0,)) @ cp.coeffs) ** 2
    assert val[0] == pytest.approx(1.2)


def test_fit_cell_empty_gives_zero_weight():
    cp = pd.fit_cell(np.zeros((0, 1)), 5, Hyperrectangle((0.0,), (0.5,)), (1,))
    assert cp.weight == 0.0 and cp.coeffs[0] == 1.0


def test_sphere_mle_matches_circle_grid():
    cell = Hyperrectangle((0.0,), (0.5,))
    Phi = pd.basis_matrix(np.array([[0.1], [0.2], [0.15]]), cell, (1,))
    c, f = pd.sphere_mle(Phi)
    assert abs(np.linalg.norm(c) - 1) < 1e-10
    assert pd.kkt_residual(Phi, c) < 1e-6
    assert f >= _circle_grid_best(Phi) - 1e-6


def test_dimension_examples():
    assert pd.dimension([2, 2], (1,)) == (6, 8)
    assert pd.dimension([1], (0,)) == (0, 1)
    assert pd.dimension([5], (0,)) == (4, 5)


def test_single_leaf_uniform_fit(rng):
    data = Dataset(rng.random((30, 1)), rng.random((30, 1)))
    model = pd.fit(data, PartitionTree.trivial("RDP", 30, 1), PartitionTree.trivial("RDP", 30, 1), (0,))
    assert model.loglik == 0.0
    assert np.all(model.log_density_many(data.X, data.Y) == 0.0)


def test_two_leaf_histogram_weights():
    X = np.r_[np.full(10, 0.25), np.full(10, 0.75)][:, None]
    Y = np.r_[[0.1] * 3, [0.9] * 7, [0.2] * 4, [0.6] * 6][:, None]
    xt = PartitionTree.uniform(20, 1, 1, kind="RDP")
    yt = PartitionTree.uniform(20, 1, 1, kind="RDP")
    model = pd.fit(Dataset(X, Y), xt, yt, (0,))
    assert [c.weight for c in model.cells[0]] == [0.3, 0.7]
    assert [c.weight for c in model.cells[1]] == [0.4, 0.6]
    assert model.log_density([0.1], [0.05]) == pytest.approx(math.log(0.3 / 0.5))


def test_refit_recovers_weights():
    truth = simulate.piecewise_constant(PartitionTree.uniform(8, 1, 1), PartitionTree.uniform(8, 1, 2),
                                        [[0.1, 0.2, 0.3, 0.4], [0.4, 0.3, 0.2, 0.1]])
    data = simulate.sample(simulate.GroundTruth(truth), 100_000, seed=1)
    model = pd.fit(data, truth.x_tree, truth.y_trees, (0,))
    for a, b in zip(model.cells, truth.cells):
        assert max(abs(x.weight - y.weight) for x, y in zip(a, b)) < 0.02


def test_normalisation_of_fitted_model(rng):
    data = Dataset(rng.random((200, 1)), rng.random((200, 1)) ** 2)
    model = pd.fit(data, PartitionTree.uniform(200, 1, 1, kind="RDP"), PartitionTree.uniform(200, 1, 2, kind="RDP"), (2,))
    grid = (np.arange(200_000) + 0.5) / 200_000
    for x in rng.random(10):
        assert np.sum(model([x], grid[:, None])) / grid.size == pytest.approx(1.0, abs=1e-6)


def test_additivity(rng):
    data = Dataset(rng.random((150, 1)), rng.random((150, 1)))
    xt = PartitionTree.uniform(150, 1, 2, kind="RDP")
    model = pd.fit(data, xt, PartitionTree.uniform(150, 1, 1, kind="RDP"), (1,))
    per_cell = sum(c.loglik for row in model.cells for c in row)
    assert per_cell == pytest.approx(model.loglik, abs=1e-9)
    assert pd.loglik(model, data) == pytest.approx(model.loglik, abs=1e-9)


def test_r0_optimality_under_perturbation(rng):
    data = Dataset(rng.random((80, 1)), rng.random((80, 1)))
    yt = PartitionTree.uniform(80, 1, 2, kind="RDP")
    model = pd.fit(data, PartitionTree.trivial("RDP", 80, 1), yt, (0,))
    w = np.array([c.weight for c in model.cells[0]])
    idx = yt.leaf_index(data.Y)
    vols = np.array([c.volume for c in yt.leaves])
    base = np.sum(np.log(w[idx] / vols[idx]))
    for _ in range(20):
        v = np.clip(w + 0.01 * rng.standard_normal(4), 1e-6, None)
        v /= v.sum()
        assert np.sum(np.log(v[idx] / vols[idx])) <= base + 1e-12


def test_empty_x_leaf_is_uniform():
    data = Dataset(np.full((5, 1), 0.1), np.linspace(0.1, 0.9, 5)[:, None])
    model = pd.fit(data, PartitionTree.uniform(5, 1, 1, kind="RDP"), PartitionTree.uniform(5, 1, 1, kind="RDP"), (0,))
    assert model.log_density([0.9], [0.3]) == pytest.approx(0.0, abs=1e-12)


def test_zero_density_is_minus_infinity():
    data = Dataset(np.full((4, 1), 0.3), np.full((4, 1), 0.2))
    model = pd.fit(data, PartitionTree.trivial("RDP", 4, 1), PartitionTree.uniform(4, 1, 1, kind="RDP"), (0,))
    assert model.log_density([0.3], [0.8]) == -math.inf


def test_out_of_domain():
    data = Dataset(np.full((2, 1), 0.3), np.full((2, 1), 1.2))
    with pytest.raises(DomainError):
        pd.fit(data, PartitionTree.trivial("RDP", 2, 1), PartitionTree.trivial("RDP", 2, 1), (0,))


def test_degree_validation():
    with pytest.raises(ValueError):
        pd.as_degree((-1,), 1)
    with pytest.raises(ValueError):
        pd.as_degree((pd.MAX_DEGREE + 1,), 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_r0_fit_is_conditional_histogram(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 60))
    data = Dataset(rng.random((n, 1)), rng.random((n, 1)))
    xts = list(enumerate_partitions("RDSP", n, 1, max_leaves=4))
    yts = list(enumerate_partitions("RDSP", n, 1, max_leaves=3))
    xt, yt = xts[rng.integers(len(xts))], yts[rng.integers(len(yts))]
    model = pd.fit(data, xt, yt, (0,))
    lx, ly = xt.leaf_index(data.X), yt.leaf_index(data.Y)
    for l in range(xt.n_leaves):
        nl = np.sum(lx == l)
        for k, c in enumerate(model.cells[l]):
            if nl:
                assert c.weight == np.sum((lx == l) & (ly == k)) / nl
