import math

import numpy as np
import pytest
from scipy import integrate, stats

from pcde import divergence as dv
from pcde.exceptions import ContractError, DomainError

GAUSS_DOMAIN = dv.Box([-8.0], [9.0])
FINE = dv.DivergenceConfig(quadrature=dv.Grid(20_000))


def _norm(mu, sd=1.0):
    return lambda y: stats.norm.pdf(np.asarray(y).reshape(-1), mu, sd)


def _uniform(a, b):
    return lambda y: np.where((np.asarray(y).reshape(-1) >= a) & (np.asarray(y).reshape(-1) <= b), 1.0 / (b - a), 0.0)


def test_identical_densities_give_zero():
    s = _norm(0.0)
    for fn in (dv.kl, dv.jkl, dv.hellinger2, dv.l1_squared):
        assert fn(s, s, GAUSS_DOMAIN, FINE).value == pytest.approx(0.0, abs=1e-12)


def test_gaussian_kl():
    assert dv.kl(_norm(0), _norm(1), GAUSS_DOMAIN, FINE).value == pytest.approx(0.5, abs=1e-6)


def test_kl_infinite_when_support_fails():
    s = _uniform(0, 1)
    t = _uniform(0.5, 1)
    assert dv.kl(s, t, (0.0, 1.0)).is_infinite


def test_jkl_half_uniforms_matches_scipy_oracle():
    s, t = _uniform(0, 1), _uniform(0.5, 1)
    f = lambda y: s(y)[0] * math.log(s(y)[0] / (0.5 * s(y)[0] + 0.5 * t(y)[0]))
    oracle = 2.0 * (integrate.quad(f, 0, 0.5)[0] + integrate.quad(f, 0.5, 1)[0])
    assert dv.jkl(s, t, (0.0, 1.0)).value == pytest.approx(oracle, abs=1e-9)


def test_hellinger_examples():
    assert dv.hellinger2(_norm(0), _norm(1), GAUSS_DOMAIN, FINE).value == pytest.approx(2 * (1 - math.exp(-1 / 8)), abs=1e-6)
    disjoint = dv.hellinger2(dv.histogram_density([1, 0]), dv.histogram_density([0, 1]), (0.0, 1.0))
    assert disjoint.value == 2.0


def test_non_normalised_input_rejected():
    with pytest.raises(ContractError):
        dv.kl(lambda y: np.full(np.size(y), 2.0), _uniform(0, 1), (0.0, 1.0))


def test_config_validation():
    with pytest.raises(ValueError):
        dv.DivergenceConfig(rho=1.0)
    with pytest.raises(ValueError):
        dv.MonteCarlo(samples=10)


def test_gaussian_hellinger_closed_form():
    assert dv.gaussian_hellinger2([0], [[1]], [0], [[1]]) == 0.0
    assert dv.gaussian_hellinger2([0], [[1]], [1], [[1]]) == pytest.approx(2 * (1 - math.exp(-1 / 8)), abs=1e-14)
    assert dv.gaussian_hellinger2([0, 0], np.eye(2), [2, 0], np.eye(2)) == pytest.approx(2 * (1 - math.exp(-0.5)))


def test_gaussian_hellinger_monte_carlo_cross_check():
    cfg = dv.DivergenceConfig(quadrature=dv.MonteCarlo(200_000, seed=3))
    s = dv.gaussian_density([0.0, 0.0], np.eye(2))
    t = dv.gaussian_density([2.0, 0.0], np.eye(2))
    est = dv.hellinger2(s, t, dv.Box([-10, -10], [12, 10]), cfg)
    assert abs(est.value - dv.gaussian_hellinger2([0, 0], np.eye(2), [2, 0], np.eye(2))) < 4 * est.std_error


def test_gaussian_hellinger_rejects_non_spd():
    with pytest.raises(np.linalg.LinAlgError):
        dv.gaussian_hellinger2([0], [[-1.0]], [0], [[1.0]])


def test_gaussian_ratio_bound(rng):
    assert dv.gaussian_ratio_bound([0], [[0.5]], [0], [[1.0]]) == pytest.approx(math.sqrt(2))
    delta = 0.3
    S1 = np.diag([1.0, 2.0])
    assert dv.gaussian_ratio_bound([0, 0], S1, [0, 0], (1 + delta) * S1) == pytest.approx((1 + delta) ** 1.0)
    mu1, S1, mu2, S2 = np.array([0.3]), np.array([[0.4]]), np.array([-0.2]), np.array([[1.5]])
    bound = dv.gaussian_ratio_bound(mu1, S1, mu2, S2)
    x = rng.uniform(-10, 10, 10_000)
    ratio = stats.norm.pdf(x, mu1[0], math.sqrt(S1[0, 0])) / stats.norm.pdf(x, mu2[0], math.sqrt(S2[0, 0]))
    assert np.all(ratio <= bound * (1 + 1e-12))
    with pytest.raises(DomainError):
        dv.gaussian_ratio_bound([0], [[2.0]], [0], [[1.0]])


def _random_pair(rng, bins=32):
    p = rng.dirichlet(np.full(bins, 0.5))
    q = rng.dirichlet(np.full(bins, 0.5))
    return p, q


def test_discrete_sandwich_properties(rng):
    for _ in range(200):
        p, q = _random_pair(rng)
        s, t = dv.histogram_density(p), dv.histogram_density(q)
        cfg = dv.DivergenceConfig(quadrature=dv.Grid(64))
        h = dv.hellinger2(s, t, (0.0, 1.0), cfg).value
        k = dv.kl(s, t, (0.0, 1.0), cfg).value
        l1 = dv.l1_squared(s, t, (0.0, 1.0), cfg).value
        assert h == dv.hellinger2(t, s, (0.0, 1.0), cfg).value
        assert k <= (2 + math.log(np.max(p / q))) * h + 1e-9
        for rho in (0.1, 0.5, 0.9):
            j = dv.jkl(s, t, (0.0, 1.0), dv.DivergenceConfig(rho=rho, quadrature=dv.Grid(64))).value
            c = dv.c_rho(rho)
            assert c * h <= j + 1e-9
            assert j <= k + 1e-9
            assert max(c / 4, rho / 2) * l1 <= j + 1e-9


def test_c_rho_half():
    assert dv.c_rho(0.5) == pytest.approx(0.38629, abs=1e-5)


def test_grid_and_monte_carlo_agree():
    s, t = _norm(0.0), _norm(0.7, 1.3)
    grid = dv.kl(s, t, GAUSS_DOMAIN, FINE).value
    mc = dv.kl(s, t, GAUSS_DOMAIN, dv.DivergenceConfig(quadrature=dv.MonteCarlo(100_000, seed=1)))
    assert abs(grid - mc.value) < 4 * mc.std_error


class _Cond:
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, x, Y):
        return self.fn(x, Y)


def test_tensorized_constant_in_x_equals_plain():
    s = _Cond(lambda x, Y: _norm(0)(Y))
    t = _Cond(lambda x, Y: _norm(1)(Y))
    design = np.linspace(0.05, 0.95, 7)[:, None]
    val = dv.tensorized("kl", s, t, design, GAUSS_DOMAIN, FINE).value
    assert val == pytest.approx(dv.kl(_norm(0), _norm(1), GAUSS_DOMAIN, FINE).value, rel=1e-12)


def test_tensorized_two_leaf_average():
    s = _Cond(lambda x, Y: _uniform(0, 1)(Y))
    t = _Cond(lambda x, Y: (dv.histogram_density([0.3, 0.7]) if x[0] < 0.5 else dv.histogram_density([0.6, 0.4]))(Y))
    design = np.array([[0.1], [0.2], [0.7], [0.9]])
    left = dv.kl(_uniform(0, 1), dv.histogram_density([0.3, 0.7]), (0.0, 1.0)).value
    right = dv.kl(_uniform(0, 1), dv.histogram_density([0.6, 0.4]), (0.0, 1.0)).value
    assert dv.tensorized("kl", s, t, design, (0.0, 1.0)).value == pytest.approx((left + right) / 2)


def test_tensorized_identical_is_zero_and_bad_kind():
    s = _Cond(lambda x, Y: _uniform(0, 1)(Y))
    assert dv.tensorized("jkl", s, s, [[0.5]], (0.0, 1.0)).value == 0.0
    with pytest.raises(ValueError):
        dv.tensorized("tv", s, s, [[0.5]], (0.0, 1.0))
