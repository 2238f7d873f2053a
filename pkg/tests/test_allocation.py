import numpy as np
import pytest

from portfolio_vcg import (
    QmapInstance,
    QmapValidationError,
    TransformUndefinedError,
    allocate,
    apportion,
    market_from_mu,
    min_form_to_max_form,
    portfolio_objective,
    qmap_allocate,
    qmap_objective,
    qmap_transform,
    validate_qmap,
)
from portfolio_vcg.qp import check_kkt
from portfolio_vcg.allocation import qmap_problem


def simplex_grid(n, resolution):
    if n == 2:
        k = np.arange(resolution + 1)
        return np.stack([k, resolution - k], axis=1) / resolution
    raise NotImplementedError


class TestAllocate:
    def test_two_offer_interior_split(self):
        market = market_from_mu([1.0, 0.8], np.eye(2), 0.5, 1000)
        alloc = allocate(market)
        np.testing.assert_allclose(alloc.weights, [0.6, 0.4], atol=1e-9)
        assert alloc.objective_value == pytest.approx(0.66, abs=1e-9)
        np.testing.assert_array_equal(alloc.call_counts, [600, 400])

    def test_risk_neutral_winner_takes_all(self):
        rng = np.random.default_rng(17)
        g = rng.standard_normal((2, 2))
        market = market_from_mu([2.0, 1.0], g.T @ g, 0.0, 1000)
        alloc = allocate(market)
        np.testing.assert_allclose(alloc.weights, [1.0, 0.0], atol=0)

    def test_symmetric_market_splits_evenly(self):
        market = market_from_mu([1.0, 1.0], np.eye(2), 1.0, 1000)
        alloc = allocate(market)
        np.testing.assert_allclose(alloc.weights, [0.5, 0.5], atol=1e-9)

    def test_risk_neutral_tie_prefers_lowest_index(self):
        market = market_from_mu([2.0, 2.0, 1.0], np.eye(3), 0.0, 1000)
        alloc = allocate(market)
        np.testing.assert_allclose(alloc.weights, [1.0, 0.0, 0.0], atol=0)
        assert alloc.degenerate

    def test_objective_nonincreasing_in_risk_aversion(self):
        rng = np.random.default_rng(19)
        for _ in range(20):
            n = int(rng.integers(2, 6))
            mu = rng.uniform(0, 5, n)
            g = rng.standard_normal((n, n))
            sigma = g.T @ g + 1e-6 * np.eye(n)
            values = []
            for q in [0.0, 0.1, 0.5, 1.0, 5.0]:
                market = market_from_mu(mu, sigma, q, 100)
                values.append(allocate(market).objective_value)
            diffs = np.diff(values)
            assert np.all(diffs <= 1e-9)

    def test_unvalidated_market_rejected(self):
        from portfolio_vcg import MarketInstance, Offer
        raw = MarketInstance(offers=(Offer("a", 1.0), Offer("b", 1.0)),
                             sigma=np.eye(2), q=0.5, pool_size=10)
        with pytest.raises(ValueError, match="validated"):
            allocate(raw)


class TestApportion:
    def test_exact_fractions(self):
        np.testing.assert_array_equal(apportion([0.6, 0.4], 1000), [600, 400])

    def test_rounding_preserves_total(self):
        counts = apportion([1 / 3, 1 / 3, 1 / 3], 100)
        assert counts.sum() == 100
        assert sorted(counts.tolist()) == [33, 33, 34]

    def test_remainder_tie_goes_to_lowest_index(self):
        counts = apportion([0.5, 0.5], 5)
        np.testing.assert_array_equal(counts, [3, 2])

    def test_random_totals_and_shares(self):
        rng = np.random.default_rng(23)
        for _ in range(200):
            n = int(rng.integers(2, 8))
            w = rng.uniform(0, 1, n)
            w[int(rng.integers(0, n))] = 0.0
            total = int(rng.integers(1, 10_000))
            if w.sum() == 0:
                continue
            counts = apportion(w, total)
            assert counts.sum() == total
            shares = w / w.sum() * total
            assert np.all(np.abs(counts - shares) < 1.0)

    def test_zero_mass_rejected(self):
        with pytest.raises(ValueError):
            apportion([0.0, 0.0], 10)


class TestQmapTransform:
    def test_matrices_carried_and_risk_inverted(self):
        inst = QmapInstance(a_matrix=np.eye(2), b_vector=np.array([0.1, 0.2]),
                            c_vector=np.array([1.0, 0.8]), q=2.0, m=5)
        out = min_form_to_max_form(inst)
        np.testing.assert_array_equal(out.a_matrix, inst.a_matrix)
        np.testing.assert_array_equal(out.b_vector, inst.b_vector)
        np.testing.assert_array_equal(out.c_vector, inst.c_vector)
        assert out.q == 0.5
        assert out.m == 5

    def test_zero_quadratic_becomes_linear_problem(self):
        inst = QmapInstance(a_matrix=np.zeros((2, 2)), b_vector=np.zeros(2),
                            c_vector=np.array([2.0, 1.0]), q=1.0, m=1)
        problem = qmap_transform(inst)
        alloc = qmap_allocate(min_form_to_max_form(inst))
        np.testing.assert_allclose(alloc.weights, [1.0, 0.0], atol=0)
        assert problem.mass == 1.0

    def test_riskless_min_form_is_undefined(self):
        inst = QmapInstance(a_matrix=np.eye(2), b_vector=np.zeros(2),
                            c_vector=np.array([1.0, 0.8]), q=0.0, m=1)
        with pytest.raises(TransformUndefinedError, match="max form"):
            qmap_transform(inst)

    def test_optimizers_agree_on_a_shared_grid(self):
        rng = np.random.default_rng(29)
        grid = simplex_grid(2, 500)
        for _ in range(25):
            g = rng.standard_normal((2, 2))
            inst = QmapInstance(
                a_matrix=g.T @ g + 1e-6 * np.eye(2),
                b_vector=rng.uniform(0, 1, 2),
                c_vector=rng.uniform(0, 5, 2),
                q=float(np.exp(rng.uniform(np.log(1e-2), np.log(10)))),
                m=1,
            )
            min_vals = np.array([qmap_objective(inst, k, min_form=True)
                                 for k in grid])
            max_form = min_form_to_max_form(inst)
            max_vals = np.array([qmap_objective(max_form, k) for k in grid])
            assert int(np.argmin(min_vals)) == int(np.argmax(max_vals))


class TestQmapAllocate:
    def test_linear_case_awards_whole_pool(self):
        inst = QmapInstance(a_matrix=np.zeros((2, 2)), b_vector=np.zeros(2),
                            c_vector=np.array([2.0, 1.0]), q=1.0, m=100)
        alloc = qmap_allocate(inst)
        np.testing.assert_allclose(alloc.weights, [100.0, 0.0], atol=0)
        np.testing.assert_array_equal(alloc.call_counts, [100, 0])

    def test_unit_pool_matches_portfolio_route(self):
        inst = QmapInstance(a_matrix=np.eye(2), b_vector=np.zeros(2),
                            c_vector=np.array([1.0, 0.8]), q=0.5, m=1)
        alloc = qmap_allocate(inst)
        market = market_from_mu([1.0, 0.8], np.eye(2), 0.5, 1000)
        np.testing.assert_allclose(alloc.weights, allocate(market).weights,
                                   atol=1e-9)

    def test_large_pool_solved_literally(self):
        # reduced derivative 1000.2 - 2 k1 vanishes at k1 = 500.1: the
        # quadratic term dominates and the allocation spreads almost evenly
        inst = QmapInstance(a_matrix=np.eye(2), b_vector=np.zeros(2),
                            c_vector=np.array([1.0, 0.8]), q=0.5, m=1000)
        alloc = qmap_allocate(inst)
        np.testing.assert_allclose(alloc.weights, [500.1, 499.9], atol=1e-6)
        report = check_kkt(qmap_problem(inst), alloc.weights)
        assert report.residual <= 1e-8

    def test_validation_rejects_bad_instances(self):
        with pytest.raises(QmapValidationError):
            validate_qmap(QmapInstance(a_matrix=np.array([[1.0, 2.0], [2.0, 1.0]]),
                                       b_vector=np.zeros(2),
                                       c_vector=np.array([1.0, 1.0]), q=1.0, m=1))
        with pytest.raises(QmapValidationError):
            validate_qmap(QmapInstance(a_matrix=np.eye(2), b_vector=np.zeros(3),
                                       c_vector=np.array([1.0, 1.0]), q=1.0, m=1))
        with pytest.raises(QmapValidationError):
            validate_qmap(QmapInstance(a_matrix=np.eye(2), b_vector=np.zeros(2),
                                       c_vector=np.array([1.0, 1.0]), q=-1.0, m=1))
        with pytest.raises(QmapValidationError):
            validate_qmap(QmapInstance(a_matrix=np.eye(2), b_vector=np.zeros(2),
                                       c_vector=np.array([1.0, 1.0]), q=1.0, m=0))


class TestObjectives:
    def test_portfolio_objective_matches_allocation(self):
        market = market_from_mu([1.0, 0.8], np.eye(2), 0.5, 1000)
        alloc = allocate(market)
        direct = portfolio_objective(market, alloc.weights)
        assert direct == pytest.approx(alloc.objective_value, abs=1e-9)

    def test_qmap_objective_signs(self):
        inst = QmapInstance(a_matrix=np.eye(2), b_vector=np.array([0.1, 0.1]),
                            c_vector=np.array([1.0, 2.0]), q=2.0, m=1)
        k = np.array([0.5, 0.5])
        quad = 0.5 * 0.5 + 0.5 * 0.5 + 0.1  # k'Ak + b'k
        assert qmap_objective(inst, k) == pytest.approx(1.5 - 2.0 * quad)
        assert qmap_objective(inst, k, min_form=True) == pytest.approx(quad - 2.0 * 1.5)
