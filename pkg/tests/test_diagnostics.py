"""Diagnostics against brute-force references.

The FFT autocovariance and the windowed autocorrelation time are
compared with direct O(N^2) sums; the AR(1) check uses the known
integrated time (1 + rho) / (1 - rho) of the exact process.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from pytest import approx

from darcyda import fem
from darcyda.diagnostics import (
    autocovariance,
    chain_cost,
    effective_sample_size,
    field_statistics,
    integrated_autocorrelation,
    prune,
)
from darcyda.errors import DegenerateSeriesError, InvalidArgumentError
from darcyda.random_field import realize, truncated_basis

import oracles


class TestAutocovariance:
    def test_matches_direct_sums(self):
        rng = np.random.default_rng(601)
        x = np.cumsum(rng.standard_normal(200)) * 0.2
        assert_allclose(autocovariance(x), oracles.brute_autocovariance(x),
                        rtol=1e-10, atol=1e-12)

    def test_lag_zero_is_biased_variance(self):
        rng = np.random.default_rng(602)
        x = rng.standard_normal(500)
        assert autocovariance(x)[0] == approx(float(x.var()), rel=1e-12)


class TestIntegratedAutocorrelation:
    def test_matches_windowed_oracle(self):
        for seed in (603, 604, 605):
            rng = np.random.default_rng(seed)
            x = oracles.ar1_series(400, 0.6, rng)
            assert integrated_autocorrelation(x) == approx(
                oracles.brute_windowed_tau(x), rel=1e-10)

    def test_ar1_known_time(self):
        # exact process time (1+rho)/(1-rho) = 19 for rho = 0.9
        rng = np.random.default_rng(606)
        x = oracles.ar1_series(100000, 0.9, rng)
        tau = integrated_autocorrelation(x)
        assert 19.0 * 0.8 < tau < 19.0 * 1.2

    def test_anticorrelated_series_floors_at_one(self):
        x = np.tile([1.0, -1.0], 50)
        assert integrated_autocorrelation(x) == 1.0

    def test_constant_series_degenerate(self):
        with pytest.raises(DegenerateSeriesError):
            integrated_autocorrelation(np.full(100, 2.5))

    def test_input_validation(self):
        with pytest.raises(InvalidArgumentError):
            integrated_autocorrelation(np.array([1.0]))
        with pytest.raises(InvalidArgumentError):
            integrated_autocorrelation(np.zeros((10, 2)))


class TestEffectiveSampleSize:
    def test_iid_ratio_near_one(self):
        rng = np.random.default_rng(607)
        chain = rng.standard_normal((20000, 3))
        n_eff, taus = effective_sample_size(chain)
        assert taus.shape == (3,)
        assert 0.8 < n_eff / 20000 < 1.2

    def test_slowest_component_governs(self):
        rng = np.random.default_rng(608)
        fast = rng.standard_normal(30000)
        slow = oracles.ar1_series(30000, 0.95, rng)
        n_eff, taus = effective_sample_size(np.column_stack([fast, slow]))
        assert taus[1] > 5.0 * taus[0]
        assert n_eff == approx(30000 / taus[1], rel=1e-12)

    def test_one_dimensional_series(self):
        rng = np.random.default_rng(609)
        x = oracles.ar1_series(5000, 0.5, rng)
        n_eff, taus = effective_sample_size(x)
        assert taus.shape == (1,)
        assert n_eff == approx(5000 / integrated_autocorrelation(x), rel=1e-12)

    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            effective_sample_size(np.zeros((1, 2)))


class TestPrune:
    def test_ceil_of_tau_sets_stride(self):
        kept = prune(np.arange(10.0), 2.3)
        assert np.array_equal(kept, [0.0, 3.0, 6.0, 9.0])

    def test_tau_one_keeps_everything(self):
        x = np.arange(7.0)
        assert np.array_equal(prune(x, 1.0), x)

    def test_rows_of_matrix_chain(self):
        chain = np.arange(12.0).reshape(6, 2)
        assert np.array_equal(prune(chain, 2.0), chain[::2])

    def test_validation(self):
        for bad in (0.5, np.inf, np.nan):
            with pytest.raises(InvalidArgumentError):
                prune(np.arange(5.0), bad)


class TestChainCost:
    def test_hand_values(self):
        cost = chain_cost(t_fine=100.0, t_train=50.0, t_run=30.0,
                          n_eff=10.0, n_chains=4)
        assert cost.conservative == approx(18.0, rel=1e-15)
        assert cost.normalized == approx(6.75, rel=1e-15)

    def test_single_chain_modes_coincide(self):
        cost = chain_cost(10.0, 5.0, 2.0, 4.0, n_chains=1)
        assert cost.conservative == cost.normalized

    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            chain_cost(1.0, 1.0, 1.0, 0.0)
        with pytest.raises(InvalidArgumentError):
            chain_cost(1.0, 1.0, 1.0, 1.0, n_chains=0)


class TestFieldStatistics:
    def test_matches_direct_moments(self):
        mesh = fem.build_unit_square_mesh(5)
        basis = truncated_basis(mesh, 6, (0.3, 0.3), sigma=0.8, mu=-0.5)
        rng = np.random.default_rng(610)
        thetas = rng.standard_normal((40, 6))
        mean, var = field_statistics(basis, thetas, block=7)
        fields = np.array([realize(basis, th).log_t for th in thetas])
        assert_allclose(mean, fields.mean(axis=0), rtol=1e-10, atol=1e-12)
        assert_allclose(var, fields.var(axis=0, ddof=1), rtol=1e-8, atol=1e-12)

    def test_block_size_does_not_matter(self):
        mesh = fem.build_unit_square_mesh(4)
        basis = truncated_basis(mesh, 4, (0.4, 0.4))
        rng = np.random.default_rng(611)
        thetas = rng.standard_normal((25, 4))
        mean_a, var_a = field_statistics(basis, thetas, block=3)
        mean_b, var_b = field_statistics(basis, thetas, block=1024)
        assert_allclose(mean_a, mean_b, rtol=1e-12)
        assert_allclose(var_a, var_b, rtol=1e-10)

    def test_validation(self):
        mesh = fem.build_unit_square_mesh(4)
        basis = truncated_basis(mesh, 4, (0.4, 0.4))
        with pytest.raises(InvalidArgumentError):
            field_statistics(basis, np.zeros((10, 3)))
        with pytest.raises(InvalidArgumentError):
            field_statistics(basis, np.zeros((1, 4)))
