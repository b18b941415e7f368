"""Kron reduction: Schur complement, noise map, effective covariance."""

import numpy as np
import pytest

from conftest import path3_grid, random_connected_grid, two_bus_grid
from kronred.errors import InputError, NumericsError
from kronred.grid import FAST, SLOW, LinearizedSystem, assemble_linearized, \
    build_jacobian, solve_fixed_point
from kronred.reduction import (ReducedSystem, effective_noise_covariance,
                               make_star_grid, noise_map, reduce_grid,
                               reduced_system_from_dict, reduced_system_to_dict,
                               schur_reduce)
from kronred.simulate import OUSpec, make_time_grid, ou_sample_path


def linearize(grid, epsilon=1.0):
    op = solve_fixed_point(grid)
    return assemble_linearized(grid, build_jacobian(grid, op), epsilon)


def reduce_pipeline(grid, epsilon=1.0):
    sys = linearize(grid, epsilon)
    return sys, reduce_grid(grid, sys)


class TestSchurReduce:
    def test_two_bus_leaf_reduction(self):
        sys = linearize(two_bus_grid())
        np.testing.assert_allclose(schur_reduce(sys), [[0.0]], atol=1e-15)

    def test_path_hand_schur(self):
        # J_SS - J_SF J_FF^-1 J_FS = diag(-1,-1) - [1;1](-1/2)[1,1]
        sys = linearize(path3_grid())
        np.testing.assert_allclose(schur_reduce(sys), [[-0.5, 0.5], [0.5, -0.5]], atol=1e-15)

    def test_star_load_center_rank_one_update(self):
        n = 5
        sys = linearize(make_star_grid(n, center_class=FAST))
        expected = -np.eye(n) + np.full((n, n), 1.0 / n)
        np.testing.assert_allclose(schur_reduce(sys), expected, atol=1e-14)

    def test_no_fast_buses_identity_reduction(self):
        grid = path3_grid()
        # all-slow version of the path
        from conftest import make_grid
        g = make_grid([(1, SLOW, 0.0), (2, SLOW, 0.0), (3, SLOW, 0.0)],
                      [(1, 2, 1.0), (2, 3, 1.0)])
        sys = linearize(g)
        np.testing.assert_allclose(schur_reduce(sys), build_jacobian(g, solve_fixed_point(g)))
        assert noise_map(sys).shape == (3, 0)

    def test_indefinite_fast_block_reports_eigenvalue(self):
        sys = linearize(path3_grid())
        bad = LinearizedSystem(
            slow_ids=sys.slow_ids, fast_ids=sys.fast_ids, j_ss=sys.j_ss,
            j_sf=sys.j_sf, j_fs=sys.j_fs, j_ff=np.array([[0.5]]),
            m_slow=sys.m_slow, m_fast=sys.m_fast, d_slow=sys.d_slow,
            d_fast=sys.d_fast, epsilon=1.0)
        with pytest.raises(NumericsError, match=r"not negative definite.*5\.0"):
            schur_reduce(bad)


class TestNoiseMap:
    def test_two_bus_full_inheritance(self):
        sys = linearize(two_bus_grid())
        np.testing.assert_allclose(noise_map(sys), [[1.0]])

    def test_path_half_half(self):
        sys = linearize(path3_grid())
        np.testing.assert_allclose(noise_map(sys), [[0.5], [0.5]])


class TestEffectiveNoiseCovariance:
    def test_path_fully_correlated(self):
        _, red = reduce_pipeline(path3_grid(sigma_slow=0.0, sigma_fast=1.0))
        np.testing.assert_allclose(red.sigma_xi, 0.25 * np.ones((2, 2)), atol=1e-15)

    def test_no_fast_noise_means_diagonal(self):
        _, red = reduce_pipeline(path3_grid(sigma_slow=0.3, sigma_fast=0.0))
        np.testing.assert_allclose(red.sigma_xi, np.diag([0.09, 0.09]))
        assert red.sigma_xi[0, 1] == 0.0

    def test_positive_semidefinite(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            grid = random_connected_grid(rng, int(rng.integers(3, 20)), homogeneous=True)
            _, red = reduce_pipeline(grid)
            eigs = np.linalg.eigvalsh(red.sigma_xi)
            assert eigs.min() > -1e-12

    def test_dimension_mismatch_rejected(self):
        _, red = reduce_pipeline(path3_grid())
        bad = ReducedSystem(
            slow_ids=red.slow_ids, fast_ids=red.fast_ids, j_red=red.j_red,
            noise_gain=np.zeros((2, 3)), sigma_slow=red.sigma_slow,
            sigma_fast=red.sigma_fast, tau_slow=red.tau_slow, tau_fast=red.tau_fast,
            m_slow=red.m_slow, d_slow=red.d_slow, sigma_xi=red.sigma_xi)
        with pytest.raises(InputError, match="does not match"):
            effective_noise_covariance(bad)


class TestLaplacianPreservation:
    def test_reduced_laplacian_properties(self):
        rng = np.random.default_rng(17)
        for _ in range(30):
            grid = random_connected_grid(rng, int(rng.integers(3, 30)), homogeneous=True)
            _, red = reduce_pipeline(grid)
            j_red = red.j_red
            assert np.abs(j_red - j_red.T).max() < 1e-12
            assert np.abs(j_red.sum(axis=1)).max() < 1e-10
            eigs = np.sort(np.linalg.eigvalsh(j_red))[::-1]
            assert abs(eigs[0]) < 1e-10
            if len(eigs) > 1:
                assert np.all(eigs[1:] < 0)


class TestXiMonteCarlo:
    def test_sampled_xi_covariance_converges(self):
        # stationary OU snapshots of eta combined through K against Sigma_xi
        grid = path3_grid(sigma_slow=1.0, sigma_fast=1.0)
        _, red = reduce_pipeline(grid)
        n_samples = 100_000
        spec = OUSpec(sigma=np.concatenate([red.sigma_slow, red.sigma_fast]),
                      tau=np.concatenate([red.tau_slow, red.tau_fast]), seed=123)
        t = make_time_grid(t_end=n_samples * 0.05, dt_max=0.05)
        eta = ou_sample_path(spec, t)[:n_samples]
        xi = eta[:, :2] + eta[:, 2:] @ red.noise_gain.T
        emp = xi.T @ xi / n_samples
        rel = np.linalg.norm(emp - red.sigma_xi) / np.linalg.norm(red.sigma_xi)
        assert rel < 0.05


class TestMakeStarGrid:
    def test_center_fast_blocks(self):
        sys = linearize(make_star_grid(5, center_class=FAST))
        np.testing.assert_allclose(sys.j_ss, -np.eye(5))
        np.testing.assert_allclose(sys.j_ff, [[-5.0]])
        np.testing.assert_allclose(sys.j_sf, np.ones((5, 1)))

    def test_center_slow_blocks(self):
        sys = linearize(make_star_grid(5, center_class=SLOW))
        np.testing.assert_allclose(sys.j_ss, [[-5.0]])
        np.testing.assert_allclose(sys.j_ff, -np.eye(5))

    def test_degenerate_single_outer(self):
        grid = make_star_grid(1, center_class=SLOW)
        assert grid.n_buses == 2

    def test_uniform_mode_noise_power_scales_with_loads(self):
        # generator center: u^T K diag(sigma^2) K^T u = sigma^2 N_F exactly
        sigma = 0.01
        for n_f in (4, 8, 16):
            sys, red = reduce_pipeline(make_star_grid(n_f, center_class=SLOW, sigma=sigma))
            u = np.ones(1)
            value = float(u @ (red.noise_gain * red.sigma_fast**2) @ red.noise_gain.T @ u)
            assert value == pytest.approx(sigma**2 * n_f, rel=1e-14)


class TestSerialization:
    def test_round_trip(self):
        _, red = reduce_pipeline(path3_grid(sigma_slow=0.2, sigma_fast=0.7))
        doc = reduced_system_to_dict(red)
        again = reduced_system_from_dict(doc)
        np.testing.assert_array_equal(again.j_red, red.j_red)
        np.testing.assert_array_equal(again.noise_gain, red.noise_gain)
        np.testing.assert_array_equal(again.sigma_xi, red.sigma_xi)
        assert again.slow_ids == red.slow_ids

    def test_missing_field_rejected(self):
        _, red = reduce_pipeline(path3_grid())
        doc = reduced_system_to_dict(red)
        del doc["j_red"]
        with pytest.raises(InputError, match="j_red"):
            reduced_system_from_dict(doc)
