import time
import unittest

import numpy as np
from scipy.optimize import nnls

from src.cone import enumerate_stable
from src.exceptions import ConfigError, NotConverged
from src.solver import (
    ConeProjector,
    NnlsProblem,
    SolverConfig,
    WeightMatrix,
    j_statistic,
    project_onto_cone,
)
from tests.factories import SLOW


def _random_instance(rng):
    rows = int(rng.integers(2, 13))
    cols = int(rng.integers(1, 31))
    A = (rng.random((rows, cols)) < 0.4).astype(float)
    for j in np.flatnonzero(A.sum(axis=0) == 0):
        A[rng.integers(rows), j] = 1.0
    pi = rng.random(rows)
    nu_lower = 0.05 * rng.random(cols)
    return A, pi, nu_lower


def _oracle_objective(A, weights, pi, nu_lower):
    root = np.sqrt(weights)
    _, norm = nnls(root[:, None] * A, root * (pi - A @ nu_lower))
    return norm**2


class TestProjection(unittest.TestCase):
    def test_matches_active_set_oracle(self):
        rng = np.random.default_rng(2024)
        for trial in range(200):
            A, pi, nu_lower = _random_instance(rng)
            weights = np.ones(A.shape[0]) if trial % 2 else 0.5 + rng.random(A.shape[0])
            step = "diagonal" if trial % 3 == 0 else "row_sum"
            projection = project_onto_cone(
                A, WeightMatrix.diagonal(weights), pi, nu_lower, tol=1e-11, max_iter=1_000_000, step=step
            )
            expected = _oracle_objective(A, weights, pi, nu_lower)
            self.assertTrue(projection.converged)
            self.assertAlmostEqual(projection.objective, expected, delta=1e-8 * max(1.0, expected))
            self.assertTrue(np.all(projection.nu >= nu_lower - 1e-15))

    def test_point_in_cone_has_zero_objective(self):
        A = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        projection = project_onto_cone(A, WeightMatrix.identity(), A[:, 1], 0.0)
        self.assertLess(projection.objective, 1e-12)

    def test_unreachable_direction(self):
        projection = project_onto_cone(np.array([[1.0], [0.0]]), WeightMatrix.identity(), [0.0, 1.0], 0.0)
        np.testing.assert_allclose(projection.nu, [0.0])
        np.testing.assert_allclose(projection.gamma, [0.0, 0.0])
        self.assertAlmostEqual(projection.objective, 1.0)
        self.assertEqual(j_statistic(10, projection), 10.0)

    def test_jacobi_and_gauss_seidel_agree(self):
        rng = np.random.default_rng(9)
        A, pi, nu_lower = _random_instance(rng)
        sequential = project_onto_cone(A, WeightMatrix.identity(), pi, nu_lower, max_iter=500_000)
        simultaneous = project_onto_cone(
            A, WeightMatrix.identity(), pi, nu_lower, max_iter=500_000, sweep="jacobi"
        )
        self.assertAlmostEqual(sequential.objective, simultaneous.objective, delta=1e-8)

    def test_column_order_does_not_matter(self):
        rng = np.random.default_rng(13)
        A, pi, _ = _random_instance(rng)
        order = rng.permutation(A.shape[1])
        base = project_onto_cone(A, WeightMatrix.identity(), pi, 0.01, max_iter=500_000)
        permuted = project_onto_cone(A[:, order], WeightMatrix.identity(), pi, 0.01, max_iter=500_000)
        self.assertAlmostEqual(base.objective, permuted.objective, delta=1e-9)

    def test_warm_start_reaches_same_objective(self):
        rng = np.random.default_rng(17)
        A, pi, nu_lower = _random_instance(rng)
        projector = ConeProjector(A, WeightMatrix.identity(), SolverConfig(max_iter=500_000))
        cold = projector.project(pi, nu_lower)
        warm = projector.project(pi, nu_lower, warm_start=cold.slack)
        self.assertAlmostEqual(cold.objective, warm.objective, delta=1e-10)
        self.assertLessEqual(warm.iterations, 1)

    def test_not_converged_carries_best_iterate(self):
        rng = np.random.default_rng(21)
        A = (rng.random((10, 25)) < 0.5).astype(float) + np.eye(10, 25)
        with self.assertRaises(NotConverged) as raised:
            project_onto_cone(A, WeightMatrix.identity(), rng.random(10), 0.0, tol=1e-14, max_iter=1)
        self.assertIsNotNone(raised.exception.projection)
        self.assertFalse(raised.exception.projection.converged)

    def test_jacobi_with_diagonal_step_is_refused(self):
        with self.assertRaises(ConfigError):
            SolverConfig(step="diagonal", sweep="jacobi")

    def test_non_positive_weights_are_refused(self):
        with self.assertRaises(ConfigError):
            WeightMatrix.diagonal([1.0, 0.0])


class TestNnlsProblem(unittest.TestCase):
    def test_gradient_matches_residual_form(self):
        rng = np.random.default_rng(5)
        A, pi, nu_lower = _random_instance(rng)
        weights = WeightMatrix.diagonal(0.5 + rng.random(A.shape[0]))
        problem = NnlsProblem.build(A, weights, pi, nu_lower)
        slack = rng.random(A.shape[1])
        residual = A @ (nu_lower + slack) - pi
        np.testing.assert_allclose(problem.gradient(slack), A.T @ (weights.weights * residual))

    def test_row_sum_steps(self):
        A = np.array([[1.0, 1.0], [0.0, 1.0]])
        problem = NnlsProblem.build(A, WeightMatrix.identity(), [0.0, 0.0], 0.0)
        np.testing.assert_allclose(problem.H.toarray(), [[1.0, 1.0], [1.0, 2.0]])
        np.testing.assert_allclose(problem.d, [1 / 2, 1 / 3])

    def test_projection_is_stationary_for_its_problem(self):
        rng = np.random.default_rng(8)
        A, pi, nu_lower = _random_instance(rng)
        projector = ConeProjector(A, WeightMatrix.identity(), SolverConfig(tol=1e-11, max_iter=500_000))
        projection = projector.project(pi, nu_lower)
        gradient = projector.problem(pi, nu_lower).gradient(projection.slack)
        self.assertLessEqual(np.max(np.abs(np.minimum(projection.slack, gradient))), 1e-11)
        self.assertTrue(np.all(gradient >= -1e-11))


class TestConeProjection(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.cone = enumerate_stable(3).take(np.arange(150))
        cls.A = cls.cone.to_sparse()

    def test_hessian_counts_shared_rows(self):
        problem = NnlsProblem.build(self.A, WeightMatrix.identity(), np.zeros(self.cone.rows), 0.0)
        H = problem.H.toarray()
        np.testing.assert_array_equal(np.diag(H), 3.0)
        self.assertTrue(set(np.unique(H)) <= {0.0, 1.0, 2.0, 3.0})

    def test_frequencies_inside_the_cone_give_zero_statistic(self):
        rng = np.random.default_rng(1)
        projector = ConeProjector(self.cone, config=SolverConfig(tol=1e-11, max_iter=500_000))
        tau = 1e-4
        for _ in range(4):
            nu = tau + rng.dirichlet(np.ones(self.cone.cols))
            pi = self.A @ nu
            projection = projector.project(pi, tau)
            self.assertLess(j_statistic(3000, projection), 1e-8 * 3000)

    def test_projected_mass_is_three_times_configuration_mass(self):
        rng = np.random.default_rng(2)
        projector = ConeProjector(self.cone, config=SolverConfig(max_iter=500_000))
        projection = projector.project(rng.random(self.cone.rows), 1e-4)
        self.assertAlmostEqual(projection.gamma.sum(), 3 * projection.nu.sum(), places=9)


@unittest.skipUnless(SLOW, "set PREFSTAB_SLOW=1 to time sweeps over the full cone")
class TestFullConeSweeps(unittest.TestCase):
    def test_sweeps_over_full_cone_are_fast(self):
        cone = enumerate_stable(3)
        projector = ConeProjector(cone, config=SolverConfig(max_iter=200))
        rng = np.random.default_rng(0)
        pi = rng.random(cone.rows)
        projector.project(pi, 0.0)  # compiles the sweep kernel
        started = time.perf_counter()
        projection = projector.project(pi, 1e-6)
        elapsed = time.perf_counter() - started
        self.assertGreater(projection.iterations, 0)
        self.assertLess(elapsed / projection.iterations, 0.05)


if __name__ == "__main__":
    unittest.main()
