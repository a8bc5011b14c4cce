import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triq.axioms import count_triangle_violations
from triq.nearness import (NearnessProblem, NearnessSchedule, distortion, generate_asymmetric,
                           generate_symmetric, lattice_distances, max_triangle_violation, shift_to_metric,
                           train_neural_nearness, triangle_fix)

cp = pytest.importorskip("cvxpy")

THREE = np.array([[0, 1, 3], [1, 0, 1], [3, 1, 0]], dtype=float)


def qp_oracle(D, symmetric):
    """Exact L2 projection onto the (quasi-)metric cone by a convex QP solver."""
    n = len(D)
    X = cp.Variable((n, n), symmetric=symmetric)
    cons = [cp.diag(X) == 0, X >= 0]
    cons += [X[i, k] <= X[i, j] + X[j, k] for i, j, k in itertools.permutations(range(n), 3)]
    cp.Problem(cp.Minimize(cp.sum_squares(X - D)), cons).solve(solver="OSQP", eps_abs=1e-12, eps_rel=1e-12,
                                                              max_iter=200_000, polishing=True)
    return X.value


def random_problem(n, seed, symmetric):
    rng = np.random.default_rng(seed)
    A = rng.uniform(0, 5, size=(n, n))
    D = A + A.T if symmetric else A
    np.fill_diagonal(D, 0)
    return NearnessProblem(D, "symmetric" if symmetric else "asymmetric")


class TestTriangleFix:
    def test_three_points(self):
        sol = triangle_fix(NearnessProblem(THREE))
        want = np.array([[0, 4, 8], [4, 0, 4], [8, 4, 0]]) / 3
        assert np.abs(sol.X - want).max() < 1e-8
        assert math.isclose(sol.distortion, math.sqrt(6 / 9) / np.linalg.norm(THREE), rel_tol=1e-9)
        assert sol.violations == 0

    def test_three_points_oracle(self):
        assert np.abs(qp_oracle(THREE, True) - triangle_fix(NearnessProblem(THREE)).X).max() < 1e-6

    def test_metric_input_unchanged(self):
        D = np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0]], dtype=float)
        sol = triangle_fix(NearnessProblem(D))
        assert np.array_equal(sol.X, D) and sol.history[0] == 0 and sol.iterations == 1

    @pytest.mark.parametrize("n", [3, 4, 5])
    @pytest.mark.parametrize("symmetric", [True, False])
    def test_matches_qp_oracle(self, n, symmetric):
        for seed in range(3):
            p = random_problem(n, seed, symmetric)
            sol = triangle_fix(p, max_iters=20_000, tol=1e-13)
            assert np.abs(sol.X - qp_oracle(p.D, symmetric)).max() < 1e-6

    @pytest.mark.parametrize("n", [10, 20])
    def test_converged_has_no_violations(self, n):
        sol = triangle_fix(generate_symmetric(n, 0), max_iters=20_000, tol=1e-10)
        assert sol.history[-1] < 1e-10
        assert count_triangle_violations(sol.X, 1e-8) == 0

    def test_asymmetric_converged_has_no_violations(self):
        sol = triangle_fix(generate_asymmetric(16, 0), max_iters=20_000, tol=1e-10)
        assert count_triangle_violations(sol.X, 1e-8) == 0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(3, 12), st.integers(1, 30))
    def test_preserves_symmetry(self, seed, n, iters):
        X = triangle_fix(generate_symmetric(n, seed), max_iters=iters).X
        assert np.array_equal(X, X.T) and (np.diag(X) == 0).all() and (X >= 0).all()

    def test_shift_removes_residual_violations(self):
        sol = triangle_fix(generate_symmetric(30, 1), max_iters=5)
        assert sol.violations > 0
        Y, eps = shift_to_metric(sol.X)
        assert eps > 0 and count_triangle_violations(Y) == 0


class TestDistortion:
    def test_identity_and_double(self):
        D = generate_symmetric(6, 0).D
        assert distortion(D, D) == 0
        assert math.isclose(distortion(2 * D, D), 1.0)

    def test_transpose_invariant(self):
        rng = np.random.default_rng(0)
        X, D = rng.random((7, 7)), rng.random((7, 7))
        assert math.isclose(distortion(X, D), distortion(X.T, D.T), rel_tol=1e-14)

    def test_errors(self):
        with pytest.raises(ValueError):
            distortion(np.zeros((2, 2)), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            distortion(np.zeros((2, 2)), np.ones((3, 3)))


class TestGenerators:
    def test_symmetric(self):
        p = generate_symmetric(40, 3)
        off = p.D[~np.eye(40, dtype=bool)]
        assert np.array_equal(p.D, p.D.T) and (np.diag(p.D) == 0).all()
        assert off.min() > 0 and off.max() < 11
        assert np.array_equal(p.D, generate_symmetric(40, 3).D)
        assert not np.array_equal(p.D, generate_symmetric(40, 4).D)

    def test_asymmetric(self):
        p = generate_asymmetric(25, 0)
        assert not np.array_equal(p.D, p.D.T) and (p.D >= 0).all() and (p.D < 10).all()
        assert np.array_equal(p.D, generate_asymmetric(25, 0).D)
        assert count_triangle_violations(p.D) > 0

    def test_lattice_is_quasi_metric(self):
        dist = lattice_distances(5, np.random.default_rng(0))
        assert count_triangle_violations(dist, 1e-12) == 0
        assert not np.allclose(dist, dist.T)

    def test_too_small(self):
        with pytest.raises(ValueError):
            generate_symmetric(2, 0)

    def test_problem_validation(self):
        with pytest.raises(ValueError):
            NearnessProblem(np.array([[1.0, 0], [0, 0]]))
        with pytest.raises(ValueError):
            NearnessProblem(np.array([[0.0, 1], [2, 0]]), "symmetric")
        with pytest.raises(ValueError):
            NearnessProblem(np.array([[0.0, -1], [-1, 0]]))


def test_max_violation():
    assert max_triangle_violation(THREE) == 1.0


@pytest.mark.parametrize("kind", ["euclidean", "widenorm", "deepnorm"])
def test_neural_solution_has_no_violations(kind):
    sch = NearnessSchedule(epochs=20, width=16, components=8, component_dim=8, batch=64)
    sol = train_neural_nearness(generate_asymmetric(12, 0) if kind == "widenorm" else generate_symmetric(12, 0),
                                kind, sch, seed=0)
    assert sol.violations == 0 and np.isfinite(sol.distortion)
    assert (np.abs(np.diag(sol.X)) < 1e-12).all()


def test_unknown_solver():
    with pytest.raises(ValueError):
        train_neural_nearness(generate_symmetric(5, 0), "mlp", NearnessSchedule(epochs=1))
