import numpy as np
import pytest
from hypothesis import given, strategies as st

from masslump.control import setup
from masslump.fem import LumpedDiagonal, TargetField, assemble
from masslump.mesh import build_structured
from masslump.solver import (FullMassSchurOperator, IndefiniteOperatorError, InnerSolveError,
                             StopRule, build_schur, cg_inner, convergence_factor,
                             estimate_condition, pcg)
from masslump.sparse import CsrMatrix, operator_to_dense


def _diag(values):
    values = np.asarray(values, dtype=float)
    return LumpedDiagonal(values, values)


@pytest.fixture
def problem(small_mesh):
    return setup(small_mesh, TargetField.unit_box(small_mesh.dim))


def test_schur_operator_matches_dense_formula(problem):
    K = problem.K.to_dense()
    M = problem.M.to_dense()
    dv = problem.D.values
    rho = problem.rho_scalar
    S = rho * K @ np.diag(1 / dv) @ K + M
    np.testing.assert_allclose(operator_to_dense(problem.operator.apply, problem.n), S,
                               rtol=1e-12, atol=1e-15)


@given(st.integers(0, 10_000))
def test_pcg_solves_random_spd(seed):
    r = np.random.default_rng(seed)
    n = 30
    a = r.standard_normal((n, n))
    a = a @ a.T + n * np.eye(n)
    b = r.standard_normal(n)
    x, rep = pcg(lambda v: a @ v, _diag(np.diag(a)), b, stop=StopRule(rtol=1e-12))
    assert rep.converged and rep.stop_reason == "tolerance"
    np.testing.assert_allclose(x, np.linalg.solve(a, b), rtol=1e-8, atol=1e-10)
    assert rep.final_relative <= 1e-12
    assert len(rep.history) == rep.iterations + 1


def test_pcg_preconditioned_residual_criterion(problem):
    y, rep = pcg(problem.operator, problem.D, problem.load, stop=StopRule(rtol=1e-6))
    r = problem.load - problem.operator.apply(y)
    dv = problem.D.values
    rel = np.sqrt(r @ (r / dv)) / np.sqrt(problem.load @ (problem.load / dv))
    assert rel <= 1e-6 * (1 + 1e-6)
    assert rep.final_relative == pytest.approx(rel, rel=1e-6, abs=1e-14)


def test_pcg_fixed_steps_and_cap(problem):
    _, rep = pcg(problem.operator, problem.D, problem.load, stop=StopRule(fixed=3))
    assert rep.iterations == 3 and rep.stop_reason == "fixed_count" and rep.converged
    _, rep = pcg(problem.operator, problem.D, problem.load, stop=StopRule(rtol=1e-14, maxiter=2))
    assert rep.iterations == 2 and not rep.converged


def test_pcg_exact_start_and_zero_rhs(problem):
    y, _ = pcg(problem.operator, problem.D, problem.load, stop=StopRule(rtol=1e-14))
    _, rep = pcg(problem.operator, problem.D, np.zeros(problem.n))
    assert rep.iterations == 0 and rep.stop_reason == "zero_residual"
    # the criterion is relative to the initial residual, so a converged start
    # only polishes rounding noise and leaves the solution in place
    y2, rep = pcg(problem.operator, problem.D, problem.load, x0=y, stop=StopRule(rtol=1e-3))
    assert rep.history[0] < 1e-12 * np.sqrt(problem.load @ (problem.load / problem.D.values))
    np.testing.assert_allclose(y2, y, rtol=1e-10, atol=1e-14)
    assert rep.applies == rep.iterations + 1


def test_pcg_detects_indefinite_operator():
    with pytest.raises(IndefiniteOperatorError):
        pcg(lambda v: -v, _diag(np.ones(4)), np.ones(4))


def test_build_schur_validation(problem):
    K, M, D = problem.K, problem.M, problem.D
    with pytest.raises(ValueError):
        build_schur(K, M, D, -1.0)
    with pytest.raises(ValueError):
        build_schur(K, M, D, 1.0, W=D)
    with pytest.raises(ValueError):
        build_schur(K, M, D, np.ones(problem.mesh.n_elements))
    with pytest.raises(ValueError):
        build_schur(K, M, _diag(np.ones(problem.n + 1)), 1.0)


def test_adjoint_and_control(problem, rng):
    op = problem.operator
    y = rng.standard_normal(problem.n)
    u = op.control(y)
    np.testing.assert_allclose(problem.D.values * u, problem.K @ y, rtol=1e-13)
    np.testing.assert_allclose(op.adjoint(y), -problem.rho_scalar * u)


def test_variable_rho_with_constant_values_matches_scalar(small_mesh, rng):
    a = assemble(small_mesh)
    rho = 0.01
    from masslump.fem import assemble_lumped
    W = assemble_lumped(small_mesh, weight=np.full(small_mesh.n_elements, 1 / rho))
    op_var = build_schur(a.K, a.M, a.D, np.full(small_mesh.n_elements, rho), W)
    op_const = build_schur(a.K, a.M, a.D, rho)
    x = rng.standard_normal(small_mesh.n_interior)
    np.testing.assert_allclose(op_var.apply(x), op_const.apply(x), rtol=1e-12)
    assert op_var.variable and not op_const.variable


@pytest.mark.parametrize("kappa, q", [(1.0, 0.0), (4.0, 1 / 3), (9.0, 0.5), (100.0, 9 / 11)])
def test_convergence_factor(kappa, q):
    assert convergence_factor(kappa) == pytest.approx(q)


def test_condition_estimates_agree(problem):
    exact, q = estimate_condition(problem.operator, problem.D, exact=True)
    approx, _ = estimate_condition(problem.operator, problem.D)
    assert approx == pytest.approx(exact, rel=1e-6)
    assert 0 <= q < 1


def test_full_mass_operator_matches_dense(problem):
    K = problem.K.to_dense()
    M = problem.M.to_dense()
    rho = problem.rho_scalar
    S = rho * K @ np.linalg.solve(M, K) + M
    op = FullMassSchurOperator(problem.K, problem.M, rho, 1e-14)
    np.testing.assert_allclose(operator_to_dense(op.apply, problem.n), S, rtol=1e-9, atol=1e-14)


def test_inner_cg_failure():
    a = CsrMatrix.from_dense(np.diag([1.0, 1e8]) + 0.5 * np.ones((2, 2)), symmetric=True)
    with pytest.raises(InnerSolveError):
        cg_inner(a, np.array([1.0, 1.0]), tol=1e-15, maxiter=1)
    mesh = build_structured(1, 2)
    M = assemble(mesh).M
    b = np.arange(1.0, mesh.n_interior + 1)
    np.testing.assert_allclose(M @ cg_inner(M, b, 1e-14), b, rtol=1e-10)


def test_schur_operator_symmetric_positive_definite(problem):
    S = operator_to_dense(problem.operator.apply, problem.n)
    np.testing.assert_allclose(S, S.T, rtol=1e-12, atol=1e-15)
    assert np.linalg.eigvalsh(0.5 * (S + S.T))[0] > 0


@given(st.integers(0, 10_000), st.sampled_from([1, 2, 3]))
def test_schur_lower_bounds(seed, d):
    prob = setup(build_structured(d, {1: 3, 2: 2, 3: 1}[d]), TargetField.zero())
    v = np.random.default_rng(seed).standard_normal(prob.n)
    vsv = v @ prob.operator.apply(v)
    assert v @ (prob.M @ v) <= vsv * (1 + 1e-12)
    assert vsv / (v @ (prob.D.values * v)) >= 1.0 / (d + 2) * (1 - 1e-12)


def test_pcg_energy_error_is_monotone_and_bounded(problem):
    S = operator_to_dense(problem.operator.apply, problem.n)
    y_star = np.linalg.solve(S, problem.load)
    rtol = 1e-6
    _, rep = pcg(problem.operator, problem.D, problem.load, stop=StopRule(rtol=rtol),
                 keep_iterates=True)
    errs = [np.sqrt((y_star - x) @ (S @ (y_star - x))) for x in rep.iterates]
    assert all(b <= a * (1 + 1e-10) + 1e-15 for a, b in zip(errs, errs[1:]))
    _, q = estimate_condition(problem.operator, problem.D, exact=True)
    bound = np.ceil(np.log(2 / rtol) / np.log(1 / q)) + 5 if q > 0 else 5
    assert rep.iterations <= bound


def test_residual_history_positive_and_final_below_tolerance(problem):
    _, rep = pcg(problem.operator, problem.D, problem.load, stop=StopRule(rtol=1e-8))
    assert all(h > 0 for h in rep.history)
    assert rep.converged and rep.history[-1] <= 1e-8 * rep.history[0]
