import numpy as np
import pytest

from masslump.control import control_cost, residual_check, setup, solve
from masslump.fem import TargetField, assemble
from masslump.mesh import build_structured
from masslump.solver import StopRule


@pytest.fixture
def solved(small_mesh):
    prob = setup(small_mesh, TargetField.unit_box(small_mesh.dim))
    return prob, solve(prob, stop=StopRule(rtol=1e-12))


def test_global_rho_is_h_to_the_fourth(dim):
    mesh = build_structured(dim, 2)
    assert setup(mesh, TargetField.zero()).rho_scalar == pytest.approx(mesh.h ** 4)


def test_rho_on_level_eight():
    # h = 2^-9 on level 8, so rho = 2^-36
    mesh = build_structured(1, 8)
    rho = setup(mesh, TargetField.zero()).rho_scalar
    assert rho == 2.0 ** -36
    assert rho == pytest.approx(1.4552e-11, rel=1e-4)


def test_explicit_and_invalid_rho(small_mesh):
    assert setup(small_mesh, TargetField.zero(), 0.5).rho_scalar == 0.5
    with pytest.raises(ValueError):
        setup(small_mesh, TargetField.zero(), -1.0)
    with pytest.raises(ValueError):
        setup(small_mesh, TargetField.zero(), "local")


def test_element_policy_on_uniform_mesh_matches_global(small_mesh):
    target = TargetField.unit_box(small_mesh.dim)
    a = solve(setup(small_mesh, target, "global"), stop=StopRule(rtol=1e-12))
    b = solve(setup(small_mesh, target, "element"), stop=StopRule(rtol=1e-12))
    np.testing.assert_allclose(b.y.coeffs, a.y.coeffs, rtol=1e-8, atol=1e-14)
    assert b.error == pytest.approx(a.error, rel=1e-9)


def test_assembly_reuse(small_mesh):
    asm = assemble(small_mesh)
    prob = setup(small_mesh, TargetField.zero(), assembly=asm)
    assert prob.assembly is asm
    with pytest.raises(ValueError):
        setup(build_structured(small_mesh.dim, 1), TargetField.zero(), assembly=asm)


def test_recovered_fields(solved):
    prob, sol = solved
    assert sol.report.converged
    res = residual_check(sol, prob)
    assert res["schur"] < 1e-9
    assert res["schur_preconditioned"] < 1e-11
    assert res["adjoint_identity"] < 1e-13
    assert res["mixed"] < 1e-9
    np.testing.assert_allclose(sol.p.coeffs, -prob.rho_scalar * sol.u.coeffs)
    np.testing.assert_allclose(prob.D.values * sol.u.coeffs, prob.K @ sol.y.coeffs, rtol=1e-12)


def test_control_cost_measures(solved):
    prob, sol = solved
    cost = control_cost(sol, prob)
    assert cost == control_cost(sol)
    y = sol.y.coeffs
    assert cost["proxy"] == pytest.approx(y @ (prob.K @ y))
    # M <= lump(M) in the matrix sense
    assert 0 < cost["exact"] <= cost["lumped"]
    assert sol.norms["control_proxy"] == cost["proxy"]


def test_error_below_target_norm(solved):
    prob, sol = solved
    d = prob.mesh.dim
    assert 0 < sol.error < TargetField.unit_box(d).l2_norm(d)
    assert sol.norms["state_l2"] > 0


@pytest.mark.parametrize("kind", ["box", "sine"])
def test_state_and_error_bounded_by_target_norm(dim, kind):
    target = TargetField.unit_box(dim) if kind == "box" else TargetField.sine()
    norm = target.l2_norm(dim)
    for level in (1, 2):
        sol = solve(setup(build_structured(dim, level), target))
        assert sol.norms["state_l2"] <= norm + 10 * 1e-6
        assert sol.error <= norm + 10 * 1e-6
