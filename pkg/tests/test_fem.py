import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from masslump.fem import (AlignmentError, FeFunction, TargetField, assemble, assemble_load,
                          assemble_lumped, element_errors_sq, h1_seminorm, l2_error_vs_target,
                          l2_inner, l2_norm, lumped_inner, simplex_rule)
from masslump.mesh import build_structured


def dense_reference(mesh):
    """Independent dense P1 assembly over all vertices (boundary included)."""
    d = mesh.dim
    nv = mesh.n_vertices
    K = np.zeros((nv, nv))
    M = np.zeros((nv, nv))
    for el in mesh.elements:
        x = mesh.vertices[el]
        T = np.hstack([np.ones((d + 1, 1)), x])  # rows (1, x_i)
        vol = abs(np.linalg.det(T)) / math.factorial(d)
        G = np.linalg.inv(T)[1:, :].T  # gradients of the barycentric coordinates
        K[np.ix_(el, el)] += vol * G @ G.T
        M[np.ix_(el, el)] += vol / ((d + 1) * (d + 2)) * (np.ones((d + 1, d + 1)) + np.eye(d + 1))
    return K, M


def _monomial_integral(alpha):
    """Integral of prod lambda_i^alpha_i over the reference simplex, divided by its volume."""
    d = len(alpha) - 1
    num = math.prod(math.factorial(a) for a in alpha) * math.factorial(d)
    return num / math.factorial(sum(alpha) + d)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_simplex_rule_exactness(dim, n):
    bary, w = simplex_rule(dim, n)
    assert w.sum() == pytest.approx(1.0)
    assert np.all(w > 0)
    np.testing.assert_allclose(bary.sum(axis=1), 1.0)
    for alpha in itertools.product(range(2 * n), repeat=dim + 1):
        if sum(alpha) > 2 * n - 1:
            continue
        approx = np.sum(w * np.prod(bary ** np.array(alpha), axis=1))
        assert approx == pytest.approx(_monomial_integral(alpha), rel=1e-12, abs=1e-15)


def test_assembly_matches_dense_reference(small_mesh):
    K, M = dense_reference(small_mesh)
    iv = small_mesh.interior_vertices
    a = assemble(small_mesh)
    np.testing.assert_allclose(a.K.to_dense(), K[np.ix_(iv, iv)], atol=1e-13)
    np.testing.assert_allclose(a.M.to_dense(), M[np.ix_(iv, iv)], atol=1e-15)
    # lumped mass: row sums of the full matrix, boundary columns included
    np.testing.assert_allclose(a.D.extended, M.sum(axis=1), rtol=1e-13)
    np.testing.assert_allclose(a.D.values, M.sum(axis=1)[iv], rtol=1e-13)
    assert a.K.symmetry_defect() == 0.0 and a.M.symmetry_defect() == 0.0


def test_assembly_on_graded_mesh(graded_mesh):
    K, M = dense_reference(graded_mesh)
    iv = graded_mesh.interior_vertices
    a = assemble(graded_mesh)
    np.testing.assert_allclose(a.K.to_dense(), K[np.ix_(iv, iv)], atol=1e-12)
    np.testing.assert_allclose(a.M.to_dense(), M[np.ix_(iv, iv)], atol=1e-15)


def test_1d_stencils():
    mesh = build_structured(1, 3)
    h = mesh.h
    a = assemble(mesh)
    k = a.K.to_dense()
    m = a.M.to_dense()
    assert k[3, 2:5] == pytest.approx(np.array([-1, 2, -1]) / h)
    assert m[3, 2:5] == pytest.approx(np.array([1, 4, 1]) * h / 6)
    np.testing.assert_allclose(a.D.values, h)


def test_stiffness_kernel_contains_constants(small_mesh):
    K, _ = dense_reference(small_mesh)
    np.testing.assert_allclose(K @ np.ones(small_mesh.n_vertices), 0.0, atol=1e-12)


def test_weighted_lumping(small_mesh):
    plain = assemble_lumped(small_mesh)
    ones = assemble_lumped(small_mesh, weight=np.ones(small_mesh.n_elements))
    np.testing.assert_allclose(ones.values, plain.values)
    twice = assemble_lumped(small_mesh, weight=np.full(small_mesh.n_elements, 2.0))
    np.testing.assert_allclose(twice.values, 2 * plain.values)
    with pytest.raises(ValueError):
        assemble_lumped(small_mesh, weight=-np.ones(small_mesh.n_elements))
    with pytest.raises(ValueError):
        assemble_lumped(small_mesh, weight=np.ones(3))


def test_box_load_matches_quadrature(small_mesh):
    d = small_mesh.dim
    box = TargetField.unit_box(d)
    # same indicator as an opaque callable: quadrature points are interior to
    # the aligned elements, so the quadrature result is exact as well
    custom = TargetField.custom(box)
    np.testing.assert_allclose(assemble_load(small_mesh, box),
                               assemble_load(small_mesh, custom, order=3), atol=1e-15)


def test_load_of_constant_is_lumped_mass(small_mesh):
    one = TargetField.custom(lambda x: np.ones(x.shape[0]))
    np.testing.assert_allclose(assemble_load(small_mesh, one),
                               assemble_lumped(small_mesh).values, rtol=1e-13)


def test_target_norms(dim):
    box = TargetField.unit_box(dim)
    assert box.l2_norm(dim) == pytest.approx(0.5 ** (dim / 2))
    assert TargetField.sine().l2_norm(dim) == pytest.approx(0.5 ** (dim / 2))
    mesh = build_structured(dim, 1)
    zero = FeFunction(mesh, np.zeros(mesh.n_interior))
    # ||y_d - 0|| by the element formula and by quadrature
    assert l2_error_vs_target(zero, box) == pytest.approx(box.l2_norm(dim), rel=1e-13)
    assert l2_error_vs_target(zero, TargetField.sine(), order=8) == pytest.approx(
        0.5 ** (dim / 2), rel=1e-6)


def test_misaligned_box_raises():
    mesh = build_structured(2, 1)
    with pytest.raises(AlignmentError, match="element"):
        TargetField.box((0.3, 0.3), (0.7, 0.7)).element_values(mesh)


def test_sine_target_has_no_element_values():
    with pytest.raises(ValueError):
        TargetField.sine().element_values(build_structured(1, 1))


def test_element_errors_exact_for_box(graded_mesh, rng):
    d = graded_mesh.dim
    y = FeFunction(graded_mesh, rng.standard_normal(graded_mesh.n_interior))
    box = TargetField.unit_box(d)
    exact = element_errors_sq(y, box)
    quad = element_errors_sq(y, TargetField.custom(box), order=3)
    np.testing.assert_allclose(exact, quad, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("dim_", [1, 2])
def test_interpolation_error_is_second_order(dim_):
    errs = []
    for level in (2, 3, 4):
        mesh = build_structured(dim_, level)
        y = FeFunction.interpolate(mesh, TargetField.sine())
        errs.append(l2_error_vs_target(y, TargetField.sine()))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    np.testing.assert_allclose(ratios, 4.0, rtol=0.05)


@given(st.integers(0, 10_000))
def test_inner_products(seed):
    mesh = build_structured(2, 1)
    r = np.random.default_rng(seed)
    p = FeFunction(mesh, r.standard_normal(mesh.n_interior))
    q = FeFunction(mesh, r.standard_normal(mesh.n_interior))
    assert l2_inner(p, q) == pytest.approx(l2_inner(q, p), rel=1e-12)
    assert l2_norm(p) ** 2 == pytest.approx(l2_inner(p, p), rel=1e-12)
    # the lumped product dominates the exact one on the diagonal
    assert lumped_inner(p, p) >= l2_inner(p, p)
    assert lumped_inner(p, p) / 4 <= l2_inner(p, p) * (1 + 1e-12)
    assert h1_seminorm(p) > 0


def test_fe_function_evaluation(small_mesh, rng):
    d = small_mesh.dim
    c = rng.standard_normal(d)
    x = small_mesh.vertices[small_mesh.interior_vertices]
    f = FeFunction(small_mesh, x @ c)
    interior_pts = x[:3]
    np.testing.assert_allclose(f(interior_pts), interior_pts @ c, atol=1e-12)
    with pytest.raises(ValueError):
        FeFunction(small_mesh, np.zeros(small_mesh.n_interior + 1))
    with pytest.raises(ValueError):
        f(np.full((1, d), 2.0))


@given(st.integers(0, 10_000), st.sampled_from([1, 2, 3]))
def test_element_mass_and_lumping_formulas(seed, d):
    r = np.random.default_rng(seed)
    x = r.uniform(-1, 1, (d + 1, d))
    vol = abs(np.linalg.det(x[1:] - x[0])) / math.factorial(d)
    if vol < 1e-3:
        return
    lam, w = simplex_rule(d, 2)
    quad = vol * (lam.T * w) @ lam
    formula = vol / ((d + 1) * (d + 2)) * (np.ones((d + 1, d + 1)) + np.eye(d + 1))
    np.testing.assert_allclose(quad, formula, rtol=1e-12)
    np.testing.assert_allclose(quad.sum(axis=1), vol / (d + 1), rtol=1e-12)


def test_lumped_entries_sum_to_domain_volume(graded_mesh):
    assert assemble_lumped(graded_mesh).extended.sum() == pytest.approx(1.0, abs=1e-13)


def test_target_evaluation():
    box = TargetField.unit_box(2)
    vals = box(np.random.default_rng(0).uniform(0, 1, (200, 2)))
    assert set(np.unique(vals)) <= {0.0, 1.0}
    edge = np.array([[0.0, 0.3], [1.0, 0.5], [0.2, 1.0]])
    np.testing.assert_allclose(TargetField.sine()(edge), 0.0, atol=1e-15)
