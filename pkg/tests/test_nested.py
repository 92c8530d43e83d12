import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from masslump.fem import FeFunction, TargetField
from masslump.mesh import bisect, build_structured, refine_uniform
from masslump.nested import (NestedConfig, NestingError, accepted_level, control_increments,
                             fit_rate, k_star, level_tolerance, prolong, run_cascadic, run_nested,
                             run_nonnested, target_ratio, total_spmv)


@pytest.fixture(scope="module")
def runs_2d():
    cfg = NestedConfig(dim=2, max_level=4)
    return cfg, run_nested(cfg), run_nonnested(cfg)


@pytest.mark.parametrize("refine", ["uniform", "bisect"])
def test_prolongation_preserves_the_function(dim, refine, rng):
    coarse = build_structured(dim, 1)
    fine = refine_uniform(coarse) if refine == "uniform" else bisect(coarse, [0, 1])
    f = FeFunction(coarse, rng.standard_normal(coarse.n_interior))
    g = prolong(f, fine)
    # sample inside every fine element: both functions agree pointwise
    pts = fine.vertices[fine.elements].mean(axis=1)
    np.testing.assert_allclose(g(pts), f(pts), atol=1e-12)


def test_prolongation_rejects_unrelated_meshes():
    f = FeFunction(build_structured(2, 1), np.zeros(9))
    with pytest.raises(NestingError):
        prolong(f, build_structured(2, 2))


def test_level_tolerance_value():
    cfg = NestedConfig(dim=3, alpha=1.0, beta=0.5)
    # (729 / 125) ** (-1/6) = (9/5) ** (-1/2)
    assert level_tolerance(cfg, 729, 125) == pytest.approx(math.sqrt(5) / 3, rel=1e-15)
    adaptive = NestedConfig(dim=2, alpha=0.5, beta=0.75)
    assert level_tolerance(adaptive, 4913, 729) == pytest.approx(0.5 * 0.4889537559639687)
    with pytest.raises(ValueError):
        level_tolerance(cfg, 0, 10)


@pytest.mark.parametrize("q, target, k", [(0.5, 0.1, 4), (0.5, 0.25, 2), (0.9, 0.5, 7)])
def test_k_star(q, target, k):
    assert k_star(q, target) == k
    assert q ** k <= target * (1 + 1e-12) and q ** (k - 1) > target


@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(0.5, 3.0), st.floats(0.01, 10.0))
def test_target_ratio_below_one(l2, hs, s, c):
    assert 0 < target_ratio(l2, hs, s, c) < 1


@given(st.floats(0.1, 3.0), st.floats(1e-3, 10.0))
def test_fit_rate_recovers_power_laws(rate, const):
    hs = 2.0 ** -np.arange(2, 7)
    assert fit_rate(const * hs ** rate, hs) == pytest.approx(rate, rel=1e-9)


def test_fit_rate_skips_level_one():
    hs = 2.0 ** -np.arange(2, 6)
    errors = hs ** 0.5
    errors[0] *= 10.0
    assert fit_rate(errors, hs, levels=[1, 2, 3, 4]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        fit_rate(errors[:3], hs[:3], levels=[1, 2, 3])
    with pytest.raises(ValueError):
        fit_rate([1.0, 2.0, 3.0], [0.5, 0.5, 0.5])


@pytest.mark.parametrize("kwargs", [
    dict(dim=4), dict(min_level=3, max_level=2), dict(refine="red"), dict(alpha=0.0),
    dict(beta=0.0), dict(epsilon=0.0), dict(epsilon=1.5), dict(c_u=-1.0), dict(theta=0.0),
    dict(coarse_tol=1.0), dict(cascadic_levels=-1)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        NestedConfig(**kwargs)


def test_config_defaults():
    assert NestedConfig().resolved_policy == "global"
    assert NestedConfig(dim=2, refine="adaptive").resolved_policy == "element"
    assert NestedConfig(dim=2).resolved_target == TargetField.unit_box(2)


def test_records(runs_2d):
    cfg, nested, plain = runs_2d
    for recs in (nested, plain):
        assert [r.level for r in recs] == [1, 2, 3, 4]
        assert recs[-1].stop == "max_level"
        assert all(r.converged for r in recs)
        assert [r.dofs for r in recs] == [(2 ** (k + 1) + 1) ** 2 for k in range(1, 5)]
        assert all(r.rho == pytest.approx(r.h ** 4) for r in recs)
        assert total_spmv(recs) == sum(r.spmv for r in recs) > 0
    # same coarse solve, cheaper fine levels
    assert nested[0].error == plain[0].error
    assert sum(r.iterations for r in nested[1:]) < sum(r.iterations for r in plain[1:])
    assert nested[1].tolerance == pytest.approx(level_tolerance(cfg, 81, 25))
    row = nested[0].row()
    assert set(row) == {"level", "dofs", "error", "its", "seconds"}


def test_epsilon_one_stops_after_first_level():
    recs = run_nested(NestedConfig(dim=1, max_level=5, epsilon=1.0))
    assert len(recs) == 1 and recs[0].stop == "epsilon"


def test_budget_rule_and_cascadic_continuation(runs_2d):
    _, nested, _ = runs_2d
    cu = 0.5 * (nested[1].control_proxy + nested[2].control_proxy)
    cfg = NestedConfig(dim=2, max_level=4, c_u=cu)
    recs = run_nested(cfg)
    assert [r.level for r in recs] == [1, 2, 3] and recs[-1].stop == "c_u"
    base = accepted_level(recs)
    assert base.level == 2
    assert run_cascadic(cfg, recs, 0) is recs
    extra = run_cascadic(cfg, recs, 2)
    assert [r.level for r in extra] == [3, 4]
    assert all(r.rho == base.rho for r in extra)
    assert all(r.stop == "cascadic" for r in extra)
    inc = control_increments(base, extra)
    assert len(inc) == 2 and all(v >= 0 for v in inc)


def test_accepted_level_without_budget(runs_2d):
    _, nested, _ = runs_2d
    assert accepted_level(nested) is nested[-1]
    with pytest.raises(ValueError):
        accepted_level([])


def test_budget_exceeded_on_first_level():
    recs = run_nested(NestedConfig(dim=1, max_level=3, c_u=1e-12))
    assert len(recs) == 1
    with pytest.raises(ValueError):
        accepted_level(recs)


def test_solver_cap_marks_record():
    recs = run_nonnested(NestedConfig(dim=2, max_level=3, maxiter=2))
    assert recs[-1].stop == "solver" and not recs[-1].converged


@pytest.fixture(scope="module")
def nested_3d():
    cfg = NestedConfig(dim=3, max_level=4)
    return cfg, run_nested(cfg)


def test_nested_error_dominance_and_iteration_cap(nested_3d):
    _, recs = nested_3d
    assert all(b.error <= a.error * 1.01 for a, b in zip(recs, recs[1:]))
    assert all(r.iterations <= 12 for r in recs[2:])


def test_tolerance_lock_is_bit_exact(nested_3d):
    cfg, recs = nested_3d
    assert recs[0].tolerance == cfg.coarse_tol
    for prev, rec in zip(recs, recs[1:]):
        assert rec.tolerance == level_tolerance(cfg, rec.dofs, prev.dofs)


@pytest.mark.parametrize("d, top", [(1, 9), (2, 6), (3, 4)])
def test_total_work_is_linear(d, top):
    # operator applications weighted by level size, relative to the finest size
    recs = run_nested(NestedConfig(dim=d, max_level=top))
    work = sum(r.spmv * r.n_interior for r in recs)
    assert work <= 25 * recs[-1].n_interior


def test_uniform_runs_are_bit_stable():
    cfg = NestedConfig(dim=2, max_level=3)
    a = [(r.error, r.iterations, r.control_proxy) for r in run_nested(cfg)]
    b = [(r.error, r.iterations, r.control_proxy) for r in run_nested(cfg)]
    assert a == b
