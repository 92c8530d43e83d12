"""Adaptive refinement driven by the computable target misfit.

The element indicator is ``eta_e = ||y_d - y||_{L2(tau_e)}``. Marking takes
the smallest set of elements carrying a ``theta**2`` share of the squared
total, refinement is bisection with conforming closure, and the new mesh gets
``rho_e = h_e**4`` through the weighted lumped diagonal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .control import ControlProblem, Solution
from .fem import TargetField, element_errors_sq
from .mesh import bisect, build_structured
from .nested import NestedConfig, drive


@dataclass(frozen=True)
class Indicator:
    eta: np.ndarray

    @property
    def total(self) -> float:
        return math.sqrt(float(np.sum(self.eta ** 2)))


def compute_indicators(sol: Solution, problem: Optional[ControlProblem] = None,
                       target: Optional[TargetField] = None) -> Indicator:
    """Per-element ``||y_d - y||_{L2(tau_e)}`` (exact for box targets)."""
    if target is None:
        if problem is None:
            raise ValueError("need the problem or the target")
        target = problem.target
    return Indicator(np.sqrt(element_errors_sq(sol.y, target)))


def mark(ind: Indicator, theta: float) -> np.ndarray:
    """Smallest element set with ``sum eta_e^2 >= theta^2 * sum eta^2``.

    Elements are taken by decreasing ``eta``; equal values go in index order.
    Returns sorted element indices.
    """
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    eta2 = np.asarray(ind.eta, dtype=float) ** 2
    total = float(eta2.sum())
    if total == 0.0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-eta2, kind="stable")
    csum = np.cumsum(eta2[order])
    goal = theta * theta * total
    k = int(np.searchsorted(csum, goal, side="left")) + 1
    k = min(k, int(np.count_nonzero(eta2)))
    return np.sort(order[:k])


def run_adaptive(cfg: NestedConfig, nested: bool = True) -> list:
    """Solve, indicate, mark, bisect, repeat.

    The first mesh is the structured mesh of level ``cfg.min_level``. With
    ``nested`` each level starts from the prolonged previous state and uses
    the per-level tolerance; otherwise every level is solved from zero to
    ``coarse_tol``.
    """
    if cfg.dim not in (2, 3):
        raise ValueError("adaptive runs need dim 2 or 3")
    target = cfg.resolved_target

    def next_mesh(rec):
        ind = compute_indicators(rec.solution, target=target)
        marked = mark(ind, cfg.theta)
        if marked.size == 0:
            marked = np.arange(rec.mesh.n_elements)
        return bisect(rec.mesh, marked)

    return drive(cfg, next_mesh, first_mesh=build_structured(cfg.dim, cfg.min_level), nested=nested)
