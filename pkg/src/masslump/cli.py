"""Experiment runner.

Examples
--------
::

    masslump --mode nonnested --dim 3 --levels 1..5
    masslump --mode nested --dim 3 --levels 5 --alpha 1 --beta 0.5
    masslump --mode adaptive --dim 2 --levels 20
    masslump --mode verify --out verify_out
    masslump --config run.cfg --workers 2

A config file holds ``key=value`` lines (``#`` starts a comment); keys are the
long flag names with dashes or underscores. Flags override the file.
"""
from __future__ import annotations

import argparse
import dataclasses
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .adapt import compute_indicators
from .fem import TargetField
from .nested import (NestedConfig, accepted_level, fit_rate, run_cascadic, run_nested,
                     run_nonnested, total_spmv)
from .sparse import set_workers

MODES = ("nonnested", "nested", "adaptive", "cascadic", "verify")


@dataclass
class RunConfig:
    """Campaign settings.

    ``alpha`` and ``beta`` default to 1 and 0.5, or to 0.5 and 0.75 in
    adaptive mode, when left unset.
    """

    dim: int = 3
    mode: str = "nonnested"
    min_level: int = 1
    max_level: int = 5
    target: str = "box"
    alpha: Optional[float] = None
    beta: Optional[float] = None
    pcg_tol: float = 1e-6
    epsilon: Optional[float] = None
    cu: Optional[float] = None
    cascadic: int = 2
    theta: float = 0.5
    workers: int = 1
    out: str = "masslump_out"
    seed: int = 0
    dump_vtk: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.target not in ("box", "sine"):
            raise ValueError("target must be 'box' or 'sine'")

    def resolved_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 0.5 if self.mode == "adaptive" else 1.0

    def resolved_beta(self) -> float:
        if self.beta is not None:
            return self.beta
        return 0.75 if self.mode == "adaptive" else 0.5

    def target_field(self) -> TargetField:
        return TargetField.unit_box(self.dim) if self.target == "box" else TargetField.sine()

    def nested_config(self) -> NestedConfig:
        return NestedConfig(
            dim=self.dim, max_level=self.max_level, min_level=self.min_level,
            refine="adaptive" if self.mode == "adaptive" else "uniform",
            coarse_tol=self.pcg_tol, alpha=self.resolved_alpha(), beta=self.resolved_beta(),
            epsilon=self.epsilon, c_u=self.cu,
            cascadic_levels=self.cascadic if self.mode == "cascadic" else 0,
            theta=self.theta, target=self.target_field())


def parse_levels(text: str) -> tuple[int, int]:
    """``"5"`` -> (1, 5); ``"2..6"`` or ``"2-6"`` -> (2, 6)."""
    text = text.strip()
    for sep in ("..", "-", ":"):
        if sep in text:
            lo, hi = text.split(sep, 1)
            return int(lo), int(hi)
    return 1, int(text)


def _coerce(field: dataclasses.Field, raw: str):
    if field.name == "levels":
        return raw
    kind = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", "")
    if "bool" in kind:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if "int" in kind:
        return int(raw)
    if "float" in kind:
        return None if raw.strip().lower() in ("", "none") else float(raw)
    return raw.strip()


def read_config_file(path) -> dict:
    """``key=value`` lines; ``#`` comments; keys use dashes or underscores."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "levels":
            out["min_level"], out["max_level"] = parse_levels(value)
            continue
        if key not in fields:
            raise ValueError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _coerce(fields[key], value)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="masslump",
                                description="Mass-lumped optimal control experiments.")
    p.add_argument("--config", help="key=value file, overridden by flags")
    p.add_argument("--dim", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--levels", help="max level, or a range like 2..6")
    p.add_argument("--target", choices=("box", "sine"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--pcg-tol", type=float, dest="pcg_tol")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--cu", type=float, help="control cost budget")
    p.add_argument("--cascadic", type=int, help="extra frozen-rho levels (cascadic mode)")
    p.add_argument("--theta", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--dump-vtk", action="store_true", default=None, dest="dump_vtk")
    return p


def config_from_args(argv: Optional[Sequence[str]] = None) -> RunConfig:
    args = build_parser().parse_args(argv)
    values = read_config_file(args.config) if args.config else {}
    for key, val in vars(args).items():
        if key in ("config", "levels") or val is None:
            continue
        values[key] = val
    if args.levels is not None:
        values["min_level"], values["max_level"] = parse_levels(args.levels)
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# reporting

def format_table(records, title: str = "") -> str:
    lines = [title] if title else []
    lines.append(f"{'l':>3} | {'#Dofs':>11} | {'error':>9} | Its (Time)")
    lines.append("-" * 44)
    for r in records:
        lines.append(f"{r.level:>3} | {r.dofs:>11,} | {r.error:9.2e} | "
                     f"{r.iterations} ({r.wall_time:.1e}){' ' + r.stop if r.stop else ''}")
    return "\n".join(lines)


def rates(records, dim: int) -> dict:
    """Slopes of the error against ``h`` and against ``DOFs^(-1/d)``."""
    out = {}
    if len(records) < 3:
        return out
    errors = [r.error for r in records]
    levels = [r.level for r in records]
    eff = [r.dofs ** (-1.0 / dim) for r in records]
    hs = [r.h for r in records]
    if len([lv for lv in levels if lv != 1]) >= 3:
        if np.ptp(np.log(hs)) > 0:
            out["rate_h"] = fit_rate(errors, hs, levels)
        out["rate_dofs"] = fit_rate(errors, eff, levels)
    else:
        out["rate_dofs"] = fit_rate(errors, eff)
    return out


def _dump_vtk(out: Path, records, target):
    for r in records:
        sol = r.solution
        cells = {"eta": compute_indicators(sol, target=target).eta}
        io.write_vtk(out / f"level_{r.level:02d}.vtk", r.mesh,
                     {"y": sol.y.nodal(), "u": sol.u.nodal()}, cells)


def _record_json(r) -> dict:
    return {"level": r.level, "dofs": r.dofs, "n_interior": r.n_interior, "h": r.h,
            "rho": r.rho, "iterations": r.iterations, "tolerance": r.tolerance,
            "error": r.error, "control_proxy": r.control_proxy, "seconds": r.wall_time,
            "stop": r.stop, "converged": r.converged, "spmv": r.spmv,
            "residual_history": r.history}


def run(cfg: RunConfig) -> int:
    """Execute a campaign and write its artifacts. Returns the exit status."""
    set_workers(cfg.workers)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.mode == "verify":
        from .oracle import run_suite

        reports = run_suite(seed=cfg.seed)
        width = max(len(r.name) for r in reports)
        for r in reports:
            print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.value:.3e}")
        io.write_json(out / "verify.json", [r.to_dict() for r in reports])
        return 0 if all(r.passed for r in reports) else 1

    ncfg = cfg.nested_config()
    t0 = time.perf_counter()
    if cfg.mode == "nonnested":
        records = run_nonnested(ncfg)
        title = "non-nested PCG"
    else:
        records = run_nested(ncfg)
        title = {"adaptive": "adaptive nested PCG",
                 "cascadic": "nested PCG with cascadic continuation"}.get(cfg.mode, "nested PCG")
    extra = []
    if cfg.mode == "cascadic":
        if records and "c_u" in records[-1].stop.split(","):
            extra = run_cascadic(ncfg, records)
        else:
            print("cascadic: cost budget not reached, no continuation", file=sys.stderr)
    all_records = records + extra
    print(format_table(all_records, title))
    io.write_results_csv(out / "results.csv", [r.row() for r in all_records])
    summary = {"config": dataclasses.asdict(cfg), "rates": rates(records, cfg.dim),
               "total_spmv": total_spmv(all_records),
               "total_seconds": time.perf_counter() - t0,
               "levels": [_record_json(r) for r in all_records]}
    if cfg.mode == "cascadic" and extra:
        summary["accepted_level"] = accepted_level(records).level
    io.write_json(out / "rates.json", summary)
    if cfg.dump_vtk:
        _dump_vtk(out, all_records, ncfg.resolved_target)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cfg = config_from_args(argv)
    except (ValueError, OSError) as exc:
        print(f"masslump: configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        return run(cfg)
    except Exception as exc:  # noqa: BLE001 - reported as a structured failure
        print(f"masslump: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
