"""Command line entry point: ``magmove run|gradcheck|check|refine``.

Exit codes: 0 ok, 2 configuration error, 3 run stopped by self-contact,
energy blow-up or solver failure, 4 diagnostic failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .config import ConfigError, RunConfig, load_config, parse_config
from .grid import ContractViolation, GridSpec
from .io import export_series, export_snapshot, write_report
from .stepper import run_evolution

EXIT_OK, EXIT_CONFIG, EXIT_STOPPED, EXIT_DIAGNOSTIC = 0, 2, 3, 4

log = logging.getLogger("magmove")


def _load(path) -> RunConfig:
    return load_config(path) if path else parse_config({})


def cmd_run(args) -> int:
    cfg = _load(args.config)
    outdir = Path(args.output or cfg.output.directory)
    stride = cfg.output.stride

    def on_step(k, res):
        log.info("step %d: status %s, F = %.12g, %d iterations", k, res.status, res.value, res.iterations)

    traj = run_evolution(cfg.data, cfg.params, cfg.step, cfg.grid, callback=on_step)
    export_series(traj, outdir / "series.csv")
    for k, snap in enumerate(traj.snapshots):
        if k % stride == 0 or k == len(traj) - 1:
            export_snapshot({"eta": snap.eta, "M": snap.M}, k, outdir / "snapshots",
                            {"t": snap.t, "grid": cfg.grid.metadata()})
    budget = dg.energy_budget_report(traj)
    status = traj.meta["status"]
    report = {"status": status, "steps": len(traj) - 1, "failed_step": traj.meta.get("failed_step"),
              "budget_ok": budget.ok, "budget": budget.as_dict()}
    if cfg.data.f.is_zero() and cfg.data.Hext.is_zero():
        E = budget.energy
        report["monotone"] = bool(np.all(np.diff(E) <= 1e-10 * abs(E[0])))
    else:
        env = dg.envelope_for(traj)
        report["envelope"] = env
        report["envelope_ok"] = bool(np.all(budget.lhs <= env))
    write_report(report, outdir / "report.json")
    print(f"status: {status}; steps: {len(traj) - 1}; output: {outdir}")
    if status != "accepted":
        return EXIT_STOPPED
    if not budget.ok or not report.get("monotone", True) or not report.get("envelope_ok", True):
        return EXIT_DIAGNOSTIC
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load(args.config)
    res = dg.gradient_check(cfg.grid, cfg.params, seed=args.seed, tol=args.tol)
    for name, err in res.errors.items():
        print(f"{name:12s} best relative error {err:.3e}")
    print("PASS" if res.ok else "FAIL")
    return EXIT_OK if res.ok else EXIT_DIAGNOSTIC


def run_checks(grid: GridSpec | None = None, params=None) -> dict:
    """Quick invariant suite on small problems; returns name -> (passed, detail)."""
    from . import strayfield as sf
    from .energy import MaterialParams, growth_audit
    from .kinematics import (build_kinematics, ciarlet_necas_residual, pull_back_magnetization,
                             push_forward_magnetization, background_grid)
    from .stepper import SpaceTimeField, clement_Hext, mollify_force

    grid = grid or GridSpec.unit(3, 7)
    params = params or MaterialParams()
    out = {}
    rng = np.random.default_rng(0)
    bg = GridSpec((24,) * grid.d, (2.3,) * grid.d, (-1.15,) * grid.d)
    M1 = np.zeros((bg.num_nodes, grid.d))
    M2 = np.zeros_like(M1)
    core = np.all(np.abs(bg.coords) < 0.5, axis=1)
    M1[core] = rng.standard_normal((core.sum(), grid.d))
    M2[core] = rng.standard_normal((core.sum(), grid.d))
    s1, s2 = sf.solve_stray_field(M1, bg), sf.solve_stray_field(M2, bg)
    lhs, rhs = sf.stray_energy_identity(M1, s1)
    out["stray_energy_identity"] = (abs(lhs - rhs) <= 1e-8 * abs(rhs), abs(lhs - rhs) / abs(rhs))
    s12 = sf.solve_stray_field(M1 + 2 * M2, bg)
    lin = np.abs(s12.H - s1.H - 2 * s2.H).max() / np.abs(s12.H).max()
    out["stray_linearity"] = (lin <= 1e-10, lin)
    sa = abs(np.sum(M1 * s2.H) - np.sum(M2 * s1.H)) / abs(np.sum(M1 * s1.H))
    out["stray_self_adjoint"] = (sa <= 1e-10, sa)
    g = dg.gradient_check(grid, params, seed=0)
    out["gradient"] = (g.ok, g.worst)
    X = grid.coords
    A = np.eye(grid.d) * 1.5
    A[0, -1] = 0.3
    eta = X @ A.T
    M = np.tile(np.eye(grid.d)[-1], (grid.num_nodes, 1))
    ebg = background_grid(eta, float(grid.h.min()) / 2)
    st = build_kinematics(eta, grid)
    rt = pull_back_magnetization(push_forward_magnetization(M, eta, grid, ebg, st), eta, grid, st)
    err = float(np.abs(rt - M).max())
    out["dictionary_round_trip"] = (err <= 1e-12, err)
    cn = ciarlet_necas_residual(eta, grid)
    out["injectivity_affine"] = (cn.ok, cn.residual)
    const = SpaceTimeField(lambda t, x: np.ones_like(x))
    mf = float(np.abs(mollify_force(const, 0.5, 0.1, 1.0, X[:2]) - 1).max())
    out["mollifier_unit_mass"] = (mf <= 1e-10, mf)
    lin_t = SpaceTimeField(lambda t, x: t * np.ones_like(x))
    ch = float(np.abs(clement_Hext(lin_t, 1, 0.2, X[:2]) - 0.1).max())
    out["clement_mean"] = (ch <= 1e-14, ch)
    gr = growth_audit(params, d=grid.d)
    out["growth_audit"] = (gr.passed, gr.witness)
    return out


def cmd_check(args) -> int:
    cfg = _load(args.config) if args.config else None
    res = run_checks(cfg.grid if cfg else None, cfg.params if cfg else None)
    failed = [k for k, (ok, _) in res.items() if not ok]
    for name, (ok, detail) in res.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if args.report:
        write_report({k: {"passed": ok, "detail": det} for k, (ok, det) in res.items()}, args.report)
    return EXIT_DIAGNOSTIC if failed else EXIT_OK


def cmd_refine(args) -> int:
    if args.levels < 3:
        print("configuration error: a refinement study needs at least three levels", file=sys.stderr)
        return EXIT_CONFIG
    cfg = _load(args.config)

    def runner(dt):
        return run_evolution(cfg.data, cfg.params, replace(cfg.step, dt=dt), cfg.grid)

    table = dg.refinement_study(runner, cfg.step.dt, args.levels)
    stopped = [t.meta["status"] for t in table.trajectories if t.meta["status"] != "accepted"]
    print(json.dumps(table.as_dict(), indent=2))
    if args.report:
        write_report(table.as_dict(), args.report)
    if stopped:
        return EXIT_STOPPED
    return EXIT_OK if table.monotone else EXIT_DIAGNOSTIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="magmove", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the time stepping and export series, snapshots and a report")
    r.add_argument("--config")
    r.add_argument("--output", help="override output.directory")
    r.set_defaults(func=cmd_run)
    g = sub.add_parser("gradcheck", help="finite-difference audit of the analytic gradients")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-6)
    g.set_defaults(func=cmd_gradcheck)
    c = sub.add_parser("check", help="quick invariant suite")
    c.add_argument("--config")
    c.add_argument("--report")
    c.set_defaults(func=cmd_check)
    f = sub.add_parser("refine", help="time-step refinement study")
    f.add_argument("--config")
    f.add_argument("--levels", type=int, default=3)
    f.add_argument("--report")
    f.set_defaults(func=cmd_refine)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except dg.DiagnosticFailure as exc:
        print(f"diagnostic failure: {exc}", file=sys.stderr)
        return EXIT_DIAGNOSTIC
    except ContractViolation as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
