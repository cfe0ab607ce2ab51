"""Command-line front end: ``subdiffusion {solve,study,diagnose,kernel-gap}``.

Exit status: 0 success, 2 configuration error, 3 solver failure, 4 failed certificate.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import diagnostics as dg
from .config import ConfigError, RunConfig, StudyConfig, as_study, parse_config
from .elliptic import InvalidCoefficientsError, SolverError
from .fracderiv import DomainError, TimeGrid
from .kernelapprox import (
    MarginError,
    TestPair,
    build_kernel_approx,
    default_bumps,
    kernel_gap_sup,
    spatial_bump,
)
from .presets import PRESETS, BuiltProblem, build_problem
from .timestepper import SchemeHistory, StepEvent, run

logger = logging.getLogger("subdiffusion")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CERTIFICATE = 0, 2, 3, 4
OUT_ENV = "SUBDIFFUSION_OUT"
DEFAULT_OUT = "subdiffusion-out"
KERNEL_GAP_RTOL = 1e-12
FAULTS = ("flip-u1",)


# -- output helpers ----------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n")


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def resolve_out(flag: str | None, cfg: RunConfig) -> Path:
    out = Path(flag or cfg.out_dir or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _progress(M: int):
    stride = max(M // 10, 1)

    def hook(ev: StepEvent) -> None:
        if ev.step % stride == 0 or ev.step == M:
            logger.debug("step %d/%d residual %.2e (%.2fs)", ev.step, M, ev.residual, ev.wall_time)

    return hook


def snapshot_indices(M: int, count: int) -> list[int]:
    return sorted({int(round(v)) for v in np.linspace(0, M, min(count, M + 1))})


def _problem_summary(built: BuiltProblem) -> dict:
    p = built.problem
    return {
        "name": p.name,
        "alpha": p.alpha,
        "T": p.grid.T,
        "M": p.grid.M,
        "h": p.grid.h,
        "N": list(p.mesh.shape),
        "spacing": list(p.mesh.spacing),
        "n_dof": p.mesh.n_dof,
        "ellipticity": p.diffusion.ellipticity_lambda,
    }


def final_errors(history: SchemeHistory, exact) -> dict:
    nodes = history.mesh.nodes
    ref = np.asarray(exact(nodes, history.grid.T), dtype=float)
    diff = history.fields[-1] - ref
    scale = float(np.max(np.abs(ref)))
    mass = history.disc.mass
    all_err = max(
        float(np.max(np.abs(history.fields[m] - exact(nodes, t)))) for m, t in enumerate(history.grid.times)
    )
    return {
        "max_final": float(np.max(np.abs(diff))),
        "rel_max_final": float(np.max(np.abs(diff)) / scale) if scale > 0 else float(np.max(np.abs(diff))),
        "l2_final": math.sqrt(max(mass.quadratic(diff), 0.0)),
        "max_all": all_err,
    }


# -- solve -------------------------------------------------------------------------


def cmd_solve(cfg: RunConfig, out: Path) -> int:
    start = time.perf_counter()
    built = build_problem(cfg)
    M = built.problem.grid.M
    history = run(built.problem, progress=_progress(M))
    wall = time.perf_counter() - start

    idx = snapshot_indices(M, cfg.snapshots)
    nodes = history.mesh.nodes
    coords = ["x", "y"][: history.mesh.dim]
    rows = (
        [*nodes[i], history.grid.times[m], history.fields[m, i]] for m in idx for i in range(len(nodes))
    )
    write_csv(out / "solution.csv", [*coords, "t", "u"], rows)

    summary = {
        "command": "solve",
        "config": cfg.to_dict(),
        "problem": _problem_summary(built),
        "snapshot_times": [float(history.grid.times[m]) for m in idx],
        "residuals": {
            "max": float(np.max(history.residuals)),
            "mean": float(np.mean(history.residuals)),
            "steps": M,
        },
        "final_time_error": final_errors(history, built.exact) if built.exact is not None else None,
        "wall_time_s": wall,
    }
    write_json(out / "summary.json", summary)
    err = summary["final_time_error"]
    msg = f"solved {built.problem.name}: M={M}, dofs={history.mesh.n_dof}, max residual {summary['residuals']['max']:.2e}"
    if err is not None:
        msg += f", relative max error at T {err['rel_max_final']:.3e}"
    print(msg)
    return EXIT_OK


# -- study -------------------------------------------------------------------------


def _full_grid_interpolator(history: SchemeHistory, values: np.ndarray) -> RegularGridInterpolator:
    mesh = history.mesh
    axes = [mesh.axis(i, with_boundary=True) for i in range(mesh.dim)]
    grid = mesh.full_grid(values)
    if mesh.dim == 2:
        grid = grid.T  # full_grid is (ny, nx); interpolator wants axis order x, y
    return RegularGridInterpolator(axes, grid)


def cauchy_differences(coarse: SchemeHistory, fine: SchemeHistory) -> dict:
    """Differences of two rungs at the coarse nodes (final time, and shared times for ``max_all``)."""
    nodes = coarse.mesh.nodes
    mass = coarse.disc.mass

    def at(m_c: int, m_f: int) -> np.ndarray:
        return _full_grid_interpolator(fine, fine.fields[m_f])(nodes) - coarse.fields[m_c]

    diff = at(coarse.M, fine.M)
    ref = float(np.max(np.abs(fine.fields[-1])))
    shared = [(m, m * fine.M // coarse.M) for m in range(coarse.M + 1)] if fine.M % coarse.M == 0 else [(coarse.M, fine.M)]
    return {
        "max_final": float(np.max(np.abs(diff))),
        "rel_max_final": float(np.max(np.abs(diff)) / ref) if ref > 0 else float(np.max(np.abs(diff))),
        "l2_final": math.sqrt(max(mass.quadratic(diff), 0.0)),
        "max_all": max(float(np.max(np.abs(at(mc, mf)))) for mc, mf in shared),
    }


def observed_orders(values: Sequence[float], Ms: Sequence[int]) -> list[float | None]:
    out: list[float | None] = []
    for i in range(1, len(values)):
        a, b = values[i - 1], values[i]
        if a is None or b is None or a <= 0 or b <= 0:
            out.append(None)
        else:
            out.append(math.log(a / b) / math.log(Ms[i] / Ms[i - 1]))
    return out


def cmd_study(study: StudyConfig, out: Path, threads: int = 1) -> int:
    start = time.perf_counter()

    def one(rung):
        t0 = time.perf_counter()
        built = build_problem(study.base.with_resolution(*rung))
        hist = run(built.problem)
        return built, hist, time.perf_counter() - t0

    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        results = list(pool.map(one, study.ladder))

    rungs = []
    for i, ((M, N), (built, hist, wall)) in enumerate(zip(study.ladder, results)):
        if study.oracle == "none":
            values = cauchy_differences(results[i - 1][1], hist) if i > 0 else None
        else:
            values = final_errors(hist, built.exact)
        rungs.append(
            {
                "M": M,
                "N": N,
                "h": hist.h,
                "values": {k: values[k] for k in study.norms} if values else None,
                "max_residual": float(np.max(hist.residuals)),
                "wall_time_s": wall,
            }
        )

    Ms = [r["M"] for r in rungs]
    series = {k: [r["values"][k] if r["values"] else None for r in rungs] for k in study.norms}
    orders = {k: observed_orders(v, Ms) for k, v in series.items()}
    decreasing = {
        k: all(b < a for a, b in zip([x for x in v if x is not None], [x for x in v if x is not None][1:]))
        for k, v in series.items()
    }
    kind = "differences" if study.oracle == "none" else "errors"
    header = ["M", "N", "h"] + [f"{k}" for k in study.norms] + [f"order_{k}" for k in study.norms]
    rows = []
    for i, r in enumerate(rungs):
        vals = ["" if series[k][i] is None else series[k][i] for k in study.norms]
        ords = ["" if i == 0 or orders[k][i - 1] is None else orders[k][i - 1] for k in study.norms]
        rows.append([r["M"], r["N"], r["h"], *vals, *ords])
    write_csv(out / "study.csv", header, rows)
    write_json(
        out / "study.json",
        {
            "command": "study",
            "config": study.to_dict(),
            "kind": kind,
            "rungs": rungs,
            "orders": orders,
            "decreasing": decreasing,
            "wall_time_s": time.perf_counter() - start,
        },
    )
    for k in study.norms:
        last = orders[k][-1]
        print(f"{kind} [{k}]: " + ", ".join("-" if v is None else f"{v:.3e}" for v in series[k])
              + (f"; last observed order {last:.3f}" if last is not None else ""))
    return EXIT_OK


# -- diagnose ----------------------------------------------------------------------


def _smooth_tests(history: SchemeHistory) -> list[TestPair]:
    phi = spatial_bump(history.mesh.nodes, history.mesh.bounds)
    T = history.grid.T
    return [
        TestPair.with_bump(phi, a, b, label=f"bump[{a / T:g},{b / T:g}]", T=T) for a, b in default_bumps(T)
    ]


def random_ledgers(history: SchemeHistory, count: int, seed: int, steps: int = 32) -> dict:
    """Coercivity and summation ledgers on seeded random field sequences."""
    from .fracderiv import build_coefficients

    rng = np.random.default_rng(seed)
    M = min(steps, history.M)
    table = build_coefficients(history.problem.alpha, M)
    worst = {"discrete coercivity": math.inf, "summation bound": math.inf}
    passed = True
    for _ in range(count):
        fields = rng.standard_normal((M + 1, history.mesh.n_dof))
        for ledger in (
            dg.coercivity_ledger(fields, table, history.h, history.disc.mass),
            dg.summation_ledger(fields, table, history.h, history.disc.mass),
        ):
            passed &= ledger.passed
            worst[ledger.name] = min(worst[ledger.name], float(np.min(ledger.slack)))
    return {"seed": seed, "histories": count, "steps": M, "passed": bool(passed), "min_slack": worst}


def inject_fault(history: SchemeHistory, fault: str | None) -> SchemeHistory:
    if fault is None:
        return history
    if fault == "flip-u1":
        fields = np.array(history.fields)
        fields[1] = -fields[1]
        return history.with_fields(fields)
    raise ValueError(f"unknown fault {fault!r}")


def cmd_diagnose(cfg: RunConfig, out: Path, fault: str | None = None) -> int:
    start = time.perf_counter()
    built = build_problem(cfg)
    history = inject_fault(run(built.problem, progress=_progress(cfg.M)), fault)
    toggles = cfg.diagnostics
    report: dict = {"command": "diagnose", "config": cfg.to_dict(), "problem": _problem_summary(built), "fault": fault}
    checks: list[tuple[str, str, str, bool]] = []  # (name, lhs, rhs, passed)
    failures: list[str] = []

    eq = dg.equation_residuals(history)
    ident = dg.caputo_identity_residuals(history)
    eq_ok = float(eq.max()) <= dg.EQUATION_RTOL
    id_ok = float(ident.max()) <= dg.SOLVER_RTOL
    report["discrete_equation"] = {"max_residual": float(eq.max()), "worst_step": int(np.argmax(eq)) + 1,
                                   "caputo_identity_max": float(ident.max()), "passed": eq_ok and id_ok}
    checks.append(("discrete equation residual", _fmt(eq.max()), f"<= {dg.EQUATION_RTOL:g}", eq_ok))
    checks.append(("discrete Caputo identity", _fmt(ident.max()), f"<= {dg.SOLVER_RTOL:g}", id_ok))
    if not eq_ok:
        failures.append(f"discrete equation residual at m={int(np.argmax(eq)) + 1}: {float(eq.max())!r} > {dg.EQUATION_RTOL!r}")
    if not id_ok:
        failures.append(f"discrete Caputo identity at m={int(np.argmax(ident)) + 1}: {float(ident.max())!r} > {dg.SOLVER_RTOL!r}")

    if toggles.energy:
        cert = dg.check_energy_estimate(history)
        report["energy_certificate"] = cert.to_dict()
        for ledger in (cert.coercivity, cert.summation):
            d = ledger.to_dict()
            checks.append((ledger.name, _fmt(d.get("worst_lhs", 0.0)), _fmt(d.get("worst_rhs", 0.0)), ledger.passed))
        checks.append(("energy estimate (lhs/data vs K)", _fmt(cert.energy.ratio), _fmt(cert.energy.constant), cert.energy.passed))
        checks.append(("L2(H1) bound", _fmt(cert.l2h1.norm_pc + cert.l2h1.norm_pl), _fmt(cert.l2h1.bound), cert.l2h1.passed))
        failures += [f for f in cert.failures() if not f.startswith("discrete equation")]
        rnd = random_ledgers(history, toggles.random_histories, cfg.seed)
        report["random_ledgers"] = rnd
        checks.append((f"ledgers on {rnd['histories']} random histories",
                       _fmt(min(rnd["min_slack"].values())) if rnd["histories"] else "-", ">= -tol", rnd["passed"]))
        if not rnd["passed"]:
            failures.append(f"random-history ledgers (seed {cfg.seed}) have negative slack: {rnd['min_slack']}")

    approx = build_kernel_approx(cfg.alpha, history.grid)
    if toggles.kernel_gap:
        gap = kernel_gap_sup(approx)
        agree = abs(gap.sampled_sup - gap.closed_form) <= KERNEL_GAP_RTOL * max(1.0, gap.closed_form)
        report["kernel_gap"] = {**gap.to_dict(), "agree": agree}
        checks.append(("kernel gap sampled vs closed form", _fmt(gap.sampled_sup), _fmt(gap.closed_form), agree))
        if not agree:
            failures.append(f"kernel gap: sampled {gap.sampled_sup!r} != closed form {gap.closed_form!r}")

    if toggles.weak_form or toggles.error_terms:
        try:
            tests = _smooth_tests(history)
            if toggles.weak_form:
                wf = dg.weak_form_residual(history, None if toggles.test_basis == "hats" else tests)
                report["weak_form"] = wf.to_dict()
            if toggles.error_terms:
                pairs = dg.error_term_pairing(history, approx, tests)
                report["error_terms"] = [p.to_dict() for p in pairs]
        except MarginError as exc:
            report["weak_form_skipped"] = str(exc)

    passed = all(c[3] for c in checks)
    report["passed"] = passed
    report["failures"] = failures
    report["wall_time_s"] = time.perf_counter() - start
    write_json(out / "diagnostics.json", report)
    (out / "diagnostics.txt").write_text(_text_table(checks, report))
    print(_text_table(checks, report), end="")
    if not passed:
        for f in failures:
            print(f"FAILED: {f}", file=sys.stderr)
        return EXIT_CERTIFICATE
    return EXIT_OK


def _text_table(checks, report) -> str:
    w = max(len(c[0]) for c in checks) if checks else 10
    lines = [f"{'check':<{w}}  {'lhs':>24}  {'rhs':>24}  status", "-" * (w + 60)]
    for name, lhs, rhs, ok in checks:
        lines.append(f"{name:<{w}}  {lhs:>24}  {rhs:>24}  {'pass' if ok else 'FAIL'}")
    if "weak_form" in report:
        wf = report["weak_form"]
        lines.append(f"weak-form residual ({wf['basis']}, {wf['tests']} tests): max |R| = {wf['max_abs_residual']:.3e}")
    for row in report.get("error_terms", []):
        lines.append(
            f"error term {row['label']}: memory {row['memory']:+.3e} elliptic {row['elliptic']:+.3e} "
            f"source {row['source']:+.3e} total {row['total']:+.3e}"
        )
    return "\n".join(lines) + "\n"


# -- kernel gap --------------------------------------------------------------------


def cmd_kernel_gap(cfg: RunConfig, out: Path, levels: int = 4) -> int:
    reports = []
    for j in range(levels):
        grid = TimeGrid(cfg.T, cfg.M * 2**j)
        reports.append({"M": grid.M, **kernel_gap_sup(build_kernel_approx(cfg.alpha, grid)).to_dict()})
    ratios = [a["sup_gap"] / b["sup_gap"] for a, b in zip(reports, reports[1:])]
    payload = {"command": "kernel-gap", "alpha": cfg.alpha, "T": cfg.T, "levels": reports, "ratios": ratios}
    write_json(out / "kernel_gap.json", payload)
    for r in reports:
        print(f"M={r['M']:>7}  sup gap {r['sup_gap']:.6e}  closed form {r['closed_form']:.6e}  bound {r['proof_bound']:.6e}")
    print("successive ratios: " + ", ".join(f"{x:.4f}" for x in ratios))
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subdiffusion", description="Time-fractional diffusion solver and certificates.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML configuration file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="built-in problem (overrides problem.preset)")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--seed", type=int, help="seed for randomised checks (overrides config)")
    common.add_argument("--threads", type=int, default=1, help="study rungs run concurrently")
    common.add_argument("--inject-fault", choices=FAULTS, help=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="run the scheme and write snapshots")
    sub.add_parser("study", parents=[common], help="refinement study along a ladder")
    sub.add_parser("diagnose", parents=[common], help="certify energy estimates and the weak form")
    sub.add_parser("kernel-gap", parents=[common], help="report the kernel approximation gap")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig | StudyConfig:
    if args.config is None and args.preset is None:
        raise ConfigError("give --config or --preset")
    cfg = parse_config(args.config, preset=args.preset)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("must be >= 0", "--seed")
        from dataclasses import replace

        if isinstance(cfg, StudyConfig):
            cfg = replace(cfg, base=replace(cfg.base, seed=args.seed))
        else:
            cfg = replace(cfg, seed=args.seed)
    if args.threads < 1:
        raise ConfigError("must be >= 1", "--threads")
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    out: Path | None = None
    try:
        cfg = load_config(args)
        base = cfg.base if isinstance(cfg, StudyConfig) else cfg
        out = resolve_out(args.out, base)
        if args.command == "study":
            return cmd_study(as_study(cfg), out, args.threads)
        if args.command == "solve":
            return cmd_solve(base, out)
        if args.command == "diagnose":
            return cmd_diagnose(base, out, args.inject_fault)
        return cmd_kernel_gap(base, out)
    except (ConfigError, DomainError, InvalidCoefficientsError, MarginError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        if out is not None:
            write_json(out / "error.json", {"error": "solver", "message": str(exc), "residual": exc.residual})
        return EXIT_SOLVER
    except ValueError as exc:
        # bad data detected while building the problem (non-finite source, boundary values, ...)
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
