"""Command-line front end.

Every command writes a JSON report (sorted keys, no timestamps) to
``--out`` and echoes it on stdout; grids and trajectories go to CSV files
beside it. Exit codes:

=============  ==========================================================
reach          0 ok, 1 reach set escapes the box or meets the unsafe set
certify        0 found, 1 unsafe-suspect, 3 inconclusive
synthesize     as certify, plus 4 when a construction stage fails or the
               assembled barrier does not validate
check-barrier  0 pass, 1 fail
bench          0 every benchmark matches its expected verdict, else 1
=============  ==========================================================

Input errors (unreadable or malformed problems, bad parameters) exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .barrier import AnalyticBarrier, validate_barrier
from .benchmarks import get_benchmark, list_benchmarks
from .certificate import (
    FOUND,
    INCONCLUSIVE,
    UNSAFE_SUSPECT,
    CertificateResult,
    default_shape,
    search_certificate,
    validate_certificate,
)
from .dsl import ParseError, ProblemError, SafetyProblem, parse_expression, parse_problem
from .grid import GridShapeError, OccupancyGrid, ReachParams, rasterize, reach_interval, set_algebra
from .flow import lipschitz_estimate
from .pipeline import StageError, Synthesis, SynthesisConfig, synthesize, synthesize_from_certificate

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_INPUT = 2
EXIT_INCONCLUSIVE = 3
EXIT_CONSTRUCTION = 4

STATUS_EXIT = {FOUND: EXIT_OK, UNSAFE_SUSPECT: EXIT_FAIL, INCONCLUSIVE: EXIT_INCONCLUSIVE}


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    problem: str | None = None
    bench: str | None = None
    eps: float = 0.1
    delta: float = 0.5
    t_max: float | None = None
    grid: tuple | None = None
    clamp: float = 0.2
    kernel_width: float | None = None
    seed: int = 0
    out: str = "out"
    trials: int = 10_000
    samples: int = 2000
    barrier: str | None = None
    certificate: str | None = None

    def check(self) -> None:
        for name in ("eps", "delta"):
            if not getattr(self, name) > 0:
                raise InputError(f"--{name} must be positive")
        if self.t_max is not None and not self.t_max > 0:
            raise InputError("--tmax must be positive")
        if not 0 < self.clamp < 0.5:
            raise InputError("--clamp must lie in (0, 0.5)")
        if self.kernel_width is not None and not self.kernel_width > 0:
            raise InputError("--kernel-width must be positive")
        if self.trials < 0 or self.samples < 1:
            raise InputError("--trials must be >= 0 and --samples >= 1")
        if self.grid is not None and any(g < 2 for g in self.grid):
            raise InputError("--grid entries must be at least 2")


# ---------------------------------------------------------------------------
# helpers


def _clean(x):
    """Make a value JSON-safe: numpy scalars to Python, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    return x


def dumps(report: dict) -> str:
    return json.dumps(_clean(report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _emit(cfg: RunConfig, name: str, report: dict) -> None:
    text = dumps(report)
    Path(cfg.out, name).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _load_problem(cfg: RunConfig) -> SafetyProblem:
    if (cfg.problem is None) == (cfg.bench is None):
        raise InputError("give exactly one of --problem PATH or --bench NAME")
    if cfg.bench is not None:
        try:
            return get_benchmark(cfg.bench).problem
        except KeyError as e:
            raise InputError(e.args[0]) from e
    try:
        text = Path(cfg.problem).read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read {cfg.problem}: {e.strerror}") from e
    try:
        return parse_problem(text, name=Path(cfg.problem).stem)
    except (ParseError, ProblemError) as e:
        raise InputError(f"{cfg.problem}: {e}") from e


def _shape(cfg: RunConfig, p: SafetyProblem) -> tuple:
    if cfg.grid is None:
        return default_shape(p.dim)
    if len(cfg.grid) == 1:
        return cfg.grid * p.dim
    if len(cfg.grid) != p.dim:
        raise InputError(f"--grid has {len(cfg.grid)} entries for a {p.dim}-dimensional problem")
    return tuple(cfg.grid)


def _write(cfg: RunConfig, name: str, writer) -> str:
    """Write an artifact into the output directory; reports cite it by file name
    so they do not depend on where the run was pointed."""
    writer(os.path.join(cfg.out, name))
    return name


def _certificate_report(cfg: RunConfig, p: SafetyProblem, res: CertificateResult) -> dict:
    out = {
        "problem": p.name,
        "status": res.status,
        "t_found": res.t_found,
        "eps": res.eps,
        "delta": res.delta,
        "grid": list(res.shape),
        "lipschitz": res.lipschitz,
        "iterations": res.iterations,
        "reason": res.reason,
        "verdicts": None,
        "witness_csv_path": None,
        "certificate_csv_path": None,
    }
    if res.status == FOUND:
        path = _write(cfg, "certificate.csv", res.V.to_csv)
        out["certificate_csv_path"] = path
        out["occupied_cells"] = res.V.count
        # the search certifies robustness at half the search margin
        rep = validate_certificate(res.V, p, res.eps / 2, res.delta, trials=cfg.trials, seed=cfg.seed,
                                   lipschitz=res.lipschitz)
        out["verdicts"] = rep.verdicts()
        out["validation"] = {
            "eps": res.eps / 2,
            "trials": rep.trials,
            "sample_violations": rep.sample_violations,
            "grid_step_invariant": rep.delta_invariant_grid,
            "violation_point": rep.violation_point,
        }
    if res.witness is not None:
        path = _write(cfg, "witness.csv", res.witness.to_csv)
        final = res.witness.final
        out["witness_csv_path"] = path
        out["witness"] = {
            "final_state": final.tolist(),
            "final_unsafe": bool(p.unsafe(final[None, :])[0]),
            "duration": float(res.witness.times[-1]),
            "epsilon": res.witness.epsilon,
        }
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_reach(cfg: RunConfig) -> int:
    p = _load_problem(cfg)
    shape = _shape(cfg, p)
    horizon = cfg.t_max if cfg.t_max is not None else 5.0
    L = max(lipschitz_estimate(p), 1e-6)
    I = rasterize(p, p.init, shape)
    R = reach_interval(I, p, ReachParams(cfg.eps, cfg.delta / 8, L), horizon)
    U = rasterize(p, p.unsafe, shape)
    meets = not set_algebra("disjointness", R, U)
    path = _write(cfg, "reach.csv", R.to_csv)
    _emit(cfg, "reach.json", {
        "problem": p.name,
        "eps": cfg.eps,
        "horizon": horizon,
        "grid": list(shape),
        "lipschitz": L,
        "occupied_cells": R.count,
        "occupied_fraction": R.fraction,
        "escaped": R.escaped,
        "meets_unsafe": meets,
        "reach_csv_path": path,
    })
    return EXIT_FAIL if (R.escaped or meets) else EXIT_OK


def cmd_certify(cfg: RunConfig) -> int:
    p = _load_problem(cfg)
    shape = _shape(cfg, p)
    t_max = cfg.t_max if cfg.t_max is not None else 20.0
    try:
        res = search_certificate(p, cfg.eps, cfg.delta, t_max, shape, seed=cfg.seed)
    except ValueError as e:
        raise InputError(str(e)) from e
    _emit(cfg, "certificate.json", _certificate_report(cfg, p, res))
    return STATUS_EXIT[res.status]


def _synthesis_report(cfg: RunConfig, p: SafetyProblem, s: Synthesis) -> dict:
    field_path = _write(cfg, "exit_time.csv", s.field.to_csv)
    barrier_path = _write(cfg, "barrier.csv", lambda path: s.barrier.to_csv(path, p))
    return {
        "clamp": s.clamp,
        "clamp_upper": cfg.clamp,
        "exit_time": s.field.diagnostics(),
        "exit_time_csv_path": field_path,
        "mollify": {
            "kernel_width": s.smooth.width,
            "sup_error": s.smooth.sup_error,
            "sup_error_bound": s.clamp / 2,
            "min_lie": s.smooth.min_lie,
            "min_lie_bound": 1 - s.clamp / 2,
            "checked_cells": s.smooth.checked_cells,
        },
        "barrier": s.report.to_dict(),
        "barrier_csv_path": barrier_path,
    }


def cmd_synthesize(cfg: RunConfig) -> int:
    p = _load_problem(cfg)
    shape = _shape(cfg, p)
    t_max = cfg.t_max if cfg.t_max is not None else 20.0
    scfg = SynthesisConfig(eps=cfg.eps, delta=cfg.delta, t_max=t_max, shape=shape, clamp=cfg.clamp,
                           kernel_width=cfg.kernel_width, seed=cfg.seed, samples=cfg.samples)
    report: dict = {"problem": p.name, "stage": None, "error": None}
    try:
        if cfg.certificate is not None:
            try:
                V = OccupancyGrid.from_csv(cfg.certificate)
            except (OSError, ValueError) as e:
                raise InputError(f"cannot load certificate grid {cfg.certificate}: {e}") from e
            if V.ndim != p.dim:
                raise InputError("certificate grid dimension does not match the problem")
            report["certificate"] = {"status": "loaded", "path": cfg.certificate, "grid": list(V.shape)}
            result = synthesize_from_certificate(p, V, scfg)
        else:
            try:
                result = synthesize(p, scfg)
            except ValueError as e:
                raise InputError(str(e)) from e
            res = result if isinstance(result, CertificateResult) else result.certificate
            report["certificate"] = _certificate_report(cfg, p, res)
            if isinstance(result, CertificateResult):
                _emit(cfg, "synthesis.json", report)
                return STATUS_EXIT[result.status]
    except StageError as e:
        report["stage"] = e.stage
        report["error"] = e.detail
        _emit(cfg, "synthesis.json", report)
        print(f"synthesis failed at stage '{e.stage}': {e.detail}", file=sys.stderr)
        return EXIT_CONSTRUCTION
    report.update(_synthesis_report(cfg, p, result))
    if not result.report.passed:
        report["stage"] = "validate"
        report["error"] = "assembled barrier fails: " + ", ".join(result.report.failed)
        _emit(cfg, "synthesis.json", report)
        print(report["error"], file=sys.stderr)
        return EXIT_CONSTRUCTION
    _emit(cfg, "synthesis.json", report)
    return EXIT_OK


def cmd_check_barrier(cfg: RunConfig) -> int:
    p = _load_problem(cfg)
    if cfg.barrier is None:
        raise InputError("check-barrier needs --barrier EXPR")
    try:
        expr = parse_expression(cfg.barrier, p.dim)
    except ParseError as e:
        raise InputError(f"barrier: {e}") from e
    beta = AnalyticBarrier(expr, p.dim)
    shape = _shape(cfg, p)
    rep = validate_barrier(beta, p, samples=cfg.samples, sweep=shape, seed=cfg.seed)
    report = {"problem": p.name, "barrier": cfg.barrier, "grid": list(shape)}
    report.update(rep.to_dict())
    _emit(cfg, "check_barrier.json", report)
    if not rep.passed:
        d = rep.to_dict()["conditions"]
        for name in rep.failed:
            print(f"condition {name} fails at {d[name]['worst_point']} (margin {d[name]['margin']})", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_bench(cfg: RunConfig) -> int:
    if cfg.problem is not None:
        raise InputError("bench runs built-in benchmarks only; use --bench NAME to pick one")
    try:
        chosen = list_benchmarks() if cfg.bench is None else [get_benchmark(cfg.bench)]
    except KeyError as e:
        raise InputError(e.args[0]) from e
    rows = {}
    ok = True
    for b in chosen:
        p = b.problem
        shape = _shape(cfg, p)
        t_max = cfg.t_max if cfg.t_max is not None else 20.0
        row: dict = {"expected": "safe" if b.safe else "unsafe"}
        if b.safe:
            scfg = SynthesisConfig(eps=cfg.eps, delta=cfg.delta, t_max=t_max, shape=shape, clamp=cfg.clamp,
                                   kernel_width=cfg.kernel_width, seed=cfg.seed, samples=cfg.samples)
            try:
                s = synthesize(p, scfg)
            except StageError as e:
                row.update(status=FOUND, stage=e.stage, error=e.detail, barrier_pass=False)
            else:
                if isinstance(s, CertificateResult):
                    row.update(status=s.status, barrier_pass=False)
                else:
                    row.update(status=FOUND, t_found=s.certificate.t_found, clamp=s.clamp,
                               barrier_pass=s.report.passed, eps_b=s.report.eps_b)
            if b.barrier is not None:
                rep = validate_barrier(AnalyticBarrier(parse_expression(b.barrier, p.dim), p.dim), p,
                                       samples=cfg.samples, sweep=shape, seed=cfg.seed)
                row["analytic_barrier"] = {"expr": b.barrier, "pass": rep.passed}
            row["match"] = row["status"] == FOUND and row["barrier_pass"]
        else:
            res = search_certificate(p, cfg.eps, cfg.delta, t_max, shape, seed=cfg.seed)
            confirmed = res.witness is not None and bool(p.unsafe(res.witness.final[None, :])[0])
            row.update(status=res.status, witness_confirmed=confirmed)
            row["match"] = res.status == UNSAFE_SUSPECT and confirmed
        ok &= row["match"]
        rows[b.name] = row
    _emit(cfg, "bench.json", {"eps": cfg.eps, "delta": cfg.delta, "seed": cfg.seed, "benchmarks": rows, "all_match": ok})
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "reach": cmd_reach,
    "certify": cmd_certify,
    "synthesize": cmd_synthesize,
    "check-barrier": cmd_check_barrier,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------------------
# argument parsing


def _grid_arg(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected N or N,N,...: {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robustcert", description="Robust safety certificates and barrier functions for ODEs.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--problem", metavar="PATH", help="problem file")
    src.add_argument("--bench", metavar="NAME", help="built-in benchmark: " + ", ".join(b.name for b in list_benchmarks()))
    ap.add_argument("--eps", type=float, default=0.1, help="disturbance bound (default 0.1)")
    ap.add_argument("--delta", type=float, default=0.5, help="certificate search step (default 0.5)")
    ap.add_argument("--tmax", dest="t_max", type=float, default=None,
                    help="search horizon for certify/synthesize (default 20), reach horizon for reach (default 5)")
    ap.add_argument("--grid", type=_grid_arg, default=None, metavar="N[,N...]", help="grid resolution")
    ap.add_argument("--clamp", type=float, default=0.2, help="upper bound on the barrier clamp level (default 0.2)")
    ap.add_argument("--kernel-width", type=float, default=None, help="smoothing kernel radius in state units (default 2 cells)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out", metavar="DIR", help="output directory (default ./out)")
    ap.add_argument("--trials", type=int, default=10_000, help="sampled trajectories for certificate validation")
    ap.add_argument("--samples", type=int, default=2000, help="random samples per barrier condition")
    ap.add_argument("--barrier", metavar="EXPR", help="barrier expression for check-barrier")
    ap.add_argument("--certificate", metavar="PATH", help="certificate grid CSV for synthesize (skips the search)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    fields = {k: v for k, v in vars(args).items() if k in RunConfig.__dataclass_fields__}
    cfg = RunConfig(**fields)
    try:
        cfg.check()
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        return COMMANDS[cfg.command](cfg)
    except (InputError, GridShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
