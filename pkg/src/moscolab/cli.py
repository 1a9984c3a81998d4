"""Command line entry point: ``lab <command> --config <path> --out <dir>``."""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, ProblemConfig, parse_config
from .controls import InfeasibleControlError, check_class
from .geometry import GeometryError, ekeland_distance, family_generate, hc_distance, rasterize
from .hammerstein import (HammersteinError, HammersteinOptions, KernelSpec, energy_identity, lambda_bound,
                          solve_hammerstein)
from .optimizer import OcpProblem, OptimizerOptions, optimize
from .stability import StudyError, StudySpec, mosco_m1_probe, run_study, state_transfer_check
from .state import EllipticProblem, SolverError, SolverOptions, apriori_check, solve_state

COMMANDS = ("solve-state", "solve-hammerstein", "optimize", "perturb-study", "domain-distance", "verify-class")

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2


class Run:
    """Collects output files and timings for one command."""

    def __init__(self, out: Path):
        self.out = out
        self.files: list[Path] = []
        self.timings: dict[str, float] = {}

    def add(self, path: Path) -> Path:
        self.files.append(Path(path))
        return Path(path)

    def timed(self, label, fn, *a, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*a, **kw)
        finally:
            self.timings[label] = time.perf_counter() - t0


def _kernel(cfg: ProblemConfig) -> KernelSpec:
    k = cfg["kernel"]
    if k["kind"] == "scaled_identity":
        return KernelSpec.scaled_identity(k["delta"])
    return KernelSpec(k["kind"], k["sigma"], k["c"], k["delta"])


def _domain(cfg: ProblemConfig, key: str = "domain"):
    cfg.require(key)
    return rasterize(cfg[key], cfg.grid(), name=key)


def _state_problem(cfg: ProblemConfig):
    grid = cfg.grid()
    dom = _domain(cfg)
    s = cfg["solver"]
    return EllipticProblem(cfg.control(grid), cfg.field("f", grid), dom, cfg.params(),
                           SolverOptions(tol=s["tol"], max_iter=s["max_iter"]))


def _optimizer_options(cfg: ProblemConfig, threads: int) -> OptimizerOptions:
    o = cfg["optimizer"]
    return OptimizerOptions(max_iter=o["max_iter"], tol=o["tol"], gradient=o["gradient"], fd_step=o["fd_step"],
                            threads=threads, state_tol=o["state_tol"], hammerstein_tol=o["hammerstein_tol"])


def cmd_solve_state(cfg: ProblemConfig, run: Run, threads: int):
    prob = _state_problem(cfg)
    y = run.timed("solve_state", solve_state, prob)
    rep = apriori_check(y, prob.f, prob.params)
    run.add(io.write_field_csv(run.out / "state.csv", y.grid, y.values))
    run.add(io.write_binary(run.out / "state.bin", y.values))
    run.add(io.write_pgm(run.out / "domain.pgm", prob.domain.mask))
    run.add(io.write_json(run.out / "state.json", {"grid": y.grid.to_dict(), "solver": y.stats.to_dict(),
                                                   "apriori": rep.to_dict()}))


def cmd_solve_hammerstein(cfg: ProblemConfig, run: Run, threads: int):
    prob = _state_problem(cfg)
    y = run.timed("solve_state", solve_state, prob)
    g = cfg.field("g")
    k = _kernel(cfg)
    h = cfg["hammerstein"]
    p = prob.params.p
    sol = run.timed("solve_hammerstein", solve_hammerstein, y, g, k, p, prob.domain,
                    HammersteinOptions(tol=h["tol"], max_iter=h["max_iter"]))
    ident = energy_identity(y, sol.z, g, k, p, prob.domain)
    run.add(io.write_field_csv(run.out / "state.csv", y.grid, y.values))
    run.add(io.write_field_csv(run.out / "z.csv", y.grid, sol.z))
    run.add(io.write_binary(run.out / "z.bin", sol.z))
    run.add(io.write_json(run.out / "hammerstein.json", {
        "kernel": k.to_dict(), **sol.to_dict(),
        "lambda_bound": lambda_bound(y, g, p, prob.domain),
        "energy_identity": dataclasses.asdict(ident),
        "state_solver": y.stats.to_dict()}))


def cmd_optimize(cfg: ProblemConfig, run: Run, threads: int):
    grid = cfg.grid()
    prob = OcpProblem(_domain(cfg), cfg.params(), cfg.field("f", grid), cfg.field("g", grid),
                      cfg.field("z_d", grid), _kernel(cfg), options=_optimizer_options(cfg, threads))
    res = run.timed("optimize", optimize, prob)
    run.add(io.write_json(run.out / "result.json", {**res.to_dict(), "control": res.U_opt.to_dict(prob.params)}))
    run.add(io.write_csv(run.out / "iterates.csv", io.ITERATE_COLUMNS, enumerate(res.iterates)))
    run.add(io.write_binary(run.out / "U.bin", res.U_opt.entries))
    run.add(io.write_binary(run.out / "y.bin", res.y_opt.values))
    run.add(io.write_binary(run.out / "z.bin", res.z_opt.z))


def cmd_perturb_study(cfg: ProblemConfig, run: Run, threads: int):
    grid = cfg.grid()
    st = cfg["study"]
    spec = StudySpec(cfg.family(), grid, cfg.params(), cfg.field("f", grid), cfg.field("g", grid),
                     cfg.field("z_d", grid), _kernel(cfg), _optimizer_options(cfg, threads),
                     support_condition=st["support_condition"], threshold=st["threshold"],
                     state_threshold=st["state_threshold"], slack=st["slack"], warm_start=st["warm_start"])
    fam = family_generate(spec.family, grid)
    try:
        res = run.timed("run_study", run_study, spec, fam)
    except StudyError as e:
        if e.partial.records:
            run.add(io.write_csv(run.out / "study_partial.csv", io.STUDY_COLUMNS, e.partial.records))
        raise
    g = spec.g * fam.limit.mask if spec.support_condition else spec.g
    base = res.limit_result
    transfer = run.timed("state_transfer", state_transfer_check, base.U_opt, fam, spec.f, g, spec.kernel,
                         spec.params, spec.state_threshold, spec.slack)
    m1 = run.timed("mosco_m1", mosco_m1_probe, base.y_opt, fam, g, spec.kernel, spec.params.p, spec.slack)
    eps = [r["eps"] for r in res.records]
    run.add(io.write_csv(run.out / "study.csv", io.STUDY_COLUMNS, res.records))
    run.add(io.write_json(run.out / "study.json", {**res.to_dict(), "state_transfer": transfer.to_dict(),
                                                   "mosco_m1": m1.to_dict()}))
    run.add(io.svg_loglog(run.out / "value_gap.svg", eps, {"value gap": [r["value_gap"] for r in res.records]},
                          "optimal value gap"))
    run.add(io.svg_loglog(run.out / "state_gap.svg", eps, {"state gap": [r["state_gap"] for r in res.records],
                                                           "transfer gap": transfer.state_gaps}, "state gap"))
    run.add(io.svg_loglog(run.out / "hc.svg", eps, {"hc": [r["hc"] for r in res.records],
                                                    "ekeland": [r["ekeland"] for r in res.records]},
                          "domain distance"))
    run.add(io.write_pgm(run.out / "limit.pgm", fam.limit.mask))
    for e, d in zip(fam.eps, fam.domains):
        run.add(io.write_pgm(run.out / f"domain_eps_{e:g}.pgm", d.mask))


def cmd_domain_distance(cfg: ProblemConfig, run: Run, threads: int):
    a, b = _domain(cfg, "domain"), _domain(cfg, "domain_b")
    run.add(io.write_json(run.out / "distance.json", {
        "hc": hc_distance(a, b), "ekeland": ekeland_distance(a, b), "h": a.grid.h,
        "measure_a": a.measure, "measure_b": b.measure}))


def cmd_verify_class(cfg: ProblemConfig, run: Run, threads: int):
    c = cfg["class_check"]
    rep = check_class(cfg.control(), cfg.params(), c["n_samples"], cfg.seed, c["tol"])
    run.add(io.write_json(run.out / "class_report.json", rep.to_dict()))
    return EXIT_OK if rep.ok else EXIT_NUMERICAL


HANDLERS = {
    "solve-state": cmd_solve_state,
    "solve-hammerstein": cmd_solve_hammerstein,
    "optimize": cmd_optimize,
    "perturb-study": cmd_perturb_study,
    "domain-distance": cmd_domain_distance,
    "verify-class": cmd_verify_class,
}

NUMERICAL = (SolverError, HammersteinError, StudyError, np.linalg.LinAlgError, FloatingPointError)
INPUT = (ConfigError, GeometryError, InfeasibleControlError, ValueError)


def _error_payload(e: BaseException) -> dict:
    d = {"error": type(e).__name__, "module": type(e).__module__, "message": str(e)}
    if isinstance(e, ConfigError):
        d["kind"], d["errors"] = e.kind, e.errors
    if hasattr(e, "last_residual"):
        d["last_residual"] = e.last_residual
    if isinstance(e, StudyError):
        d["eps"] = e.eps
    return d


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lab", description="Optimal control of monotone elliptic problems "
                                                          "and domain-perturbation experiments.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON problem configuration")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--threads", type=int, default=None, help="worker threads (default: $LAB_THREADS or 1)")
    return ap


def dispatch(command: str, cfg: ProblemConfig, out: Path, threads: int = 1) -> int:
    out.mkdir(parents=True, exist_ok=True)
    started = io.now_iso()
    run = Run(out)
    try:
        status = HANDLERS[command](cfg, run, threads) or EXIT_OK
    except NUMERICAL as e:
        payload, status = _error_payload(e), EXIT_NUMERICAL
    except INPUT as e:
        payload, status = _error_payload(e), EXIT_USAGE
    else:
        payload = None
    if payload is not None:
        run.add(io.write_json(out / "error.json", payload))
        print(f"lab {command}: {payload['error']} in {payload['module']}: {payload['message']}", file=sys.stderr)
    io.write_json(out / "timings.json", run.timings)
    io.write_manifest(out, command, cfg.hash, started, run.files, "ok" if status == EXIT_OK else "failed",
                      {"seed": cfg.seed, "threads": threads})
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads if args.threads is not None else int(os.environ.get("LAB_THREADS", "1") or 1)
    if threads < 1:
        print("lab: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    try:
        cfg = parse_config(args.config)
    except ConfigError as e:
        out.mkdir(parents=True, exist_ok=True)
        io.write_json(out / "error.json", _error_payload(e))
        print(f"lab: {e.kind}:", file=sys.stderr)
        for msg in e.errors:
            print(f"  {msg}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        cfg.raw["seed"] = args.seed
    try:
        return dispatch(args.command, cfg, out, threads)
    except Exception as e:  # anything unexpected is still reported as JSON
        out.mkdir(parents=True, exist_ok=True)
        io.write_json(out / "error.json", {**_error_payload(e), "traceback": traceback.format_exc()})
        print(f"lab {args.command}: unexpected {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
