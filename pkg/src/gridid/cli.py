"""Batch command-line front end.

Subcommands: simulate, estimate, evaluate, benchmark. Human-readable
progress goes to stderr; stdout carries only a machine-readable JSON summary.
Exit codes: 0 success, 2 configuration error, 3 numerical error.

Every output directory receives exactly one `manifest.json` recording the
command, configuration hash, seeds, and paths, so equal manifests imply
equal numeric outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field

from . import __version__
from .errors import ConfigError, GridIdError, NumericalError
from .estimators import (EstimationResult, default_map_priors, estimate_ols,
                         estimate_tls, frobenius_error, support_metrics)
from .grid import load_matrix_triplets, save_matrix_triplets
from .phasors import (NoiseSpec, center_voltages, debias, load_measurements,
                      save_measurements)
from .simulator import Scenario, load_scenario, run_scenario
from .solvers import EivProblem, SolverConfig, solve_eiv
from .vectorize import build_reduction


@dataclass
class RunManifest:
    """Provenance record written once per output directory."""

    command: str
    config_hash: str
    seeds: dict
    inputs: list
    outputs: list
    version: str = ""
    wall_time: float = 0.0
    notes: dict = field(default_factory=dict)

    def write(self, out_dir) -> str:
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
        return path


def _hash_file(path) -> str:
    try:
        with open(path, "rb") as f:
            return hashlib.sha256(f.read()).hexdigest()[:16]
    except OSError:
        return "none"


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario.noise = NoiseSpec.from_dict(
            {**scenario.noise.to_dict(), "seed": args.seed})
        scenario.load.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    _info(f"simulating scenario {scenario.name!r} "
          f"({scenario.topology.n} buses, {scenario.n_samples} samples)")
    result = run_scenario(scenario)

    meas = os.path.join(args.out, "measurements.csv")
    exact = os.path.join(args.out, "exact.csv")
    truth = os.path.join(args.out, "truth.txt")
    prep = {"window": scenario.window, "debias": scenario.do_debias,
            "center": scenario.do_center, "rated": scenario.v0,
            "kept_buses": [int(h) for h in result.keep]}
    save_measurements(result.noisy, meas, result.noise, prep)
    save_measurements(result.exact, exact, None, prep)
    save_matrix_triplets(result.truth.matrix, truth)

    manifest = RunManifest(
        command="simulate", config_hash=_hash_file(args.scenario),
        seeds={"noise": scenario.noise.seed, "load": scenario.load.seed},
        inputs=[str(args.scenario)], outputs=[meas, exact, truth],
        version=__version__, wall_time=time.perf_counter() - t0,
        notes={"noise": scenario.noise.to_dict(),
               "load_generator": scenario.load.to_dict()})
    manifest.write(args.out)
    _emit({"command": "simulate", "n": int(result.truth.n),
           "n_samples": int(result.noisy.n_samples),
           "measurements": meas, "truth": truth})
    return 0


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def _load_prior_config(path) -> dict:
    cfg = {"lambda": 1e-6, "lambda_prime": 0.0}
    if path is None:
        return cfg
    import configparser
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read prior config {path}")
    if "priors" in cp:
        sec = cp["priors"]
        cfg["lambda"] = sec.getfloat("lambda", cfg["lambda"])
        cfg["lambda_prime"] = sec.getfloat("lambda_prime", cfg["lambda_prime"])
    return cfg


def _solver_config(args) -> SolverConfig:
    cfg = SolverConfig()
    if args.max_outer is not None:
        cfg.max_outer = args.max_outer
    if args.schedule_initial is not None:
        cfg.schedule_initial = args.schedule_initial
    return cfg


def _prepare(path):
    """Load a measurement file and return (V, I, spec, prep) ready to fit."""
    series, spec, prep = load_measurements(path)
    if spec is None:
        spec = NoiseSpec()
    clean = debias(series, spec) if (prep.get("debias", True)
                                     and not spec.is_zero) else series
    V = clean.voltage
    if prep.get("center", True):
        V = center_voltages(V, float(prep.get("rated", 1.0)))
    return series, V, clean.current, spec, prep


def run_estimate(measurements, method, prior_config=None, solver="bcd",
                 solver_cfg=None, truth_path=None) -> EstimationResult:
    """Programmatic core of cmd_estimate; returns the estimation result."""
    series, V, I, spec, prep = _prepare(measurements)
    n = V.shape[1]
    if method == "ols":
        result = estimate_ols(V, I)
    elif method == "tls":
        result = estimate_tls(V, I)
    elif method in ("mle", "map"):
        rmap = build_reduction(n)
        problem = EivProblem.from_measurements(
            series, spec, rmap, priors=None,
            rated=float(prep.get("rated", 1.0)))
        if not prep.get("center", True):
            problem.V = problem.V + float(prep.get("rated", 1.0))
        cfg = solver_cfg or SolverConfig()
        if method == "mle":
            result = solve_eiv(problem, solver, cfg)
        else:
            pc = _load_prior_config(prior_config) if isinstance(prior_config, str) \
                else (prior_config or _load_prior_config(None))
            mle = solve_eiv(problem, solver, cfg)
            problem.priors = default_map_priors(
                rmap, mle.y, mle.Y, pc["lambda"], pc["lambda_prime"])
            result = solve_eiv(problem, solver, cfg, y0=mle.y)
    else:
        raise ConfigError(f"unknown estimation method {method!r}")
    if truth_path is not None:
        result.with_truth(load_matrix_triplets(truth_path))
    return result


def cmd_estimate(args) -> int:
    t0 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    try:
        result = run_estimate(args.measurements, args.method, args.prior,
                              args.solver, _solver_config(args), args.truth)
    except NumericalError as exc:
        if args.method == "ols":
            raise NumericalError(
                f"{exc}\nhint: unloaded buses make the voltage data rank "
                "deficient; Kron-reduce them before estimating") from exc
        raise
    prefix = os.path.join(args.out, f"estimate_{args.method}")
    result.save(prefix)
    manifest = RunManifest(
        command="estimate", config_hash=_hash_file(args.measurements),
        seeds={}, inputs=[str(args.measurements)],
        outputs=[f"{prefix}.yhat.txt", f"{prefix}.json"],
        version=__version__, wall_time=time.perf_counter() - t0,
        notes={"method": args.method, "solver": args.solver})
    manifest.write(args.out)
    summary = {"command": "estimate", "method": args.method,
               "result": f"{prefix}.yhat.txt"}
    if result.eps_f is not None:
        summary["eps_f"] = result.eps_f
        _info(f"{args.method}: eps_F = {result.eps_f:.6e}")
    _emit(summary)
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    Y_hat = load_matrix_triplets(args.estimate)
    Y_true = load_matrix_triplets(args.truth)
    if Y_hat.shape != Y_true.shape:
        raise ConfigError(f"dimension mismatch: estimate {Y_hat.shape} vs "
                          f"truth {Y_true.shape}")
    eps = frobenius_error(Y_hat, Y_true)
    metrics = {"eps_f": eps, **support_metrics(Y_hat, Y_true)}
    if args.out:
        with open(args.out, "w") as f:
            json.dump(metrics, f, indent=2, sort_keys=True)
    _info(f"eps_F = {eps:.6e}, precision = {metrics['precision']:.3f}, "
          f"recall = {metrics['recall']:.3f}")
    _emit({"command": "evaluate", **metrics})
    return 0


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def _benchmark_solvers(scenario: Scenario, lam: float, out_dir) -> list:
    from .solvers import solve_eiv as _solve
    result = run_scenario(scenario)
    n = result.truth.n
    rmap = build_reduction(n)
    problem = EivProblem(result.V, result.I, result.sigma_v, result.sigma_i, rmap)
    mle = _solve(problem, "bar")
    problem.priors = default_map_priors(rmap, mle.y, mle.Y, lam)
    rows = []
    for method in ("bcd", "bar", "admm"):
        res = _solve(problem, method, y0=mle.y)
        res.with_truth(result.truth.matrix)
        d = res.diagnostics
        rows.append({"algorithm": method,
                     "iterations": d["iterations"],
                     "iterations_per_second": d["iterations_per_second"],
                     "wall_time": d["wall_time"],
                     "eps_f": res.eps_f})
        _info(f"{method}: {d['iterations']} iterations, "
              f"{d['iterations_per_second']:.1f} it/s")
    path = os.path.join(out_dir, "solvers.csv")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows


def _benchmark_sweep(scenario: Scenario, sigmas, methods, lam, out_dir) -> list:
    rows = []
    for sigma in sigmas:
        sc_noise = NoiseSpec.uniform(sigma, seed=scenario.noise.seed)
        sc = Scenario(**{**scenario.__dict__, "noise": sc_noise})
        result = run_scenario(sc)
        n = result.truth.n
        rmap = build_reduction(n)
        for method in methods:
            if method == "ols":
                est = estimate_ols(result.V, result.I)
            elif method == "tls":
                est = estimate_tls(result.V, result.I)
            else:
                problem = EivProblem(result.V, result.I, result.sigma_v,
                                     result.sigma_i, rmap)
                mle = solve_eiv(problem, "bar")
                if method == "map":
                    problem.priors = default_map_priors(rmap, mle.y, mle.Y, lam)
                    est = solve_eiv(problem, "bar", y0=mle.y)
                else:
                    est = mle
            est.with_truth(result.truth.matrix)
            rows.append({"method": method, "sigma": sigma, "eps_f": est.eps_f})
            _info(f"sigma={sigma:g} {method}: eps_F = {est.eps_f:.4e}")
    path = os.path.join(out_dir, "noise_sweep.csv")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["method", "sigma", "eps_f"])
        w.writeheader()
        w.writerows(rows)
    return rows


def cmd_benchmark(args) -> int:
    import configparser
    t0 = time.perf_counter()
    cp = configparser.ConfigParser()
    if not cp.read(args.suite):
        raise ConfigError(f"cannot read suite file {args.suite}")
    if "benchmark" not in cp or "scenario" not in cp["benchmark"]:
        raise ConfigError(f"{args.suite}: missing [benchmark] scenario entry")
    sec = cp["benchmark"]
    scen_path = sec["scenario"]
    if not os.path.isabs(scen_path):
        scen_path = os.path.join(os.path.dirname(str(args.suite)), scen_path)
    scenario = load_scenario(scen_path)
    lam = sec.getfloat("lambda", 1e-6)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    summary = {"command": "benchmark"}
    if sec.getboolean("solvers", True):
        summary["solvers"] = _benchmark_solvers(scenario, lam, args.out)
        outputs.append(os.path.join(args.out, "solvers.csv"))
    if "sweep" in cp:
        sigmas = [float(x) for x in cp["sweep"]["sigmas"].split(",")]
        methods = [m.strip() for m in
                   cp["sweep"].get("methods", "ols,tls,map").split(",")]
        summary["sweep"] = _benchmark_sweep(scenario, sigmas, methods, lam,
                                            args.out)
        outputs.append(os.path.join(args.out, "noise_sweep.csv"))
    manifest = RunManifest(
        command="benchmark", config_hash=_hash_file(args.suite),
        seeds={"noise": scenario.noise.seed, "load": scenario.load.seed},
        inputs=[str(args.suite), scen_path], outputs=outputs,
        version=__version__, wall_time=time.perf_counter() - t0)
    manifest.write(args.out)
    _emit(summary)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gridid",
        description="Identify grid admittance matrices from phasor data.")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("simulate", help="run a scenario and write measurements")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None,
                   help="override the noise and load seeds")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="fit an admittance matrix")
    e.add_argument("--measurements", required=True)
    e.add_argument("--method", required=True,
                   choices=["ols", "tls", "mle", "map"])
    e.add_argument("--prior", default=None, help="prior config INI file")
    e.add_argument("--solver", default="bcd", choices=["bcd", "bar", "admm"])
    e.add_argument("--truth", default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--max-outer", type=int, default=None)
    e.add_argument("--schedule-initial", type=float, default=None)
    e.set_defaults(func=cmd_estimate)

    v = sub.add_parser("evaluate", help="compare an estimate against truth")
    v.add_argument("--estimate", required=True)
    v.add_argument("--truth", required=True)
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("benchmark", help="solver speed and noise-sweep tables")
    b.add_argument("--suite", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _info(f"error: {exc}")
        return 2
    except (NumericalError, GridIdError) as exc:
        _info(f"numerical error: {exc}")
        return 3
    except OSError as exc:
        _info(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
