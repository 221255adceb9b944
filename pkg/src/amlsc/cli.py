"""Batch front-end: config parsing, experiment orchestration, table output.

Configuration comes from an optional JSON file plus flag overrides.  Modes:

  pathwise   adaptive solve at one parameter point, JSON record out
  calibrate  rate estimation studies, JSON out
  sl / ml    single- or multilevel expectation runs over an epsilon list
  sweep      both, plus a CSV convergence table

Exit codes: 0 success, 1 flagged numerics, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import write_mesh_ascii
from .multilevel import RateEstimates, calibrate_rates, ml_run, sl_run
from .pathwise import SampleCache, adaptive_solve
from .problems import OnePeakProblem
from .smolyak import dump_grid_json

__all__ = ["RunConfig", "run", "emit_table", "main"]

_MODES = ("pathwise", "calibrate", "sl", "ml", "sweep")


@dataclass
class RunConfig:
    problem: str = "one-peak"
    mode: str = "ml"
    epsilon: list = field(default_factory=lambda: [1e-4])
    q: float = 0.2
    K: int = 2
    theta: float = 0.6
    C_X: float = 1.0
    C_Y: float = 0.1
    s_star: float | None = None
    mu_star: float | None = None
    y: list = field(default_factory=lambda: [-0.22, -0.22])
    tol: float = 2e-3
    spatial_tols: list = field(default_factory=lambda: [1.25e-4, 2.5e-5, 5e-6])
    stoch_tols: list = field(default_factory=lambda: [1e-3, 1e-4, 1e-5])
    out: str = "amlsc-out"
    jobs: int = 1
    deterministic: bool = True
    dump_mesh: bool = False
    dump_grid: bool = False

    def validate(self):
        problems = []
        if self.problem != "one-peak":
            problems.append(f"problem: unknown selector {self.problem!r}")
        if self.mode not in _MODES:
            problems.append(f"mode: must be one of {_MODES}, got {self.mode!r}")
        if self.mode in ("sl", "ml", "sweep") and not self.epsilon:
            problems.append("epsilon: list must be nonempty")
        if any(e <= 0 for e in self.epsilon):
            problems.append("epsilon: all values must be positive")
        if not 0 < self.q < 1:
            problems.append("q: must lie in (0, 1)")
        if not 0 < self.theta < 1:
            problems.append("theta: must lie in (0, 1)")
        if self.K < 0:
            problems.append("K: must be >= 0")
        if self.tol <= 0:
            problems.append("tol: must be positive")
        if min(self.C_X, self.C_Y) <= 0:
            problems.append("C_X/C_Y: must be positive")
        if self.jobs < 1:
            problems.append("jobs: must be >= 1")
        return problems


def _config_from_args(argv):
    parser = argparse.ArgumentParser(
        prog="amlsc",
        description="Adaptive multilevel stochastic collocation experiments",
    )
    parser.add_argument("--config", type=str, help="JSON config file")
    parser.add_argument("--mode", choices=_MODES)
    parser.add_argument("--problem", type=str)
    parser.add_argument("--epsilon", type=str,
                        help="comma separated list, e.g. 1e-5,5e-6")
    parser.add_argument("--q", type=float)
    parser.add_argument("--K", type=int)
    parser.add_argument("--theta", type=float)
    parser.add_argument("--C-X", dest="C_X", type=float)
    parser.add_argument("--C-Y", dest="C_Y", type=float)
    parser.add_argument("--s-star", dest="s_star", type=float)
    parser.add_argument("--mu-star", dest="mu_star", type=float)
    parser.add_argument("--y", type=str, help="comma separated parameter point")
    parser.add_argument("--tol", type=float, help="pathwise tolerance")
    parser.add_argument("--out", type=str)
    parser.add_argument("--jobs", type=int)
    parser.add_argument("--dump-mesh", action="store_true", default=None)
    parser.add_argument("--dump-grid", action="store_true", default=None)
    args = parser.parse_args(argv)

    data = {}
    if args.config:
        with open(args.config) as fh:
            data.update(json.load(fh))
    for name in ("mode", "problem", "q", "K", "theta", "C_X", "C_Y",
                 "s_star", "mu_star", "tol", "out", "jobs",
                 "dump_mesh", "dump_grid"):
        value = getattr(args, name)
        if value is not None:
            data[name] = value
    if args.epsilon is not None:
        data["epsilon"] = [float(v) for v in args.epsilon.split(",") if v]
    if args.y is not None:
        data["y"] = [float(v) for v in args.y.split(",") if v]

    known = {f for f in RunConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    return RunConfig(**data)


def emit_table(results, path) -> None:
    """CSV convergence table; 12 significant digits, LF endings.

    ``results`` is a list of (epsilon, error_ml, cost_ml, error_sl, cost_sl).
    """
    if not results:
        raise ValueError("no results to tabulate")
    lines = ["epsilon,error_ml,cost_ml,error_sl,cost_sl"]
    for row in results:
        lines.append(",".join("%.12g" % v for v in row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _rates(config) -> RateEstimates:
    s = config.s_star if config.s_star is not None else 1.0
    mu = config.mu_star if config.mu_star is not None else 9.75
    return RateEstimates(s_star=s, mu_star=mu)


def run(config: RunConfig) -> int:
    """Execute one configured experiment; returns the process exit code."""
    issues = config.validate()
    if issues:
        for msg in issues:
            print(f"config error: {msg}", file=sys.stderr)
        return 2

    problem = OnePeakProblem()
    reference = problem.reference_expectation()
    outdir = Path(config.out)
    outdir.mkdir(parents=True, exist_ok=True)
    cache = SampleCache()
    flagged = False

    if config.mode == "pathwise":
        result = adaptive_solve(problem, np.asarray(config.y), config.tol,
                                theta=config.theta)
        flagged = result.flagged
        with open(outdir / "pathwise.json", "w", newline="\n") as fh:
            json.dump(result.to_json_dict(), fh, indent=1)
            fh.write("\n")
        lv = result.levels[-1]
        print(f"pathwise y={config.y} tol={config.tol:g}: "
              f"psi={lv.psi:.9g} estimate={lv.estimate:.3g} "
              f"iters={lv.iterations} vertices={lv.vertices}")
        if config.dump_mesh:
            write_mesh_ascii(result.final_mesh, outdir / "mesh.txt")

    elif config.mode == "calibrate":
        rates = calibrate_rates(problem, config.spatial_tols,
                                config.stoch_tols, theta=config.theta,
                                cache=cache, jobs=config.jobs)
        payload = {"s_star": rates.s_star, "mu_star": rates.mu_star,
                   "diagnostics": rates.diagnostics}
        with open(outdir / "rates.json", "w", newline="\n") as fh:
            json.dump(payload, fh, indent=1, default=float)
            fh.write("\n")
        print(f"calibrated: s*={rates.s_star:.3f} mu*={rates.mu_star:.3f}")

    elif config.mode in ("sl", "ml", "sweep"):
        table = []
        for eps in config.epsilon:
            t0 = time.time()
            err_ml = cost_ml = err_sl = cost_sl = float("nan")
            if config.mode in ("ml", "sweep"):
                res = ml_run(problem, eps, q=config.q, K=config.K,
                             C_X=config.C_X, C_Y=config.C_Y,
                             rates=_rates(config), theta=config.theta,
                             cache=cache, jobs=config.jobs)
                flagged = flagged or res.flagged
                err_ml = abs(res.total - reference)
                cost_ml = res.total_cost
                with open(outdir / f"ml-{eps:.3g}.json", "w", newline="\n") as fh:
                    json.dump(res.to_json_dict(reference=reference), fh, indent=1)
                    fh.write("\n")
                if config.dump_grid:
                    state = _coarse_grid_state(problem, res, cache, config)
                    dump_grid_json(state, outdir / f"grid-{eps:.3g}.json")
            if config.mode in ("sl", "sweep"):
                res_sl = sl_run(problem, eps, C_Y=config.C_Y,
                                theta=config.theta, cache=cache,
                                jobs=config.jobs)
                flagged = flagged or res_sl.flagged
                err_sl = abs(res_sl.value - reference)
                cost_sl = res_sl.cost
            table.append((eps, err_ml, cost_ml, err_sl, cost_sl))
            parts = [f"epsilon={eps:.3g}"]
            if config.mode in ("ml", "sweep"):
                parts.append(f"error_ml={err_ml:.3e} cost_ml={cost_ml:.4g}")
            if config.mode in ("sl", "sweep"):
                parts.append(f"error_sl={err_sl:.3e} cost_sl={cost_sl:.4g}")
            parts.append(f"[{time.time() - t0:.1f}s]")
            print("  ".join(parts))
        if config.mode == "sweep":
            emit_table(table, outdir / "convergence.csv")

    return 1 if flagged else 0


def _coarse_grid_state(problem, res, cache, config):
    """Re-run the coarse-level grid cheaply (cache-warm) for --dump-grid."""
    from .multilevel import _LevelIntegrand
    from .smolyak import adaptive_expectation

    g0 = _LevelIntegrand(problem, [res.schedule.eta_X[0]], 0, cache,
                         config.theta, 30, "auto")
    out = adaptive_expectation(
        g0, problem.N, problem.param_box,
        tol_Y=max(res.schedule.eta_Y[res.schedule.K],
                  0.05 * res.schedule.eta_X[0]),
        jobs=config.jobs,
    )
    return out.state


def main(argv=None) -> int:
    try:
        config = _config_from_args(sys.argv[1:] if argv is None else argv)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
