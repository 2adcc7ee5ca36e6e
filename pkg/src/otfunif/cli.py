"""Command line front end.

``run`` computes lower bounds on the transient distribution and writes one
CSV per checkpoint plus ``summary.json``; ``verify`` compares a run against
the brute-force oracle on a finite box; ``export`` prints a built-in model as
a model file.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import DominationError, EmptyDistributionError, SparseDistribution
from .model import BUILTINS, ModelError, ModelSpec, builtin_model, load_model, model_to_dict
from .oracle import StateBox, integrate_forward, transient_homogeneous, verify_underapprox
from .stepper import METHODS, RunTimeout, run

log = logging.getLogger("otfunif")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_FAIL = 3
EXIT_INCONCLUSIVE = 4


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def _probability(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {v}")
    return v


def _threshold(text: str) -> float:
    v = float(text)
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1), got {v}")
    return v


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _r_star(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"R* must be at least 1, got {v}")
    return v


def _add_model_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", type=Path, help="model file (JSON)")
    src.add_argument("--builtin", choices=sorted(BUILTINS), help="built-in case study")


def _add_engine_args(p: argparse.ArgumentParser, r_star_required: bool) -> None:
    p.add_argument("--r-star", type=_r_star, required=r_star_required, default=None if r_star_required else 5,
                   help="desired right truncation point per window")
    p.add_argument("--epsilon", type=_probability, default=1e-10, help="Poisson tail bound per window")
    p.add_argument("--delta", type=_threshold, default=1e-15, help="significance threshold for pruning")
    p.add_argument("--findmax", choices=METHODS, default="monotone", help="dominating-state strategy")
    p.add_argument("--ell", type=_positive, default=4.0, help="standard deviations for the moments strategy")
    p.add_argument("--rho", type=_positive, default=None, help="pruning budget; windows above rho*dt/t_max are redone")
    p.add_argument("--time-limit", type=_positive, default=None, help="abort after this many seconds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otfunif", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="compute lower bounds on the transient distribution")
    _add_model_args(p)
    p.add_argument("--t-max", type=float, default=None, help="override the model horizon (seconds)")
    _add_engine_args(p, r_star_required=True)
    cps = p.add_mutually_exclusive_group()
    cps.add_argument("--checkpoints", type=_floats, default=None, help="comma separated output times")
    cps.add_argument("--every", type=_positive, default=None, help="output interval (seconds)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--no-steps", action="store_true", help="leave the per-window records out of summary.json")

    v = sub.add_parser("verify", help="check the lower bound against a brute-force solution on a box")
    _add_model_args(v)
    v.add_argument("--box", type=_ints, required=True, help="inclusive upper bounds per species")
    v.add_argument("--t", type=float, required=True, help="time point")
    v.add_argument("--tol", type=_positive, default=1e-10, help="oracle integration tolerance")
    v.add_argument("--slack", type=float, default=1e-9, help="allowed excess p_hat - p_ref")
    v.add_argument("--max-boundary", type=float, default=1e-12,
                   help="boundary mass above which the comparison is inconclusive")
    _add_engine_args(v, r_star_required=False)
    v.add_argument("--out", type=Path, default=None, help="write the report as JSON")

    e = sub.add_parser("export", help="print a built-in model as a model file")
    e.add_argument("name", choices=sorted(BUILTINS))
    return parser


def load_spec(args) -> ModelSpec:
    if args.model is not None:
        return load_model(args.model)
    return builtin_model(args.builtin)


def _checkpoints(args, horizon: float) -> list[float] | None:
    if args.checkpoints is not None:
        return sorted(set(args.checkpoints) | {horizon})
    if args.every is not None:
        k = int(math.floor(horizon / args.every + 1e-9))
        return sorted({round(i * args.every, 12) for i in range(1, k + 1)} | {horizon})
    return None


def _time_label(t: float) -> str:
    return f"{t:.12g}"


def write_distribution(path: Path, p: SparseDistribution, n: int) -> None:
    """CSV with states in lexicographic order and full precision probabilities."""
    states, probs = p.to_arrays(n)
    header = ",".join(f"x_{k + 1}" for k in range(n)) + ",probability"
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for x, v in zip(states, probs):
            fh.write(",".join(str(int(c)) for c in x) + f",{v:.17e}\n")


def read_distribution(path: Path) -> SparseDistribution:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return SparseDistribution()
    return SparseDistribution.from_arrays(data[:, :-1].astype(np.int64), data[:, -1])


def _progress(t, windows, size):
    log.info("t=%.6g windows=%d support=%d", t, windows, size)


def cmd_run(args) -> int:
    spec = load_spec(args)
    if args.t_max is not None:
        spec = spec.with_horizon(args.t_max)
    cps = _checkpoints(args, spec.horizon)
    args.out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    result = run(
        spec,
        args.r_star,
        epsilon=args.epsilon,
        delta_threshold=args.delta,
        method=args.findmax,
        ell=args.ell,
        checkpoints=cps,
        rho_budget=args.rho,
        time_limit=args.time_limit,
        progress=_progress if args.verbose else None,
    )
    elapsed = time.perf_counter() - started
    files = []
    for t, p in result.distributions:
        name = f"distribution_t{_time_label(t)}.csv"
        write_distribution(args.out / name, p, spec.n)
        files.append({"t": t, "file": name, "mass": p.mass(), "support": len(p)})
    ledger = result.ledger
    summary = {
        "model": spec.name,
        "t_max": spec.horizon,
        "config": {
            "r_star": args.r_star,
            "epsilon": args.epsilon,
            "delta": args.delta,
            "findmax": args.findmax,
            "ell": args.ell,
            "rho": args.rho,
        },
        "total_error": ledger.total,
        "one_minus_mass": 1.0 - result.final.mass(),
        "max_window_size": ledger.max_window_size,
        "loss_split_percent": ledger.split_percent(),
        "losses": {"bounding": ledger.bounding_loss, "poisson": ledger.poisson_loss, "prune": ledger.prune_loss},
        "windows": len(ledger),
        "retries": result.retries,
        "fallbacks": result.fallbacks,
        "runtime_seconds": elapsed,
        "checkpoints": files,
        "steps": [] if args.no_steps else [r.as_dict() for r in ledger.records],
    }
    with open(args.out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1)
        fh.write("\n")
    split = summary["loss_split_percent"]
    print(
        f"{spec.name}: t_max={spec.horizon:g} total_error={ledger.total:.3e} max|S|={ledger.max_window_size} "
        f"min%={split['min']:.1f} poisson%={split['poisson']:.1f} prune%={split['prune']:.1f} "
        f"windows={len(ledger)} time={elapsed:.1f}s"
    )
    return EXIT_OK


def cmd_verify(args) -> int:
    spec = load_spec(args).with_horizon(args.t)
    box = StateBox(tuple(args.box))
    if box.n != spec.n:
        raise ModelError(f"box has {box.n} entries, model has {spec.n} species")
    for x, _ in spec.initial:
        if not box.contains(x):
            raise ModelError(f"initial state {x} lies outside the box")
    result = run(
        spec,
        args.r_star,
        epsilon=args.epsilon,
        delta_threshold=args.delta,
        method=args.findmax,
        ell=args.ell,
        rho_budget=args.rho,
        time_limit=args.time_limit,
    )
    p_hat = result.final
    if spec.homogeneous:
        ref = transient_homogeneous(dict(spec.initial), args.t, box, spec)
    else:
        ref = integrate_forward(dict(spec.initial), 0.0, args.t, box, spec, args.tol)
    rep = verify_underapprox(p_hat, ref, args.slack)
    ledger_gap = abs((1.0 - p_hat.mass()) - result.ledger.total)
    deviation = max((abs(p_hat[x] - ref[x]) for x in set(p_hat) | set(ref.as_dict())), default=0.0)
    if ref.boundary_mass > args.max_boundary:
        status, code = "inconclusive", EXIT_INCONCLUSIVE
    elif rep.passed:
        status, code = "pass", EXIT_OK
    else:
        status, code = "fail", EXIT_FAIL
    report = {
        "status": status,
        "model": spec.name,
        "t": args.t,
        "box": list(box.upper),
        "boundary_mass": ref.boundary_mass,
        "max_boundary": args.max_boundary,
        "slack": args.slack,
        "violations": len(rep.violations),
        "worst_excess": rep.worst,
        "worst_states": [{"state": list(x), "p_hat": a, "p_ref": b} for x, a, b in rep.violations[:10]],
        "max_abs_deviation": deviation,
        "total_error": result.ledger.total,
        "ledger_gap": ledger_gap,
        "checked_states": rep.checked,
    }
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(report, indent=1) + "\n")
    print(
        f"{status}: worst excess {rep.worst:.3e} over {rep.checked} states "
        f"({len(rep.violations)} above slack {args.slack:g}), boundary mass {ref.boundary_mass:.3e}, "
        f"max deviation {deviation:.3e}, total error {result.ledger.total:.3e}"
    )
    return code


def cmd_export(args) -> int:
    json.dump(model_to_dict(builtin_model(args.name)), sys.stdout, indent=1)
    sys.stdout.write("\n")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handler = {"run": cmd_run, "verify": cmd_verify, "export": cmd_export}[args.command]
    try:
        return handler(args)
    except (ModelError, DominationError, EmptyDistributionError, OverflowError, RunTimeout, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
