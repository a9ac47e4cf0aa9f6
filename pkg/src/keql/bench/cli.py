"""Command-line entry point ``keql``.

Exit codes: 0 on success, 2 on a configuration error, 3 on a solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..kernels import KernelError, kernel_from_dict
from ..onestep import LMConfig
from ..operators import SolutionModel
from ..opsolve import Constraint, SolveSpec, solve_learned_pde
from ..twostep import EquationModel
from . import datasets as D
from .experiments import ConfigError, SolverFailure, run_experiment, validate_config
from .io import fmt, load_dataset, save_dataset, write_csv, write_json
from .metrics import r_eql, r_filter

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3
GENERATORS = {"duffing": D.gen_duffing, "burgers": D.gen_burgers, "darcy": D.gen_darcy}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="keql", description="Kernel equation learning benchmarks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log LM progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config", help="JSON config file")
    r.add_argument("--seed", type=int, action="append", help="seed (repeatable); overrides the config")
    r.add_argument("--out", help="output directory")
    r.add_argument("--mode", help="two_step, one_step_full or one_step_reduced")
    r.add_argument("--threads", type=int, default=1, help="worker processes over seeds")
    r.add_argument("--no-timing", action="store_true", help="write 0 for wall_seconds (byte-stable reports)")

    g = sub.add_parser("gen", help="generate a dataset")
    g.add_argument("experiment", choices=sorted(GENERATORS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="output directory (default data/<experiment>_seed<S>)")
    g.add_argument("--config", help="JSON file with generator overrides")

    s = sub.add_parser("solve", help="solve a learned equation for new data")
    s.add_argument("model", help="model JSON written by 'keql run'")
    s.add_argument("spec", help="JSON with grid, rhs, constraints and kernel")
    s.add_argument("--out", help="output JSON (default: stdout)")

    e = sub.add_parser("errors", help="evaluate a model on a generated dataset")
    e.add_argument("model", help="model JSON written by 'keql run'")
    e.add_argument("dataset", help="directory written by 'keql gen'")
    e.add_argument("--out", help="output CSV (default: stdout)")
    return p


def _read_json(path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc}") from exc


def _cmd_run(args) -> None:
    overrides = {}
    if args.seed:
        overrides["seeds"] = args.seed
    if args.mode:
        overrides["mode"] = args.mode
    if args.threads < 1:
        raise ConfigError("field 'threads' must be a positive integer")
    outputs = run_experiment(args.config, args.out, overrides, threads=args.threads, timing=not args.no_timing)
    for o in outputs:
        for row in o.rows:
            print(",".join(fmt(v) for v in row))


def _cmd_gen(args) -> None:
    cfg = _read_json(args.config, "config") if args.config else {}
    cfg = validate_config({**cfg, "experiment": args.experiment})
    ds = GENERATORS[args.experiment](cfg, args.seed)
    out = Path(args.out or f"data/{args.experiment}_seed{args.seed}")
    save_dataset(ds, out)
    print(out)


def _equation(model: dict) -> EquationModel:
    if "equation" not in model:
        raise ConfigError("model file lacks field 'equation'")
    return EquationModel.from_dict(model["equation"])


def _cmd_solve(args) -> None:
    model = _read_json(args.model, "model")
    spec = _read_json(args.spec, "solve spec")
    eq = _equation(model)
    for key in ("Y", "rhs", "kernel"):
        if key not in spec:
            raise ConfigError(f"solve spec lacks field '{key}'")
    try:
        kernel = kernel_from_dict(spec["kernel"])
    except KernelError as exc:
        raise ConfigError(f"field 'kernel': {exc}") from exc
    cons = [
        Constraint(np.asarray(c["points"], dtype=float), c["values"], tuple(c["op"]) if c.get("op") is not None else None)
        for c in spec.get("constraints", [])
    ]
    try:
        sspec = SolveSpec(
            eq,
            np.asarray(spec["Y"], dtype=float),
            spec["rhs"],
            cons,
            kernel,
            sigma_b2=float(spec.get("sigma_b2", 1e-8)),
            sigma_f2=float(spec.get("sigma_f2", 1e-8)),
            lam=float(spec.get("lam", 1.0)),
            config=LMConfig(max_iters=int(spec.get("max_iters", 200))),
        )
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid solve spec: {exc}") from exc
    res = solve_learned_pde(sspec)
    doc = {
        "model": res.model.to_dict(),
        "residual": res.residual,
        "relative_residual": res.relative_residual,
        "converged": res.lm.converged,
        "reason": res.lm.reason,
    }
    if args.out:
        write_json(args.out, doc)
    else:
        print(json.dumps(doc, sort_keys=True))


def _cmd_errors(args) -> None:
    model = _read_json(args.model, "model")
    if not Path(args.dataset, "dataset.json").exists():
        raise ConfigError(f"no dataset.json in {args.dataset}")
    ds = load_dataset(args.dataset)
    models = [SolutionModel.from_dict(m) for m in model.get("models", [])]
    rows = []
    if models:
        if ds.experiment == "darcy":
            fns = ds.truth["train_functions"][: len(models)]
            truths = [fn(ds.test_points) for fn in fns]
        else:
            truths = [ds.truth["u_test"]]
        ests = [m.evaluate(ds.test_points) for m in models[: len(truths)]]
        rows.append(["filter", "train", r_filter(truths, ests)])
    if "equation" in model and ds.experiment == "darcy":
        eq = _equation(model)
        for split in ("train", "ID", "OOD"):
            S, f = ds.truth[f"{split}_features"], ds.truth[f"{split}_f"]
            rows.append(["eql", split, r_eql(list(f), [eq(Si) for Si in S])])
    if args.out:
        write_csv(args.out, ["metric", "split", "value"], rows)
    else:
        print("metric,split,value")
        for r in rows:
            print(",".join(fmt(v) for v in r))


COMMANDS = {"run": _cmd_run, "gen": _cmd_gen, "solve": _cmd_solve, "errors": _cmd_errors}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"keql: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"keql: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
