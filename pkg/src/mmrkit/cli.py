"""Command-line entry point.

Subcommands: ``fit`` (one estimator on a grouped CSV), ``dual``
(population-level dual solves from a summary file), ``simulate``
(scenario sweeps), ``evaluate-loco`` (leave-one-group-out metrics), and
``report`` (merge tidy CSV outputs).  Every run writes a manifest next
to its primary output recording the command line, an input digest, the
seed, and wall time.

Exit codes: 0 success, 2 usage error, 3 data error, 4 solver
non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import load_grouped_csv
from .duality import EmpiricalCumulant, mmr_dual_glm, mmr_dual_lm, mmv_dual_lm
from .evaluate import LOCO_METHODS, loco_harness
from .exceptions import ConvergenceError, DataError, MmrkitError
from .families import get_family
from .hiersim import ScenarioConfig, run_scenario
from .solvers import SolverOptions, fit_gdro, fit_mmr, fit_mmv, fit_pooled

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4


def _digest(paths, extra="") -> str:
    sha = hashlib.sha256()
    for path in paths:
        sha.update(str(path).encode())
        try:
            sha.update(Path(path).read_bytes())
        except OSError:
            sha.update(b"<missing>")
    sha.update(extra.encode())
    return sha.hexdigest()


def _write_manifest(primary_out, argv, inputs, seed, started, outputs):
    manifest = {
        "command": ["mmrkit", *argv],
        "config_digest": _digest(inputs, extra=" ".join(argv)),
        "seed": seed,
        "version": __version__,
        "wall_time_s": time.time() - started,
        "outputs": [str(o) for o in outputs],
    }
    path = Path(str(primary_out) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def _parse_opts(raw: str | None) -> SolverOptions:
    if not raw:
        return SolverOptions()
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DataError(f"--opts is not valid JSON: {exc}") from exc
    try:
        return SolverOptions(**data)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad solver options: {exc}") from exc


def _cmd_fit(args, argv) -> int:
    started = time.time()
    dataset = load_grouped_csv(args.data)
    opts = _parse_opts(args.opts)
    loss = "square" if args.loss == "square" else get_family(args.loss)
    if args.method == "mmr":
        result = fit_mmr(dataset, loss, opts)
    elif args.method == "gdro":
        result = fit_gdro(dataset, loss, opts)
    elif args.method == "pooled":
        result = fit_pooled(dataset, loss)
    else:
        if args.loss not in ("square", "logistic"):
            raise DataError("mmv supports --loss square or logistic")
        result = fit_mmv(dataset, loss, opts)
    out = Path(args.out or f"fit_{args.method}.json")
    out.write_text(result.to_json() + "\n", encoding="utf-8")
    _write_manifest(out, argv, [args.data], None, started, [out])
    print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


def _load_summaries(path) -> dict:
    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read summaries {path}: {exc}") from exc


def _cmd_dual(args, argv) -> int:
    started = time.time()
    data = _load_summaries(args.summaries)
    try:
        if args.kind in ("mmr-lm", "mmv-lm"):
            betas = np.asarray(data["betas"], dtype=float)
            sigma = np.asarray(data["sigma"], dtype=float)
            solver = mmr_dual_lm if args.kind == "mmr-lm" else mmv_dual_lm
            solution = solver(betas, sigma)
        else:
            cumulant = EmpiricalCumulant(
                np.asarray(data["x"], dtype=float), get_family(data["family"])
            )
            solution = mmr_dual_glm(np.asarray(data["mus"], dtype=float), cumulant)
    except KeyError as exc:
        raise DataError(f"summaries file is missing key {exc}") from exc
    out = Path(args.out or f"dual_{args.kind}.json")
    out.write_text(solution.to_json() + "\n", encoding="utf-8")
    _write_manifest(out, argv, [args.summaries], None, started, [out])
    print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


def _cmd_simulate(args, argv) -> int:
    started = time.time()
    config = ScenarioConfig.from_json(args.config)
    report = run_scenario(config)
    prefix = Path(args.out_prefix or f"scenario_{config.scenario}")
    csv_path = Path(str(prefix) + ".csv")
    json_path = Path(str(prefix) + ".json")
    report.write_csv(csv_path)
    json_path.write_text(report.aggregate_json() + "\n", encoding="utf-8")
    _write_manifest(csv_path, argv, [args.config], config.seed, started, [csv_path, json_path])
    for error in report.errors:
        print(f"cell error: {error}", file=sys.stderr)
    print(f"wrote {csv_path} and {json_path}", file=sys.stderr)
    return EXIT_OK


def _cmd_evaluate_loco(args, argv) -> int:
    started = time.time()
    dataset = load_grouped_csv(args.data)
    report = loco_harness(
        dataset,
        methods=tuple(args.methods),
        split_ratio=args.split_ratio,
        replications=args.replications,
        seed=args.seed,
    )
    out = Path(args.out or "loco_metrics.csv")
    report.write_csv(out)
    _write_manifest(out, argv, [args.data], args.seed, started, [out])
    for error in report.errors:
        print(f"cell error: {error}", file=sys.stderr)
    print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


def _cmd_report(args, argv) -> int:
    started = time.time()
    indir = Path(args.indir)
    if not indir.is_dir():
        raise DataError(f"{indir} is not a directory")
    sources = sorted(p for p in indir.glob("*.csv") if not p.name.endswith(".merged.csv"))
    if not sources:
        raise DataError(f"no CSV files under {indir}")
    out = Path(args.out or indir / "merged.csv")
    merged = ["source_file,scenario_or_table,row"]
    for source in sources:
        if source.resolve() == out.resolve():
            continue
        with open(source, encoding="utf-8", newline="") as handle:
            lines = handle.read().splitlines()
        if not lines:
            continue
        header, *rest = lines
        merged.append(f"{source.name},header,{header}")
        merged.extend(f"{source.name},data,{line}" for line in rest)
    out.write_text("\n".join(merged) + "\n", encoding="utf-8")
    _write_manifest(out, argv, sources, None, started, [out])
    print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmrkit",
        description="Robust multi-group regression: MMR, GDRO, pooled ERM, MMV.",
    )
    parser.add_argument("--version", action="version", version=f"mmrkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit one estimator on a grouped CSV")
    fit.add_argument("--data", required=True, help="grouped CSV (group,y,x1,...,xp)")
    fit.add_argument("--method", required=True, choices=("mmr", "gdro", "pooled", "mmv"))
    fit.add_argument(
        "--loss", required=True, choices=("square", "gaussian", "logistic", "poisson")
    )
    fit.add_argument("--opts", help="solver options as inline JSON")
    fit.add_argument("--out", help="output JSON path")
    fit.set_defaults(func=_cmd_fit)

    dual = sub.add_parser("dual", help="population-level dual solve from a summaries JSON")
    dual.add_argument("--summaries", required=True, help="JSON with betas+sigma or mus+family+x")
    dual.add_argument("--kind", required=True, choices=("mmr-lm", "mmv-lm", "mmr-glm"))
    dual.add_argument("--out", help="output JSON path")
    dual.set_defaults(func=_cmd_dual)

    simulate = sub.add_parser("simulate", help="run a scenario sweep from a JSON config")
    simulate.add_argument("--config", required=True, help="ScenarioConfig JSON path")
    simulate.add_argument("--out-prefix", help="prefix for the CSV/JSON outputs")
    simulate.set_defaults(func=_cmd_simulate)

    loco = sub.add_parser("evaluate-loco", help="leave-one-group-out AuROC/Brier")
    loco.add_argument("--data", required=True)
    loco.add_argument("--methods", nargs="+", default=list(LOCO_METHODS), choices=LOCO_METHODS)
    loco.add_argument("--split-ratio", type=float, default=0.5)
    loco.add_argument("--replications", type=int, default=1)
    loco.add_argument("--seed", type=int, default=0)
    loco.add_argument("--out", help="output CSV path")
    loco.set_defaults(func=_cmd_evaluate_loco)

    report = sub.add_parser("report", help="merge run CSV outputs into one tidy CSV")
    report.add_argument("--in", dest="indir", required=True)
    report.add_argument("--out", help="merged CSV path")
    report.set_defaults(func=_cmd_report)
    return parser


def run_cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args, list(argv))
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MmrkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))
