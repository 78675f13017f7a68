"""Command line entry point: ``dptabicl <verb> ...``.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 completion backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import harness
from .accountant import SpendLedger, amplify, split_uniform
from .data import Dataset, Provenance, Record, Schema, fit_binarizer, load_csv, load_schema, write_csv
from .errors import BackendError, DPTabICLError
from .gdp import GroupByPlan, gdp_demonstrations
from .ldp import (
    BudgetAllocation,
    FrequencyTensor,
    ReconstructedDistribution,
    ldp_demonstrations,
    observed_frequencies,
    perturb_dataset,
    reconstruct_joint,
)
from .serialize import render_query
from .stats import paired_t_test

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3
SIDECAR_SUFFIX = ".meta.yaml"

logger = logging.getLogger("dptabicl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _schema(args) -> Schema:
    if getattr(args, "schema", None):
        return load_schema(args.schema)
    if getattr(args, "dataset", None):
        return harness.builtin_schema(args.dataset)
    raise UsageError("pass --schema FILE or --dataset ID")


def _out(path, text):
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_perturb(args):
    """Binarize a raw CSV and apply randomized response to every cell."""
    raw = load_csv(args.data, _schema(args))
    binarizer = fit_binarizer(raw)
    binary = binarizer.transform(raw)
    schema = binarizer.schema
    eps = harness.parse_epsilon(args.epsilon)
    allocation = BudgetAllocation(tuple(split_uniform(eps, len(schema.columns))))
    perturbed = perturb_dataset(binary, allocation.matrices(schema), np.random.default_rng(args.seed))
    write_csv(perturbed, args.out)
    meta = {
        "provenance": Provenance.PERTURBED.value,
        "epsilon": harness.format_epsilon(eps),
        "allocation": [harness.format_epsilon(e) for e in allocation.per_feature],
        "thresholds": binarizer.thresholds,
        "schema": schema.to_config(),
    }
    Path(str(args.out) + SIDECAR_SUFFIX).write_text(yaml.safe_dump(meta, sort_keys=False), encoding="utf-8")
    print(f"wrote {len(perturbed)} perturbed records to {args.out}", file=sys.stderr)


def _load_perturbed(path):
    sidecar = Path(str(path) + SIDECAR_SUFFIX)
    if not sidecar.is_file():
        raise UsageError(f"{path} has no {SIDECAR_SUFFIX} sidecar; produce it with 'dptabicl perturb'")
    meta = yaml.safe_load(sidecar.read_text(encoding="utf-8"))
    schema = Schema.from_config(meta["schema"])
    table = load_csv(path, schema)
    allocation = BudgetAllocation(tuple(harness.parse_epsilon(e) for e in meta["allocation"]))
    return Dataset(schema, table.data, Provenance.PERTURBED), allocation


def cmd_reconstruct(args):
    """Estimate the joint distribution of a perturbed CSV and write it as JSON."""
    perturbed, allocation = _load_perturbed(args.perturbed)
    dist = reconstruct_joint(observed_frequencies(perturbed), allocation.matrices(perturbed.schema), perturbed.schema)
    payload = {
        "schema": dist.schema.to_config(),
        "dims": list(dist.cells.shape),
        "cells": [float(x) for x in dist.cells.ravel()],
    }
    _out(args.out, json.dumps(payload, indent=1) + "\n")


def _load_distribution(path) -> ReconstructedDistribution:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    schema = Schema.from_config(payload["schema"])
    cells = np.asarray(payload["cells"], dtype=float).reshape(payload["dims"])
    return ReconstructedDistribution(FrequencyTensor(cells / cells.sum()), schema)


def _print_demos(demos, out):
    _out(out, "\n\n".join(d.text for d in demos) + "\n")


def cmd_demos_ldp(args):
    dist = _load_distribution(args.distribution)
    template = harness.resolve_template(args.template, dist.schema, "ldp")
    template.check(dist.schema)
    _print_demos(ldp_demonstrations(dist, args.k, np.random.default_rng(args.seed), template), args.out)


def cmd_demos_gdp(args):
    schema = _schema(args)
    raw = load_csv(args.data, schema)
    template = harness.resolve_template(args.template, schema, "gdp")
    template.check(schema)
    eps = harness.parse_epsilon(args.epsilon)
    n = args.n_target or harness.default_n_target(len(raw))
    ledger = SpendLedger()
    demos = gdp_demonstrations(
        raw, n, GroupByPlan.for_schema(schema, args.k), split_uniform(eps, len(schema.columns)),
        np.random.default_rng(args.seed), template, ledger,
    )
    ledger.assert_total(amplify(eps, n, len(raw)))
    _print_demos(demos, args.out)
    print(f"privacy spent: epsilon' = {ledger.total:.6g} (n={n}, N={len(raw)})", file=sys.stderr)


def _parse_values(pairs, schema: Schema) -> Record:
    given = {}
    for pair in pairs:
        name, sep, value = pair.partition("=")
        if not sep:
            raise UsageError(f"expected NAME=VALUE, got {pair!r}")
        given[name] = value
    missing = [f.name for f in schema.features if f.name not in given]
    if missing:
        raise UsageError(f"missing values for {missing}")
    vals = tuple(given[f.name] if f.is_categorical else float(given[f.name]) for f in schema.features)
    return Record(vals, None)


def cmd_render(args):
    """Render the query text for one record given as NAME=VALUE pairs."""
    schema = _schema(args)
    if args.pipeline == "ldp" and args.binary_schema:
        schema = load_schema(args.binary_schema)
    template = harness.resolve_template(args.template, schema, args.pipeline)
    _out(args.out, render_query(template, _parse_values(args.values, schema), schema) + "\n")


def cmd_run(args):
    config = harness.ExperimentConfig.load(args.config)
    overrides = {
        "seed": args.seed,
        "trials": args.trials,
        "backend": args.backend,
        "max_queries": args.max_queries,
        "epsilons": tuple(args.epsilons.split(",")) if args.epsilons else None,
        "ks": tuple(int(k) for k in args.ks.split(",")) if args.ks else None,
        "allow_live": True if args.live else None,
        "record_wall_time": False if args.no_wall_time else None,
    }
    config = config.with_overrides(**overrides)
    report = harness.run_grid(config, out_dir=args.out, resume=args.resume)
    sys.stdout.write(report.to_text())


def cmd_report(args):
    report = harness.TrialReport.from_csv(args.csv)
    sys.stdout.write(report.to_text())


def cmd_amplify(args):
    eps = harness.parse_epsilon(args.epsilon)
    print(f"{amplify(eps, args.n, args.N).epsilon:.6f}")


def _series(text) -> list[float]:
    p = Path(text)
    if p.is_file():
        text = p.read_text(encoding="utf-8")
    return [float(x) for x in text.replace("\n", ",").split(",") if x.strip()]


def cmd_ttest(args):
    t, p = paired_t_test(_series(args.a), _series(args.b))
    print(f"t={t:.6f} p={p:.6g}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dptabicl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def with_schema(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--schema", help="schema YAML file")
        g.add_argument("--dataset", help="built-in schema id (e.g. blood)")

    p = sub.add_parser("perturb", help="binarize and randomize a raw CSV")
    with_schema(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epsilon", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("reconstruct", help="estimate the joint distribution of a perturbed CSV")
    p.add_argument("--perturbed", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("demos-ldp", help="sample demonstrations from a reconstructed distribution")
    p.add_argument("--distribution", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--template")
    p.add_argument("--out")
    p.set_defaults(func=cmd_demos_ldp)

    p = sub.add_parser("demos-gdp", help="build aggregate demonstrations from a raw CSV")
    with_schema(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epsilon", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--n-target", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--template")
    p.add_argument("--out")
    p.set_defaults(func=cmd_demos_gdp)

    p = sub.add_parser("render", help="render a query record")
    with_schema(p)
    p.add_argument("--pipeline", choices=["ldp", "gdp"], default="gdp")
    p.add_argument("--binary-schema", help="binarized schema (LDP), e.g. from a perturb sidecar")
    p.add_argument("--template")
    p.add_argument("--out")
    p.add_argument("values", nargs="+", metavar="NAME=VALUE")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("run", help="run an experiment grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory for report.csv and report.txt")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--epsilons", help="comma-separated, 'inf' allowed")
    p.add_argument("--ks", help="comma-separated")
    p.add_argument("--max-queries", type=int)
    p.add_argument("--backend", help="mock:echo-majority, mock:fixed:No, mock:oracle or http")
    p.add_argument("--live", action="store_true", help="allow the http backend")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--no-wall-time", action="store_true", help="write wall_ms as 0 for byte-stable reports")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="summarize a report CSV")
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("amplify", help="budget after Poisson subsampling")
    p.add_argument("--epsilon", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--N", type=int, required=True)
    p.set_defaults(func=cmd_amplify)

    p = sub.add_parser("ttest", help="paired two-tailed t-test")
    p.add_argument("--a", required=True, help="comma-separated values or a file")
    p.add_argument("--b", required=True, help="comma-separated values or a file")
    p.set_defaults(func=cmd_ttest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"dptabicl {args.verb}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        print(f"dptabicl {args.verb}: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (DPTabICLError, ValueError, OSError, KeyError) as exc:
        print(f"dptabicl {args.verb}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
