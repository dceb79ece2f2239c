"""Command-line interface: ``margquad fit | mrp | gen``."""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import replace

from . import __version__
from .errors import MargquadError
from .mrp import PoststratTable, mrp_combine
from .pipeline import load_config, read_csv, result_to_json, run_fit, summary_from_json
from .synth import gen_abortion, gen_rats, gen_survey


def _dump(doc, path):
    text = json.dumps(doc, indent=2, sort_keys=False, allow_nan=False) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def cmd_fit(args) -> int:
    if args.deterministic:
        os.environ["MARGQUAD_DETERMINISTIC"] = "1"
    cfg = load_config(args.config)
    columns, data = read_csv(args.data)
    table = PoststratTable.read_csv(args.table) if args.table else None
    if args.general:
        cfg = replace(cfg, force_general=True)
    res = run_fit(columns, data, cfg, threads=args.threads, table=table, check=args.check)
    _dump(result_to_json(res, standardized_output=args.standardized), args.out)
    return 0


def cmd_mrp(args) -> int:
    with open(args.summary, encoding="utf-8") as fh:
        doc = json.load(fh)
    summary, names = summary_from_json(doc)
    table = PoststratTable.read_csv(args.table)
    est = mrp_combine(summary, table, names)
    if args.out in (None, "-"):
        est.write_csv("/dev/stdout")
    else:
        est.write_csv(args.out)
    return 0


def cmd_gen(args) -> int:
    if args.dataset == "rats":
        ds = gen_rats(J=args.rats, T=args.weeks, seed=args.seed)
    elif args.dataset == "survey":
        ds = gen_survey(cells=args.cells, respondents=args.respondents, seed=args.seed)
    else:
        ds = gen_abortion(n=args.respondents, seed=args.seed)
    ds.write_csv(args.out)
    if args.config:
        ds.write_config(args.config)
    if args.table:
        if ds.table is None:
            raise MargquadError(f"the {args.dataset} generator has no poststratification table")
        ds.table.write_csv(args.table)
    return 0


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"margquad: warning: {message}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="margquad", description="Posterior moments of hierarchical linear models by quadrature.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to a CSV dataset")
    f.add_argument("--data", required=True, help="numeric CSV with a header row")
    f.add_argument("--config", required=True, help="TOML file with column roles and options")
    f.add_argument("--out", default="-", help="JSON output path (default: stdout)")
    f.add_argument("--table", help="poststratification table; adds the covariance blocks it needs")
    f.add_argument("--threads", type=int, default=None, help="worker threads for the outer integral")
    f.add_argument("--deterministic", action="store_true", help="fixed reduction order, no timing in output")
    f.add_argument("--check", action="store_true", help="refit with doubled nodes and report the differences")
    f.add_argument("--standardized", action="store_true", help="also report standardized-unit moments")
    f.add_argument("--general", action="store_true", help="skip the structured fast path")
    f.set_defaults(func=cmd_fit)

    m = sub.add_parser("mrp", help="poststratify a fit summary")
    m.add_argument("--summary", required=True, help="JSON written by 'margquad fit'")
    m.add_argument("--table", required=True, help="CSV: cell column plus one column per coefficient")
    m.add_argument("--out", default="-", help="CSV output path (default: stdout)")
    m.set_defaults(func=cmd_mrp)

    g = sub.add_parser("gen", help="write a synthetic dataset")
    g.add_argument("dataset", choices=("rats", "survey", "abortion"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="CSV output path")
    g.add_argument("--config", help="also write a matching TOML fit configuration")
    g.add_argument("--table", help="also write the poststratification table (survey only)")
    g.add_argument("--rats", type=int, default=100)
    g.add_argument("--weeks", type=int, default=20)
    g.add_argument("--cells", type=int, default=351)
    g.add_argument("--respondents", type=int, default=None)
    g.set_defaults(func=cmd_gen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen" and args.respondents is None:
        args.respondents = {"rats": 0, "survey": 135501, "abortion": 5000}[args.dataset]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            warnings.showwarning = _show_warning
            return args.func(args)
    except (MargquadError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"margquad: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
