"""Command-line entry point: ``wiser <stage> --config <path> [options]``.

Exit codes: 0 success, 2 configuration or input-data error, 3 pipeline-order
error (a prerequisite stage has not been run), 4 numeric failure during
training, 1 any other failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ABLATIONS, parse_config
from .errors import ConfigError, DataError, NumericError, ParseError, PipelineError, WiserError
from .pipeline import STAGES, Pipeline, grid_search

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_ORDER, EXIT_NUMERIC = 0, 1, 2, 3, 4

GRID_HELP = ("Sweep the grid.* candidate lists and pick the best cell per drug by AUROC on "
             "held-out cell-line folds. Selection deliberately avoids the labeled patient "
             "cohort so that the reported patient AUROC stays an honest test score.")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wiser", description="Weakly supervised drug-response transfer "
                                "from cell lines to patients.")
    sub = p.add_subparsers(dest="stage", required=True, metavar="stage")
    for stage in STAGES + ("run-all", "grid-search"):
        sp = sub.add_parser(stage, help=GRID_HELP if stage == "grid-search" else f"run the {stage} stage",
                            description=GRID_HELP if stage == "grid-search" else None)
        sp.add_argument("--config", required=True, help="run configuration file")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--drugs", help="comma-separated drug names (override run.drugs)")
        sp.add_argument("--ablate", action="append", choices=ABLATIONS,
                        help="ablation flag; may be repeated")
        sp.add_argument("--budget", type=float, help="subset budget in percent (override subset.budget)")
        sp.add_argument("--output-dir", help="override run.output_dir")
        sp.add_argument("--force", action="store_true", help="recompute even if artifacts exist")
        sp.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _apply_overrides(cfg, args):
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.drugs:
        over["drugs"] = tuple(d.strip() for d in args.drugs.split(",") if d.strip())
    if args.ablate:
        over["ablate"] = tuple(dict.fromkeys(args.ablate))
    if args.budget is not None:
        over["budget"] = args.budget
    if args.output_dir:
        over["output_dir"] = args.output_dir
    return cfg.with_overrides(**over) if over else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(parse_config(args.config), args)
        if args.stage == "grid-search":
            rows, best, out = grid_search(cfg)
            print(out / "table.tsv")
            for drug, r in best.items():
                print(f"{drug}\tcell {r['cell']}\tval_auroc {r['val_auroc']:.4f}\tauroc {r['auroc']:.4f}")
        else:
            for path in Pipeline(cfg, force=args.force).run(args.stage):
                print(path)
    except (ConfigError, ParseError, DataError) as exc:
        print(f"wiser: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        print(f"wiser: error: {exc}", file=sys.stderr)
        return EXIT_ORDER
    except NumericError as exc:
        print(f"wiser: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except WiserError as exc:
        print(f"wiser: error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
