"""Command-line entry point: ``dosetrial <stage> CONFIG``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
Set DOSETRIAL_WORKERS to fit models in parallel processes.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

_HELP = {
    "simulate": "write a synthetic study into <output>/data",
    "analyze": "fit every configured model (order selection, final fit)",
    "contrast": "EMMs, paired contrasts and condition slopes from fitted models",
    "trajectory": "liking/wanting profiles, proportion and decoupling tests",
    "psychometrics": "polychoric EFA, anchored scores, preference clusters",
    "plot": "SVG dose-response curves from the EMM tables",
    "report": "attrition tests, hierarchical FDR over all tests, run manifest",
    "run": "all stages into a fresh output directory",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dosetrial", description=__doc__.splitlines()[0])
    p.add_argument("--print-schema", action="store_true", help="list every config key and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")
    for name, text in _HELP.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("config", help="YAML analysis config")
        sp.add_argument("-o", "--output", help="artifact directory (overrides output_dir)")
    return p


def _setup_logging(verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.print_schema:
        from .config import schema_text
        sys.stdout.write(schema_text())
        return EXIT_OK
    if args.command is None:
        build_parser().print_help(sys.stderr)
        return EXIT_CONFIG
    _setup_logging(args.verbose)
    try:
        from .config import load_config
        from .pipeline import run_pipeline, run_stage
        cfg = load_config(args.config)
        root = Path(args.output or cfg.output_dir)
        if args.command == "run":
            out = run_pipeline(cfg, root)
        else:
            out = run_stage(args.command, cfg, root)
        print(out)
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
