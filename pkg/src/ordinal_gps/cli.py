"""Command-line entry point.

Exit codes: 0 success, 2 validation failure, 3 model non-convergence or
separation, 4 estimation stopped by the balance gate.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config
from .errors import OrdinalGPSError
from .pipeline import run_analysis, run_simulation

logger = logging.getLogger("ordinal_gps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ordinal-gps",
        description="Pairwise effects of an ordinal exposure by balancing-score subclassification.",
    )
    sub = parser.add_subparsers(dest="mode", required=True)
    helps = {
        "analyze": "design, balance audit and effect estimation",
        "audit": "design and balance audit only (outcomes are not read)",
        "simulate": "Monte Carlo comparison of estimators",
    }
    for mode, text in helps.items():
        p = sub.add_parser(mode, help=text, description=text)
        p.add_argument("--config", required=True, type=Path, help="YAML or JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", type=Path, default=None, help="output directory (default: stdout)")
        p.add_argument("--format", choices=("json", "markdown"), default="json")
        p.add_argument("--workers", type=int, default=1, help="processes for simulation replications")
        p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _emit(text: str, out: Path | None, name: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text, encoding="utf-8")
    logger.info("wrote %s", out / name)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        config = load_config(args.config).with_mode(args.mode).with_seed(args.seed)
        if args.mode == "simulate":
            if args.workers < 1:
                raise OrdinalGPSError("--workers must be at least 1")
            _, report = run_simulation(config, workers=args.workers)
        else:
            report = run_analysis(config)
    except OrdinalGPSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    if args.format == "json":
        _emit(report.to_json(), args.out, f"{args.mode}.json")
    else:
        _emit(report.to_markdown(), args.out, f"{args.mode}.md")
    for note in report.notes:
        logger.warning(note)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
