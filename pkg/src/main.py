import argparse
import logging
import sys
from pathlib import Path

from src.cli.commands import COMMANDS, RunContext, cmd_lds_eval
from src.config.config import LOG_LEVEL, OUT_DIR, WORKERS
from src.config.schema import parse_config, with_seed_override
from src.utils.errors import ConfigurationError, DiffInfError

logger = logging.getLogger("diffinf")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffinf",
        description="Influence functions for toy diffusion models: curvature, scores and benchmarks.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, type=Path, help="JSON run configuration")
    parser.add_argument("--workers", type=int, default=WORKERS)
    parser.add_argument("--out", type=Path, default=Path(OUT_DIR), help="artifact directory")
    parser.add_argument("--seed-override", type=int, default=None, help="replace training.seed")
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    parser.add_argument("--predictions", type=Path, default=None, help="lds-eval: CSV of predicted deltas")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else LOG_LEVEL,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        if args.workers < 1:
            raise ConfigurationError("--workers must be >= 1", [("--workers", str(args.workers))])
        cfg = with_seed_override(parse_config(args.config), args.seed_override)
        ctx = RunContext(cfg, args.out, workers=args.workers, progress=not args.quiet)
        if args.command == "lds-eval":
            summary = cmd_lds_eval(ctx, args.predictions)
        else:
            summary = COMMANDS[args.command](ctx)
    except ConfigurationError as e:
        logger.error("%s", e)
        for path, message in e.violations:
            print(f"  {path}: {message}", file=sys.stderr)
        return 2
    except DiffInfError as e:
        logger.error("%s failed: %s", args.command, e)
        return 1

    print(f"{args.command} completed successfully")
    for key, value in summary.items():
        print(f"  {key}: {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
