"""``tgopt`` command line: run one pipeline stage (or all of them).

Exit codes: 0 success, 2 configuration or input error, 3 missing
prerequisite stage, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import (
    ConfigInvalid,
    DataError,
    InvalidSpec,
    MissingPrerequisiteStage,
    NumericalDivergence,
    TgoptError,
)
from .pipeline import STAGES, Pipeline, RunConfig

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("tgopt")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tgopt", description="Task grouping experiment pipeline.")
    p.add_argument("stage", choices=[*STAGES, "all"], help="pipeline stage to run ('all' runs every stage)")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--jobs", type=int, default=1, help="parallel trainings within a stage")
    p.add_argument("--seed", type=int, default=None, help="override the global seed")
    p.add_argument("--budget", type=int, default=None, help="MTL training budget for the search")
    p.add_argument("--start-rank", type=int, choices=(1, 2, 3), default=None,
                   help="start the search from the 1st/2nd/3rd best sampled partition")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config).with_overrides(args.seed, args.budget, args.start_rank)
        pipe = Pipeline(cfg, jobs=args.jobs, log=log.info)
        for stage in (STAGES if args.stage == "all" else (args.stage,)):
            pipe.run(stage)
    except (ConfigInvalid, DataError, InvalidSpec) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingPrerequisiteStage as exc:
        log.error("missing prerequisite: %s", exc)
        return EXIT_PREREQ
    except NumericalDivergence as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except TgoptError as exc:
        log.error("error: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
