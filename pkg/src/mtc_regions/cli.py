"""Command line entry point: ``mtc-regions <stage> --config run.toml``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, default_config_text, load_config
from .pipeline import STAGE_ORDER, PipelineError, run_all, run_stage
from .traffic import SLOT_NAMES


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtc-regions", description=__doc__)
    p.add_argument("stage", choices=STAGE_ORDER + ("all", "init"), help="pipeline stage to run")
    p.add_argument("--config", help="run configuration (TOML)")
    p.add_argument("--seed", type=int)
    p.add_argument("--slot", choices=SLOT_NAMES, help="restrict the run to one time slot")
    p.add_argument("--hops", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--k", type=int, help="number of clusters")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(stage: str, kind: str, message: str, code: int = 1) -> int:
    print(json.dumps({"error": kind, "stage": stage, "message": message}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.stage == "init":
        sys.stdout.write(default_config_text())
        return 0
    if not args.config:
        return _fail(args.stage, "usage", "--config is required", 2)
    overrides = {
        "seed": args.seed,
        "agg_hops": args.hops,
        "agg_margin": args.margin,
        "slots": (args.slot,) if args.slot else None,
        "cluster_k": (args.k,) if args.k else None,
    }
    try:
        cfg = load_config(args.config, **overrides)
        if args.stage == "all":
            run_all(cfg)
        else:
            run_stage(args.stage, cfg)
    except ConfigError as e:
        return _fail(args.stage, "config", str(e), 2)
    except PipelineError as e:
        return _fail(e.stage or args.stage, e.kind, str(e))
    return 0


if __name__ == "__main__":
    sys.exit(main())
