"""Command line entry point: ``dischargepred <stage> --config run.ini --out DIR``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence, 5 upstream stage missing.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from threadpoolctl import threadpool_limits

from .config import MODELS, default_config, load_config
from .errors import ConfigError, DataError, StageOrderError, TrainingDivergence
from .pipeline import STAGE_FILTER, run_pipeline, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_MISSING_STAGE = 0, 2, 3, 4, 5


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--out", help="output directory (overrides [run] out)")
    common.add_argument("--threads", type=int, help="worker cap; results do not depend on it")
    common.add_argument("--log-level", default="INFO")

    p = argparse.ArgumentParser(prog="dischargepred", description="24h discharge prediction pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("synth", "cohort", "featurize", "utility"):
        sub.add_parser(name, parents=[common])
    for name in ("train", "evaluate", "pipeline"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--model", choices=MODELS, help="overrides [run] model")
    return p


def _setup_logging(level: str):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s [%(stage)s] %(name)s: %(message)s"))
    handler.addFilter(STAGE_FILTER)
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.log_level)
    log = logging.getLogger("dischargepred.cli")
    try:
        if args.config:
            cfg = load_config(args.config, require_seed=args.seed is None)
        elif args.seed is not None:
            cfg = default_config(args.seed)
        else:
            raise ConfigError("either --config or --seed is required")
        cfg = cfg.with_overrides(seed=args.seed, out=args.out, threads=args.threads,
                                 model=getattr(args, "model", None))
        out = cfg["run"].get("out")
        if not out:
            raise ConfigError("no output directory: pass --out or set [run] out")
        threads = cfg["run"]["threads"]
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        model = cfg["run"]["model"]
        with threadpool_limits(1):
            if args.command == "pipeline":
                result = run_pipeline(cfg, out, model, threads)
            else:
                result = run_stage(args.command, cfg, out, model, threads)
        print(json.dumps({"command": args.command, "out": str(out), "result": result}, sort_keys=True, default=str))
        return EXIT_OK
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except StageOrderError as exc:
        log.error("%s", exc)
        return EXIT_MISSING_STAGE
    except TrainingDivergence as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGENCE
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
