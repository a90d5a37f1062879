"""Command-line front door: ``dha-forge <stage> --config run.json``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error, 3 I/O
error (including refusing to overwrite outputs without ``--force``), 4 crash
ids without exactly two driver rows, 5 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .crashdata import ConfigError
from .pipeline import (COMMANDS, EXIT_CONFIG, EXIT_FAILURE, EXIT_IO, EXIT_OK, PipelineError, Run,
                       apply_overrides, config_from_json, default_config_json, override_seeds)

log = logging.getLogger("dha_forge")

THREADS_ENV = "DHA_FORGE_THREADS"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dha-forge",
        description="Synthetic two-vehicle crash narratives, micro-LM classification and "
                    "counterfactual probability shifts.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate", "sample paired driver records and filter them"),
        ("prepare", "pair, label, render prompts, split and build the vocabulary"),
        ("train", "LoRA fine-tune the micro LM on the train split"),
        ("eval", "score the micro LM and the TF-IDF baseline on the test split"),
        ("shift", "run the three counterfactual scenarios on the test split"),
        ("report", "collect stage manifests into a run manifest"),
        ("all", "run every stage in order"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="pipeline config JSON (defaults apply if omitted)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                       help="override a config entry, e.g. train.steps=200 (repeatable)")
        p.add_argument("--seed-override", type=int, metavar="N",
                       help="replace every seed in the config by N")
        p.add_argument("-v", "--verbose", action="store_true")
    dump = sub.add_parser("default-config", help="print the default config JSON")
    dump.add_argument("-v", "--verbose", action="store_true")
    return parser


def _set_threads() -> None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    import torch

    torch.set_num_threads(n)


def load_run(args: argparse.Namespace) -> Run:
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        root = args.config.resolve().parent
    else:
        data, root = {}, Path.cwd()
    data = apply_overrides(data, args.overrides)
    if args.seed_override is not None:
        data = override_seeds(data, args.seed_override)
    return Run(config_from_json(data), root, force=args.force)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "default-config":
        print(json.dumps(default_config_json(), indent=2, sort_keys=True))
        return EXIT_OK
    try:
        _set_threads()
        run = load_run(args)
        stages = list(COMMANDS) if args.command == "all" else [args.command]
        for stage in stages:
            log.info("running %s", stage)
            COMMANDS[stage](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - report, do not dump a traceback on users
        log.debug("unhandled failure", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
