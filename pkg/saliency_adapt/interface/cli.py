from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from dotenv import load_dotenv

from saliency_adapt.core.config_manager import ConfigManager
from saliency_adapt.core.errors import InvalidConfigError, SaliencyAdaptError
from saliency_adapt.pipeline.experiment import SaliencyLab

logger = logging.getLogger("saliency_adapt.cli")

EXIT_FAILURE = 2


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON run configuration merged over the defaults")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config value, e.g. train.epochs_per_round=5 (repeatable)")
    common.add_argument("--seed", type=int, default=None, help="Global seed (overrides config)")
    common.add_argument("--workers", type=int, default=None, help="Worker threads (default: available cores)")
    common.add_argument("--out", type=Path, default=None, help="Output directory for this command")
    common.add_argument("--log-level", default=None, help="Logging level (default: $SALIENCY_ADAPT_LOG_LEVEL or INFO)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(description="Synthetic saliency data and uncertainty-aware domain adaptation")
    commands = parser.add_subparsers(dest="command", required=True)

    gen_assets = commands.add_parser("gen-assets", parents=[common], help="Write procedural foreground/background PNGs")
    gen_assets.add_argument("--n-fg", type=int, default=50, help="Number of foregrounds")
    gen_assets.add_argument("--n-bg", type=int, default=60, help="Number of backgrounds")

    commands.add_parser("gen-dataset", parents=[common], help="Build source, target_train and target_eval splits")

    stats = commands.add_parser("stats", parents=[common], help="Object-size histogram and center-bias map")
    stats.add_argument("--manifest", type=Path, default=None, help="Dataset split directory (default: source)")

    commands.add_parser("train", parents=[common], help="Run the multi-round adaptation pipeline")

    evaluate = commands.add_parser("eval", parents=[common], help="Evaluate a checkpoint on a labelled split")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--manifest", type=Path, default=None, help="Dataset split directory (default: target_eval)")

    infer = commands.add_parser("infer", parents=[common], help="Write saliency PNGs for input images")
    infer.add_argument("--checkpoint", type=Path, required=True)
    infer.add_argument("images", type=Path, nargs="+")

    commands.add_parser("ablate", parents=[common], help="Train every configured arm and seed, then compare")
    return parser


def _configure_logging(level_name: str | None) -> None:
    level_name = (level_name or os.getenv("SALIENCY_ADAPT_LOG_LEVEL") or "INFO").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        raise InvalidConfigError("--log-level", f"unknown logging level {level_name!r}")
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def run_command(args: argparse.Namespace) -> dict[str, Any]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.command == "gen-dataset" and args.out is not None:
        overrides.append(f"paths.datasets={json.dumps(str(args.out))}")
    config = ConfigManager().load_run_config(args.config, overrides)
    lab = SaliencyLab(config, workers=args.workers)

    if args.command == "gen-assets":
        return lab.gen_assets(args.n_fg, args.n_bg, args.out)
    if args.command == "gen-dataset":
        return lab.gen_dataset()
    if args.command == "stats":
        return lab.stats(args.manifest, args.out)
    if args.command == "train":
        return lab.train(args.out)
    if args.command == "eval":
        return lab.evaluate(args.checkpoint, args.manifest, args.out)
    if args.command == "infer":
        return lab.infer(args.checkpoint, args.images, args.out)
    return lab.ablate(args.out)


def main(argv: Sequence[str] | None = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _configure_logging(args.log_level)
        result = run_command(args)
    except (SaliencyAdaptError, FileNotFoundError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        error: dict[str, Any] = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, InvalidConfigError):
            error["field"] = exc.field
        print(json.dumps(error, indent=2), file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
