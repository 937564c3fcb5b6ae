import argparse
import sys
from dataclasses import replace
from typing import Any, Dict, List, Optional

# Backend services and core
from backend.services import logger as project_logger
from backend.services.config import ConfigError, RunConfig, dump_config, load_config
from backend.core.command_handler import CommandHandler
from backend.core.registry import PropertyRegistry

EXIT_CODES = {"success": 0, "failure": 1, "error": 2}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvdrive", description="Desk-scale controllable multi-view video diffusion.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="settings file (default: config/settings.yaml)")
    common.add_argument("--preset", default=None, help="preset overlay name or path (overfit16, stage-mini, spcheck)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. train.lr=1e-3")
    common.add_argument("--output", default=None, help="output directory (overrides output_dir)")

    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", parents=[common], help="run the configured stage plans")
    train.add_argument("--resume", default=None, help="checkpoint to resume from")

    sample = commands.add_parser("sample", parents=[common], help="generate frames for a scene")
    sample.add_argument("--checkpoint", default=None, help="checkpoint (default: <output>/checkpoints/latest.ckpt)")
    sample.add_argument("--scene", default=None, help="scene YAML file (default: a synthesized scene)")
    sample.add_argument("--seed", type=int, default=None, help="sampler seed")
    sample.add_argument("--frames", type=int, default=None, help="frame count of a synthesized scene")

    verify = commands.add_parser("verify", parents=[common], help="run the property suite")
    verify.add_argument("--property", dest="properties", action="append", default=None, help="run only this property (repeatable)")
    verify.add_argument("--list", action="store_true", help="list registered properties and exit")

    commands.add_parser("ablate", parents=[common], help="train every box encoder mode and compare validation curves")

    codec = commands.add_parser("codec-check", parents=[common], help="round-trip a synthetic clip through the codec")
    codec.add_argument("--channels", type=int, default=None, help="latent channels to test")
    codec.add_argument("--seed", type=int, default=None, help="scene seed")
    return parser


def load_settings(args: argparse.Namespace) -> RunConfig:
    config = load_config(settings=args.config, preset=args.preset, overrides=args.overrides)
    return replace(config, output_dir=args.output) if args.output else config


def setup_logging(config: RunConfig) -> None:
    try:
        project_logger.configure(config.output_dir)
    except Exception as error:
        print(f"Failed to setup logging: {error}", file=sys.stderr)


def initialize_services(config: RunConfig) -> Dict[str, Any]:
    services: Dict[str, Any] = {}

    # Property registry: discover verify checks
    services["registry"] = PropertyRegistry()

    services["handler"] = CommandHandler(config, registry=services["registry"])
    return services


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return EXIT_CODES["error"] if exit_.code else EXIT_CODES["success"]

    # Step 1: Load configuration
    try:
        config = load_settings(args)
    except (ConfigError, OSError) as error:
        print(f"config error: {error}", file=sys.stderr)
        return EXIT_CODES["error"]

    # Step 2: Setup logging under the output directory
    setup_logging(config)
    log = project_logger.get_logger("main")
    log.debug("effective config:\n{}", dump_config(config))

    # Step 3: Initialize services
    services = initialize_services(config)
    registry = services["registry"]
    log.info("Discovered {} properties", len(registry.list_properties()))

    if args.command == "verify" and args.list:
        for name in registry.list_properties():
            print(name)
        return EXIT_CODES["success"]

    # Step 4: Dispatch
    options = {k: v for k, v in vars(args).items() if k not in ("command", "config", "preset", "overrides", "output", "list")}
    result = services["handler"].execute(args.command, **options)
    status = result.get("status", "error")
    print(f"{status}: {result.get('message')}")
    return EXIT_CODES.get(status, EXIT_CODES["error"])


if __name__ == "__main__":
    sys.exit(main())
