"""Command-line entry point for meanfield_repr."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

try:
    from .app import EXIT_PARSE, ExperimentRunner
    from .errors import ConfigError
    from .models import COMMANDS, RunConfig
    from .services.storage import load_config
except ImportError:  # pragma: no cover - fallback when executed as script
    package_root = Path(__file__).resolve().parent
    sys.path.insert(0, str(package_root.parent))
    from meanfield_repr.app import EXIT_PARSE, ExperimentRunner
    from meanfield_repr.errors import ConfigError
    from meanfield_repr.models import COMMANDS, RunConfig
    from meanfield_repr.services.storage import load_config

logger = logging.getLogger("meanfield_repr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meanfield-repr",
        description="Bank–El Karoui 表示、平均场不动点与稳定性实验",
    )
    parser.add_argument("command", choices=COMMANDS, help="要运行的命令")
    parser.add_argument("--config", type=Path, help="JSON 配置文件路径")
    parser.add_argument("--out", type=Path, help="输出目录")
    parser.add_argument("--seed", type=int, help="随机种子（随机实例必填）")
    parser.add_argument("--oracle", action="store_true", help="强制运行穷举校验")
    parser.add_argument("--format", choices=("json", "csv"), help="额外输出格式")
    parser.add_argument("-v", "--verbose", action="store_true", help="输出调试日志")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then command-line flags on top."""
    config = load_config(args.config) if args.config else RunConfig()
    config.command = args.command
    if args.out is not None:
        config.output_dir = args.out
    if args.seed is not None:
        config.seed = args.seed
    if args.oracle:
        config.oracle = True
    if args.format is not None:
        config.format = args.format
    return config.validate()


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command and return its exit status."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = resolve_config(args)
    except ConfigError as exc:
        logger.error("配置错误：%s", exc)
        return EXIT_PARSE
    base_dir = args.config.resolve().parent if args.config else Path.cwd()
    return ExperimentRunner(config, base_dir).run()


if __name__ == "__main__":
    sys.exit(main())
