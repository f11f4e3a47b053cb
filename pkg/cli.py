"""
Command-line front-end.

    python cli.py run config.env [--set key=value ...] [--out DIR]
    python cli.py scenario q6-tm-variant [--full-scale] [--seed N] [--out DIR]
    python cli.py verify [pytest args]
    python cli.py inspect artifacts/run/model

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from db.client import get_log_level
from db.queries import ArtifactStore
from logic.config import parse_config
from logic.errors import ConfigError, ScenarioError
from logic.nn import Architecture, parse_encoding, read_vector_file
from logic.orchestrator import build_report, run_training
from logic.scenarios import SCENARIOS, run_scenario

logger = logging.getLogger("hyfl")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _overrides(items: Optional[List[str]]) -> Dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "override must look like key=value")
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hyfl", description="HyFL desk-scale simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train with a config file")
    run.add_argument("config", nargs="?", help="flat key = value config file (defaults when omitted)")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    run.add_argument("--out", help="artifacts directory (default: output_dir from the config)")

    scenario = sub.add_parser("scenario", help="run an experiment preset")
    scenario.add_argument("name", help=f"one of {', '.join(SCENARIOS)}")
    scenario.add_argument("--full-scale", "--paper-scale", dest="full_scale", action="store_true",
                          help="full client counts and LeNet")
    scenario.add_argument("--seed", type=int, default=0)
    scenario.add_argument("--set", action="append", metavar="KEY=VALUE")
    scenario.add_argument("--out", help="artifacts root")

    verify = sub.add_parser("verify", help="run the test suite")
    verify.add_argument("pytest_args", nargs=argparse.REMAINDER)

    inspect = sub.add_parser("inspect", help="describe a checkpoint file or share directory")
    inspect.add_argument("path")
    return parser


def cmd_run(args) -> int:
    cfg = parse_config(args.config, overrides=_overrides(args.set))
    out = Path(args.out or cfg.output_dir)
    result = run_training(cfg)
    store = ArtifactStore(out.parent)
    store.save_run(out.name, result, build_report(result))
    final = result.metrics[-1].accuracy if result.metrics else float("nan")
    print(f"{cfg.rounds} rounds, final accuracy {final:.4f}, artifacts in {out}")
    return EXIT_OK


def cmd_scenario(args) -> int:
    outputs = run_scenario(args.name, out_dir=args.out, full_scale=args.full_scale, seed=args.seed,
                           overrides=_overrides(args.set))
    for label, path in outputs.items():
        print(f"{label}: {path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    import pytest
    tests = Path(__file__).resolve().parent / "tests"
    return int(pytest.main([str(tests), *args.pytest_args]))


def describe(path: Path) -> List[str]:
    files = sorted(path.glob("share-*.bin")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"{path}: no checkpoint or share files")
    lines = []
    for file in files:
        descriptor, encoding, values = read_vector_file(file)
        arch = Architecture.from_descriptor(descriptor)
        info = parse_encoding(encoding)
        line = f"{file.name}: {descriptor} | {arch.param_count} parameters | encoding {info['kind']}"
        if "f" in info:
            line += f" f={info['f']}"
        if info["kind"] == "ring64-share":
            line += f" | committee {info['owner']} party {info['party']} of {info['of']}"
        if len(values) != arch.param_count:
            line += f" | WARNING: {len(values)} values stored"
        lines.append(line)
    return lines


def cmd_inspect(args) -> int:
    for line in describe(Path(args.path)):
        print(line)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "scenario": cmd_scenario, "verify": cmd_verify, "inspect": cmd_inspect}


def main(argv=None) -> int:
    logging.basicConfig(level=get_log_level(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ScenarioError) as e:
        print(f"error: {e}", file=sys.stderr)
        build_parser().print_usage(sys.stderr)
        return EXIT_USAGE
    except Exception:
        logger.error("command failed", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
