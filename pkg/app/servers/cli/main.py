"""
Command-line entry point: ``dds synth|train|decompose|evaluate|bench|sweep``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure, 4 I/O error.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from app.core.models.decomposition_models import MethodKind
from app.core.models.run_models import RunConfig
from app.servers.cli.commands import (
    cmd_bench,
    cmd_decompose,
    cmd_evaluate,
    cmd_sweep,
    cmd_synth,
    cmd_train,
    configure_runtime,
)
from app.shared.config import dump_run_config, get_settings, load_run_config, parse_run_config
from app.shared.errors import ConfigError, DDSError

logger = logging.getLogger(__name__)

COMMANDS = ("synth", "train", "decompose", "evaluate", "bench", "sweep")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dds",
        description="Spectrogram decomposition with NMF and flow-based dictionary search",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Run configuration defaults (YAML):\n\n" + dump_run_config(RunConfig()),
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML run configuration; defaults apply when omitted")
    parser.add_argument("--method", choices=[m.value for m in MethodKind], help="Decomposition method")
    parser.add_argument("--n", type=int, help="Components per source for dds2/dds3")
    parser.add_argument("--seed", type=int, help="Seed for every seeded section")
    parser.add_argument("--out", help="Output directory of the command")
    parser.add_argument("--jobs", type=int, help="Independent runs executed in parallel")
    parser.add_argument("--epsilon", type=float, help="L0 sparsity threshold for evaluate")
    parser.add_argument("--dataset", help="Dataset directory (overrides paths.dataset)")
    parser.add_argument("--checkpoints", help="Checkpoint directory (overrides paths.checkpoints)")
    parser.add_argument("--results", help="Results directory (overrides paths.results)")
    return parser


def apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Fold command-line flags into the run configuration and re-validate it"""
    document = config.model_dump(mode="json")
    if args.method:
        document["method"] = args.method
    if args.n is not None:
        document["decomposition"]["n_components"] = args.n
    if args.jobs is not None:
        document["jobs"] = args.jobs
    if args.epsilon is not None:
        document["evaluation"]["epsilon"] = args.epsilon
    for name in ("dataset", "checkpoints", "results"):
        if getattr(args, name):
            document["paths"][name] = getattr(args, name)
    config = parse_run_config(document)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def _require(value: Optional[str], flag: str, command: str) -> Path:
    if not value:
        raise ConfigError(f"{command} needs {flag}")
    return Path(value)


def run_command(command: str, config: RunConfig, out: Optional[str]) -> None:
    paths = config.paths
    if command == "synth":
        cmd_synth(config, _require(out or paths.dataset, "--out or paths.dataset", command))
    elif command == "train":
        dataset = _require(paths.dataset, "--dataset or paths.dataset", command)
        cmd_train(config, dataset, _require(out or paths.checkpoints, "--out or paths.checkpoints", command))
    elif command == "decompose":
        dataset = _require(paths.dataset, "--dataset or paths.dataset", command)
        results = _require(out or paths.results, "--out or paths.results", command)
        cmd_decompose(config, dataset, paths.checkpoints, results)
    elif command == "evaluate":
        results = _require(out or paths.results, "--results, --out or paths.results", command)
        cmd_evaluate(config, results, _require(paths.dataset, "--dataset or paths.dataset", command))
    elif command == "bench":
        cmd_bench(config, _require(out or paths.out, "--out or paths.out", command))
    else:
        cmd_sweep(config, _require(out or paths.out, "--out or paths.out", command))


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    configure_runtime(settings)

    try:
        config = load_run_config(args.config) if args.config else RunConfig()
        config = apply_overrides(config, args)
        logger.info(f"Starting {args.command} (method {config.method.value})")
        run_command(args.command, config, args.out)
    except DDSError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except ValidationError as e:
        logger.error(f"{args.command} failed: invalid configuration: {e}")
        return 2
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        return 4
    except Exception as e:
        logger.error(f"{args.command} failed unexpectedly: {e}", exc_info=True)
        return 1
    logger.info(f"Finished {args.command}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
