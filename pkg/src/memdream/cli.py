"""Command line entry point.

One subcommand per pipeline stage; stages share artifacts through the
config-hashed output directory, so the usual flow is running the
subcommands in order against the same config file.

Exit codes: 0 success, 1 validation error, 2 partial synthesis failure
(failed items listed in the terraform failure ledger).
"""

from __future__ import annotations

import argparse
import sys
from typing import Any, Sequence

from .config import ConfigError, ExperimentConfig, load_config
from .dataset import ManifestError
from .evaluation import EvaluationError
from .features import FeatureError
from .pipeline import (
    StageError,
    artifact_paths,
    cmd_evaluate,
    cmd_extract,
    cmd_fixture,
    cmd_predict,
    cmd_report,
    cmd_terraform,
    cmd_train,
)
from .prompt_forge import PromptError
from .regression import RegressionError, TrainingDivergedError
from .synthesis import SynthesisError

_VALIDATION_ERRORS = (
    ConfigError,
    ManifestError,
    PromptError,
    SynthesisError,
    FeatureError,
    RegressionError,
    TrainingDivergedError,
    EvaluationError,
    StageError,
    FileNotFoundError,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memdream",
        description="Staged memorability experiment pipeline over surrogate synthesized images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment config file (JSON)")
        p.add_argument("--out-dir", help="override the config's output directory")
        p.add_argument("--seed", type=int, help="override the config's master seed")
        return p

    add("fixture", "generate the fixture manifest, latents, and genesis frames")
    terraform = add("terraform", "build prompts and synthesize surrogate images")
    terraform.add_argument("--backend-url", help="use an HTTP synthesis backend at this URL")
    terraform.add_argument("--max-in-flight", type=int, help="concurrent backend requests")
    terraform.add_argument("--seed-policy", help='per-video seeds: "hash" or "fixed:<int>"')
    extract = add("extract", "extract embedding matrices for the configured runs")
    extract.add_argument("--domain", choices=("genesis", "dream", "both"), default="both")
    add("train", "fit one model per configured run")
    add("predict", "predict eval-split scores for every run")
    add("evaluate", "score predictions against ground truth")
    add("report", "render the results table and the structured report")
    return parser


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides: dict[str, Any] = {}
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "backend_url", None) is not None:
        overrides["synthesis_backend"] = {"url": args.backend_url}
    if getattr(args, "max_in_flight", None) is not None:
        overrides["max_in_flight"] = args.max_in_flight
    if getattr(args, "seed_policy", None) is not None:
        overrides["seed_policy"] = args.seed_policy
    return load_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _config_from_args(args)
        paths = artifact_paths(config)
        if args.command == "fixture":
            manifest = cmd_fixture(config)
            print(f"fixture: {len(manifest.records)} records under {paths.root}")
        elif args.command == "terraform":
            result = cmd_terraform(config)
            print(f"terraform: {len(result.records)} images, {len(result.failures)} failures")
            if result.failures:
                print(f"failure ledger: {paths.failures}", file=sys.stderr)
                return 2
        elif args.command == "extract":
            written = cmd_extract(config, args.domain)
            print(f"extract: wrote {len(written)} matrices")
            for path in written:
                print(f"  {path.name}")
        elif args.command == "train":
            written = cmd_train(config)
            print(f"train: fitted {len(written)} models")
        elif args.command == "predict":
            written = cmd_predict(config)
            print(f"predict: wrote {len(written)} prediction files")
        elif args.command == "evaluate":
            written = cmd_evaluate(config)
            print(f"evaluate: wrote {len(written)} results")
        else:
            txt, js, table = cmd_report(config)
            print(table, end="")
            print(f"report: {txt} and {js}")
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
