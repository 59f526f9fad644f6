"""Command-line entry point: train adapters from a JSON spec file."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import DriverError
from .train import TrainSpec, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peft-driver",
        description="Train low-rank adapters on a frozen base model from a "
                    "chat-style JSONL training file.")
    parser.add_argument("spec", type=Path,
                        help="JSON spec file: base_model_id, train_file, "
                             "output_dir, epochs, options")
    parser.add_argument("--epochs", type=int, default=None,
                        help="override the spec's epoch count")
    parser.add_argument("--train-file", type=Path, default=None,
                        help="override the spec's training file")
    parser.add_argument("--output-dir", type=Path, default=None,
                        help="override the spec's output directory")
    parser.add_argument("--base-model", default=None,
                        help="override the spec's base model id")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = TrainSpec.from_file(args.spec)
        if args.epochs is not None:
            spec.epochs = args.epochs
        if args.train_file is not None:
            spec.train_file = args.train_file
        if args.output_dir is not None:
            spec.output_dir = args.output_dir
        if args.base_model is not None:
            spec.base_model_id = args.base_model
        result = train(spec)
    except DriverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"trained {result.steps} steps; smoothed loss "
          f"{result.initial_smoothed_loss:.4f} -> {result.final_smoothed_loss:.4f}")
    print(f"adapter:  {result.adapter_path}")
    print(f"loss log: {result.loss_log_path}")
    print(f"metadata: {result.metadata_path}")
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
