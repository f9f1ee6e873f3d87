"""Command-line front end for pipeline stages and ablations.

All commands share a flag set (--config, --seed, --out, --deterministic,
--workers, --precision, --force) and write their results under the output
directory, one subdirectory per stage with a digest manifest.  Failures
print a machine-readable JSON error record to stderr and return a nonzero
exit code.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .errors import (
    CamreidError,
    InvalidInputError,
    ManifestError,
    TrainingDivergenceError,
)

log = logging.getLogger(__name__)

_EXIT_CODES = {
    InvalidInputError: 2,
    ManifestError: 3,
    TrainingDivergenceError: 4,
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="pipeline config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument(
        "--deterministic",
        action="store_true",
        help="force single-worker sequential execution for bit-exact reruns",
    )
    p.add_argument("--workers", type=int, default=None, help="worker count (>= 1)")
    p.add_argument("--precision", choices=("f32", "f64"), default=None)
    p.add_argument("--force", action="store_true", help="allow overwriting existing stage outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camreid",
        description="unsupervised multi-camera re-identification on synthetic streams",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "generate the synthetic stream and evaluation split"),
        ("train-cid", "instance-discrimination training stage"),
        ("extract", "embed training detections with a trained checkpoint"),
        ("trackletize", "mine tracklet segments from extracted embeddings"),
        ("train-tsd", "segment-discrimination training stage"),
        ("fit-ccr", "fit the camera classifier and build the reducer"),
        ("evaluate", "rank the evaluation split and report CMC / mAP"),
        ("run", "run every stage in order"),
        ("ablate", "sweep one ablation axis"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "extract":
            p.add_argument("--checkpoint", choices=("cid", "tsd"), default="cid")
        if name == "evaluate":
            p.add_argument("--checkpoint", choices=("cid", "tsd"), default="tsd")
            p.add_argument("--no-ccr", action="store_true", help="skip the camera reduction")
        if name == "ablate":
            p.add_argument(
                "--axis",
                choices=("steps", "min_len", "data_fraction", "model_size"),
                required=True,
            )
            p.add_argument(
                "--values",
                type=str,
                default=None,
                help="JSON list overriding the axis default values",
            )
    return parser


def _resolve_config(args) -> pl.PipelineConfig:
    if args.config is not None:
        if not args.config.exists():
            raise ManifestError(f"missing config file {args.config}")
        try:
            payload = json.loads(args.config.read_text())
        except json.JSONDecodeError as e:
            raise InvalidInputError(f"{args.config} is not valid JSON ({e})") from e
        config = pl.PipelineConfig.from_payload(payload)
    else:
        config = pl.PipelineConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.precision is not None:
        overrides["precision"] = args.precision
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.deterministic:
        overrides["deterministic"] = True
        overrides["workers"] = 1
    if overrides:
        config = config.with_overrides(**overrides)
    config.validate()
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = _resolve_config(args)
        root = args.out
        pl.write_config(root, config, force=args.force)
        if args.command == "simulate":
            pl.stage_simulate(root, config, args.force)
        elif args.command == "train-cid":
            pl.stage_train_cid(root, config, args.force)
        elif args.command == "extract":
            pl.stage_extract(root, config, args.force, checkpoint=args.checkpoint)
        elif args.command == "trackletize":
            pl.stage_trackletize(root, config, args.force)
        elif args.command == "train-tsd":
            pl.stage_train_tsd(root, config, args.force)
        elif args.command == "fit-ccr":
            pl.stage_fit_ccr(root, config, args.force)
        elif args.command == "evaluate":
            pl.stage_evaluate(
                root, config, args.force, checkpoint=args.checkpoint, use_ccr=not args.no_ccr
            )
            print((root / "eval" / "report.txt").read_text(), end="")
        elif args.command == "run":
            pl.stage_run_all(root, config, args.force)
            print((root / "eval" / "report.txt").read_text(), end="")
        elif args.command == "ablate":
            values = json.loads(args.values) if args.values else None
            rows = pl.stage_ablate(root, config, args.axis, values, args.force)
            for row in rows:
                print(json.dumps(row, sort_keys=True))
        return 0
    except CamreidError as e:
        record = {"error": type(e).__name__, "message": str(e)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        for klass, code in _EXIT_CODES.items():
            if isinstance(e, klass):
                return code
        return 1


if __name__ == "__main__":
    sys.exit(main())
