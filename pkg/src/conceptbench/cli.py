"""Command-line entry point.

Exit codes: 0 on success, 1 for invalid input or configuration, 2 when a run
fails at runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .datasets import (
    DATASET_IDS,
    RESOLUTIONS,
    SchemaError,
    build_schema,
    export_dataset,
    generate_dataset,
    reduced_schema,
    stride_subsample,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
log = logging.getLogger("conceptbench")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, config_required=False) -> None:
    p.add_argument("--config", type=Path, required=config_required, help="YAML experiment config")
    p.add_argument("--out", type=Path, required=True, help="output directory or file")
    p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    p.add_argument("--scale", type=int, help="desk-scale cap on training samples")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="conceptbench", description="Concept-learning benchmark protocols.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render a concept dataset to disk")
    _common(g)
    g.add_argument("--dataset", choices=DATASET_IDS, default=None)
    g.add_argument("--setup", help="render a named loudness setup instead of a dataset grid")
    g.add_argument("--reduced", action="store_true", help="use the reduced grid")
    g.add_argument("--resolution", type=int, choices=RESOLUTIONS, default=None)

    t = sub.add_parser("train", help="train one model as configured")
    _common(t, config_required=True)
    t.add_argument("--method", help="method to train (default: first configured)")

    e = sub.add_parser("experiment", help="run a protocol into a new run directory")
    _common(e, config_required=True)

    pl = sub.add_parser("plot", help="render figures from a results file")
    _common(pl)
    pl.add_argument("results", type=Path, help="results.csv or a run directory")

    s = sub.add_parser("summarize", help="median/IQR table from a results file")
    _common(s)
    s.add_argument("results", type=Path, help="results.csv or a run directory")
    return parser


def _overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.scale is not None:
        changes["scale"] = args.scale
    return cfg.replace(**changes) if changes else cfg


def _results_path(p: Path) -> Path:
    p = p / "results.csv" if p.is_dir() else p
    if not p.is_file():
        raise UsageError(f"no results file at {p}")
    return p


def cmd_generate(args) -> int:
    from .tasks import all_setups

    cfg = load_config(args.config) if args.config else None
    resolution = args.resolution or (cfg.resolution if cfg else 64)
    if args.setup:
        setups = all_setups()
        if args.setup not in setups:
            raise UsageError(f"unknown setup {args.setup!r}; choose from {sorted(setups)}")
        schema = setups[args.setup].schema
    else:
        dataset = args.dataset or (cfg.dataset if cfg else "dsprites")
        schema = reduced_schema(dataset) if args.reduced else build_schema(dataset)
    scale = args.scale if args.scale is not None else (cfg.scale if cfg else None)
    indices = stride_subsample(schema, scale) if scale else None
    seed = args.seed if args.seed is not None else None
    ds = generate_dataset(schema, resolution, seed, indices=indices)
    export_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .experiments import run_experiment

    cfg = _overrides(load_config(args.config), args)
    method = args.method or cfg.methods[0]
    single = cfg.replace(methods=[method], seeds=cfg.seeds[:1], fractions=cfg.fractions[-1:],
                         tasks=cfg.tasks[:1], setups=cfg.setups[:1])
    args.out.mkdir(parents=True, exist_ok=True)
    result = run_experiment(single, workers=1, checkpoint_dir=args.out)
    for series in result.series:
        print(json.dumps({"method": series.method, "seed": series.seed, "setup": series.setup,
                          "final": series.last()}))
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .harness import run

    cfg = _overrides(load_config(args.config), args)
    manifest = run(cfg, args.out, config_path=args.config)
    print(f"{manifest.run_id}: {manifest.status}")
    for flag in manifest.flags:
        print(f"flag: {flag}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .harness import emit_plots

    for path in emit_plots(_results_path(args.results), args.out):
        print(path)
    return EXIT_OK


def cmd_summarize(args) -> int:
    from .harness import summarize_file

    out = args.out
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "summary.csv"
    print(summarize_file(_results_path(args.results), out))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "experiment": cmd_experiment, "plot": cmd_plot,
            "summarize": cmd_summarize}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    from .learners.networks import configure_threads

    configure_threads()
    try:
        return COMMANDS[args.verb](args)
    except (UsageError, ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
