"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(including training divergence).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .data import DatasetFormatError, write_dataset
from .harness import ConfigError, ExperimentConfig, RunDirectoryExists

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config (INI)")
    p.add_argument("--seed", type=int, help="seed (overrides base_seed)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--overwrite", action="store_true", help="replace existing run output")
    p.add_argument("--strict-paper", action="store_true",
                   help="literal 1/|B_y| normalizer and inverted compression assignment")
    p.add_argument("--threads", type=int, default=1, help="parallel run cells (ablate)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write train/val/test dataset files")
    _common(p)

    p = sub.add_parser("train", help="train and evaluate one combination")
    _common(p)
    p.add_argument("--combination", default="LC+SCL+RCL")

    p = sub.add_parser("eval", help="re-evaluate a finished run from its checkpoint")
    p.add_argument("run", type=Path)
    p.add_argument("--out", type=Path, help="write the metrics report here")

    p = sub.add_parser("ablate", help="run the combination x seed grid")
    _common(p)

    p = sub.add_parser("compare", help="CHI/DBI comparison of two runs")
    p.add_argument("run_a", type=Path)
    p.add_argument("run_b", type=Path)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("export-embeddings", help="dump embeddings of a finished run")
    p.add_argument("run", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--layer", choices=("contrastive", "feature"), default="contrastive")
    return parser


def _experiment(args) -> ExperimentConfig:
    cfg = harness.load_config(args.config)[0] if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, base_seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=str(args.out))
    if args.strict_paper:
        cfg = cfg.strict()
    return cfg


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")


def _run_snapshot(run_dir: Path):
    cfg, run = harness.load_config(run_dir / "config.ini")
    if run is None:
        raise ConfigError(f"{run_dir}/config.ini has no [run] section")
    return cfg, run


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "gen-data":
        cfg = _experiment(args)
        out = Path(cfg.output_dir)
        if out.exists() and any(out.iterdir()) and not args.overwrite:
            raise RunDirectoryExists(f"{out} is not empty; pass --overwrite")
        out.mkdir(parents=True, exist_ok=True)
        splits = harness.make_splits(cfg, cfg.base_seed)
        for name in ("train", "val", "test"):
            write_dataset(getattr(splits, name), out / f"{name}.txt")
        print(f"wrote train/val/test to {out}")
    elif cmd == "train":
        cfg = _experiment(args)
        res = harness.run_single(cfg, args.combination, cfg.base_seed, overwrite=args.overwrite)
        print(f"run directory: {res.run_dir}")
        sys.stdout.write(res.report.to_text())
    elif cmd == "ablate":
        cfg = _experiment(args)
        report = harness.run_ablation(cfg, threads=args.threads, overwrite=args.overwrite)
        sys.stdout.write(report.to_table())
        if any(c.error for c in report.cells):
            for c in report.cells:
                if c.error:
                    print(f"FAILED {c.combination} seed {c.seed}: {c.error}", file=sys.stderr)
            return EXIT_RUNTIME
    elif cmd == "eval":
        cfg, (combo, seed) = _run_snapshot(args.run)
        report = harness.evaluate(harness.load_run_params(args.run),
                                  harness.make_splits(cfg, seed).test)
        _emit(report.to_text(), args.out)
    elif cmd == "compare":
        _emit(harness.compare_embeddings(args.run_a, args.run_b).to_text(), args.out)
    elif cmd == "export-embeddings":
        cfg, (combo, seed) = _run_snapshot(args.run)
        dataset = getattr(harness.make_splits(cfg, seed), args.split)
        harness.export_embeddings(harness.load_run_params(args.run), dataset, args.out,
                                  layer=args.layer)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, DatasetFormatError) as exc:
        print(f"rcl: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RunDirectoryExists, harness.MissingArtifactError) as exc:
        print(f"rcl: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (harness.RunFailed, RuntimeError, OSError, ValueError) as exc:
        print(f"rcl: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
