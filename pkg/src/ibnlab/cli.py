"""Command-line front end: single runs, preset reproduction, and sweeps.

Every command resolves a digit corpus (IDX files) in this order: the
``--mnist-dir`` flag, the ``IBNL_MNIST_DIR`` environment variable, and
finally a synthetic stand-in corpus generated into a local cache.  All
results land in an output directory as ``results.csv`` (one row per run
and class), ``summary.json`` (per-config aggregates plus config echoes),
and per-run confidence dumps; sweeps add a plot-ready ``sweep.csv``.

Exit codes: 0 on success, 1 when any run diverges or I/O fails, 2 for
usage and configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import yaml

from .data import Dataset, load_idx
from .layers import ModelStructureError, load_model, strip_final_bn
from .metrics import write_confidence_csv
from .presets import PRESET_NAMES, Preset, SweepSpec, get_preset
from .synthetic import TRAIN_IMAGES, TRAIN_LABELS, ensure_dataset
from .train import (
    RESULT_COLUMNS,
    ExperimentConfig,
    ExperimentResult,
    RunResult,
    TrainingDivergedError,
    config_from_dict,
    evaluate,
    run_single,
)

DEFAULT_CACHE = ".cache/synthetic-mnist"
ENV_MNIST_DIR = "IBNL_MNIST_DIR"
ENV_CACHE_DIR = "IBNL_CACHE_DIR"


class UsageError(ValueError):
    """Bad flags, configs, or file layouts; maps to exit code 2."""


# ---------------------------------------------------------------------------
# dataset resolution

@dataclass
class SourceHandle:
    """A located training corpus, loadable lazily (and in worker processes)."""

    images_path: Path
    labels_path: Path
    note: str
    _loaded: Optional[Dataset] = None

    def load(self) -> Dataset:
        if self._loaded is None:
            self._loaded = load_idx(self.images_path, self.labels_path)
        return self._loaded


def _find_idx_pair(directory: Path) -> Optional[tuple[Path, Path]]:
    for suffix in ("", ".gz"):
        images = directory / (TRAIN_IMAGES + suffix)
        labels = directory / (TRAIN_LABELS + suffix)
        if images.exists() and labels.exists():
            return images, labels
    return None


def resolve_source(mnist_dir: Optional[str]) -> SourceHandle:
    """Locate training IDX files, falling back to the synthetic corpus."""
    explicit = mnist_dir or os.environ.get(ENV_MNIST_DIR)
    if explicit:
        pair = _find_idx_pair(Path(explicit))
        if pair is None:
            raise UsageError(
                f"{explicit}: expected {TRAIN_IMAGES}[.gz] and {TRAIN_LABELS}[.gz]"
            )
        return SourceHandle(*pair, note=f"digit corpus: {explicit}")
    cache = Path(os.environ.get(ENV_CACHE_DIR, DEFAULT_CACHE))
    ensure_dataset(cache)
    pair = _find_idx_pair(cache)
    assert pair is not None
    note = (
        f"note: no digit corpus supplied (--mnist-dir / ${ENV_MNIST_DIR}); "
        f"using the synthetic stand-in at {cache}"
    )
    return SourceHandle(*pair, note=note)


# ---------------------------------------------------------------------------
# run orchestration (serial or worker pool)

_WORKER_SOURCE: Optional[Dataset] = None


def _worker_init(images_path: str, labels_path: str) -> None:
    global _WORKER_SOURCE
    _WORKER_SOURCE = load_idx(images_path, labels_path)


def _worker_run(cfg_dict: dict) -> RunResult:
    assert _WORKER_SOURCE is not None
    return run_single(config_from_dict(cfg_dict), _WORKER_SOURCE)


def run_configs(
    configs: list[ExperimentConfig],
    source: SourceHandle,
    repeats: int,
    workers: int = 1,
) -> list[ExperimentResult]:
    """Run every config for ``repeats`` consecutive seeds, in stable order."""
    if repeats < 1:
        raise UsageError("--repeats must be >= 1")
    if workers < 1:
        raise UsageError("--workers must be >= 1")
    ladder = [
        replace(cfg, seed=cfg.seed + k) for cfg in configs for k in range(repeats)
    ]
    if workers == 1:
        data = source.load()
        runs = [run_single(cfg, data) for cfg in ladder]
    else:
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_worker_init,
            initargs=(str(source.images_path), str(source.labels_path)),
        ) as pool:
            runs = list(pool.map(_worker_run, [cfg.to_dict() for cfg in ladder]))
    grouped = [runs[i * repeats : (i + 1) * repeats] for i in range(len(configs))]
    return [ExperimentResult(cfg, group) for cfg, group in zip(configs, grouped)]


# ---------------------------------------------------------------------------
# result emission

def _sig6(value):
    """Floats to 6 significant digits; everything else unchanged."""
    if isinstance(value, float):
        return float(f"{value:.6g}")
    return value


def emit_results(results: list[ExperimentResult], out_dir) -> Path:
    """Write results.csv, summary.json, and per-run confidence dumps."""
    if not results:
        raise UsageError("no results to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "results.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for result in results:
            for run in result.runs:
                for row in run.rows():
                    writer.writerow({k: _sig6(v) for k, v in row.items()})
    payload = {
        "runs": [
            {
                "run_id": run.run_id,
                "seed": run.seed,
                "config": run.config,
                "wall_seconds": _sig6(run.wall_seconds),
                "rows": [
                    {k: _sig6(v) for k, v in row.items()} for row in run.rows()
                ],
            }
            for result in results
            for run in result.runs
        ],
        "summaries": [_round_tree(result.summary()) for result in results],
    }
    (out / "summary.json").write_text(json.dumps(payload, indent=2) + "\n")
    conf_dir = out / "confidence"
    conf_dir.mkdir(exist_ok=True)
    for result in results:
        for run in result.runs:
            write_confidence_csv(
                run.test.confidence_records, conf_dir / f"{run.run_id}-test.csv"
            )
    return csv_path


def _round_tree(node):
    if isinstance(node, dict):
        return {k: _round_tree(v) for k, v in node.items()}
    if isinstance(node, list):
        return [_round_tree(v) for v in node]
    return _sig6(node)


def emit_sweep(spec: SweepSpec, results: dict, out_dir) -> Path:
    """Write sweep.csv: axis_value,variant,class,f1_mean,f1_std."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis_value", "variant", "class", "f1_mean", "f1_std"])
        for value in spec.values:
            for variant in ("final_bn", "no_final_bn"):
                summary = results[(value, variant)].summary()
                for cls, stats in summary["classes"].items():
                    writer.writerow(
                        [
                            _sig6(float(value)),
                            variant,
                            cls,
                            _sig6(stats["f1"]["mean"]),
                            _sig6(stats["f1"]["std"]),
                        ]
                    )
    return path


# ---------------------------------------------------------------------------
# comparison table

def print_comparison(preset: Preset, results: list[ExperimentResult]) -> None:
    """Per-class mean F1 next to the reference scores, where published."""
    print(f"\n{preset.name}: {preset.description}")
    header = f"{'configuration':32s} {'class':>5s} {'f1':>7s} {'std':>7s} {'reference':>9s}"
    print(header)
    print("-" * len(header))
    for row, result in zip(preset.rows, results):
        summary = result.summary()
        id_to_source = {v: k for k, v in row.config.imbalance.class_map().items()}
        marker = " *" if row.expected_best else ""
        for cls_id in sorted(int(c) for c in summary["classes"]):
            stats = summary["classes"][str(cls_id)]["f1"]
            source = id_to_source[cls_id]
            ref = row.reference.get(source)
            ref_text = f"{ref:9.2f}" if ref is not None else f"{'-':>9s}"
            name = row.config.label if cls_id == 0 else ""
            print(
                f"{name:32s} {source:>5d} {stats['mean']:7.4f} "
                f"{stats['std']:7.4f} {ref_text}{marker if cls_id == 0 else ''}"
            )
    print("(* = expected best; references are directional, not tolerances)")


# ---------------------------------------------------------------------------
# commands

def parse_config(path) -> ExperimentConfig:
    """Strictly parse a YAML experiment config; unknown keys are errors."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise UsageError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a mapping")
    try:
        return config_from_dict(raw)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    source = resolve_source(args.mnist_dir)
    print(source.note, file=sys.stderr)
    resolved = cfg.to_dict()
    print("resolved configuration:")
    print(yaml.safe_dump(resolved, sort_keys=True), end="")
    out = Path(args.out)
    results = run_configs([cfg], source, args.repeats, args.workers)
    emit_results(results, out)
    (out / "config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))
    if args.save_model:
        from .layers import save_model
        from .data import build_imbalanced_split
        from .train import build_model, train as train_model

        bundle = build_imbalanced_split(source.load(), cfg.imbalance, cfg.seed)
        model, _ = train_model(build_model(cfg), bundle, cfg)
        ckpt = out / f"{results[0].runs[0].run_id}.ckpt"
        save_model(model, ckpt)
        print(f"checkpoint written to {ckpt}")
    summary = results[0].summary()
    for cls, stats in summary["classes"].items():
        print(f"class {cls}: f1 {stats['f1']['mean']:.4f} +/- {stats['f1']['std']:.4f}")
    print(f"results in {out}")
    return 0


def _run_sweep(preset: Preset, source: SourceHandle, repeats: int, workers: int, out):
    spec = preset.sweep
    if repeats != spec.repeats:
        spec = replace(spec, repeats=repeats)
    points = [
        (value, variant)
        for value in spec.values
        for variant in ("final_bn", "no_final_bn")
    ]
    configs = [spec.point(value, variant == "final_bn") for value, variant in points]
    results = run_configs(configs, source, spec.repeats, workers)
    by_point = dict(zip(points, results))
    emit_results(results, out)
    path = emit_sweep(spec, by_point, out)
    print(f"sweep data in {path}")
    return 0


def cmd_reproduce(args) -> int:
    try:
        preset = get_preset(args.preset)
    except KeyError as exc:
        raise UsageError(str(exc)) from None
    source = resolve_source(args.mnist_dir)
    print(source.note, file=sys.stderr)
    out = Path(args.out or f"runs/{preset.name}")
    repeats = args.repeats or preset.default_repeats
    if preset.sweep is not None:
        return _run_sweep(preset, source, repeats, args.workers, out)
    configs = [
        replace(row.config, seed=row.config.seed + args.seed) for row in preset.rows
    ]
    results = run_configs(configs, source, repeats, args.workers)
    emit_results(results, out)
    print_comparison(preset, results)
    print(f"results in {out}")
    return 0


def cmd_sweep(args) -> int:
    axis = {"ratio": "imbalance_ratio", "batch": "batch_size"}.get(args.axis)
    if axis is None:
        raise UsageError(f"--axis must be 'ratio' or 'batch', got {args.axis!r}")
    try:
        values = [
            float(tok) if axis == "imbalance_ratio" else int(tok)
            for tok in args.values.split(",")
            if tok.strip()
        ]
    except ValueError:
        raise UsageError(f"--values {args.values!r}: not a comma-separated number list")
    base = get_preset("ratio-sweep" if axis == "imbalance_ratio" else "batch-sweep").sweep.base
    try:
        spec = SweepSpec(base=base, axis=axis, values=tuple(values), repeats=args.repeats)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    preset = Preset(name=f"{args.axis}-sweep", description="custom sweep", sweep=spec)
    source = resolve_source(args.mnist_dir)
    print(source.note, file=sys.stderr)
    return _run_sweep(preset, source, args.repeats, args.workers, Path(args.out))


def cmd_strip_bn(args) -> int:
    try:
        model = load_model(args.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from None
    except ModelStructureError as exc:
        raise UsageError(str(exc)) from None
    try:
        stripped = strip_final_bn(model)
    except ModelStructureError as exc:
        raise UsageError(f"{args.checkpoint}: {exc}") from None
    from .data import build_imbalanced_split
    from .presets import CANONICAL_IMBALANCE

    source = resolve_source(args.mnist_dir)
    print(source.note, file=sys.stderr)
    bundle = build_imbalanced_split(source.load(), CANONICAL_IMBALANCE, args.seed)
    print(f"{'model':12s} {'split':>5s} {'minority f1':>12s} {'majority f1':>12s}")
    for name, net in (("kept-bn", model), ("stripped-bn", stripped)):
        for split_name, split in (("val", bundle.val), ("test", bundle.test)):
            report = evaluate(net, split)
            print(
                f"{name:12s} {split_name:>5s} {report.f1[1]:12.4f} {report.f1[0]:12.4f}"
            )
    return 0


def cmd_calibration(args) -> int:
    preset = get_preset("calibration")
    source = resolve_source(args.mnist_dir)
    print(source.note, file=sys.stderr)
    out = Path(args.out)
    repeats = args.repeats or preset.default_repeats
    configs = [row.config for row in preset.rows]
    results = run_configs(configs, source, repeats, args.workers)
    emit_results(results, out)
    print_comparison(preset, results)
    for result in results:
        summary = result.summary()
        print(
            f"{result.config.label}: ece {summary['ece']['mean']:.4f} "
            f"brier {summary['brier']['mean']:.4f}"
        )
    if args.dump:
        dump = Path(args.dump)
        dump.parent.mkdir(parents=True, exist_ok=True)
        write_confidence_csv(results[0].runs[0].test.confidence_records, dump)
        baseline = dump.with_name(dump.stem + "-nobn" + dump.suffix)
        write_confidence_csv(results[1].runs[0].test.confidence_records, baseline)
        print(f"confidence dumps: {dump} and {baseline}")
    return 0


def cmd_make_data(args) -> int:
    out = Path(args.out or os.environ.get(ENV_CACHE_DIR, DEFAULT_CACHE))
    path = ensure_dataset(out, num_train=args.train, num_test=args.test, seed=args.seed)
    print(f"synthetic digit corpus ready in {path}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ibnlab",
        description="final-layer batch-normalization experiments under class imbalance",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--mnist-dir", help="directory holding the IDX digit files")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--repeats", type=int, default=None,
                       help="runs per configuration (consecutive seeds)")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel worker processes")
        p.add_argument("--seed", type=int, default=0, help="base seed")

    p_train = sub.add_parser("train", help="run one experiment from a YAML config")
    p_train.add_argument("--config", required=True, help="YAML experiment config")
    common(p_train, out_default="runs/train")
    p_train.set_defaults(func=cmd_train, repeats=1)
    p_train.add_argument("--save-model", action="store_true",
                         help="also write a model checkpoint")

    p_rep = sub.add_parser("reproduce", help="run a canned experiment suite")
    p_rep.add_argument("preset", help=f"one of: {', '.join(PRESET_NAMES)}")
    common(p_rep)
    p_rep.set_defaults(func=cmd_reproduce)

    p_sweep = sub.add_parser("sweep", help="grid over imbalance ratio or batch size")
    p_sweep.add_argument("--axis", required=True, help="ratio or batch")
    p_sweep.add_argument("--values", required=True, help="comma-separated grid")
    common(p_sweep, out_default="runs/sweep")
    p_sweep.set_defaults(func=cmd_sweep, repeats=3)

    p_strip = sub.add_parser("strip-bn", help="evaluate a checkpoint with and "
                                              "without its final BN layer")
    p_strip.add_argument("--checkpoint", required=True, help="model checkpoint file")
    p_strip.add_argument("--mnist-dir", help="directory holding the IDX digit files")
    p_strip.add_argument("--seed", type=int, default=0, help="split seed")
    p_strip.set_defaults(func=cmd_strip_bn)

    p_cal = sub.add_parser("calibration", help="confidence/calibration comparison")
    p_cal.add_argument("--dump", help="also write per-sample confidence CSVs here")
    common(p_cal, out_default="runs/calibration")
    p_cal.set_defaults(func=cmd_calibration)

    p_data = sub.add_parser("make-data", help="generate the synthetic digit corpus")
    p_data.add_argument("--out", default=None, help="target directory")
    p_data.add_argument("--seed", type=int, default=0)
    p_data.add_argument("--train", type=int, default=60000)
    p_data.add_argument("--test", type=int, default=10000)
    p_data.set_defaults(func=cmd_make_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"run diverged: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
