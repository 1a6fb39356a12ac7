"""Command-line entry point.

Subcommands: gen-data, train, eval, infer, ablate, check, plot-data.
Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 check failure.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

from ..gradcore import load_checkpoint
from ..inference import eval_ilc, format_detections
from .ablation import comparison_table, run_ablation
from .config import RunConfig
from .evaluate import evaluate, label_map, run_inference, write_artifacts
from .selfcheck import run_all_checks
from .synth import dataset_summary_lines, gen_dataset, prepare_scenes
from .train import NumericalError, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_CHECK_FAILED = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for assignment in args.overrides:
        cfg = cfg.apply_set_option(assignment)
    if args.seed is not None:
        cfg = cfg.with_overrides({"seed": args.seed})
    return cfg


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsodet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in [
        ("gen-data", "generate the synthetic dataset and print its digest"),
        ("train", "train all heads and write checkpoint/log artifacts"),
        ("eval", "evaluate a checkpoint and write metrics + detection streams"),
        ("infer", "write the detection stream for one split"),
        ("ablate", "run the component ablation ladder"),
        ("check", "run the oracle and gradient suites"),
        ("plot-data", "train with snapshots and emit classification-accuracy series"),
    ]:
        p = sub.add_parser(name, help=desc)
        _add_common(p)
        if name in ("eval", "infer"):
            p.add_argument("--checkpoint", type=Path, help="checkpoint file (default: OUT/checkpoint.bin)")
        if name == "infer":
            p.add_argument("--split", choices=["train", "test"], default="test")
        if name == "plot-data":
            p.add_argument("--points", type=int, default=10, help="number of snapshot points")
    return parser


def _cmd_gen_data(cfg: RunConfig, args) -> int:
    train_scenes, test_scenes = gen_dataset(cfg)
    lines = dataset_summary_lines(train_scenes) + dataset_summary_lines(test_scenes)
    payload = ("\n".join(lines) + "\n").encode()
    digest = hashlib.sha256(payload).hexdigest()
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "dataset.txt").write_bytes(payload)
        cfg.save(args.out / "config.json")
    print(f"dataset digest {digest} ({len(train_scenes)} train / {len(test_scenes)} test scenes)")
    return EXIT_OK


def _cmd_train(cfg: RunConfig, args) -> int:
    out = args.out or Path("run")
    train(cfg, out_dir=out)
    print(f"trained {cfg.iterations} iterations -> {out}/checkpoint.bin (config {cfg.digest()[:12]})")
    return EXIT_OK


def _prepared(cfg: RunConfig):
    raw_train, raw_test = gen_dataset(cfg)
    return prepare_scenes(raw_train, cfg), prepare_scenes(raw_test, cfg)


def _cmd_eval(cfg: RunConfig, args) -> int:
    out = args.out or Path("run")
    ckpt = args.checkpoint or out / "checkpoint.bin"
    heads = load_checkpoint(ckpt)
    train_set, test_set = _prepared(cfg)
    metrics = evaluate(cfg, heads, train_set, test_set)
    write_artifacts(metrics, out)
    ilc = metrics["ilc"]
    print(
        f"mAP {metrics['map']:.4f}  CorLoc {metrics['corloc']:.4f}  "
        f"ILC {'n/a' if ilc is None else f'{ilc:.4f}'}  -> {out}/metrics.json"
    )
    return EXIT_OK


def _cmd_infer(cfg: RunConfig, args) -> int:
    out = args.out
    ckpt = args.checkpoint or (out or Path("run")) / "checkpoint.bin"
    heads = load_checkpoint(ckpt)
    train_set, test_set = _prepared(cfg)
    scenes = train_set if args.split == "train" else test_set
    stream = format_detections(run_inference(cfg, heads, scenes))
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"detections_{args.split}.txt").write_text(stream)
    else:
        sys.stdout.write(stream)
    return EXIT_OK


def _cmd_ablate(cfg: RunConfig, args) -> int:
    rows = run_ablation(cfg, out_dir=args.out)
    sys.stdout.write(comparison_table(rows))
    return EXIT_OK


def _cmd_check(_cfg: RunConfig, _args) -> int:
    ok = run_all_checks(verbose_print=print)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _cmd_plot_data(cfg: RunConfig, args) -> int:
    """Classification-accuracy-vs-iteration series for the three score sources."""
    every = max(1, cfg.iterations // max(1, args.points))
    cfg = cfg.with_overrides({"snapshot_every": every})
    result = train(cfg)
    labels = label_map(result.test_scenes)
    lines = ["iteration\tilc_pipeline\tilc_midn\tilc_corrected"]
    for step in sorted(result.snapshots):
        heads = result.snapshots[step]
        values = []
        for mode in ("plain", "midn", "scc"):
            dets = run_inference(
                cfg,
                heads,
                result.test_scenes,
                use_scc=(mode == "scc"),
                midn_only=(mode == "midn"),
            )
            ilc = eval_ilc(dets, labels)
            values.append("n/a" if ilc is None else f"{ilc:.4f}")
        lines.append("\t".join([str(step)] + values))
    payload = "\n".join(lines) + "\n"
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "ilc_series.tsv").write_text(payload)
    sys.stdout.write(payload)
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "ablate": _cmd_ablate,
    "check": _cmd_check,
    "plot-data": _cmd_plot_data,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
    except (KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](cfg, args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
