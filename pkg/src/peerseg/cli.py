"""Command-line entry points.

Subcommands:
  generate-data   write the synthetic two-domain dataset to a directory
  corrupt-labels  corrupt a labelled corpus at a noise level and ratio
  train           one training run from data directories
  evaluate        score a checkpoint on a labelled directory
  report          run (or reformat) an experiment matrix: CSV, table, plots

Configs are JSON files of plain key-value pairs; every command honours
--seed and --out. Exit code is nonzero on any error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .datamodel import DomainTag, RunConfig
from .labelnoise import NoiseSpec, corrupt_corpus
from .synthdata import SynthConfig, generate_corpus, ingest_corpus, write_corpus


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _synth_config(args) -> SynthConfig:
    raw = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    known = {f.name for f in dataclasses.fields(SynthConfig)}
    unknown = set(raw) - known
    if unknown:
        raise SystemExit(f"unknown data config keys: {sorted(unknown)}")
    for key in ("image_size", "disc_radius", "cup_frac"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return SynthConfig(**raw)


def cmd_generate_data(args):
    cfg = _synth_config(args)
    out = Path(args.out)
    written = []
    for corpus, sub in (
        (generate_corpus(cfg, DomainTag.SOURCE), "source"),
        (generate_corpus(cfg, DomainTag.TARGET, "train"), "target_train"),
        (generate_corpus(cfg, DomainTag.TARGET, "test"), "target_test"),
    ):
        write_corpus(corpus, out / sub)
        written.append(f"{sub}: {len(corpus)} samples")
    print("\n".join(written))


def cmd_corrupt_labels(args):
    corpus = ingest_corpus(args.input)
    spec = NoiseSpec(
        level=args.level,
        beta=args.beta,
        mixed=args.noise_type is None,
        noise_type=args.noise_type,
        seed=args.seed if args.seed is not None else 0,
    )
    corrupted = corrupt_corpus(corpus, spec)
    out = Path(args.out)
    write_corpus(corrupted, out)
    meta = [
        {
            "id": s.id,
            "corrupted": s.noise_meta.corrupted,
            "noise_type": s.noise_meta.noise_type.value,
            "magnitude": s.noise_meta.magnitude,
            "alpha": s.noise_meta.alpha,
        }
        for s in corrupted
    ]
    with open(out / "noise_meta.json", "w") as f:
        json.dump(meta, f, indent=2)
    n = sum(1 for m in meta if m["corrupted"])
    print(f"corrupted {n}/{len(meta)} masks at level={args.level} beta={args.beta}")


def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_train(args):
    from .training import train_full

    cfg = _run_config(args)
    source = ingest_corpus(args.source)
    target_train = ingest_corpus(args.target_train)
    target_test = ingest_corpus(args.target_test) if args.target_test else None
    pretrain = ingest_corpus(args.pretrain_data) if args.pretrain_data else None
    state = train_full(
        cfg, source, target_train, target_test,
        run_dir=args.out, pretrain_corpus=pretrain, resume=args.resume,
    )
    last = state.history[-1] if state.history else {}
    dice = last.get("dice_mean_fg")
    msg = f"trained {state.epoch} epochs (strategy={cfg.strategy_name})"
    if dice is not None:
        msg += f", target mean foreground Dice {dice:.4f}"
    print(msg)


def cmd_evaluate(args):
    import torch

    from .evaluation import evaluate_segmenter
    from .models import ARCHITECTURES
    from .training import _latest_checkpoint

    path = Path(args.checkpoint)
    if path.is_dir():
        ckpt = _latest_checkpoint(path)
        if ckpt is None:
            raise SystemExit(f"no checkpoints under {path}")
        path = ckpt
    payload = torch.load(path, map_location="cpu", weights_only=False)
    blob = payload["peers"]["peer_a"]
    seg = ARCHITECTURES[blob["architecture_id"]]()
    seg.load_state_dict(blob["seg_state"])
    corpus = ingest_corpus(args.data)
    report = evaluate_segmenter(seg, corpus, {"checkpoint": str(path)})
    out = {
        "per_class": {str(c): v for c, v in report.per_class.items()},
        "mean_foreground": report.mean_foreground,
        "samples": report.sample_count,
        "pair": report.pair(),
    }
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "evaluation.json").write_text(text + "\n")
    print(text)


def cmd_report(args):
    from .evaluation import (MatrixAxes, format_table, load_matrix_csv,
                             plot_results, run_matrix)

    out = Path(args.out)
    if args.from_csv:
        reports = load_matrix_csv(args.from_csv)
    else:
        raw = _load_json(args.config) if args.config else {}
        axes_raw = raw.pop("axes", {})
        base = RunConfig(**raw.pop("run", {}))
        if args.seed is not None:
            axes_raw.setdefault("seeds", [args.seed])
        data_cfg_raw = raw.pop("data", {})
        for key in ("image_size", "disc_radius", "cup_frac"):
            if key in data_cfg_raw:
                data_cfg_raw[key] = tuple(data_cfg_raw[key])
        data_cfg = SynthConfig(**data_cfg_raw)
        if raw:
            raise SystemExit(f"unknown report config keys: {sorted(raw)}")
        from .synthdata import generate_dataset

        source, target_train, target_test = generate_dataset(data_cfg)
        axes = MatrixAxes(**axes_raw)
        pretrain_corpus = None
        if any(axes.pretrain) and base.pretrain_epochs > 0:
            from .benchmarks import warmup_corpus

            pretrain_corpus = warmup_corpus()
        reports = run_matrix(base, axes, source, target_train, target_test, out,
                             pretrain_corpus=pretrain_corpus)
    out.mkdir(parents=True, exist_ok=True)
    table = format_table(reports)
    (out / "table.txt").write_text(table)
    plot_results(reports, out)
    print(table)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peerseg",
        description="Noise-robust domain-adaptive segmentation benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write the synthetic two-domain dataset")
    p.add_argument("--config", help="JSON file of SynthConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("corrupt-labels", help="corrupt a labelled corpus")
    p.add_argument("--level", choices=("low", "high"), required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--noise-type", choices=("dilate", "erode", "elastic"),
                   help="fix one corruption type instead of mixing")
    p.add_argument("--seed", type=int)
    p.add_argument("--input", required=True, help="directory of the clean corpus")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_corrupt_labels)

    p = sub.add_parser("train", help="one training run")
    p.add_argument("--config", help="JSON file of RunConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--source", required=True)
    p.add_argument("--target-train", required=True)
    p.add_argument("--target-test")
    p.add_argument("--pretrain-data", help="clean corpus for the warm-start phase")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a labelled directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("report", help="run an experiment matrix and format tables/plots")
    p.add_argument("--config", help="JSON with 'run', 'data' and 'axes' sections")
    p.add_argument("--from-csv", help="reformat an existing matrix.csv instead of training")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except SystemExit:
        raise
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
