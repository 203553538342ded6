"""Dice metrics, experiment matrix runner, report tables and plots.

Foreground classes are scored as nested structures (the disc structure
is every pixel labelled disc or cup, the cup only its own pixels), the
usual convention for concentric anatomy. A structure absent from both
prediction and truth scores 1, absent from exactly one scores 0.

The matrix runner trains one cell per combination of noise level, noise
ratio, pretrain flag and strategy, shares seeds across cells, and emits
a CSV plus a formatted table whose cells read "(disc, cup)" in percent.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import Corpus, LabelMask, RunConfig
from .labelnoise import NoiseSpec, corrupt_corpus


class EvaluationError(ValueError):
    pass


STRATEGY_FLAGS = {
    "none": dict(use_cd=False, use_cicl=False, use_ntl=False),
    "cd": dict(use_cd=True, use_cicl=False, use_ntl=False),
    "cd+cicl": dict(use_cd=True, use_cicl=True, use_ntl=False),
    "cd+cicl+ntl": dict(use_cd=True, use_cicl=True, use_ntl=True),
}


@dataclass(frozen=True)
class DiceReport:
    per_class: dict            # foreground class -> Dice in [0, 1]
    mean_foreground: float
    sample_count: int
    descriptor: dict           # noise level, beta, pretrain, strategy, seed...

    def pair(self) -> str:
        """(disc, cup) cell in percent, e.g. '(94.6, 87.7)'."""
        vals = [self.per_class[c] * 100 for c in sorted(self.per_class)]
        return "(" + ", ".join(f"{v:.1f}" for v in vals) + ")"


def dice(pred: LabelMask, truth: LabelMask, c: int) -> float:
    """Dice overlap of the class-c structures of two masks."""
    if pred.shape != truth.shape:
        raise EvaluationError(f"shape mismatch {pred.shape} vs {truth.shape}")
    a = pred.structure_region(c)
    b = truth.structure_region(c)
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def mean_foreground_dice(pred: LabelMask, truth: LabelMask) -> float:
    vals = [dice(pred, truth, c) for c in range(1, truth.num_classes)]
    return float(np.mean(vals))


def evaluate_segmenter(segmenter, corpus: Corpus, descriptor=None) -> DiceReport:
    """Mean per-class Dice of a segmenter over a labelled corpus."""
    from .models import forward_softmax  # local import to keep this module light

    if not corpus.labelled():
        raise EvaluationError("evaluation needs a labelled corpus")
    per_class = {c: [] for c in range(1, corpus.num_classes)}
    for sample in corpus:
        pred = forward_softmax(segmenter, sample.image).argmax_mask()
        for c in per_class:
            per_class[c].append(dice(pred, sample.mask, c))
    per_class = {c: float(np.mean(v)) for c, v in per_class.items()}
    return DiceReport(
        per_class=per_class,
        mean_foreground=float(np.mean(list(per_class.values()))),
        sample_count=len(corpus),
        descriptor=dict(descriptor or {}),
    )


def config_for_strategy(base: RunConfig, strategy: str) -> RunConfig:
    if strategy not in STRATEGY_FLAGS:
        raise EvaluationError(f"unknown strategy {strategy!r}; known: {sorted(STRATEGY_FLAGS)}")
    return base.replace(**STRATEGY_FLAGS[strategy])


@dataclass
class MatrixAxes:
    noise_levels: tuple = ("high",)
    betas: tuple = (0.5,)
    pretrain: tuple = (False,)
    strategies: tuple = ("none", "cd", "cd+cicl", "cd+cicl+ntl")
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        for name in ("noise_levels", "betas", "pretrain", "strategies", "seeds"):
            setattr(self, name, tuple(getattr(self, name)))
            if len(getattr(self, name)) == 0:
                raise EvaluationError(f"matrix axis {name} is empty")


def run_matrix(
    base_config: RunConfig,
    axes: MatrixAxes,
    source_clean: Corpus,
    target_train: Corpus,
    target_test: Corpus,
    out_dir,
    pretrain_corpus: Corpus | None = None,
    noise_seed: int = 1234,
) -> list:
    """Train every cell of the experiment matrix and collect DiceReports.

    Corruption of the source corpus is done once per (level, beta) and
    shared by all strategies and seeds so cells are comparable. A failed
    cell is recorded with an error and the matrix continues.
    """
    from .training import train_full  # circular-import guard

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    corrupted_cache = {}
    for level in axes.noise_levels:
        for beta in axes.betas:
            key = (level, beta)
            if key not in corrupted_cache:
                if beta == 0:
                    corrupted_cache[key] = source_clean
                else:
                    spec = NoiseSpec(level=level, beta=beta, seed=noise_seed)
                    corrupted_cache[key] = corrupt_corpus(source_clean, spec)
            corrupted = corrupted_cache[key]
            for pre in axes.pretrain:
                for strategy in axes.strategies:
                    for seed in axes.seeds:
                        descriptor = {
                            "noise_level": level, "beta": beta, "pretrain": bool(pre),
                            "strategy": strategy, "seed": seed,
                        }
                        cell = f"{level}_b{beta}_p{int(bool(pre))}_{strategy}_s{seed}"
                        cfg = config_for_strategy(base_config, strategy).replace(
                            noise_ratio=beta, seed=seed,
                            pretrain_epochs=base_config.pretrain_epochs if pre else 0,
                        )
                        try:
                            state = train_full(
                                cfg, corrupted, target_train, target_test,
                                run_dir=out_dir / cell,
                                pretrain_corpus=pretrain_corpus if pre else None,
                            )
                            report = evaluate_segmenter(
                                state.peers["peer_a"].segmenter, target_test, descriptor
                            )
                        except Exception as err:  # record and continue
                            report = DiceReport(
                                per_class={}, mean_foreground=float("nan"),
                                sample_count=0,
                                descriptor={**descriptor, "error": str(err)},
                            )
                        reports.append(report)
    write_matrix_csv(reports, out_dir / "matrix.csv")
    (out_dir / "table.txt").write_text(format_table(reports))
    return reports


def write_matrix_csv(reports, path):
    cols = ["noise_level", "beta", "pretrain", "strategy", "seed",
            "dice_disc", "dice_cup", "dice_mean", "samples", "error"]
    lines = [",".join(cols)]
    for r in reports:
        d = r.descriptor
        per = r.per_class
        cells = [
            str(d.get("noise_level", "")), str(d.get("beta", "")),
            str(d.get("pretrain", "")), str(d.get("strategy", "")), str(d.get("seed", "")),
            _fmt(per.get(1)), _fmt(per.get(2)), _fmt(r.mean_foreground),
            str(r.sample_count), d.get("error", ""),
        ]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(x):
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return "nan"
    return f"{x:.6f}"


def load_matrix_csv(path) -> list:
    rows = Path(path).read_text().strip().split("\n")
    header = rows[0].split(",")
    reports = []
    for line in rows[1:]:
        cells = dict(zip(header, line.split(",")))
        per_class = {}
        if cells["dice_disc"] != "nan":
            per_class[1] = float(cells["dice_disc"])
        if cells["dice_cup"] != "nan":
            per_class[2] = float(cells["dice_cup"])
        descriptor = {
            "noise_level": cells["noise_level"],
            "beta": float(cells["beta"]) if cells["beta"] else "",
            "pretrain": cells["pretrain"] == "True",
            "strategy": cells["strategy"],
            "seed": int(cells["seed"]) if cells["seed"] else "",
        }
        if cells.get("error"):
            descriptor["error"] = cells["error"]
        reports.append(DiceReport(
            per_class=per_class,
            mean_foreground=float(cells["dice_mean"]),
            sample_count=int(cells["samples"]),
            descriptor=descriptor,
        ))
    return reports


def aggregate_over_seeds(reports) -> dict:
    """descriptor-without-seed -> averaged DiceReport."""
    groups = {}
    for r in reports:
        if "error" in r.descriptor or not r.per_class:
            continue
        key = tuple(sorted((k, v) for k, v in r.descriptor.items() if k != "seed"))
        groups.setdefault(key, []).append(r)
    out = {}
    for key, rs in groups.items():
        per_class = {
            c: float(np.mean([r.per_class[c] for r in rs])) for c in rs[0].per_class
        }
        out[key] = DiceReport(
            per_class=per_class,
            mean_foreground=float(np.mean([r.mean_foreground for r in rs])),
            sample_count=sum(r.sample_count for r in rs),
            descriptor=dict(key),
        )
    return out


def format_table(reports) -> str:
    """Rows of '(disc, cup)' cells, one per config, seeds averaged."""
    agg = aggregate_over_seeds(reports)
    lines = [f"{'level':<6} {'beta':<5} {'pretrain':<8} {'strategy':<12} (disc, cup)"]
    for key in sorted(agg, key=str):
        r = agg[key]
        d = r.descriptor
        lines.append(
            f"{d.get('noise_level', ''):<6} {d.get('beta', ''):<5} "
            f"{str(d.get('pretrain', '')):<8} {d.get('strategy', ''):<12} {r.pair()}"
        )
    return "\n".join(lines) + "\n"


def plot_results(reports, out_dir) -> list:
    """Dice-vs-beta line plots per strategy; one file per structure."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    agg = aggregate_over_seeds(reports)
    if not agg:
        raise EvaluationError("no successful rows to plot")
    strategies = sorted({r.descriptor["strategy"] for r in agg.values()})
    if not strategies:
        raise EvaluationError("empty strategy axis")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c, name in ((1, "disc"), (2, "cup")):
        fig, ax = plt.subplots(figsize=(5, 4))
        for strategy in strategies:
            rows = sorted(
                (r for r in agg.values() if r.descriptor["strategy"] == strategy and c in r.per_class),
                key=lambda r: r.descriptor["beta"],
            )
            if not rows:
                continue
            betas = [r.descriptor["beta"] for r in rows]
            vals = [r.per_class[c] * 100 for r in rows]
            ax.plot(betas, vals, marker="o", label=strategy)
        ax.set_xlabel("noise ratio")
        ax.set_ylabel(f"Dice {name} (%)")
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"dice_{name}_vs_beta.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths
