"""Component ablation ladder: train and evaluate cumulative variants.

The ladder switches components on one at a time. The correction step is
inference-only, so variants whose training-relevant config matches an
already-trained one reuse that checkpoint instead of retraining.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig, training_digest
from .evaluate import evaluate, write_artifacts
from .synth import gen_dataset, prepare_scenes
from .train import TrainResult, train

LADDER: list[tuple[str, dict]] = [
    ("baseline", dict(icbc=False, igsm_soft=False, igsm_finetune=False, scc=False, mct=False)),
    ("icbc", dict(icbc=True, igsm_soft=False, igsm_finetune=False, scc=False, mct=False)),
    ("igsm", dict(icbc=True, igsm_soft=True, igsm_finetune=True, scc=False, mct=False)),
    ("scc", dict(icbc=True, igsm_soft=True, igsm_finetune=True, scc=True, mct=False)),
    ("mct", dict(icbc=True, igsm_soft=True, igsm_finetune=True, scc=True, mct=True)),
]


@dataclass
class AblationRow:
    name: str
    config: RunConfig
    metrics: dict
    train_seconds: float
    eval_seconds: float
    reused_checkpoint: bool


def ladder_configs(base: RunConfig) -> list[tuple[str, RunConfig]]:
    return [(name, base.with_overrides(flags)) for name, flags in LADDER]


def run_ablation(base: RunConfig, out_dir: str | Path | None = None) -> list[AblationRow]:
    """Train/evaluate the five-variant ladder on one shared dataset seed."""
    import time

    raw_train, raw_test = gen_dataset(base)
    # ladder variants only toggle component switches, so the prepared scenes
    # (proposals + frozen features) are shared
    prepared = (prepare_scenes(raw_train, base), prepare_scenes(raw_test, base))
    rows: list[AblationRow] = []
    trained: dict[str, TrainResult] = {}
    for name, cfg in ladder_configs(base):
        key = training_digest(cfg)
        reused = key in trained
        start = time.perf_counter()
        if not reused:
            trained[key] = train(cfg, prepared=prepared)
        train_elapsed = time.perf_counter() - start
        result = trained[key]
        start = time.perf_counter()
        metrics = evaluate(cfg, result.heads, result.train_scenes, result.test_scenes)
        eval_elapsed = time.perf_counter() - start
        rows.append(
            AblationRow(
                name=name,
                config=cfg,
                metrics=metrics,
                train_seconds=train_elapsed,
                eval_seconds=eval_elapsed,
                reused_checkpoint=reused,
            )
        )
        if out_dir is not None:
            write_artifacts(metrics, Path(out_dir) / name)
    if out_dir is not None:
        (Path(out_dir) / "ablation.tsv").write_text(comparison_table(rows))
    return rows


def comparison_table(rows: list[AblationRow]) -> str:
    """Tab-separated comparison of the ladder variants."""
    lines = ["variant\tmap\tcorloc\tilc\tconfig_digest"]
    for row in rows:
        ilc = row.metrics["ilc"]
        lines.append(
            "\t".join(
                [
                    row.name,
                    f"{row.metrics['map']:.4f}",
                    f"{row.metrics['corloc']:.4f}",
                    "n/a" if ilc is None else f"{ilc:.4f}",
                    row.metrics["config_digest"],
                ]
            )
        )
    return "\n".join(lines) + "\n"
